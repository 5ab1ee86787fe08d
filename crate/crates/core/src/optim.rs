//! Adam with bias correction, and inverted dropout.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam step over every parameter, then zeroes the gradients.
///
/// m ← β₁m + (1−β₁)g, v ← β₂v + (1−β₂)g², θ ← θ − lr·m̂/(√v̂ + ε) with
/// m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ).
pub fn adam_update(store: &mut ParameterStore, config: &AdamConfig) {
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let (b1, b2) = (config.beta1, config.beta2);
    for (_, p) in store.iter_mut() {
        let values = p.value.data_mut();
        let (m, v, g) = (p.m.data_mut(), p.v.data_mut(), p.grad.data_mut());
        for i in 0..values.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            values[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            g[i] = 0.0;
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for (_, p) in store.iter_mut() {
            p.grad.scale_assign(c);
        }
    }
    norm
}

/// Inverted dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1/(1−rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Result<Tensor> {
    check_rate(rate)?;
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Dropout on the tape. Identity in evaluation mode or at rate 0.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let mask = dropout_mask(&shape, rate, rng)?;
    tape.mask_mul(x, mask)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::vector(vec![0.5, -1.0, 2.0]));
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store();
        let before = s.value("w").unwrap().clone();
        adam_update(&mut s, &AdamConfig::default());
        assert_eq!(s.value("w").unwrap(), &before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store();
        let g = [0.3, -2.0, 1e-3];
        s.get_mut("w").unwrap().grad.data_mut().copy_from_slice(&g);
        let cfg = AdamConfig::default();
        adam_update(&mut s, &cfg);
        let before = [0.5, -1.0, 2.0];
        for i in 0..3 {
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            let expected = before[i] - cfg.learning_rate * g[i] / (g[i].abs() + cfg.epsilon);
            let got = s.value("w").unwrap().data()[i];
            assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
            assert!(((before[i] - got).abs() - cfg.learning_rate).abs() < 1e-7);
        }
        assert!(s.grad("w").unwrap().data().iter().all(|&g| g == 0.0));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut s = ParameterStore::new();
            s.init_uniform("w", &[4, 4], 4, 3);
            for k in 0..10 {
                let p = s.get_mut("w").unwrap();
                let vals = p.value.data().to_vec();
                for (g, v) in p.grad.data_mut().iter_mut().zip(vals) {
                    *g = (v * 3.0 + k as f64).sin();
                }
                adam_update(&mut s, &AdamConfig::default());
            }
            s.value("w").unwrap().clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(dropout(&mut t, x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&mut t, x, 0.9, &mut rng, false).unwrap(), x);
        assert!(dropout(&mut t, x, 1.0, &mut rng, true).is_err());
    }

    #[test]
    fn dropout_statistics_at_half_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mask = dropout_mask(&[100_000], 0.5, &mut rng).unwrap();
        let survivors: Vec<f64> = mask.data().iter().copied().filter(|&v| v != 0.0).collect();
        let frac = survivors.len() as f64 / 1e5;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
        let mean = survivors.iter().sum::<f64>() / survivors.len() as f64;
        assert!((mean - 2.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut s = store();
        s.get_mut("w").unwrap().grad.data_mut().copy_from_slice(&[3.0, 4.0, 0.0]);
        assert_eq!(clip_grad_norm(&mut s, 1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}
