//! LSTM caption generator.
//!
//! Input schedule: step 0 consumes only the projected topic, `x₀ = W T`.
//! Every later step consumes the projected embedding of the previous word
//! joined with the projected attended feature, and the output distribution
//! adds a term from the reweighted attributes:
//! `p_t = softmax(W_h h_t + W_A Â)`.

use rand_chacha::ChaCha8Rng;

use crate::attention::{affine, apply_affine, weight_shape};
use crate::autodiff::{Tape, Var};
use crate::data::vocab::START;
use crate::error::{Error, Result};
use crate::optim::dropout;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub mod names {
    pub const TOPIC_INIT: &str = "decoder.topic";
    pub const EMBEDDING: &str = "decoder.embedding";
    pub const WORD: &str = "decoder.word";
    pub const VISUAL: &str = "decoder.visual";
    pub const LSTM_INPUT: &str = "decoder.lstm.input";
    pub const LSTM_FORGET: &str = "decoder.lstm.forget";
    pub const LSTM_OUTPUT: &str = "decoder.lstm.output";
    pub const LSTM_CELL: &str = "decoder.lstm.cell";
    pub const OUT_HIDDEN: &str = "decoder.out";
    pub const OUT_ATTRIBUTE: &str = "decoder.out_attr.weight";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmParams {
    pub fn init(&self, store: &mut ParameterStore, seed: u64) {
        use names::*;
        let fan_in = self.input_dim + self.hidden_dim;
        for gate in [LSTM_INPUT, LSTM_FORGET, LSTM_OUTPUT, LSTM_CELL] {
            affine(store, gate, self.hidden_dim, fan_in, seed);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderParams {
    pub vocab_size: usize,
    pub topics: usize,
    pub attributes: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub lstm: LstmParams,
    /// Whether step 0 is driven by the topic; without it `x₀ = 0`.
    pub topic_init: bool,
}

impl DecoderParams {
    /// Width of the word half of `x_t`; the visual half takes the rest.
    pub fn word_width(&self) -> usize {
        self.lstm.input_dim / 2
    }

    pub fn visual_width(&self) -> usize {
        self.lstm.input_dim - self.word_width()
    }

    pub fn init(&self, store: &mut ParameterStore, seed: u64) {
        use names::*;
        let i_dim = self.lstm.input_dim;
        if self.topic_init {
            affine(store, TOPIC_INIT, i_dim, self.topics, seed);
        }
        store.init_uniform(EMBEDDING, &[self.vocab_size, self.embed_dim], self.embed_dim, seed);
        affine(store, WORD, self.word_width(), self.embed_dim, seed);
        affine(store, VISUAL, self.visual_width(), self.feature_dim, seed);
        self.lstm.init(store, seed);
        affine(store, OUT_HIDDEN, self.vocab_size, self.lstm.hidden_dim, seed);
        store.init_uniform(OUT_ATTRIBUTE, &[self.vocab_size, self.attributes], self.attributes, seed);
    }

    pub fn from_store(store: &ParameterStore) -> Result<Self> {
        use names::*;
        let emb = store.value(EMBEDDING)?.shape().to_vec();
        let visual = weight_shape(store, VISUAL)?;
        let word = weight_shape(store, WORD)?;
        let gate = weight_shape(store, LSTM_INPUT)?;
        let out_attr = store.value(OUT_ATTRIBUTE)?.shape().to_vec();
        let topic_init = store.contains(&format!("{TOPIC_INIT}.weight"));
        let topics = if topic_init {
            weight_shape(store, TOPIC_INIT)?[1]
        } else {
            0
        };
        let hidden = gate[0];
        let input_dim = word[0] + visual[0];
        if gate[1] != input_dim + hidden {
            return Err(Error::dim("decoder gates", &gate, &[hidden, input_dim + hidden]));
        }
        Ok(DecoderParams {
            vocab_size: emb[0],
            topics,
            attributes: out_attr[1],
            feature_dim: visual[1],
            embed_dim: emb[1],
            lstm: LstmParams {
                input_dim,
                hidden_dim: hidden,
            },
            topic_init,
        })
    }
}

/// Recurrent state on a tape.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h: Var,
    pub c: Var,
    pub step: usize,
    pub prev_token: usize,
}

/// Dropout settings for a training forward pass.
pub struct DropoutCtx {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

fn maybe_dropout(tape: &mut Tape, x: Var, drop: &mut Option<DropoutCtx>) -> Result<Var> {
    match drop {
        Some(ctx) => dropout(tape, x, ctx.rate, &mut ctx.rng, true),
        None => Ok(x),
    }
}

/// Standard LSTM cell over `[x, h]`: sigmoid gates, tanh candidate,
/// `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_cell(
    tape: &mut Tape,
    store: &ParameterStore,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    use names::*;
    let z = tape.concat(&[x, h])?;
    let i = apply_affine(tape, store, LSTM_INPUT, z)?;
    let i = tape.sigmoid(i);
    let f = apply_affine(tape, store, LSTM_FORGET, z)?;
    let f = tape.sigmoid(f);
    let o = apply_affine(tape, store, LSTM_OUTPUT, z)?;
    let o = tape.sigmoid(o);
    let g = apply_affine(tape, store, LSTM_CELL, z)?;
    let g = tape.tanh(g);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// Step 0: zero state, one LSTM step on the projected topic.
pub fn init_step(
    tape: &mut Tape,
    store: &ParameterStore,
    params: &DecoderParams,
    topic: Var,
    drop: &mut Option<DropoutCtx>,
) -> Result<DecoderState> {
    let hidden = params.lstm.hidden_dim;
    let h0 = tape.leaf(Tensor::zeros(&[hidden]));
    let c0 = tape.leaf(Tensor::zeros(&[hidden]));
    let x0 = if params.topic_init {
        apply_affine(tape, store, names::TOPIC_INIT, topic)?
    } else {
        tape.leaf(Tensor::zeros(&[params.lstm.input_dim]))
    };
    let x0 = maybe_dropout(tape, x0, drop)?;
    let (h, c) = lstm_cell(tape, store, x0, h0, c0)?;
    Ok(DecoderState {
        h,
        c,
        step: 1,
        prev_token: START,
    })
}

/// Advances one word: builds `x_t` from the previous token and `v̂`, runs the
/// cell, and returns the new state with the vocabulary logits.
pub fn decode_step(
    tape: &mut Tape,
    store: &ParameterStore,
    params: &DecoderParams,
    state: DecoderState,
    attended: Var,
    reweighted: Var,
    drop: &mut Option<DropoutCtx>,
) -> Result<(DecoderState, Var)> {
    use names::*;
    if state.step < 1 {
        return Err(Error::Contract("decode_step before init_step".into()));
    }
    if state.prev_token >= params.vocab_size {
        return Err(Error::Vocabulary {
            id: state.prev_token,
            size: params.vocab_size,
        });
    }
    let table = tape.param(store, EMBEDDING)?;
    let emb = tape.row(table, state.prev_token)?;
    let word = apply_affine(tape, store, WORD, emb)?;
    let visual = apply_affine(tape, store, VISUAL, attended)?;
    let x = tape.concat(&[word, visual])?;
    let x = maybe_dropout(tape, x, drop)?;

    let (h, c) = lstm_cell(tape, store, x, state.h, state.c)?;
    let h_out = maybe_dropout(tape, h, drop)?;
    let from_hidden = apply_affine(tape, store, OUT_HIDDEN, h_out)?;
    let w_attr = tape.param(store, OUT_ATTRIBUTE)?;
    let from_attr = tape.linear(reweighted, w_attr, None)?;
    let logits = tape.add(from_hidden, from_attr)?;
    Ok((
        DecoderState {
            h,
            c,
            step: state.step + 1,
            prev_token: state.prev_token,
        },
        logits,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::parameter_gradient_check;
    use crate::tensor::{sigmoid, softmax_slice};
    use rand::{Rng, SeedableRng};

    fn params(topic_init: bool) -> DecoderParams {
        DecoderParams {
            vocab_size: 7,
            topics: 3,
            attributes: 4,
            feature_dim: 5,
            embed_dim: 3,
            lstm: LstmParams {
                input_dim: 4,
                hidden_dim: 3,
            },
            topic_init,
        }
    }

    fn store(p: &DecoderParams) -> ParameterStore {
        let mut s = ParameterStore::new();
        p.init(&mut s, 21);
        s
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_topic_zero_weights_leave_bias_only_state() {
        let p = params(true);
        let mut s = store(&p);
        let biases: Vec<(String, Tensor)> = s
            .iter()
            .filter(|(n, _)| n.ends_with(".bias"))
            .map(|(n, prm)| (n.to_string(), prm.value.clone()))
            .collect();
        for (n, prm) in s.iter_mut() {
            if n.ends_with(".weight") {
                prm.value.fill(0.0);
            }
        }
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::zeros(&[3]));
        let st = init_step(&mut tape, &s, &p, t, &mut None).unwrap();
        assert_eq!(st.step, 1);
        assert_eq!(st.prev_token, START);
        let bias = |name: &str| {
            biases
                .iter()
                .find(|(n, _)| n == &format!("{name}.bias"))
                .unwrap()
                .1
                .clone()
        };
        let (bi, bo, bg) = (bias(names::LSTM_INPUT), bias(names::LSTM_OUTPUT), bias(names::LSTM_CELL));
        for j in 0..3 {
            let c = sigmoid(bi.data()[j]) * bg.data()[j].tanh();
            let h = sigmoid(bo.data()[j]) * c.tanh();
            assert!((tape.value(st.c).data()[j] - c).abs() < 1e-15);
            assert!((tape.value(st.h).data()[j] - h).abs() < 1e-15);
        }
    }

    #[test]
    fn different_topics_give_different_first_state() {
        let p = params(true);
        let s = store(&p);
        let mut tape = Tape::new();
        let t1 = tape.leaf(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let t2 = tape.leaf(Tensor::vector(vec![0.0, 0.0, 1.0]));
        let a = init_step(&mut tape, &s, &p, t1, &mut None).unwrap();
        let b = init_step(&mut tape, &s, &p, t2, &mut None).unwrap();
        assert_ne!(tape.value(a.h), tape.value(b.h));
    }

    #[test]
    fn zero_cell_is_a_fixed_point() {
        let p = params(false);
        let mut s = store(&p);
        for (_, prm) in s.iter_mut() {
            prm.value.fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.2, 0.9, 1.0]));
        let h = tape.leaf(Tensor::zeros(&[3]));
        let c = tape.leaf(Tensor::zeros(&[3]));
        let (h1, c1) = lstm_cell(&mut tape, &s, x, h, c).unwrap();
        assert!(tape.value(h1).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let p = params(false);
        let mut s = store(&p);
        s.value_mut("decoder.lstm.forget.weight").unwrap().fill(0.0);
        s.value_mut("decoder.lstm.forget.bias").unwrap().fill(50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, h, c) = (rand_vec(4, &mut rng), rand_vec(3, &mut rng), rand_vec(3, &mut rng));
        let mut tape = Tape::new();
        let (xv, hv, cv) = (tape.leaf(x.clone()), tape.leaf(h.clone()), tape.leaf(c.clone()));
        let (_, c1) = lstm_cell(&mut tape, &s, xv, hv, cv).unwrap();
        let z: Vec<f64> = x.data().iter().chain(h.data()).copied().collect();
        let gate = |name: &str, j: usize| {
            let w = s.value(&format!("{name}.weight")).unwrap();
            let b = s.value(&format!("{name}.bias")).unwrap().data()[j];
            b + w.row(j).iter().zip(&z).map(|(a, b)| a * b).sum::<f64>()
        };
        for j in 0..3 {
            let expected =
                c.data()[j] + sigmoid(gate(names::LSTM_INPUT, j)) * gate(names::LSTM_CELL, j).tanh();
            assert!((tape.value(c1).data()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_gradient_matches_finite_differences() {
        let p = params(false);
        let s = store(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, h, c) = (rand_vec(4, &mut rng), rand_vec(3, &mut rng), rand_vec(3, &mut rng));
        let names: Vec<String> = s.names().filter(|n| n.contains("lstm")).map(String::from).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let err = parameter_gradient_check(&s, &refs, 1e-5, |tape, st| {
            let (xv, hv, cv) = (tape.leaf(x.clone()), tape.leaf(h.clone()), tape.leaf(c.clone()));
            let (h1, c1) = lstm_cell(tape, st, xv, hv, cv)?;
            let both = tape.concat(&[h1, c1])?;
            let sq = tape.mul(both, both)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_output_weights_give_uniform_distribution() {
        let p = params(true);
        let mut s = store(&p);
        for name in ["decoder.out.weight", "decoder.out.bias", names::OUT_ATTRIBUTE] {
            s.value_mut(name).unwrap().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::vector(vec![0.2, 0.3, 0.5]));
        let st = init_step(&mut tape, &s, &p, t, &mut None).unwrap();
        let v = tape.leaf(rand_vec(5, &mut rng));
        let a = tape.leaf(rand_vec(4, &mut rng));
        let (_, logits) = decode_step(&mut tape, &s, &p, st, v, a, &mut None).unwrap();
        let probs = softmax_slice(tape.value(logits).data());
        assert!(probs.iter().all(|&q| (q - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn scaling_attributes_shifts_logits_linearly() {
        let p = params(true);
        let s = store(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = rand_vec(5, &mut rng);
        let a = rand_vec(4, &mut rng);
        let scale = 2.5;
        let run = |attrs: Tensor| {
            let mut tape = Tape::new();
            let t = tape.leaf(Tensor::vector(vec![0.2, 0.3, 0.5]));
            let st = init_step(&mut tape, &s, &p, t, &mut None).unwrap();
            let (vv, av) = (tape.leaf(v.clone()), tape.leaf(attrs));
            let (_, logits) = decode_step(&mut tape, &s, &p, st, vv, av, &mut None).unwrap();
            tape.value(logits).clone()
        };
        let base = run(a.clone());
        let scaled = run(a.map(|x| x * scale));
        let w = s.value(names::OUT_ATTRIBUTE).unwrap();
        for r in 0..7 {
            let delta: f64 = w.row(r).iter().zip(a.data()).map(|(wi, ai)| wi * (scale - 1.0) * ai).sum();
            assert!((scaled.data()[r] - base.data()[r] - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_previous_token_is_vocabulary_error() {
        let p = params(true);
        let s = store(&p);
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::vector(vec![0.2, 0.3, 0.5]));
        let mut st = init_step(&mut tape, &s, &p, t, &mut None).unwrap();
        st.prev_token = 99;
        let v = tape.leaf(Tensor::zeros(&[5]));
        let a = tape.leaf(Tensor::zeros(&[4]));
        assert!(matches!(
            decode_step(&mut tape, &s, &p, st, v, a, &mut None),
            Err(Error::Vocabulary { id: 99, size: 7 })
        ));
    }

    #[test]
    fn shapes_recovered_from_store() {
        for topic_init in [true, false] {
            let p = params(topic_init);
            let back = DecoderParams::from_store(&store(&p)).unwrap();
            assert_eq!(back.topic_init, topic_init);
            assert_eq!(back.lstm, p.lstm);
            assert_eq!(back.vocab_size, 7);
        }
    }
}
