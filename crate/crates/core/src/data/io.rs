//! Feature files (`TGFV`) and line-delimited JSON dataset manifests.
//!
//! A manifest is a header line followed by one record per line:
//!
//! ```text
//! {"format":"tgcap-manifest","version":1,"regions":9,"feature_dim":32,"grid":[3,3]}
//! {"image_id":"img00000","features":"features/img00000.tgfv","captions":["a dog ..."]}
//! ```
//!
//! Record fields `topic_label`, `topic_dist` and `attributes` are optional.
//! Feature paths are resolved relative to the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"TGFV";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_FORMAT: &str = "tgcap-manifest";
pub const MANIFEST_VERSION: u32 = 1;
/// Captions kept per image; extras are dropped on load.
pub const MAX_CAPTIONS: usize = 5;

/// Region features of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub image_id: String,
    /// `[m, D]`, row-major.
    pub features: Tensor,
}

impl FeatureRecord {
    pub fn new(image_id: impl Into<String>, features: Tensor) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::dim("feature record", features.shape(), &[0, 0]));
        }
        if !features.all_finite() {
            return Err(Error::Data("feature record has non-finite values".into()));
        }
        Ok(FeatureRecord {
            image_id: image_id.into(),
            features,
        })
    }

    pub fn regions(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(FEATURE_MAGIC, Some(FEATURE_VERSION));
        w.str(&self.image_id);
        w.u32(self.regions() as u32);
        w.u32(self.dim() as u32);
        w.f64s(self.features.data());
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, origin);
        r.magic(FEATURE_MAGIC)?;
        r.version(FEATURE_VERSION)?;
        let id = r.str("image id")?;
        let m = r.u32("region count")? as usize;
        let d = r.u32("feature dim")? as usize;
        if m == 0 || d == 0 {
            return Err(r.error(format!("empty feature map {m}x{d}")));
        }
        let values = r.f64s(m * d, "feature values")?;
        if !r.at_end() {
            return Err(r.error("trailing bytes after feature values"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(r.error("non-finite feature value"));
        }
        Ok(FeatureRecord {
            image_id: id,
            features: Tensor::new(vec![m, d], values)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub regions: usize,
    pub feature_dim: usize,
    /// `[W, H]` with `W·H = regions`.
    pub grid: [usize; 2],
}

impl ManifestHeader {
    pub fn new(grid: [usize; 2], feature_dim: usize) -> Self {
        ManifestHeader {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            regions: grid[0] * grid[1],
            feature_dim,
            grid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_id: String,
    pub features: String,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_dist: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<String>>,
    /// Generator ground truth, present only on synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_topic: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    /// Directory feature paths are relative to.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, origin: &str, base_dir: PathBuf) -> Result<Self> {
        let mut offset = 0u64;
        let mut lines = text.split_inclusive('\n');
        let fmt_err = |offset: u64, reason: String| Error::Format {
            path: origin.to_string(),
            offset,
            reason,
        };
        let first = lines.next().ok_or_else(|| fmt_err(0, "empty manifest".into()))?;
        let header: ManifestHeader = serde_json::from_str(first.trim_end())
            .map_err(|e| fmt_err(0, format!("bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(fmt_err(0, format!("unsupported manifest {} v{}", header.format, header.version)));
        }
        if header.grid[0] * header.grid[1] != header.regions || header.regions == 0 {
            return Err(fmt_err(0, "grid does not match region count".into()));
        }
        offset += first.len() as u64;

        let mut records = Vec::new();
        for line in lines {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                if !line.ends_with('\n') {
                    return Err(fmt_err(offset, "truncated record (no line terminator)".into()));
                }
                let mut rec: ManifestRecord = serde_json::from_str(trimmed)
                    .map_err(|e| fmt_err(offset, format!("bad record: {e}")))?;
                rec.captions.truncate(MAX_CAPTIONS);
                records.push(rec);
            }
            offset += line.len() as u64;
        }
        Ok(DatasetManifest {
            header,
            records,
            base_dir,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: e.utf8_error().valid_up_to() as u64,
            reason: "manifest is not UTF-8".into(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_text(&text, &path.display().to_string(), base)
    }

    pub fn feature_path(&self, record: &ManifestRecord) -> PathBuf {
        self.base_dir.join(&record.features)
    }

    /// Loads and validates one record's features against the header.
    pub fn load_features(&self, record: &ManifestRecord) -> Result<FeatureRecord> {
        let path = self.feature_path(record);
        let fr = FeatureRecord::load(&path).map_err(|e| match e {
            Error::Io { .. } => Error::Data(format!(
                "missing features for image {} at {}",
                record.image_id,
                path.display()
            )),
            other => other,
        })?;
        if fr.regions() != self.header.regions || fr.dim() != self.header.feature_dim {
            return Err(Error::Data(format!(
                "image {}: features are {}x{}, manifest declares {}x{}",
                record.image_id,
                fr.regions(),
                fr.dim(),
                self.header.regions,
                self.header.feature_dim
            )));
        }
        if fr.image_id != record.image_id {
            return Err(Error::Data(format!(
                "feature file {} belongs to {}, not {}",
                path.display(),
                fr.image_id,
                record.image_id
            )));
        }
        Ok(fr)
    }

    pub fn all_captions(&self) -> Vec<&str> {
        self.records
            .iter()
            .flat_map(|r| r.captions.iter().map(String::as_str))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> FeatureRecord {
        FeatureRecord::new("img7", Tensor::matrix(2, 3, vec![0.5, -1.0, 3.25, 0.0, 1e-300, -7.0]).unwrap()).unwrap()
    }

    #[test]
    fn feature_bytes_round_trip() {
        let r = record();
        let bytes = r.to_bytes();
        assert_eq!(&bytes[..4], b"TGFV");
        let back = FeatureRecord::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn feature_truncation_is_format_error() {
        let bytes = record().to_bytes();
        for cut in 0..bytes.len() {
            assert!(
                matches!(FeatureRecord::from_bytes(&bytes[..cut], "cut"), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(FeatureRecord::from_bytes(&long, "long").is_err());
    }

    fn manifest() -> DatasetManifest {
        DatasetManifest {
            header: ManifestHeader::new([1, 2], 3),
            records: vec![ManifestRecord {
                image_id: "img7".into(),
                features: "f/img7.tgfv".into(),
                captions: vec!["a dog".into(), "a \"quoted\" dog".into()],
                topic_label: Some(1),
                topic_dist: Some(vec![0.25, 0.75]),
                attributes: None,
                planted_topic: None,
            }],
            base_dir: PathBuf::new(),
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = manifest();
        let text = m.to_text();
        let back = DatasetManifest::from_text(&text, "mem", PathBuf::new()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn manifest_errors_carry_offsets() {
        let text = manifest().to_text();
        let header_len = text.find('\n').unwrap() + 1;
        match DatasetManifest::from_text(&text[..text.len() - 5], "cut", PathBuf::new()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, header_len),
            other => panic!("{other:?}"),
        }
        assert!(DatasetManifest::from_text("", "e", PathBuf::new()).is_err());
        let bad_grid = text.replacen("\"regions\":2", "\"regions\":3", 1);
        assert!(DatasetManifest::from_text(&bad_grid, "g", PathBuf::new()).is_err());
    }

    #[test]
    fn extra_captions_are_dropped() {
        let mut m = manifest();
        m.records[0].captions = (0..7).map(|i| format!("c{i}")).collect();
        let back = DatasetManifest::from_text(&m.to_text(), "mem", PathBuf::new()).unwrap();
        assert_eq!(back.records[0].captions.len(), MAX_CAPTIONS);
    }
}
