//! Text processing, vocabularies, attributes, dataset files and the
//! synthetic generator.

pub mod attributes;
pub mod io;
pub mod synth;
pub mod text;
pub mod vocab;

pub use attributes::{AttributeVector, AttributeVocabulary, MergeMap};
pub use synth::{generate, SynthConfig, SyntheticDataset};
pub use io::{DatasetManifest, FeatureRecord, ManifestHeader, ManifestRecord};
pub use vocab::Vocabulary;
