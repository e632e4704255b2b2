//! Multispectral ingestion, RGB conversion, instruction-dataset building
//! and the synthetic corpus generator.

pub mod caption;
pub mod instruct;
pub mod manifest;
pub mod msi;
pub mod rgb;
pub mod synth;

pub use caption::{CaptionMetadata, CaptionProvider, CaptionRequest, RemoteCaptioner, StubCaptioner};
pub use instruct::{
    build_instruction_dataset, read_jsonl, write_jsonl, InstructionSample, InstructionTemplates, Split,
};
pub use manifest::DatasetManifest;
pub use msi::{load_msi, save_msi, BandInfo, MultispectralImage};
pub use rgb::{to_rgb, BandMapping, Stretch};
pub use synth::{LabeledImage, SynthConfig, SynthDataset};
