//! Feature files, splits, batching, and the synthetic cross-modal generator.

mod format;
mod split;
mod synth;

pub use format::{
    decode_dataset, encode_dataset, read_dataset, write_atomic, write_dataset, Dataset, DatasetHeader, FeatureDims,
    FeatureRecord, HEADER_LEN, LABEL_FAKE_IS_ONE, MAGIC, VERSION,
};
pub use split::{batches, split, SplitManifest};
pub use synth::{synth_generate, SynthConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:02x?}, expected \"TTBF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}, expected {VERSION}")]
    BadVersion(u32),
    #[error("header: {0}")]
    Header(String),
    #[error("header: extent {0} must be at least 1")]
    ZeroExtent(&'static str),
    #[error("truncated at record {record}: needs {needed} bytes, {available} left")]
    Truncated {
        record: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} unexpected bytes after the last record")]
    TrailingBytes(usize),
    #[error("record {record}: non-finite {channel} value at offset {offset}")]
    NonFinite {
        record: usize,
        channel: &'static str,
        offset: usize,
    },
    #[error("record {record}: label {label} outside {{0, 1}}")]
    BadLabel { record: usize, label: u8 },
    #[error("record {record}: {msg}")]
    Inconsistent { record: usize, msg: String },
    #[error("invalid parameter: {0}")]
    Param(String),
}
