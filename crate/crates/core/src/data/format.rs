//! TTBF feature files.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "TTBF" (54 54 42 46)
//!      4     4  version = 1
//!      8     4  record_count
//!     12    24  L_t, d_t, L_i, d_i, L_m, d_m (u32 each)
//!     36     4  reserved = 0
//!     40     4  label semantics = 1 (fake == 1)
//!     44        records
//! ```
//!
//! Each record is `u64 id`, `u8 label`, three zero padding bytes, then
//! `L_t·d_t`, `L_i·d_i` and `L_m·d_m` f32 values, row-major.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const MAGIC: [u8; 4] = *b"TTBF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 44;
pub const LABEL_FAKE_IS_ONE: u32 = 1;

/// Fixed per-dataset sequence lengths and feature widths of the three channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub len_text: usize,
    pub d_text: usize,
    pub len_image: usize,
    pub d_image: usize,
    pub len_imgtext: usize,
    pub d_imgtext: usize,
}

impl FeatureDims {
    pub fn text_len(&self) -> usize {
        self.len_text * self.d_text
    }

    pub fn image_len(&self) -> usize {
        self.len_image * self.d_image
    }

    pub fn imgtext_len(&self) -> usize {
        self.len_imgtext * self.d_imgtext
    }

    pub fn record_bytes(&self) -> usize {
        12 + 4 * (self.text_len() + self.image_len() + self.imgtext_len())
    }

    fn as_array(&self) -> [usize; 6] {
        [
            self.len_text,
            self.d_text,
            self.len_image,
            self.d_image,
            self.len_imgtext,
            self.d_imgtext,
        ]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        const NAMES: [&str; 6] = ["L_t", "d_t", "L_i", "d_i", "L_m", "d_m"];
        for (v, name) in self.as_array().into_iter().zip(NAMES) {
            if v == 0 {
                return Err(DataError::ZeroExtent(name));
            }
            if v > u32::MAX as usize {
                return Err(DataError::Header(format!("{name} = {v} does not fit in u32")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub record_count: u32,
    pub dims: FeatureDims,
}

impl DatasetHeader {
    pub fn new(dims: FeatureDims, record_count: usize) -> Self {
        Self {
            version: VERSION,
            record_count: record_count as u32,
            dims,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: u64,
    /// 1 = fake, 0 = real.
    pub label: u8,
    pub text: Vec<f32>,
    pub image: Vec<f32>,
    pub imgtext: Vec<f32>,
}

impl FeatureRecord {
    fn check(&self, index: usize, dims: &FeatureDims) -> Result<(), DataError> {
        if self.label > 1 {
            return Err(DataError::BadLabel {
                record: index,
                label: self.label,
            });
        }
        let blocks = [
            ("text", &self.text, dims.text_len()),
            ("image", &self.image, dims.image_len()),
            ("imgtext", &self.imgtext, dims.imgtext_len()),
        ];
        for (channel, block, want) in blocks {
            if block.len() != want {
                return Err(DataError::Inconsistent {
                    record: index,
                    msg: format!("{channel} block has {} values, header declares {want}", block.len()),
                });
            }
            if let Some(offset) = block.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    record: index,
                    channel,
                    offset,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn new(dims: FeatureDims, records: Vec<FeatureRecord>) -> Self {
        Self {
            header: DatasetHeader::new(dims, records.len()),
            records,
        }
    }

    pub fn dims(&self) -> FeatureDims {
        self.header.dims
    }

    pub fn label_counts(&self) -> (usize, usize) {
        let fake = self.records.iter().filter(|r| r.label == 1).count();
        (fake, self.records.len() - fake)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.header.version != VERSION {
            return Err(DataError::BadVersion(self.header.version));
        }
        self.header.dims.validate()?;
        if self.header.record_count as usize != self.records.len() {
            return Err(DataError::Header(format!(
                "header declares {} records, dataset holds {}",
                self.header.record_count,
                self.records.len()
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            r.check(i, &self.header.dims)?;
        }
        Ok(())
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_f32_block(bytes: &[u8], at: usize, n: usize) -> Vec<f32> {
    bytes[at..at + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    ds.validate()?;
    let d = ds.header.dims;
    let mut out = Vec::with_capacity(HEADER_LEN + d.record_bytes() * ds.records.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&ds.header.version.to_le_bytes());
    out.extend_from_slice(&ds.header.record_count.to_le_bytes());
    for v in d.as_array() {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&LABEL_FAKE_IS_ONE.to_le_bytes());
    for r in &ds.records {
        out.extend_from_slice(&r.id.to_le_bytes());
        out.push(r.label);
        out.extend_from_slice(&[0, 0, 0]);
        for block in [&r.text, &r.image, &r.imgtext] {
            for v in block.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Header(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(DataError::BadVersion(version));
    }
    let record_count = read_u32(bytes, 8);
    let ext: Vec<usize> = (0..6).map(|i| read_u32(bytes, 12 + 4 * i) as usize).collect();
    let dims = FeatureDims {
        len_text: ext[0],
        d_text: ext[1],
        len_image: ext[2],
        d_image: ext[3],
        len_imgtext: ext[4],
        d_imgtext: ext[5],
    };
    dims.validate()?;
    let reserved = read_u32(bytes, 36);
    if reserved != 0 {
        return Err(DataError::Header(format!("reserved field is {reserved}, expected 0")));
    }
    let semantics = read_u32(bytes, 40);
    if semantics != LABEL_FAKE_IS_ONE {
        return Err(DataError::Header(format!(
            "label semantics code {semantics}, expected {LABEL_FAKE_IS_ONE} (fake == 1)"
        )));
    }
    let rb = dims.record_bytes();
    let mut records = Vec::with_capacity(record_count as usize);
    for index in 0..record_count as usize {
        let at = HEADER_LEN + index * rb;
        if bytes.len() < at + rb {
            return Err(DataError::Truncated {
                record: index,
                needed: rb,
                available: bytes.len().saturating_sub(at),
            });
        }
        let id = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let label = bytes[at + 8];
        if bytes[at + 9..at + 12] != [0, 0, 0] {
            return Err(DataError::Inconsistent {
                record: index,
                msg: "non-zero padding after label".into(),
            });
        }
        let mut off = at + 12;
        let text = read_f32_block(bytes, off, dims.text_len());
        off += 4 * dims.text_len();
        let image = read_f32_block(bytes, off, dims.image_len());
        off += 4 * dims.image_len();
        let imgtext = read_f32_block(bytes, off, dims.imgtext_len());
        let record = FeatureRecord {
            id,
            label,
            text,
            image,
            imgtext,
        };
        record.check(index, &dims)?;
        records.push(record);
    }
    let end = HEADER_LEN + record_count as usize * rb;
    if bytes.len() > end {
        return Err(DataError::TrailingBytes(bytes.len() - end));
    }
    Ok(Dataset {
        header: DatasetHeader {
            version,
            record_count,
            dims,
        },
        records,
    })
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| DataError::Io {
        path: path.as_ref().display().to_string(),
        source: e,
    })?;
    decode_dataset(&bytes)
}

/// Validates, encodes, and atomically replaces `path` via a sibling temp file.
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let bytes = encode_dataset(ds)?;
    write_atomic(path.as_ref(), &bytes)
}

/// Writes through a temp file in the same directory, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let io = |e: std::io::Error| DataError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> FeatureDims {
        FeatureDims {
            len_text: 2,
            d_text: 3,
            len_image: 1,
            d_image: 2,
            len_imgtext: 1,
            d_imgtext: 1,
        }
    }

    fn record(id: u64, label: u8) -> FeatureRecord {
        FeatureRecord {
            id,
            label,
            text: (0..6).map(|i| i as f32 * 0.5 + id as f32).collect(),
            image: vec![-1.5, 2.25],
            imgtext: vec![1e-30],
        }
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let bytes = encode_dataset(&Dataset::new(dims(), vec![])).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(&bytes[0..4], &[0x54, 0x54, 0x42, 0x46]);
    }

    #[test]
    fn record_size_arithmetic() {
        let ds = Dataset::new(dims(), vec![record(1, 0), record(2, 1)]);
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len(), 44 + 2 * (12 + 4 * 9));
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn mismatched_block_is_rejected_before_writing() {
        let mut r = record(1, 0);
        r.text.pop();
        let err = encode_dataset(&Dataset::new(dims(), vec![r])).unwrap_err();
        assert!(matches!(err, DataError::Inconsistent { record: 0, .. }));
    }

    #[test]
    fn truncated_body_names_the_record() {
        let ds = Dataset::new(dims(), (0..10).map(|i| record(i, (i % 2) as u8)).collect());
        let bytes = encode_dataset(&ds).unwrap();
        let cut = &bytes[..HEADER_LEN + 9 * dims().record_bytes()];
        match decode_dataset(cut) {
            Err(DataError::Truncated { record, .. }) => assert_eq!(record, 9),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nonfinite_and_bad_magic_are_rejected() {
        let mut r = record(3, 1);
        r.image[1] = f32::NAN;
        assert!(matches!(
            encode_dataset(&Dataset::new(dims(), vec![r])),
            Err(DataError::NonFinite {
                record: 0,
                channel: "image",
                offset: 1
            })
        ));
        let mut bytes = encode_dataset(&Dataset::new(dims(), vec![record(0, 0)])).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(DataError::BadMagic(_))));
    }
}
