//! Encoded datasets and the packed `HPDS` cache file.
//!
//! Layout (all integers little-endian `u32` unless noted):
//!
//! ```text
//! "HPDS" | version | target_bytes | full_side | reduced_side | strip_link_layer (u8)
//!        | side | class count | { name len | utf-8 bytes }*
//!        | record count | { label index | side² x f32 }* | crc32
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::encoder::{downsample, encode_full, ByteMatrix, EncoderConfig};
use crate::pcap::{stratified_indices, LabeledDataset, SplitError, SplitSpec};
use crate::wire::{Reader, WireError, Writer};

pub const DATASET_MAGIC: &[u8; 4] = b"HPDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("matrices of side {found} in a dataset of side {expected}")]
    InconsistentShapes { expected: usize, found: usize },
    #[error("label index {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("unknown class `{0}`")]
    UnknownClass(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub label: usize,
    pub matrix: ByteMatrix,
}

/// Encoded matrices with class indices into `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub encoder: EncoderConfig,
    pub class_names: Vec<String>,
    pub samples: Vec<EncodedSample>,
}

impl EncodedDataset {
    /// Full-size encoding of every packet.
    pub fn encode(dataset: &LabeledDataset, encoder: EncoderConfig) -> Self {
        let samples = dataset
            .label_indices()
            .into_iter()
            .zip(&dataset.packets)
            .map(|(label, p)| EncodedSample {
                label,
                matrix: encode_full(p, &encoder),
            })
            .collect();
        EncodedDataset {
            encoder,
            class_names: dataset.class_names.clone(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Matrix side shared by all samples, if any.
    pub fn side(&self) -> Option<usize> {
        self.samples.first().map(|s| s.matrix.side())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let Some(side) = self.side() else {
            return Ok(());
        };
        for s in &self.samples {
            if s.matrix.side() != side {
                return Err(DatasetError::InconsistentShapes {
                    expected: side,
                    found: s.matrix.side(),
                });
            }
            if s.label >= self.class_names.len() {
                return Err(DatasetError::BadLabel {
                    label: s.label,
                    classes: self.class_names.len(),
                });
            }
        }
        Ok(())
    }

    /// Resamples every matrix to `target_side` with [`downsample`].
    pub fn resized(&self, target_side: usize) -> Result<Self, crate::encoder::EncodeError> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(EncodedSample {
                    label: s.label,
                    matrix: downsample(&s.matrix, target_side)?,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(EncodedDataset {
            encoder: self.encoder,
            class_names: self.class_names.clone(),
            samples,
        })
    }

    /// The reduced-size view used by service-level models.
    pub fn reduced(&self) -> Self {
        self.resized(self.encoder.reduced_side)
            .expect("encoder config keeps reduced side below the full side")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        EncodedDataset {
            encoder: self.encoder,
            class_names: self.class_names.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Stratified split; selects the same positions as
    /// [`crate::pcap::split`] would on the source packets.
    pub fn split(&self, spec: &SplitSpec) -> Result<(Self, Self), SplitError> {
        let idx = stratified_indices(&self.labels(), self.class_names.len(), spec)?;
        Ok((self.subset(&idx.train), self.subset(&idx.test)))
    }

    /// Keeps only samples of the named classes, re-indexed in the given order.
    pub fn restrict_to(&self, classes: &[String]) -> Result<Self, DatasetError> {
        let mut remap = vec![None; self.class_names.len()];
        for (new, name) in classes.iter().enumerate() {
            if let Some(old) = self.class_index(name) {
                remap[old] = Some(new);
            }
        }
        let samples = self
            .samples
            .iter()
            .filter_map(|s| {
                remap[s.label].map(|label| EncodedSample {
                    label,
                    matrix: s.matrix.clone(),
                })
            })
            .collect();
        Ok(EncodedDataset {
            encoder: self.encoder,
            class_names: classes.to_vec(),
            samples,
        })
    }

    /// Relabels through `map` (old class name to new class name); the new
    /// class list is `classes`. Samples whose mapped name is absent are an
    /// error.
    pub fn relabel<F>(&self, classes: &[String], map: F) -> Result<Self, DatasetError>
    where
        F: Fn(&str) -> Option<String>,
    {
        let mut remap = Vec::with_capacity(self.class_names.len());
        for name in &self.class_names {
            let target = map(name).ok_or_else(|| DatasetError::UnknownClass(name.clone()))?;
            let idx = classes
                .iter()
                .position(|c| *c == target)
                .ok_or(DatasetError::UnknownClass(target))?;
            remap.push(idx);
        }
        Ok(EncodedDataset {
            encoder: self.encoder,
            class_names: classes.to_vec(),
            samples: self
                .samples
                .iter()
                .map(|s| EncodedSample {
                    label: remap[s.label],
                    matrix: s.matrix.clone(),
                })
                .collect(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        self.validate()?;
        let side = self.side().unwrap_or(self.encoder.full_side);
        let mut w = Writer::new(DATASET_MAGIC, DATASET_VERSION);
        w.u32(self.encoder.target_bytes as u32);
        w.u32(self.encoder.full_side as u32);
        w.u32(self.encoder.reduced_side as u32);
        w.u8(self.encoder.strip_link_layer as u8);
        w.u32(side as u32);
        w.strings(&self.class_names);
        w.u32(self.samples.len() as u32);
        for s in &self.samples {
            w.u32(s.label as u32);
            w.f32s(s.matrix.values());
        }
        Ok(w.finish())
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self, DatasetError> {
        let mut r = Reader::open(data, DATASET_MAGIC, DATASET_VERSION)?;
        let encoder = EncoderConfig {
            target_bytes: r.u32()? as usize,
            full_side: r.u32()? as usize,
            reduced_side: r.u32()? as usize,
            strip_link_layer: r.u8()? != 0,
        };
        let side = r.u32()? as usize;
        let class_names = r.strings()?;
        let count = r.u32()? as usize;
        let record_len = 4 + 4 * side * side;
        r.expect_remaining(count * record_len)?;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let label = r.u32()? as usize;
            let values = r.f32s(side * side)?;
            samples.push(EncodedSample {
                label,
                matrix: ByteMatrix::from_values(side, values),
            });
        }
        r.finish()?;
        let ds = EncodedDataset {
            encoder,
            class_names,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| WireError::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let path = path.as_ref();
        let data = fs::read(path).map_err(|e| WireError::io(path, e))?;
        Self::from_bytes(&data)
    }
}
