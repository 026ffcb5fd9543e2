//! Packet bytes to square, normalized matrices.
//!
//! Full-size matrices hold one byte per cell (scaled to `[0, 1]`), filled
//! row-major and zero-padded at the tail. Reduced-size matrices are a
//! corner-aligned bilinear resample of the full matrix.

use thiserror::Error;

use crate::pcap::{linktype, RawPacket};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("target side {target} is invalid for a {source_side}x{source_side} matrix (need 2..={source_side})")]
    InvalidTarget { target: usize, source_side: usize },
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
}

/// Square matrix of values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ByteMatrix {
    side: usize,
    values: Vec<f64>,
}

impl ByteMatrix {
    pub fn zeros(side: usize) -> Self {
        ByteMatrix {
            side,
            values: vec![0.0; side * side],
        }
    }

    /// Panics if `values.len() != side * side`.
    pub fn from_values(side: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), side * side, "matrix payload does not match side");
        ByteMatrix { side, values }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.side + col]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncoderConfig {
    pub target_bytes: usize,
    pub full_side: usize,
    pub reduced_side: usize,
    pub strip_link_layer: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            target_bytes: 1500,
            full_side: 39,
            reduced_side: 20,
            strip_link_layer: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.full_side * self.full_side < self.target_bytes {
            return Err(EncodeError::InvalidConfig(format!(
                "full side {} holds {} cells, fewer than target {} bytes",
                self.full_side,
                self.full_side * self.full_side,
                self.target_bytes
            )));
        }
        if self.reduced_side < 2 || self.reduced_side >= self.full_side {
            return Err(EncodeError::InvalidConfig(format!(
                "reduced side {} must be in 2..{}",
                self.reduced_side, self.full_side
            )));
        }
        Ok(())
    }
}

/// Length of the link-layer header for the link types we know how to skip.
pub fn link_header_len(link_type: u32) -> usize {
    match link_type {
        linktype::ETHERNET => 14,
        linktype::LINUX_SLL => 16,
        linktype::NULL => 4,
        _ => 0,
    }
}

fn payload<'a>(packet: &'a RawPacket, config: &EncoderConfig) -> &'a [u8] {
    let bytes = &packet.bytes[..];
    let start = if config.strip_link_layer {
        link_header_len(packet.link_type).min(bytes.len())
    } else {
        0
    };
    let end = bytes.len().min(start + config.target_bytes);
    &bytes[start..end]
}

/// `b / 255`, rounded to single precision so that matrices survive the
/// packed dataset format unchanged.
pub fn normalize_byte(b: u8) -> f64 {
    f64::from(f32::from(b) / 255.0)
}

/// Head-anchored truncation/padding to `target_bytes`, then padding to
/// `full_side²` cells; each byte becomes `b / 255`.
pub fn encode_full(packet: &RawPacket, config: &EncoderConfig) -> ByteMatrix {
    let side = config.full_side;
    let mut values = vec![0.0; side * side];
    for (cell, &b) in values.iter_mut().zip(payload(packet, config)) {
        *cell = normalize_byte(b);
    }
    ByteMatrix { side, values }
}

pub fn encode_reduced(packet: &RawPacket, config: &EncoderConfig) -> ByteMatrix {
    downsample(&encode_full(packet, config), config.reduced_side)
        .expect("validated config has reduced_side in 2..full_side")
}

/// Linear blend, bounded by its endpoints even under rounding.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let x = a + (b - a) * t;
    x.clamp(a.min(b), a.max(b))
}

/// Corner-aligned bilinear resample: output cell `(i, j)` reads source
/// coordinate `(i, j) * (S - 1) / (T - 1)`.
pub fn downsample(matrix: &ByteMatrix, target_side: usize) -> Result<ByteMatrix, EncodeError> {
    let src = matrix.side;
    if target_side < 2 || target_side > src {
        return Err(EncodeError::InvalidTarget {
            target: target_side,
            source_side: src,
        });
    }
    if target_side == src {
        return Ok(matrix.clone());
    }
    let scale = (src - 1) as f64 / (target_side - 1) as f64;
    // Per-axis sample positions: base index and fractional weight.
    let taps: Vec<(usize, f64)> = (0..target_side)
        .map(|i| {
            let pos = i as f64 * scale;
            let base = (pos.floor() as usize).min(src - 2);
            (base, pos - base as f64)
        })
        .collect();
    let v = &matrix.values;
    let mut out = Vec::with_capacity(target_side * target_side);
    for &(r0, fr) in &taps {
        for &(c0, fc) in &taps {
            let top = lerp(v[r0 * src + c0], v[r0 * src + c0 + 1], fc);
            let bottom = lerp(v[(r0 + 1) * src + c0], v[(r0 + 1) * src + c0 + 1], fc);
            out.push(lerp(top, bottom, fr));
        }
    }
    Ok(ByteMatrix {
        side: target_side,
        values: out,
    })
}
