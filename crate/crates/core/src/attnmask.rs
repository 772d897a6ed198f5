//! Causal and unmasked attention masks, per-layer-group unmasking
//! configurations and a reference single-head attention forward pass.
//!
//! Masks hold `0.0` and `f64::NEG_INFINITY`. The forward pass substitutes
//! [`MASK_SENTINEL`] for `-inf` so that a row never turns into NaN, while
//! masked weights still underflow to exactly zero.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2, Axis};
use serde_json::Value;
use thiserror::Error;

pub const DEFAULT_GROUPS: usize = 4;
pub const DEFAULT_BLOCKS_PER_GROUP: usize = 8;

/// Additive stand-in for `-inf`. `exp(MASK_SENTINEL / sqrt(d_k))` is `0.0`
/// in f64 for any realistic `d_k`.
pub const MASK_SENTINEL: f64 = -1e30;

pub type AttnMask = Array2<f64>;

#[derive(Debug, Error)]
pub enum AttnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer {index} out of range for {layers} layers")]
    LayerIndex { index: usize, layers: usize },
    #[error("invalid configuration code {0:?}")]
    Code(String),
    #[error("malformed matrix: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Causal,
    Unmasked,
}

impl MaskKind {
    pub fn matrix(self, n: usize) -> AttnMask {
        match self {
            MaskKind::Causal => causal_mask(n),
            MaskKind::Unmasked => unmasked(n),
        }
    }
}

/// `-inf` strictly above the diagonal, `0` elsewhere.
pub fn causal_mask(n: usize) -> AttnMask {
    Array2::from_shape_fn((n, n), |(i, j)| if j > i { f64::NEG_INFINITY } else { 0.0 })
}

pub fn unmasked(n: usize) -> AttnMask {
    Array2::zeros((n, n))
}

/// Which layer groups run without the causal mask. `flags[0]` is the group
/// closest to the input, matching the left-most digit of the code.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UnmaskConfig {
    pub flags: Vec<bool>,
    pub blocks_per_group: usize,
}

impl UnmaskConfig {
    pub fn new(flags: Vec<bool>, blocks_per_group: usize) -> Self {
        UnmaskConfig { flags, blocks_per_group }
    }

    /// Parses a digit string such as `"0110"`.
    pub fn parse(code: &str, blocks_per_group: usize) -> Result<Self, AttnError> {
        if code.is_empty() || blocks_per_group == 0 {
            return Err(AttnError::Code(code.to_string()));
        }
        let flags = code
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(AttnError::Code(code.to_string())),
            })
            .collect::<Result<_, _>>()?;
        Ok(UnmaskConfig { flags, blocks_per_group })
    }

    pub fn code(&self) -> String {
        self.flags.iter().map(|&f| if f { '1' } else { '0' }).collect()
    }

    pub fn groups(&self) -> usize {
        self.flags.len()
    }

    pub fn num_layers(&self) -> usize {
        self.flags.len() * self.blocks_per_group
    }

    pub fn layer_mask(&self, layer: usize) -> Result<MaskKind, AttnError> {
        if layer >= self.num_layers() {
            return Err(AttnError::LayerIndex { index: layer, layers: self.num_layers() });
        }
        Ok(if self.flags[layer / self.blocks_per_group] { MaskKind::Unmasked } else { MaskKind::Causal })
    }

    pub fn layer_masks(&self) -> Vec<MaskKind> {
        (0..self.num_layers()).map(|i| self.layer_mask(i).expect("in range")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConfigOrder {
    #[default]
    Gray,
    Binary,
}

impl std::str::FromStr for ConfigOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gray" => Ok(ConfigOrder::Gray),
            "binary" => Ok(ConfigOrder::Binary),
            other => Err(format!("unknown order {other:?}")),
        }
    }
}

/// All `2^m` configurations. Gray order is the reflected Gray code starting
/// from all groups masked.
pub fn enumerate_configs(groups: usize, blocks_per_group: usize, order: ConfigOrder) -> Vec<UnmaskConfig> {
    assert!((1..usize::BITS as usize).contains(&groups), "groups must be in 1..{}", usize::BITS);
    (0..1usize << groups)
        .map(|i| {
            let code = match order {
                ConfigOrder::Binary => i,
                ConfigOrder::Gray => i ^ (i >> 1),
            };
            let flags = (0..groups).rev().map(|bit| code >> bit & 1 == 1).collect();
            UnmaskConfig { flags, blocks_per_group }
        })
        .collect()
}

/// Row-wise `softmax((Q Kᵀ + M) / sqrt(d_k))`.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>, mask: ArrayView2<f64>) -> Result<Array2<f64>, AttnError> {
    if q.ncols() != k.ncols() {
        return Err(AttnError::Shape(format!("Q has d_k={} but K has {}", q.ncols(), k.ncols())));
    }
    if mask.dim() != (q.nrows(), k.nrows()) {
        return Err(AttnError::Shape(format!(
            "mask is {:?}, expected ({}, {})",
            mask.dim(),
            q.nrows(),
            k.nrows()
        )));
    }
    let scale = (q.ncols() as f64).sqrt();
    let masked = mask.mapv(|m| if m == f64::NEG_INFINITY { MASK_SENTINEL } else { m });
    let mut scores = (q.dot(&k.t()) + masked) / scale;
    for mut row in scores.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(scores)
}

/// `softmax((Q Kᵀ + M) / sqrt(d_k)) V`, single head, no projections.
pub fn attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    mask: ArrayView2<f64>,
) -> Result<Array2<f64>, AttnError> {
    if k.nrows() != v.nrows() {
        return Err(AttnError::Shape(format!("K has {} rows but V has {}", k.nrows(), v.nrows())));
    }
    Ok(attention_weights(q, k, mask)?.dot(&v))
}

/// Self-attention stack: each layer maps `x` to `attention(x, x, x, mask)`
/// with the mask the configuration assigns to that layer.
pub fn forward_stack(x: ArrayView2<f64>, layers: &[MaskKind]) -> Result<Array2<f64>, AttnError> {
    let n = x.nrows();
    let mut h = x.to_owned();
    for kind in layers {
        let mask = kind.matrix(n);
        h = attention(h.view(), h.view(), h.view(), mask.view())?;
    }
    Ok(h)
}

fn encode_f64(x: f64) -> Value {
    if x.is_finite() {
        Value::from(x)
    } else if x.is_nan() {
        Value::from("nan")
    } else if x > 0.0 {
        Value::from("inf")
    } else {
        Value::from("-inf")
    }
}

fn decode_f64(v: &Value) -> Result<f64, AttnError> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| AttnError::Format(format!("{n} is not a float"))),
        Value::String(s) => match s.as_str() {
            "-inf" => Ok(f64::NEG_INFINITY),
            "inf" => Ok(f64::INFINITY),
            "nan" => Ok(f64::NAN),
            _ => Err(AttnError::Format(format!("unexpected string {s:?}"))),
        },
        other => Err(AttnError::Format(format!("unexpected value {other}"))),
    }
}

/// Nested JSON arrays, rows first. Non-finite entries become the strings
/// `"-inf"`, `"inf"` and `"nan"`.
pub fn matrix_to_json(m: ArrayView2<f64>) -> Value {
    Value::Array(m.outer_iter().map(|row| Value::Array(row.iter().map(|&x| encode_f64(x)).collect())).collect())
}

pub fn matrix_from_json(v: &Value) -> Result<Array2<f64>, AttnError> {
    let rows = v.as_array().ok_or_else(|| AttnError::Format("expected an array of rows".into()))?;
    let cols = rows.first().and_then(Value::as_array).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * cols);
    for (i, row) in rows.iter().enumerate() {
        let row = row.as_array().ok_or_else(|| AttnError::Format(format!("row {i} is not an array")))?;
        if row.len() != cols {
            return Err(AttnError::Format(format!("row {i} has {} columns, expected {cols}", row.len())));
        }
        for x in row {
            data.push(decode_f64(x)?);
        }
    }
    Array2::from_shape_vec((rows.len(), cols), data).map_err(|e| AttnError::Format(e.to_string()))
}

/// Binary layout: rows and cols as little-endian u64, then row-major
/// little-endian f64 values.
pub fn write_matrix<W: Write>(mut w: W, m: ArrayView2<f64>) -> Result<(), AttnError> {
    w.write_all(&(m.nrows() as u64).to_le_bytes())?;
    w.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for &x in m.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<Array2<f64>, AttnError> {
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let cols = u64::from_le_bytes(word) as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| AttnError::Format(format!("{rows}x{cols} overflows")))?;
    let mut data = Vec::with_capacity(len.min(1 << 24));
    for _ in 0..len {
        r.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| AttnError::Format(e.to_string()))
}
