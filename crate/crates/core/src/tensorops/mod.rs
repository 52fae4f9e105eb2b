//! Dense tensors in wide precision, quantization to training formats, and
//! the kernel set (with explicit backward passes) the model is built from.

pub mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::softfp::{self, Format};

pub use kernels::{
    cross_entropy_bwd, cross_entropy_fwd, embedding_bwd, embedding_fwd, gelu_bwd, gelu_fwd,
    layernorm_bwd, layernorm_fwd, matmul_bwd, matmul_fwd, softmax_bwd, softmax_fwd, LnStats,
    LN_EPS,
};

/// Per-tensor FP8 scaling derived from the tensor's own absolute maximum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleState {
    pub amax: f64,
    pub scale: f64,
}

impl ScaleState {
    /// `scale = max_finite / amax`, so the largest magnitude lands on the top
    /// of the format's range. An all-zero tensor gets scale 1.
    pub fn from_amax(amax: f64, format: Format) -> Self {
        let scale = if amax > 0.0 && amax.is_finite() {
            format.spec().max_finite / amax
        } else {
            1.0
        };
        ScaleState { amax, scale }
    }

    /// Just-in-time scaling from the finite elements of `data`.
    pub fn for_data(data: &[f64], format: Format) -> Self {
        let amax = data
            .iter()
            .filter(|v| v.is_finite())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        Self::from_amax(amax, format)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Precision {
    Wide,
    Quantized {
        format: Format,
        scale: Option<ScaleState>,
    },
}

impl Precision {
    pub fn format(&self) -> Option<Format> {
        match self {
            Precision::Wide => None,
            Precision::Quantized { format, .. } => Some(*format),
        }
    }

    /// Multiplier applied before encoding (1 when unscaled).
    pub fn scale_factor(&self) -> f64 {
        match self {
            Precision::Quantized {
                scale: Some(s), ..
            } => s.scale,
            _ => 1.0,
        }
    }
}

/// Row-major dense tensor of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub precision: Precision,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            precision: Precision::Wide,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            precision: Precision::Wide,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            precision: Precision::Wide,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Tensor::new(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent when viewed as a matrix over the trailing two dims
    /// (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn has_nonfinite(&self) -> bool {
        !self.is_finite()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Quantizes in place. FP8 formats use just-in-time per-tensor scaling;
    /// 16-bit formats are unscaled.
    pub fn quantize_jit(&mut self, format: Format) {
        let scale = format
            .is_fp8()
            .then(|| ScaleState::for_data(&self.data, format));
        quantize_slice(&mut self.data, format, scale);
        self.precision = Precision::Quantized { format, scale };
    }
}

fn quantize_slice(data: &mut [f64], format: Format, scale: Option<ScaleState>) {
    match scale {
        Some(s) if s.scale != 1.0 => {
            for v in data.iter_mut() {
                *v = softfp::round_trip(*v * s.scale, format) / s.scale;
            }
        }
        _ => {
            for v in data.iter_mut() {
                *v = softfp::round_trip(*v, format);
            }
        }
    }
}

/// Elementwise round trip through `format`. With a scale, values are
/// multiplied by `scale.scale` before encoding and divided after decoding.
pub fn quantize(t: &Tensor, format: Format, scale: Option<ScaleState>) -> Tensor {
    let mut out = t.clone();
    quantize_slice(&mut out.data, format, scale);
    out.precision = Precision::Quantized { format, scale };
    out
}
