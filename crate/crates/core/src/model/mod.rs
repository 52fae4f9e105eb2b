//! A small GPT-2-style decoder-only transformer with injection hooks.
//!
//! Every layer exposes three hookable submodules (attention, MLP and
//! LayerNorm) and every training step visits each of them once per phase:
//! forward outputs, gradients flowing to the submodule input, and the
//! submodule's weight gradients. The forward and backward passes are wired
//! by hand; there is no autodiff graph.

mod pass;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::softfp::Format;
use crate::tensorops::Tensor;

pub use pass::{backward, forward, Batch, Cache};

/// RNG stream used for parameter initialisation.
pub const INIT_STREAM: u64 = 0x11;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: crate::data::VOCAB_SIZE,
            seq_len: 128,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Submodule {
    #[serde(rename = "MHA")]
    Mha,
    #[serde(rename = "MLP")]
    Mlp,
    LayerNorm,
}

impl Submodule {
    pub const ALL: [Submodule; 3] = [Submodule::Mha, Submodule::Mlp, Submodule::LayerNorm];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    FwdOutputs,
    BwdGradInputs,
    BwdGradWeights,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::FwdOutputs, Phase::BwdGradInputs, Phase::BwdGradWeights];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::FwdOutputs => "fwd_outputs",
            Phase::BwdGradInputs => "bwd_grad_inputs",
            Phase::BwdGradWeights => "bwd_grad_weights",
        }
    }

    pub fn is_backward(self) -> bool {
        self != Phase::FwdOutputs
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Phase::ALL
            .into_iter()
            .find(|p| p.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown phase `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookPoint {
    pub layer: usize,
    pub submodule: Submodule,
    pub phase: Phase,
}

/// Which of a layer's two LayerNorm instances the LayerNorm hook observes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSlot {
    #[default]
    PreAttention,
    PreMlp,
}

/// Observes (and may rewrite) the tensors at every hook point.
///
/// Forward hooks receive the submodule output; `bwd_grad_inputs` hooks the
/// gradient flowing to the submodule input; `bwd_grad_weights` hooks all of
/// the submodule's weight gradients at once. Tensors arrive already
/// quantized to the step's activation or gradient format.
pub trait Interceptor {
    /// Asked once per layer at the start of the forward pass; the answer
    /// holds for all three phases of the step.
    fn norm_slot(&mut self, _layer: usize) -> NormSlot {
        NormSlot::PreAttention
    }

    fn intercept(&mut self, hook: HookPoint, tensors: &mut [&mut Tensor]);
}

/// Leaves every tensor untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoHooks;

impl Interceptor for NoHooks {
    fn intercept(&mut self, _hook: HookPoint, _tensors: &mut [&mut Tensor]) {}
}

impl<F: FnMut(HookPoint, &mut [&mut Tensor])> Interceptor for F {
    fn intercept(&mut self, hook: HookPoint, tensors: &mut [&mut Tensor]) {
        self(hook, tensors)
    }
}

/// Accumulator precision of matrix products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Accumulate {
    #[default]
    F64,
    /// Operands rounded to `f32` and accumulated in `f32`, as tensor-core
    /// GEMMs do. Exact for operands already quantized to a 16-bit or 8-bit
    /// format.
    F32,
}

/// Number formats applied at hook boundaries; `None` keeps wide precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Numerics {
    pub activations: Option<Format>,
    pub gradients: Option<Format>,
    pub accumulate: Accumulate,
}

impl Numerics {
    pub const WIDE: Numerics = Numerics {
        activations: None,
        gradients: None,
        accumulate: Accumulate::F64,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

const LAYER_NAMES: [&str; 12] = [
    "ln1.g", "ln1.b", "attn.qkv.w", "attn.qkv.b", "attn.proj.w", "attn.proj.b", "ln2.g", "ln2.b",
    "mlp.fc.w", "mlp.fc.b", "mlp.out.w", "mlp.out.b",
];

impl LayerParams {
    fn parts(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.qkv_w,
            &self.qkv_b,
            &self.proj_w,
            &self.proj_b,
            &self.ln2_g,
            &self.ln2_b,
            &self.fc_w,
            &self.fc_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    fn parts_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.fc_w,
            &mut self.fc_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    /// The weight tensors belonging to one hookable submodule.
    pub fn submodule_weights(&self, submodule: Submodule, slot: NormSlot) -> Vec<&Tensor> {
        match (submodule, slot) {
            (Submodule::Mha, _) => vec![&self.qkv_w, &self.qkv_b, &self.proj_w, &self.proj_b],
            (Submodule::Mlp, _) => vec![&self.fc_w, &self.fc_b, &self.out_w, &self.out_b],
            (Submodule::LayerNorm, NormSlot::PreAttention) => vec![&self.ln1_g, &self.ln1_b],
            (Submodule::LayerNorm, NormSlot::PreMlp) => vec![&self.ln2_g, &self.ln2_b],
        }
    }
}

/// All trainable tensors. Also used for gradients and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub wte: Tensor,
    pub wpe: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head: Tensor,
}

impl ParamSet {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.wte, &self.wpe];
        for l in &self.layers {
            out.extend(l.parts());
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.head]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for l in &mut self.layers {
            out.extend(l.parts_mut());
        }
        out.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.head]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["wte".to_string(), "wpe".to_string()];
        for i in 0..self.layers.len() {
            out.extend(LAYER_NAMES.iter().map(|n| format!("h{i}.{n}")));
        }
        out.extend(["lnf.g", "lnf.b", "head"].map(String::from));
        out
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
            t.precision = crate::tensorops::Precision::Wide;
        }
        z
    }

    pub fn num_elements(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// All values concatenated in canonical tensor order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_elements());
        for t in self.tensors() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn same_shapes(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .tensors()
                .iter()
                .zip(other.tensors())
                .all(|(a, b)| a.shape == b.shape)
    }

    /// Rebuilds a parameter set with this layout from flat values.
    pub fn with_values(&self, values: &[f64]) -> Result<ParamSet> {
        if values.len() != self.num_elements() {
            return Err(Error::contract(format!(
                "expected {} values, got {}",
                self.num_elements(),
                values.len()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }
}

/// Deterministic initialisation from `cfg.init_seed`: N(0, 0.02) for weight
/// matrices and embeddings, zero biases, unit LayerNorm gains.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    rng.set_stream(INIT_STREAM);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let mut gauss = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
            .expect("shape matches")
    };
    let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);

    let wte = gauss(&[v, d]);
    let wpe = gauss(&[cfg.seq_len, d]);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let qkv_w = gauss(&[d, 3 * d]);
        let proj_w = gauss(&[d, d]);
        let fc_w = gauss(&[d, ff]);
        let out_w = gauss(&[ff, d]);
        layers.push(LayerParams {
            ln1_g: Tensor::filled(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            qkv_w,
            qkv_b: Tensor::zeros(&[3 * d]),
            proj_w,
            proj_b: Tensor::zeros(&[d]),
            ln2_g: Tensor::filled(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            fc_w,
            fc_b: Tensor::zeros(&[ff]),
            out_w,
            out_b: Tensor::zeros(&[d]),
        });
    }
    let head = gauss(&[d, v]);
    Ok(ParamSet {
        wte,
        wpe,
        layers,
        lnf_g: Tensor::filled(&[d], 1.0),
        lnf_b: Tensor::zeros(&[d]),
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 11,
            seq_len: 5,
            init_seed: 7,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_params(&tiny()).unwrap();
        let b = init_params(&tiny()).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let c = init_params(&ModelConfig {
            init_seed: 8,
            ..tiny()
        })
        .unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn init_layernorm_gains_are_one() {
        let p = init_params(&tiny()).unwrap();
        for l in &p.layers {
            assert!(l.ln1_g.data.iter().chain(&l.ln2_g.data).all(|&v| v == 1.0));
            assert!(l.qkv_b.data.iter().all(|&v| v == 0.0));
        }
        assert!(p.lnf_g.data.iter().all(|&v| v == 1.0));
        assert!(p.is_finite());
    }

    #[test]
    fn names_align_with_tensors() {
        let p = init_params(&tiny()).unwrap();
        assert_eq!(p.names().len(), p.tensors().len());
        assert_eq!(p.names()[2], "h0.ln1.g");
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            n_heads: 3,
            ..tiny()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let zero = ModelConfig {
            n_layers: 0,
            ..tiny()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn phase_names_round_trip() {
        for p in Phase::ALL {
            assert_eq!(p.as_str().parse::<Phase>().unwrap(), p);
        }
    }
}
