//! The fault-site tuple, Bernoulli activation, per-event sampling of the
//! variable parameters, and application of corruption plans to tensors.
//!
//! Fixed parameters (rank, checkpoint, rate, density) hold for the whole run.
//! Each activation redraws the variable ones: phase, layer, submodule,
//! LayerNorm instance, signature, target weight tensor and tile.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HookPoint, Interceptor, ModelConfig, NormSlot, Phase, Submodule};
use crate::signatures::{plan_corruption, CorruptionPlan, ErrorSignature};
use crate::softfp::{self, BitOp, Format};
use crate::tensorops::Tensor;

/// RNG stream reserved for fault activation and placement.
pub const FAULT_STREAM: u64 = 0x33;

/// Linear tile used for 1-D tensors.
pub const VECTOR_TILE: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PhasePolicy {
    #[default]
    Uniform,
    Fixed(Phase),
}

impl TryFrom<String> for PhasePolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PhasePolicy> for String {
    fn from(p: PhasePolicy) -> String {
        p.to_string()
    }
}

impl std::str::FromStr for PhasePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("uniform") {
            Ok(PhasePolicy::Uniform)
        } else {
            s.parse().map(PhasePolicy::Fixed)
        }
    }
}

impl fmt::Display for PhasePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhasePolicy::Uniform => f.write_str("uniform"),
            PhasePolicy::Fixed(p) => f.write_str(p.as_str()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayerRepr {
    Index(usize),
    Name(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub enum LayerPolicy {
    #[default]
    Uniform,
    Fixed(usize),
}

impl TryFrom<LayerRepr> for LayerPolicy {
    type Error = Error;

    fn try_from(r: LayerRepr) -> Result<Self> {
        match r {
            LayerRepr::Index(i) => Ok(LayerPolicy::Fixed(i)),
            LayerRepr::Name(s) if s.eq_ignore_ascii_case("uniform") => Ok(LayerPolicy::Uniform),
            LayerRepr::Name(s) => Err(Error::config(format!("unknown layer policy `{s}`"))),
        }
    }
}

impl From<LayerPolicy> for LayerRepr {
    fn from(p: LayerPolicy) -> Self {
        match p {
            LayerPolicy::Uniform => LayerRepr::Name("uniform".into()),
            LayerPolicy::Fixed(i) => LayerRepr::Index(i),
        }
    }
}

/// The single fault active in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSiteTuple {
    pub id: String,
    pub rank: usize,
    pub checkpoint: usize,
    pub rate: f64,
    #[serde(default)]
    pub phase: PhasePolicy,
    #[serde(default)]
    pub layer: LayerPolicy,
    pub density: f64,
    pub signatures: Vec<ErrorSignature>,
    pub tile: (usize, usize),
}

impl FaultSiteTuple {
    /// `checkpoint == total_steps` is accepted and yields a fault that never
    /// activates.
    pub fn validate(&self, model: &ModelConfig, n_ranks: usize, total_steps: usize) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::config(format!("fault rate {} outside (0, 1]", self.rate)));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::config(format!("fault density {} outside (0, 1]", self.density)));
        }
        if self.rank >= n_ranks {
            return Err(Error::config(format!(
                "fault rank {} but only {n_ranks} ranks",
                self.rank
            )));
        }
        if self.checkpoint > total_steps {
            return Err(Error::config(format!(
                "fault checkpoint {} beyond {total_steps} training steps",
                self.checkpoint
            )));
        }
        if let LayerPolicy::Fixed(l) = self.layer {
            if l >= model.n_layers {
                return Err(Error::config(format!(
                    "fault layer {l} but the model has {} layers",
                    model.n_layers
                )));
            }
        }
        if self.tile.0 == 0 || self.tile.1 == 0 {
            return Err(Error::config("fault tile dimensions must be at least 1"));
        }
        if self.signatures.is_empty() {
            return Err(Error::config("fault signature pool is empty"));
        }
        for s in &self.signatures {
            s.validate()?;
        }
        Ok(())
    }
}

/// Bernoulli activation: never before the checkpoint, otherwise true with
/// probability `tuple.rate`. No randomness is consumed before the checkpoint.
pub fn should_activate<R: Rng + ?Sized>(rng: &mut R, tuple: &FaultSiteTuple, step: usize) -> bool {
    step >= tuple.checkpoint && rng.random::<f64>() < tuple.rate
}

/// Variable parameters drawn for one activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaultDraw {
    pub hook: HookPoint,
    /// LayerNorm instance, meaningful when `hook.submodule` is LayerNorm.
    pub norm_slot: NormSlot,
    /// Index into the tuple's signature pool.
    pub signature: usize,
}

pub fn sample_variable_params<R: Rng + ?Sized>(
    rng: &mut R,
    tuple: &FaultSiteTuple,
    model: &ModelConfig,
) -> FaultDraw {
    let phase = match tuple.phase {
        PhasePolicy::Uniform => Phase::ALL[rng.random_range(0..Phase::ALL.len())],
        PhasePolicy::Fixed(p) => p,
    };
    let layer = match tuple.layer {
        LayerPolicy::Uniform => rng.random_range(0..model.n_layers),
        LayerPolicy::Fixed(l) => l,
    };
    let submodule = Submodule::ALL[rng.random_range(0..Submodule::ALL.len())];
    let norm_slot = if rng.random::<bool>() {
        NormSlot::PreAttention
    } else {
        NormSlot::PreMlp
    };
    let total: f64 = tuple.signatures.iter().map(|s| s.weight).sum();
    let mut u = rng.random::<f64>() * total;
    let mut signature = tuple.signatures.len() - 1;
    for (i, s) in tuple.signatures.iter().enumerate() {
        if u < s.weight {
            signature = i;
            break;
        }
        u -= s.weight;
    }
    FaultDraw {
        hook: HookPoint {
            layer,
            submodule,
            phase,
        },
        norm_slot,
        signature,
    }
}

/// Maps a bit index of the 16-bit reference layout onto `format`, keeping
/// the field (sign, exponent, mantissa) and the relative position within it.
pub fn remap_bit(bit: u32, format: Format) -> u32 {
    let spec = format.spec();
    let (e, m) = (spec.exp_bits, spec.man_bits);
    match bit {
        15.. => e + m,
        10..=14 => {
            let j = (bit - 10) as f64;
            (j * (e - 1) as f64 / 4.0).round() as u32 + m
        }
        _ => (bit as f64 * (m - 1) as f64 / 9.0).round() as u32,
    }
}

fn remap_ops(ops: &[BitOp], format: Format) -> Vec<BitOp> {
    let mut out: Vec<BitOp> = Vec::with_capacity(ops.len());
    for op in ops {
        let bit = remap_bit(op.bit, format);
        if !out.iter().any(|o| o.bit == bit) {
            out.push(BitOp::new(bit, op.mode));
        }
    }
    out
}

/// Matrix view used for tiling: trailing dim is columns, the rest rows.
/// 1-D tensors are a single row.
pub fn tile_geometry(t: &Tensor, tile: (usize, usize)) -> ((usize, usize), (usize, usize)) {
    let dims = (t.rows(), t.cols());
    let tile = if t.shape.len() <= 1 { (1, VECTOR_TILE) } else { tile };
    (dims, tile)
}

fn tile_count(t: &Tensor, tile: (usize, usize)) -> usize {
    let ((r, c), (th, tw)) = tile_geometry(t, tile);
    r.div_ceil(th) * c.div_ceil(tw)
}

/// `(flat index, old value, new value)` for every element a fault touched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorruptionRecord {
    pub entries: Vec<(usize, f64, f64)>,
}

/// Corrupts `t` in place. Planned elements falling outside the tensor are
/// clipped. Values are encoded in `format` (after the tensor's FP8 scale, if
/// any), the remapped bit ops applied, and decoded back.
pub fn apply_fault_in_place(t: &mut Tensor, plan: &CorruptionPlan, format: Format) -> Result<CorruptionRecord> {
    plan.validate()?;
    let ((rows, cols), _) = tile_geometry(t, plan.tile_dims);
    let (r0, c0) = plan.tile_origin;
    let tw = plan.tile_dims.1;
    let scale = t.precision.scale_factor();
    let mut record = CorruptionRecord::default();
    for (off, ops) in &plan.element_ops {
        let (r, c) = (r0 + off / tw, c0 + off % tw);
        if r >= rows || c >= cols {
            continue;
        }
        let idx = r * cols + c;
        let old = t.data[idx];
        let pattern = softfp::encode(old * scale, format);
        let hit = softfp::apply_bit_ops(pattern, &remap_ops(ops, format))?;
        let new = hit.decode() / scale;
        t.data[idx] = new;
        record.entries.push((idx, old, new));
    }
    Ok(record)
}

pub fn apply_fault(t: &Tensor, plan: &CorruptionPlan, format: Format) -> Result<(Tensor, CorruptionRecord)> {
    let mut out = t.clone();
    let record = apply_fault_in_place(&mut out, plan, format)?;
    Ok((out, record))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationEvent {
    pub step: usize,
    pub rank: usize,
    pub tuple_id: String,
    pub hook: HookPoint,
    pub norm_slot: Option<NormSlot>,
    pub signature_id: String,
    /// Which of the hook's tensors was hit.
    pub tensor_index: usize,
    pub plan: CorruptionPlan,
    pub n_elements_corrupted: usize,
}

/// One run's fault: the tuple, its private RNG stream, and the event log.
pub struct FaultEngine {
    tuple: FaultSiteTuple,
    model: ModelConfig,
    rng: ChaCha8Rng,
    events: Vec<ActivationEvent>,
    errors: Vec<String>,
}

impl FaultEngine {
    pub fn new(tuple: FaultSiteTuple, model: &ModelConfig, run_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        rng.set_stream(FAULT_STREAM);
        FaultEngine {
            tuple,
            model: model.clone(),
            rng,
            events: Vec::new(),
            errors: Vec::new(),
        }
    }

    pub fn tuple(&self) -> &FaultSiteTuple {
        &self.tuple
    }

    pub fn events(&self) -> &[ActivationEvent] {
        &self.events
    }

    /// Errors raised while applying plans (should stay empty).
    pub fn errors(&self) -> &[String] {
        &self.errors
    }

    /// Runs the step's Bernoulli trial and, on success, draws where the
    /// fault lands.
    pub fn begin_step(&mut self, step: usize) -> Option<FaultDraw> {
        should_activate(&mut self.rng, &self.tuple, step)
            .then(|| sample_variable_params(&mut self.rng, &self.tuple, &self.model))
    }

    /// Interceptor that applies `draw` when its hook point comes up.
    pub fn injector(&mut self, step: usize, draw: FaultDraw) -> Injector<'_> {
        Injector {
            engine: self,
            step,
            draw,
            fired: false,
        }
    }

    fn inject(&mut self, step: usize, draw: &FaultDraw, tensors: &mut [&mut Tensor]) {
        if tensors.is_empty() {
            return;
        }
        let tile = self.tuple.tile;
        let counts: Vec<usize> = tensors.iter().map(|t| tile_count(t, tile)).collect();
        let mut u = self.rng.random_range(0..counts.iter().sum::<usize>());
        let mut which = 0;
        while u >= counts[which] {
            u -= counts[which];
            which += 1;
        }
        let target = &mut *tensors[which];
        let ((_, cols), tile_dims) = tile_geometry(target, tile);
        let grid_cols = cols.div_ceil(tile_dims.1);
        let cell = self.rng.random_range(0..counts[which]);
        let origin = ((cell / grid_cols) * tile_dims.0, (cell % grid_cols) * tile_dims.1);

        let sig = &self.tuple.signatures[draw.signature];
        let result = plan_corruption(sig, tile_dims, self.tuple.density, &mut self.rng).and_then(|mut plan| {
            plan.tile_origin = origin;
            let format = target.precision.format().unwrap_or(Format::Fp16);
            apply_fault_in_place(target, &plan, format).map(|rec| (plan, rec))
        });
        match result {
            Ok((plan, rec)) => self.events.push(ActivationEvent {
                step,
                rank: self.tuple.rank,
                tuple_id: self.tuple.id.clone(),
                hook: draw.hook,
                norm_slot: (draw.hook.submodule == Submodule::LayerNorm).then_some(draw.norm_slot),
                signature_id: sig.id.clone(),
                tensor_index: which,
                plan,
                n_elements_corrupted: rec.entries.len(),
            }),
            Err(e) => self.errors.push(format!("step {step}: {e}")),
        }
    }
}

/// Applies one drawn fault at its hook point; every other hook is untouched.
pub struct Injector<'a> {
    engine: &'a mut FaultEngine,
    step: usize,
    draw: FaultDraw,
    fired: bool,
}

impl Injector<'_> {
    pub fn fired(&self) -> bool {
        self.fired
    }
}

impl Interceptor for Injector<'_> {
    fn norm_slot(&mut self, layer: usize) -> NormSlot {
        if self.draw.hook.submodule == Submodule::LayerNorm && self.draw.hook.layer == layer {
            self.draw.norm_slot
        } else {
            NormSlot::default()
        }
    }

    fn intercept(&mut self, hook: HookPoint, tensors: &mut [&mut Tensor]) {
        if !self.fired && hook == self.draw.hook {
            self.fired = true;
            let draw = self.draw;
            self.engine.inject(self.step, &draw, tensors);
        }
    }
}
