//! Deterministic mixed-precision training with simulated data parallelism.
//!
//! Each step runs forward and backward once per simulated rank on that
//! rank's micro-batch, averages the (loss-scaled) gradients in rank order,
//! applies the NaN check, unscales, clips, and takes an Adam step. The fault
//! engine is consulted once per step and only ever acts on its own rank.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{self, BaselineRef, RunRecord};
use crate::data::{BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::faultengine::{FaultEngine, FaultSiteTuple, Injector};
use crate::float_serde;
use crate::model::{
    backward, forward, Accumulate, init_params, Batch, HookPoint, Interceptor, ModelConfig, NormSlot,
    Numerics, ParamSet,
};
use crate::softfp::Format;
use crate::tensorops::Tensor;

/// Training number format. `FP8` is the usual hybrid recipe: E4M3 for
/// forward activations and E5M2 for gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TrainFormat {
    Fp16,
    Bf16,
    Fp8,
    Fp8E4M3,
    Fp8E5M2,
}

impl TrainFormat {
    pub const ALL: [TrainFormat; 5] = [
        TrainFormat::Fp16,
        TrainFormat::Bf16,
        TrainFormat::Fp8,
        TrainFormat::Fp8E4M3,
        TrainFormat::Fp8E5M2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainFormat::Fp16 => "FP16",
            TrainFormat::Bf16 => "BF16",
            TrainFormat::Fp8 => "FP8",
            TrainFormat::Fp8E4M3 => "FP8_E4M3",
            TrainFormat::Fp8E5M2 => "FP8_E5M2",
        }
    }

    pub fn numerics(self) -> Numerics {
        let (a, g) = match self {
            TrainFormat::Fp16 => (Format::Fp16, Format::Fp16),
            TrainFormat::Bf16 => (Format::Bf16, Format::Bf16),
            TrainFormat::Fp8 => (Format::Fp8E4M3, Format::Fp8E5M2),
            TrainFormat::Fp8E4M3 => (Format::Fp8E4M3, Format::Fp8E4M3),
            TrainFormat::Fp8E5M2 => (Format::Fp8E5M2, Format::Fp8E5M2),
        };
        Numerics {
            activations: Some(a),
            gradients: Some(g),
            accumulate: Accumulate::F32,
        }
    }

    /// BF16 shares the FP32 exponent range and trains unscaled.
    pub fn uses_loss_scaling(self) -> bool {
        self != TrainFormat::Bf16
    }
}

impl fmt::Display for TrainFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainFormat::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown format `{s}` (expected FP16, BF16, FP8, FP8_E4M3 or FP8_E5M2)"
                ))
            })
    }
}

impl TryFrom<String> for TrainFormat {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TrainFormat> for String {
    fn from(f: TrainFormat) -> String {
        f.as_str().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub batch_per_rank: usize,
    pub n_ranks: usize,
    pub format: TrainFormat,
    pub nan_check: bool,
    pub loss_scale_init: f64,
    pub scale_growth_interval: usize,
    pub seed: u64,
    /// Weight-divergence snapshot interval in steps.
    pub divergence_every: usize,
    /// Validation sequences per evaluation forward pass.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 3000,
            warmup_steps: 100,
            peak_lr: 6e-4,
            min_lr: 6e-5,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: 1.0,
            batch_per_rank: 8,
            n_ranks: 4,
            format: TrainFormat::Bf16,
            nan_check: true,
            loss_scale_init: 65536.0,
            scale_growth_interval: 2000,
            seed: 0,
            divergence_every: 50,
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return bad(format!(
                "train.warmup_steps ({}) must be below train.total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.n_ranks == 0 || self.batch_per_rank == 0 || self.eval_batch == 0 {
            return bad("train.n_ranks, train.batch_per_rank and train.eval_batch must be at least 1".into());
        }
        if !(self.loss_scale_init.is_finite() && self.loss_scale_init > 0.0) {
            return bad(format!("train.loss_scale_init {} must be positive", self.loss_scale_init));
        }
        if !(self.peak_lr.is_finite() && self.min_lr.is_finite() && self.peak_lr >= 0.0 && self.min_lr >= 0.0) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) || !(self.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("train.grad_clip {} must be positive", self.grad_clip));
        }
        if self.scale_growth_interval == 0 || self.divergence_every == 0 {
            return bad("train.scale_growth_interval and train.divergence_every must be at least 1".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine annealing to `min_lr` at
/// the last step.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.total_steps.saturating_sub(1 + cfg.warmup_steps);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0)
    };
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    Apply,
    Skip,
}

/// Dynamic loss scale. A static scaler (BF16) keeps its scale and only
/// reports skips.
#[derive(Clone, Debug, PartialEq)]
pub struct LossScaler {
    pub scale: f64,
    pub init: f64,
    pub growth_interval: usize,
    pub clean_steps: usize,
    pub dynamic: bool,
}

impl LossScaler {
    pub fn new(init: f64, growth_interval: usize, dynamic: bool) -> Self {
        LossScaler {
            scale: if dynamic { init } else { 1.0 },
            init,
            growth_interval,
            clean_steps: 0,
            dynamic,
        }
    }

    /// Halve and skip on nonfinite gradients (floor 1); otherwise apply, and
    /// double (capped at the initial scale) after `growth_interval` clean
    /// steps in a row.
    pub fn loss_scale_step(&mut self, grads_have_nonfinite: bool) -> StepAction {
        if grads_have_nonfinite {
            if self.dynamic {
                self.scale = (self.scale / 2.0).max(1.0);
            }
            self.clean_steps = 0;
            return StepAction::Skip;
        }
        self.clean_steps += 1;
        if self.clean_steps == self.growth_interval {
            if self.dynamic {
                self.scale = (self.scale * 2.0).min(self.init);
            }
            self.clean_steps = 0;
        }
        StepAction::Apply
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ParamSet,
    pub v: ParamSet,
    /// Number of applied (non-skipped) updates.
    pub t: u64,
    pub scaler: LossScaler,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        OptimizerState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            scaler: LossScaler::new(cfg.loss_scale_init, cfg.scale_growth_interval, cfg.format.uses_loss_scaling()),
        }
    }

    /// Bias-corrected Adam update.
    pub fn adam_step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Elementwise mean of per-rank gradients: summed in rank order, then
/// divided by N.
pub fn dp_average(grads: &[ParamSet]) -> Result<ParamSet> {
    let (first, rest) = grads
        .split_first()
        .ok_or_else(|| Error::contract("dp_average needs at least one rank"))?;
    if rest.iter().any(|g| !g.same_shapes(first)) {
        return Err(Error::contract("dp_average: gradient shapes differ across ranks"));
    }
    let mut out = first.clone();
    for g in rest {
        for (acc, t) in out.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, b) in acc.data.iter_mut().zip(&t.data) {
                *a += b;
            }
        }
    }
    let n = grads.len() as f64;
    for t in out.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Scales `grads` to global L2 norm `max_norm` if above it. Returns the
/// pre-clip norm (NaN when any gradient is nonfinite, in which case nothing
/// is scaled).
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.tensors().iter().map(|t| t.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean loss over ranks, nats.
    #[serde(with = "float_serde")]
    pub loss: f64,
    pub loss_scale: f64,
    pub lr: f64,
    #[serde(with = "float_serde")]
    pub grad_norm: f64,
    pub skipped: bool,
    pub nan_in_loss: bool,
    pub inf_in_loss: bool,
    pub nan_in_grads: bool,
    pub nan_in_weights: bool,
    pub nan_in_activations: bool,
    pub fault_activated: bool,
}

impl StepRecord {
    /// Any NaN/Inf in the loss, a monitored tensor, or the weights.
    pub fn is_nan_event(&self) -> bool {
        self.nan_in_loss || self.inf_in_loss || self.nan_in_activations || self.nan_in_weights
    }
}

/// Weight snapshots keyed by completed step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Snapshots {
    pub steps: std::collections::BTreeMap<usize, Vec<f64>>,
}

/// Interceptor for one rank's pass: the fault (if armed on this rank), an
/// optional extra hook, then NaN/Inf monitoring of the hooked tensors.
struct StepHooks<'a, 'b> {
    injector: Option<Injector<'a>>,
    extra: Option<&'b mut dyn Interceptor>,
    nonfinite: bool,
}

impl Interceptor for StepHooks<'_, '_> {
    fn norm_slot(&mut self, layer: usize) -> NormSlot {
        match &mut self.injector {
            Some(inj) => inj.norm_slot(layer),
            None => NormSlot::default(),
        }
    }

    fn intercept(&mut self, hook: HookPoint, tensors: &mut [&mut Tensor]) {
        if let Some(inj) = &mut self.injector {
            inj.intercept(hook, tensors);
        }
        if let Some(extra) = &mut self.extra {
            extra.intercept(hook, tensors);
        }
        if !self.nonfinite {
            self.nonfinite = tensors.iter().any(|t| t.has_nonfinite());
        }
    }
}

/// Step-at-a-time training loop.
pub struct Trainer {
    model: ModelConfig,
    cfg: TrainConfig,
    numerics: Numerics,
    params: ParamSet,
    opt: OptimizerState,
    sampler: BatchSampler,
    engine: Option<FaultEngine>,
    step: usize,
    records: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig, fault: Option<FaultSiteTuple>, data: Dataset) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        if let Some(t) = &fault {
            t.validate(model, cfg.n_ranks, cfg.total_steps)?;
        }
        let params = init_params(model)?;
        let opt = OptimizerState::new(&params, cfg);
        let sampler = BatchSampler::new(data, model.seq_len, cfg.batch_per_rank, cfg.n_ranks, cfg.seed)?;
        Ok(Trainer {
            model: model.clone(),
            cfg: cfg.clone(),
            numerics: cfg.format.numerics(),
            params,
            opt,
            sampler,
            engine: fault.map(|t| FaultEngine::new(t, model, cfg.seed)),
            step: 0,
            records: Vec::with_capacity(cfg.total_steps),
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    pub fn loss_scale(&self) -> f64 {
        self.opt.scaler.scale
    }

    /// Steps completed so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn engine(&self) -> Option<&FaultEngine> {
        self.engine.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        self.step_inner(None)
    }

    /// One training step; `extra` sees rank 0's hooked tensors after the
    /// fault engine.
    pub fn step_with(&mut self, extra: &mut dyn Interceptor) -> Result<StepRecord> {
        self.step_inner(Some(extra))
    }

    fn step_inner(&mut self, extra: Option<&mut dyn Interceptor>) -> Result<StepRecord> {
        let s = self.step;
        let cfg = &self.cfg;
        let lr = lr_at(s.min(cfg.total_steps - 1), cfg);
        let scale = self.opt.scaler.scale;
        let fault_rank = self.engine.as_ref().map(|e| e.tuple().rank);
        let draw = self.engine.as_mut().and_then(|e| e.begin_step(s));

        // Ranks without an injector or caller hooks are independent and run in
        // parallel; results are merged in rank order so sums stay deterministic.
        let watched = extra.is_some();
        let special = |rank: usize| (rank == 0 && watched) || (draw.is_some() && Some(rank) == fault_rank);
        let run_rank = |rank: usize, hooks: &mut StepHooks| -> Result<(f64, ParamSet)> {
            let batch: Batch = self.sampler.batch(s, rank);
            let (loss, cache) = forward(&self.params, &self.model, &batch, self.numerics, hooks)?;
            let g = backward(&self.params, &self.model, &cache, scale, self.numerics, hooks)?;
            Ok((loss, g))
        };
        let plain: Vec<usize> = (0..cfg.n_ranks).filter(|&r| !special(r)).collect();
        let mut results: Vec<Option<Result<(f64, ParamSet, bool, bool)>>> = (0..cfg.n_ranks).map(|_| None).collect();
        let parallel: Vec<_> = plain
            .par_iter()
            .map(|&rank| {
                let mut hooks = StepHooks { injector: None, extra: None, nonfinite: false };
                run_rank(rank, &mut hooks).map(|(l, g)| (l, g, hooks.nonfinite, false))
            })
            .collect();
        for (rank, r) in plain.iter().zip(parallel) {
            results[*rank] = Some(r);
        }
        let mut extra = extra;
        for rank in (0..cfg.n_ranks).filter(|&r| special(r)) {
            let injector = match (draw, self.engine.as_mut()) {
                (Some(d), Some(e)) if Some(rank) == fault_rank => Some(e.injector(s, d)),
                _ => None,
            };
            let mut hooks = StepHooks {
                injector,
                extra: if rank == 0 { extra.take() } else { None },
                nonfinite: false,
            };
            let r = run_rank(rank, &mut hooks);
            let fired = hooks.injector.as_ref().is_some_and(|i| i.fired());
            results[rank] = Some(r.map(|(l, g)| (l, g, hooks.nonfinite, fired)));
        }

        let mut grads = Vec::with_capacity(cfg.n_ranks);
        let mut loss_sum = 0.0;
        let (mut nan_loss, mut inf_loss, mut act_nonfinite, mut fired) = (false, false, false, false);
        for r in results {
            let (loss, g, nf, f) = r.expect("every rank ran")?;
            loss_sum += loss;
            nan_loss |= loss.is_nan();
            inf_loss |= loss.is_infinite();
            act_nonfinite |= nf;
            fired |= f;
            grads.push(g);
        }
        let mut avg = dp_average(&grads)?;
        drop(grads);
        let nan_grads = !avg.is_finite();
        let nonfinite = nan_loss || inf_loss || nan_grads;

        let action = if cfg.nan_check {
            self.opt.scaler.loss_scale_step(nonfinite)
        } else {
            StepAction::Apply
        };
        let mut grad_norm = f64::NAN;
        if action == StepAction::Apply {
            if scale != 1.0 {
                let inv = 1.0 / scale;
                for t in avg.tensors_mut() {
                    t.data.iter_mut().for_each(|v| *v *= inv);
                }
            }
            grad_norm = clip_grad_norm(&mut avg, cfg.grad_clip);
            self.opt.adam_step(&mut self.params, &avg, lr, cfg);
        }
        let record = StepRecord {
            step: s,
            loss: loss_sum / cfg.n_ranks as f64,
            loss_scale: scale,
            lr,
            grad_norm,
            skipped: action == StepAction::Skip,
            nan_in_loss: nan_loss,
            inf_in_loss: inf_loss,
            nan_in_grads: nan_grads,
            nan_in_weights: !self.params.is_finite(),
            nan_in_activations: act_nonfinite,
            fault_activated: fired,
        };
        self.records.push(record.clone());
        self.step += 1;
        Ok(record)
    }
}

/// Everything a run needs besides the configs.
pub struct RunOptions<'a> {
    pub id: String,
    pub dataset: Dataset,
    /// Fault-free reference for divergence and classification; `None` for
    /// a baseline run.
    pub baseline: Option<&'a BaselineRef>,
    /// Keep this run's own weight snapshots (needed to serve as a baseline).
    pub keep_snapshots: bool,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions {
            id: "run".into(),
            dataset: Dataset::bundled(),
            baseline: None,
            keep_snapshots: false,
        }
    }
}

pub struct RunOutput {
    pub record: RunRecord,
    pub params: ParamSet,
    pub snapshots: Snapshots,
}

pub fn weights_digest(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for t in params.tensors() {
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains from scratch, evaluates, and classifies the run against
/// `opts.baseline`. Numeric blow-ups end the run early and are recorded,
/// not returned as errors.
pub fn train_run(
    model: &ModelConfig,
    cfg: &TrainConfig,
    fault: Option<FaultSiteTuple>,
    opts: RunOptions<'_>,
) -> Result<RunOutput> {
    let mut trainer = Trainer::new(model, cfg, fault.clone(), opts.dataset.clone())?;
    let val = opts.dataset.validation_batches(model.seq_len, cfg.eval_batch)?;
    let initial_ppl = analysis::eval_ppl(trainer.params(), model, &val)?;

    let mut snapshots = Snapshots::default();
    let mut divergence = Vec::new();
    let mut snapshot = |done: usize, params: &ParamSet| -> Result<()> {
        if let Some(base) = opts.baseline {
            if let Some(w) = base.snapshots.steps.get(&done) {
                divergence.push((done, analysis::l2_distance(&params.flatten(), w)?));
            }
        }
        if opts.keep_snapshots {
            snapshots.steps.insert(done, params.flatten());
        }
        Ok(())
    };
    snapshot(0, trainer.params())?;
    let mut terminated_early = None;
    while !trainer.is_finished() {
        let rec = trainer.step()?;
        let done = trainer.steps_done();
        if done % cfg.divergence_every == 0 || done == cfg.total_steps {
            snapshot(done, trainer.params())?;
        }
        if rec.nan_in_weights {
            terminated_early = Some(rec.step);
            break;
        }
    }

    let final_ppl = analysis::eval_ppl(trainer.params(), model, &val)?;
    let params = trainer.params().clone();
    let engine_events = trainer.engine().map(|e| e.events().to_vec()).unwrap_or_default();
    if let Some(e) = trainer.engine() {
        if let Some(msg) = e.errors().first() {
            return Err(Error::contract(format!("fault application failed: {msg}")));
        }
    }
    let record = RunRecord::assemble(
        opts.id,
        model.clone(),
        cfg.clone(),
        fault,
        trainer.records().to_vec(),
        &engine_events,
        divergence,
        initial_ppl,
        final_ppl,
        terminated_early,
        &params,
        opts.baseline,
    );
    Ok(RunOutput {
        record,
        params,
        snapshots,
    })
}

#[derive(Serialize)]
struct TraceRow {
    step: usize,
    #[serde(serialize_with = "float_serde::serialize")]
    loss: f64,
    loss_scale: f64,
    lr: f64,
    #[serde(serialize_with = "float_serde::serialize")]
    grad_norm: f64,
    skipped: bool,
    nan_in_loss: bool,
    inf_in_loss: bool,
    nan_in_grads: bool,
    nan_in_weights: bool,
    nan_in_activations: bool,
    fault_activated: bool,
    divergence: Option<f64>,
}

/// Per-step CSV trace. `divergence` is filled on the rows whose completed
/// step count has a divergence sample.
pub fn write_trace_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let div: std::collections::BTreeMap<usize, f64> = record.divergence.iter().copied().collect();
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for s in &record.steps {
        w.serialize(TraceRow {
            step: s.step,
            loss: s.loss,
            loss_scale: s.loss_scale,
            lr: s.lr,
            grad_norm: s.grad_norm,
            skipped: s.skipped,
            nan_in_loss: s.nan_in_loss,
            inf_in_loss: s.inf_in_loss,
            nan_in_grads: s.nan_in_grads,
            nan_in_weights: s.nan_in_weights,
            nan_in_activations: s.nan_in_activations,
            fault_activated: s.fault_activated,
            divergence: div.get(&(s.step + 1)).copied(),
        })
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Human-readable one-line summary of a step, for progress output.
pub fn describe_step(rec: &StepRecord, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(
        out,
        "step {:>5}  loss {:>8.4}  scale {:>7}  lr {:.2e}{}{}",
        rec.step,
        rec.loss,
        rec.loss_scale,
        rec.lr,
        if rec.skipped { "  skipped" } else { "" },
        if rec.fault_activated { "  fault" } else { "" },
    )
}
