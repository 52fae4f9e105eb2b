//! Perplexity, weight divergence, and classification of runs into outcomes
//! and failure modes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faultengine::{ActivationEvent, FaultSiteTuple};
use crate::float_serde;
use crate::model::{forward, Batch, ModelConfig, NoHooks, Numerics, ParamSet, Phase, Submodule};
use crate::trainer::{weights_digest, Snapshots, StepRecord, TrainConfig, TrainFormat};

/// Relative PPL deviation up to which a run counts as unchanged.
pub const PPL_TOLERANCE: f64 = 0.01;

/// Gradual-drift threshold relative to the baseline's final weight norm.
pub const DRIFT_RELATIVE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    Unchanged,
    Changed,
    Crashed,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Unchanged, Outcome::Changed, Outcome::Crashed];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Unchanged => "Unchanged",
            Outcome::Changed => "Changed",
            Outcome::Crashed => "Crashed",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    Benign,
    SpikeRecover,
    SpikeDegrade,
    SilentDegradation,
    GradualDrift,
    Crashed,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Benign,
        Mode::SpikeRecover,
        Mode::SpikeDegrade,
        Mode::SilentDegradation,
        Mode::GradualDrift,
        Mode::Crashed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Benign => "Benign",
            Mode::SpikeRecover => "SpikeRecover",
            Mode::SpikeDegrade => "SpikeDegrade",
            Mode::SilentDegradation => "SilentDegradation",
            Mode::GradualDrift => "GradualDrift",
            Mode::Crashed => "Crashed",
        }
    }
}

/// PPL = exp(mean token NLL) over `batches`, fault-free and in wide
/// precision. `None` when any weight is nonfinite.
pub fn eval_ppl(params: &ParamSet, cfg: &ModelConfig, batches: &[Batch]) -> Result<Option<f64>> {
    if !params.is_finite() {
        return Ok(None);
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        let (loss, _) = forward(params, cfg, b, Numerics::WIDE, &mut NoHooks)?;
        nll += loss * b.n_tokens() as f64;
        tokens += b.n_tokens();
    }
    if tokens == 0 {
        return Err(Error::contract("evaluation set is empty"));
    }
    Ok(Some(ppl_from_loss(nll / tokens as f64)))
}

pub fn ppl_from_loss(nats: f64) -> f64 {
    nats.exp()
}

/// Euclidean distance between two flattened weight vectors.
pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "weight vectors differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// ‖W_fault − W_baseline‖₂ over all parameter tensors.
pub fn weight_divergence(fault: &ParamSet, baseline: &ParamSet) -> Result<f64> {
    if !fault.same_shapes(baseline) {
        return Err(Error::contract("parameter sets have different shapes"));
    }
    let mut sq = 0.0;
    for (a, b) in fault.tensors().iter().zip(baseline.tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            sq += (x - y) * (x - y);
        }
    }
    Ok(sq.sqrt())
}

pub fn classify_outcome(final_ppl: Option<f64>, baseline_ppl: f64) -> Outcome {
    match final_ppl {
        Some(p) if p.is_finite() => {
            if (p - baseline_ppl).abs() / baseline_ppl <= PPL_TOLERANCE {
                Outcome::Unchanged
            } else {
                Outcome::Changed
            }
        }
        _ => Outcome::Crashed,
    }
}

/// Failure mode from the outcome, the NaN-event count and the final weight
/// divergence (`None` when no divergence was measured).
pub fn classify_mode(
    outcome: Outcome,
    nan_events: usize,
    final_divergence: Option<f64>,
    baseline_weight_norm: f64,
) -> Mode {
    match (outcome, nan_events > 0) {
        (Outcome::Crashed, _) => Mode::Crashed,
        (Outcome::Unchanged, true) => Mode::SpikeRecover,
        (Outcome::Changed, true) => Mode::SpikeDegrade,
        (Outcome::Changed, false) => Mode::SilentDegradation,
        (Outcome::Unchanged, false) => {
            let delta = DRIFT_RELATIVE * baseline_weight_norm;
            if final_divergence.is_some_and(|d| d > delta) {
                Mode::GradualDrift
            } else {
                Mode::Benign
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendStat {
    /// Final divergence minus divergence at onset.
    #[serde(with = "float_serde")]
    pub delta: f64,
    /// Spearman rank correlation of divergence against step from onset on.
    #[serde(with = "float_serde")]
    pub rho: f64,
    /// True when the correlation is undefined (fewer than two points or a
    /// constant trace); `rho` is then 0.
    pub degenerate: bool,
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties; `None` if either
/// side is constant or there are fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Trend of a divergence trace from the injection onset on. The window
/// starts at the last sample at or before `onset_step` (or the first sample
/// if none precedes it).
pub fn divergence_trend(trace: &[(usize, f64)], onset_step: usize) -> Option<TrendStat> {
    if trace.is_empty() {
        return None;
    }
    let start = trace.iter().rposition(|&(s, _)| s <= onset_step).unwrap_or(0);
    let window = &trace[start..];
    let steps: Vec<f64> = window.iter().map(|&(s, _)| s as f64).collect();
    let values: Vec<f64> = window.iter().map(|&(_, d)| d).collect();
    let delta = values[values.len() - 1] - values[0];
    Some(match spearman(&steps, &values) {
        Some(rho) => TrendStat {
            delta,
            rho,
            degenerate: false,
        },
        None => TrendStat {
            delta,
            rho: 0.0,
            degenerate: true,
        },
    })
}

/// Fault-free reference for one (format, seed).
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineRef {
    pub id: String,
    pub format: TrainFormat,
    pub seed: u64,
    pub baseline_ppl: f64,
    pub initial_ppl: f64,
    pub final_weight_norm: f64,
    pub snapshots: Snapshots,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NanCounts {
    /// Steps with a NaN or Inf loss.
    pub loss: usize,
    /// Steps ending with a nonfinite weight.
    pub weights: usize,
    /// Steps with a nonfinite monitored (hooked) tensor.
    pub activations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultEventSummary {
    pub step: usize,
    pub layer: usize,
    pub submodule: Submodule,
    pub phase: Phase,
    pub signature_id: String,
    pub n_elements: usize,
}

impl From<&ActivationEvent> for FaultEventSummary {
    fn from(e: &ActivationEvent) -> Self {
        FaultEventSummary {
            step: e.step,
            layer: e.hook.layer,
            submodule: e.hook.submodule,
            phase: e.hook.phase,
            signature_id: e.signature_id.clone(),
            n_elements: e.n_elements_corrupted,
        }
    }
}

/// Complete trace and classification of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fault: Option<FaultSiteTuple>,
    pub steps: Vec<StepRecord>,
    pub nan_event_steps: Vec<usize>,
    pub nan_counts: NanCounts,
    pub fault_events: Vec<FaultEventSummary>,
    #[serde(with = "float_serde::pairs")]
    pub divergence: Vec<(usize, f64)>,
    #[serde(with = "float_serde::option")]
    pub initial_ppl: Option<f64>,
    #[serde(with = "float_serde::option")]
    pub final_ppl: Option<f64>,
    #[serde(with = "float_serde::option")]
    pub baseline_ppl: Option<f64>,
    pub terminated_early: Option<usize>,
    pub weights_digest: String,
    pub outcome: Outcome,
    pub mode: Mode,
    pub trend: Option<TrendStat>,
    /// Set when the run aborted with an error; such runs count as crashed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        id: String,
        model: ModelConfig,
        train: TrainConfig,
        fault: Option<FaultSiteTuple>,
        steps: Vec<StepRecord>,
        events: &[ActivationEvent],
        divergence: Vec<(usize, f64)>,
        initial_ppl: Option<f64>,
        final_ppl: Option<f64>,
        terminated_early: Option<usize>,
        params: &ParamSet,
        baseline: Option<&BaselineRef>,
    ) -> Self {
        let nan_event_steps: Vec<usize> = steps.iter().filter(|s| s.is_nan_event()).map(|s| s.step).collect();
        let nan_counts = NanCounts {
            loss: steps.iter().filter(|s| s.nan_in_loss || s.inf_in_loss).count(),
            weights: steps.iter().filter(|s| s.nan_in_weights).count(),
            activations: steps.iter().filter(|s| s.nan_in_activations).count(),
        };
        let mut rec = RunRecord {
            id,
            model,
            train,
            trend: None,
            steps,
            nan_event_steps,
            nan_counts,
            fault_events: events.iter().map(FaultEventSummary::from).collect(),
            divergence,
            initial_ppl,
            final_ppl,
            baseline_ppl: None,
            terminated_early,
            weights_digest: weights_digest(params),
            outcome: Outcome::Crashed,
            mode: Mode::Crashed,
            fault,
            error: None,
        };
        match baseline {
            Some(b) => rec.classify(b.baseline_ppl, b.final_weight_norm),
            None => {
                let own = final_ppl.filter(|p| p.is_finite()).unwrap_or(f64::NAN);
                rec.classify(own, 0.0)
            }
        }
        rec
    }

    /// Record for a run that failed before producing a result.
    pub fn failed(
        id: String,
        model: ModelConfig,
        train: TrainConfig,
        fault: Option<FaultSiteTuple>,
        baseline_ppl: Option<f64>,
        error: String,
    ) -> Self {
        RunRecord {
            id,
            model,
            train,
            fault,
            steps: Vec::new(),
            nan_event_steps: Vec::new(),
            nan_counts: NanCounts::default(),
            fault_events: Vec::new(),
            divergence: Vec::new(),
            initial_ppl: None,
            final_ppl: None,
            baseline_ppl,
            terminated_early: None,
            weights_digest: String::new(),
            outcome: Outcome::Crashed,
            mode: Mode::Crashed,
            trend: None,
            error: Some(error),
        }
    }

    /// Assigns outcome, mode and divergence trend against a baseline.
    pub fn classify(&mut self, baseline_ppl: f64, baseline_weight_norm: f64) {
        self.baseline_ppl = baseline_ppl.is_finite().then_some(baseline_ppl);
        self.outcome = classify_outcome(self.final_ppl, baseline_ppl);
        self.mode = classify_mode(
            self.outcome,
            self.nan_event_steps.len(),
            self.divergence.last().map(|&(_, d)| d),
            baseline_weight_norm,
        );
        let onset = self.fault.as_ref().map_or(0, |f| f.checkpoint);
        self.trend = divergence_trend(&self.divergence, onset);
    }

    pub fn format(&self) -> TrainFormat {
        self.train.format
    }

    pub fn activations(&self) -> usize {
        self.fault_events.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outcome_threshold() {
        assert_eq!(classify_outcome(Some(28.54), 28.54), Outcome::Unchanged);
        assert_eq!(classify_outcome(Some(28.80), 28.54), Outcome::Unchanged);
        assert_eq!(classify_outcome(Some(101.0), 100.0), Outcome::Unchanged);
        assert_eq!(classify_outcome(Some(101.01), 100.0), Outcome::Changed);
        assert_eq!(classify_outcome(Some(98.99), 100.0), Outcome::Changed);
        assert_eq!(classify_outcome(Some(f64::NAN), 100.0), Outcome::Crashed);
        assert_eq!(classify_outcome(Some(f64::INFINITY), 100.0), Outcome::Crashed);
        assert_eq!(classify_outcome(None, 100.0), Outcome::Crashed);
    }

    #[test]
    fn mode_rules() {
        assert_eq!(classify_mode(Outcome::Crashed, 0, None, 1.0), Mode::Crashed);
        assert_eq!(classify_mode(Outcome::Unchanged, 3, None, 1.0), Mode::SpikeRecover);
        assert_eq!(classify_mode(Outcome::Changed, 3, None, 1.0), Mode::SpikeDegrade);
        assert_eq!(classify_mode(Outcome::Changed, 0, None, 1.0), Mode::SilentDegradation);
        assert_eq!(classify_mode(Outcome::Unchanged, 0, Some(0.0), 1.0), Mode::Benign);
        assert_eq!(classify_mode(Outcome::Unchanged, 0, Some(0.001), 1.0), Mode::Benign);
        assert_eq!(classify_mode(Outcome::Unchanged, 0, Some(0.0011), 1.0), Mode::GradualDrift);
    }

    #[test]
    fn ppl_examples() {
        assert!((ppl_from_loss(3.352) - 28.56).abs() < 0.005);
        assert!((ppl_from_loss(256f64.ln()) - 256.0).abs() < 1e-9);
    }

    #[test]
    fn divergence_basics() {
        assert_eq!(l2_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_distance(&[1.0, 5.0], &[1.0, 2.0]).unwrap(), 3.0);
        assert!(l2_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn trend_of_monotone_and_constant_traces() {
        let up: Vec<(usize, f64)> = (0..10).map(|i| (i * 10, (i * i) as f64)).collect();
        let t = divergence_trend(&up, 0).unwrap();
        assert_eq!(t.rho, 1.0);
        assert_eq!(t.delta, 81.0);
        let flat: Vec<(usize, f64)> = (0..10).map(|i| (i * 10, 0.0)).collect();
        let t = divergence_trend(&flat, 0).unwrap();
        assert!(t.degenerate);
        assert_eq!(t.rho, 0.0);
    }

    #[test]
    fn trend_window_starts_at_onset() {
        let trace = vec![(0, 0.0), (10, 0.0), (20, 0.0), (30, 1.0), (40, 2.0)];
        let t = divergence_trend(&trace, 25).unwrap();
        assert_eq!(t.rho, 1.0);
        assert_eq!(t.delta, 2.0);
    }

    #[test]
    fn spearman_handles_ties_and_reversal() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert!(spearman(&x, &[1.0, 1.0, 2.0, 2.0]).unwrap() > 0.8);
        assert_eq!(spearman(&x, &[1.0; 4]), None);
    }
}
