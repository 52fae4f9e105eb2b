//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails. The desk-scale baseline runs come last and dominate the
//! runtime.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use prism::analysis::{Mode, Outcome, RunRecord};
use prism::campaign::{self, CampaignConfig, SweepOptions};
use prism::data::Dataset;
use prism::faultengine::{should_activate, FaultSiteTuple, LayerPolicy, PhasePolicy};
use prism::model::{init_params, HookPoint, Interceptor, ModelConfig, Phase};
use prism::signatures::{plan_corruption, synth_archetype, synth_set, Archetype, ErrorSignature, Spatial};
use prism::softfp::{classify_pattern, decode, encode, round_trip, BitPattern, Format, PatternClass};
use prism::tensorops::Tensor;
use prism::trainer::{dp_average, train_run, RunOptions, TrainConfig, TrainFormat, Trainer};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

// ---------------------------------------------------------------------------
// 1. Format exhaustiveness against a layout-formula oracle.

#[derive(Clone, Copy)]
struct Layout {
    format: Format,
    exp_bits: u32,
    man_bits: u32,
    bias: i32,
    /// E4M3-style: no infinity, only the all-ones pattern is NaN.
    fn_style: bool,
}

const LAYOUTS: [Layout; 4] = [
    Layout { format: Format::Fp16, exp_bits: 5, man_bits: 10, bias: 15, fn_style: false },
    Layout { format: Format::Bf16, exp_bits: 8, man_bits: 7, bias: 127, fn_style: false },
    Layout { format: Format::Fp8E4M3, exp_bits: 4, man_bits: 3, bias: 7, fn_style: true },
    Layout { format: Format::Fp8E5M2, exp_bits: 5, man_bits: 2, bias: 15, fn_style: false },
];

fn oracle(l: Layout, bits: u32) -> (f64, PatternClass) {
    let (eb, mb) = (l.exp_bits, l.man_bits);
    let sign = if (bits >> (eb + mb)) & 1 == 1 { -1.0 } else { 1.0 };
    let e = (bits >> mb) & ((1 << eb) - 1);
    let m = bits & ((1 << mb) - 1);
    let e_max = (1 << eb) - 1;
    if l.fn_style && e == e_max && m == (1 << mb) - 1 {
        return (f64::NAN, PatternClass::Nan);
    }
    if !l.fn_style && e == e_max {
        return if m == 0 {
            (sign * f64::INFINITY, PatternClass::Infinity)
        } else {
            (f64::NAN, PatternClass::Nan)
        };
    }
    if e == 0 {
        let v = sign * m as f64 * 2f64.powi(1 - l.bias - mb as i32);
        return (v, if m == 0 { PatternClass::Zero } else { PatternClass::Subnormal });
    }
    let v = sign * ((1u64 << mb) + m as u64) as f64 * 2f64.powi(e as i32 - l.bias - mb as i32);
    (v, PatternClass::Normal)
}

fn criterion_1() -> Verdict {
    let t = Instant::now();
    let mut mismatches = 0usize;
    let mut total = 0usize;
    let mut max_finite_ok = true;
    for l in LAYOUTS {
        let width = 1 + l.exp_bits + l.man_bits;
        let mut largest = 0.0f64;
        for bits in 0..(1u32 << width) {
            total += 1;
            let p = BitPattern::new(bits, l.format).unwrap();
            let (want, class) = oracle(l, bits);
            let got = decode(p);
            let value_ok = if want.is_nan() { got.is_nan() } else { got.to_bits() == want.to_bits() };
            let class_ok = classify_pattern(p) == class;
            let back = encode(got, l.format);
            let encode_ok = if want.is_nan() {
                classify_pattern(back) == PatternClass::Nan
            } else {
                back.bits as u32 == bits && round_trip(want, l.format).to_bits() == want.to_bits()
            };
            if !(value_ok && class_ok && encode_ok) {
                mismatches += 1;
            }
            if want.is_finite() {
                largest = largest.max(want);
            }
        }
        max_finite_ok &= largest == l.format.spec().max_finite;
    }
    let el = t.elapsed();
    verdict(
        mismatches == 0 && max_finite_ok && el < Duration::from_secs(1),
        format!("{mismatches} mismatches over {total} patterns, max-finite constants agree: {max_finite_ok} ({}, limit 1 s)", secs(el)),
    )
}

// ---------------------------------------------------------------------------
// 2. Finite-difference gradients.

fn criterion_2() -> Verdict {
    use common::gradcheck::*;
    let t = Instant::now();
    let ops = [
        ("matmul", worst_matmul()),
        ("layernorm", worst_layernorm()),
        ("gelu", worst_gelu()),
        ("softmax", worst_softmax()),
        ("embedding", worst_embedding()),
        ("cross_entropy", worst_cross_entropy()),
    ];
    let (e2e, per_tensor) = worst_end_to_end();
    let el = t.elapsed();
    let worst_op = ops.iter().map(|o| o.1).fold(0.0, f64::max);
    verdict(
        worst_op < OP_TOLERANCE && e2e.max(per_tensor) < MODEL_TOLERANCE && el < Duration::from_secs(60),
        format!(
            "worst op rel err {worst_op:.2e} (< 1e-4), end-to-end {e2e:.2e}, worst tensor {per_tensor:.2e} (< 1e-3), 10 trials each ({})",
            secs(el)
        ),
    )
}

// ---------------------------------------------------------------------------
// Shared micro-scale configuration for the run-level criteria.

fn micro_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 128,
        seq_len: 32,
        ..ModelConfig::default()
    }
}

fn micro_train(format: TrainFormat, steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        warmup_steps: steps / 15,
        batch_per_rank: 2,
        divergence_every: 10,
        format,
        ..TrainConfig::default()
    }
}

fn tuple(checkpoint: usize, rate: f64, signatures: Vec<ErrorSignature>) -> FaultSiteTuple {
    FaultSiteTuple {
        id: "acceptance".into(),
        rank: 1,
        checkpoint,
        rate,
        phase: PhasePolicy::Uniform,
        layer: LayerPolicy::Uniform,
        density: 1.0,
        signatures,
        tile: (16, 16),
    }
}

// ---------------------------------------------------------------------------
// 3. Determinism and null-fault identity.

fn criterion_3() -> Verdict {
    let t = Instant::now();
    let model = micro_model();
    let train = micro_train(TrainFormat::Fp16, 60);
    let sigs = synth_set(&Archetype::ALL, 0);
    let run = |fault: Option<FaultSiteTuple>| {
        train_run(&model, &train, fault, RunOptions::default()).unwrap().record
    };
    let a = run(Some(tuple(20, 0.3, sigs.clone())));
    let b = run(Some(tuple(20, 0.3, sigs.clone())));
    let json = |r: &RunRecord| serde_json::to_string(r).unwrap();
    let deterministic = json(&a) == json(&b) && a.activations() > 0;

    let clean = run(None);
    let null = run(Some(tuple(train.total_steps, 1.0, sigs)));
    let steps = |r: &RunRecord| serde_json::to_string(&r.steps).unwrap();
    let null_identical = null.weights_digest == clean.weights_digest
        && steps(&null) == steps(&clean)
        && null.final_ppl.map(f64::to_bits) == clean.final_ppl.map(f64::to_bits)
        && null.activations() == 0;
    verdict(
        deterministic && null_identical,
        format!(
            "repeat run bitwise identical: {deterministic} ({} activations); checkpoint = total_steps matches fault-free run: {null_identical} ({})",
            a.activations(),
            secs(t.elapsed())
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Bernoulli activation fidelity.

/// Central 99.9% interval of Binomial(n, p) from the exact pmf.
fn binomial_interval(n: u64, p: f64) -> (u64, u64) {
    if p >= 1.0 {
        return (n, n);
    }
    let mut pmf = (n as f64) * (1.0 - p).ln();
    let mut cdf = 0.0;
    let (mut lo, mut hi) = (None, n);
    for k in 0..=n {
        cdf += pmf.exp();
        if lo.is_none() && cdf > 0.0005 {
            lo = Some(k);
        }
        if cdf >= 0.9995 {
            hi = k;
            break;
        }
        pmf += ((n - k) as f64).ln() - ((k + 1) as f64).ln() + p.ln() - (1.0 - p).ln();
    }
    (lo.unwrap(), hi)
}

/// Normal approximation of the same interval, `np ± z·sqrt(np(1-p))`.
fn normal_interval(n: u64, p: f64) -> (u64, u64) {
    const Z: f64 = 3.290_526_731_491_926;
    let (mean, sd) = (n as f64 * p, (n as f64 * p * (1.0 - p)).sqrt());
    ((mean - Z * sd).round().max(0.0) as u64, (mean + Z * sd).round() as u64)
}

fn criterion_4() -> Verdict {
    let t = Instant::now();
    let n = 10_000u64;
    let stated = (428, 572);
    let mut ok = normal_interval(n, 0.05) == stated;
    let mut parts = Vec::new();
    for (rate, seed) in [(0.05, 11u64), (0.001, 12), (1.0, 13)] {
        let fault = tuple(0, rate, Vec::new());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = (0..n as usize).filter(|&s| should_activate(&mut rng, &fault, s)).count() as u64;
        let (lo, hi) = binomial_interval(n, rate);
        ok &= (lo..=hi).contains(&count);
        if rate == 0.05 {
            ok &= (stated.0..=stated.1).contains(&count);
            parts.push(format!("r={rate}: {count} in exact [{lo}, {hi}] and stated {stated:?}"));
        } else {
            parts.push(format!("r={rate}: {count} in exact [{lo}, {hi}]"));
        }
    }
    let el = t.elapsed();
    ok &= el < Duration::from_secs(1);
    verdict(ok, format!("{} ({})", parts.join(", "), secs(el)))
}

// ---------------------------------------------------------------------------
// 5. Gradient dilution by data-parallel averaging.

fn criterion_5() -> Verdict {
    let model = micro_model();
    let base = init_params(&model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut noisy = |scale: f64| {
        use rand::Rng;
        let vals: Vec<f64> = (0..base.num_elements()).map(|_| rng.random_range(-scale..scale)).collect();
        base.with_values(&vals).unwrap()
    };
    let clean: Vec<_> = (0..4).map(|_| noisy(1.0)).collect();
    let delta = noisy(100.0);
    let mut hit = clean.clone();
    for (g, d) in hit[2].tensors_mut().into_iter().zip(delta.tensors()) {
        for (x, y) in g.data.iter_mut().zip(&d.data) {
            *x += y;
        }
    }
    let (a, b) = (dp_average(&clean).unwrap(), dp_average(&hit).unwrap());
    let mut worst = 0.0f64;
    for ((ta, tb), td) in a.tensors().iter().zip(b.tensors()).zip(delta.tensors()) {
        let diff: Vec<f64> = tb.data.iter().zip(&ta.data).map(|(x, y)| x - y).collect();
        let want: Vec<f64> = td.data.iter().map(|d| d / 4.0).collect();
        worst = worst.max(common::gradcheck::rel_error(&diff, &want));
    }
    verdict(worst < 1e-6, format!("N=4, worst per-tensor rel err of averaged delta vs delta/4: {worst:.2e} (< 1e-6)"))
}

// ---------------------------------------------------------------------------
// 6. Skip-and-halve on a NaN gradient.

struct NanAt {
    armed: bool,
}

impl Interceptor for NanAt {
    fn intercept(&mut self, hook: HookPoint, tensors: &mut [&mut Tensor]) {
        if self.armed && hook.phase == Phase::BwdGradWeights {
            if let Some(t) = tensors.first_mut() {
                t.data[0] = f64::NAN;
                self.armed = false;
            }
        }
    }
}

fn criterion_6() -> Verdict {
    let model = micro_model();
    let mut train = micro_train(TrainFormat::Fp16, 20);
    let mut trainer = Trainer::new(&model, &train, None, Dataset::bundled()).unwrap();
    for _ in 0..3 {
        trainer.step().unwrap();
    }
    let bits = |p: &prism::model::ParamSet| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let (w0, m0, v0) = (bits(trainer.params()), bits(&trainer.optimizer().m), bits(&trainer.optimizer().v));
    let (scale0, t0) = (trainer.loss_scale(), trainer.optimizer().t);
    let rec = trainer.step_with(&mut NanAt { armed: true }).unwrap();
    let unchanged = bits(trainer.params()) == w0
        && bits(&trainer.optimizer().m) == m0
        && bits(&trainer.optimizer().v) == v0
        && trainer.optimizer().t == t0;
    let halved = trainer.loss_scale() == scale0 / 2.0;
    let skipped = rec.skipped && rec.nan_in_grads;

    train.nan_check = false;
    let mut unchecked = Trainer::new(&model, &train, None, Dataset::bundled()).unwrap();
    for _ in 0..3 {
        unchecked.step().unwrap();
    }
    let rec = unchecked.step_with(&mut NanAt { armed: true }).unwrap();
    let poisoned = rec.nan_in_weights && !unchecked.params().is_finite();
    verdict(
        unchanged && halved && skipped && poisoned,
        format!(
            "with check: skipped {skipped}, weights+moments bitwise unchanged {unchanged}, scale {scale0} -> {} (halved {halved}); without check: NaN in weights after the same step {poisoned}",
            trainer.loss_scale()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Desk-scale baseline sanity.

fn criterion_7() -> Verdict {
    let limit = Duration::from_secs(15 * 60);
    let mut ok = true;
    let mut parts = Vec::new();
    for format in [TrainFormat::Fp16, TrainFormat::Bf16, TrainFormat::Fp8] {
        let t = Instant::now();
        let train = TrainConfig {
            format,
            ..TrainConfig::default()
        };
        let rec = train_run(&ModelConfig::default(), &train, None, RunOptions::default()).unwrap().record;
        let el = t.elapsed();
        let (p0, p1) = (rec.initial_ppl.unwrap_or(f64::NAN), rec.final_ppl.unwrap_or(f64::NAN));
        let drop = 1.0 - p1 / p0;
        let pass = drop >= 0.30 && el < limit;
        ok &= pass;
        parts.push(format!("{format}: ppl {p0:.1} -> {p1:.3} (-{:.0}%) in {:.1} min", 100.0 * drop, el.as_secs_f64() / 60.0));
    }
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    verdict(ok, format!("{}; limit >= 30% drop in < 15 min, {cores} core(s)", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 8-10. Micro-scale campaign.

const SEEDS: usize = 20;

const SWEEP: &str = r#"
[model]
n_layers = 2
n_heads = 2
d_model = 32
d_ff = 128
seq_len = 32

[train]
total_steps = 300
warmup_steps = 20
batch_per_rank = 2
divergence_every = 10

[fault]
rank = 1

[campaign]
formats = ["FP16", "BF16", "FP8"]
checkpoint_fracs = [0.3333333333333333]
seeds_per_cell = 20
"#;

fn sweep_records() -> Vec<RunRecord> {
    let dir = tempfile::tempdir().unwrap();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut by_rate = CampaignConfig::from_toml_str(SWEEP).unwrap();
    by_rate.campaign.workers = workers;
    by_rate.campaign.rates = campaign::RateGrid::List(vec![0.001, 0.005, 0.01, 0.05, 0.1, 1.0]);
    let mut by_phase = by_rate.clone();
    by_phase.campaign.rates = campaign::RateGrid::List(vec![1.0]);
    by_phase.campaign.phases = vec![PhasePolicy::Fixed(Phase::FwdOutputs), PhasePolicy::Fixed(Phase::BwdGradWeights)];
    let opts = SweepOptions {
        resume: true,
        max_runs: None,
    };
    campaign::run_sweep(&by_rate, dir.path(), &opts, &|_| {}).unwrap();
    campaign::run_sweep(&by_phase, dir.path(), &opts, &|_| {}).unwrap();
    campaign::read_records(&dir.path().join("results.jsonl")).unwrap()
}

fn fault_of(r: &RunRecord) -> &FaultSiteTuple {
    r.fault.as_ref().expect("campaign runs carry a fault")
}

fn share(recs: &[&RunRecord], pred: impl Fn(&RunRecord) -> bool) -> f64 {
    recs.iter().filter(|r| pred(r)).count() as f64 / recs.len().max(1) as f64
}

fn criterion_8(records: &[RunRecord]) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for format in [TrainFormat::Fp16, TrainFormat::Bf16, TrainFormat::Fp8] {
        let cell = |rate: f64| -> Vec<&RunRecord> {
            records
                .iter()
                .filter(|r| r.format() == format && fault_of(r).phase == PhasePolicy::Uniform && fault_of(r).rate == rate)
                .collect()
        };
        let full = cell(1.0);
        let u_full = share(&full, |r| r.outcome == Outcome::Unchanged);
        let non_benign = full.iter().any(|r| r.mode != Mode::Benign);
        let mut line = format!("{format}: unchanged@1.0 {u_full:.2}");
        ok &= non_benign && full.len() >= SEEDS;
        for rate in [0.001, 0.005, 0.01] {
            let c = cell(rate);
            let u = share(&c, |r| r.outcome == Outcome::Unchanged);
            ok &= c.len() >= SEEDS && u >= u_full;
            line += &format!(", @{rate} {u:.2}");
        }
        line += &format!(", non-Benign@1.0 {non_benign}");
        parts.push(line);
    }
    verdict(ok, format!("{} ({SEEDS} seeds/cell)", parts.join("; ")))
}

fn criterion_9(records: &[RunRecord]) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for format in [TrainFormat::Fp16, TrainFormat::Bf16, TrainFormat::Fp8] {
        let hit = |phase: Phase| -> (f64, usize) {
            let c: Vec<&RunRecord> = records
                .iter()
                .filter(|r| r.format() == format && fault_of(r).phase == PhasePolicy::Fixed(phase))
                .collect();
            (share(&c, |r| r.outcome != Outcome::Unchanged), c.len())
        };
        let (w, nw) = hit(Phase::BwdGradWeights);
        let (f, nf) = hit(Phase::FwdOutputs);
        ok &= w <= f && nw >= SEEDS && nf >= SEEDS;
        parts.push(format!("{format}: bwd_grad_weights {w:.2} vs fwd_outputs {f:.2}"));
    }
    verdict(ok, format!("Changed+Crashed at rate 1.0, {}", parts.join("; ")))
}

fn criterion_10(records: &[RunRecord]) -> Verdict {
    let completed: Vec<&RunRecord> = records
        .iter()
        .filter(|r| {
            fault_of(r).phase == PhasePolicy::Uniform
                && fault_of(r).rate >= 0.05
                && r.outcome != Outcome::Crashed
                && r.terminated_early.is_none()
                && r.error.is_none()
        })
        .collect();
    let rising = completed
        .iter()
        .filter(|r| r.trend.is_some_and(|t| !t.degenerate && t.rho > 0.9 && t.delta > 0.0))
        .count();
    let frac = rising as f64 / completed.len().max(1) as f64;
    let mut per_rate: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in &completed {
        let e = per_rate.entry(format!("{}", fault_of(r).rate)).or_default();
        e.1 += 1;
        if r.trend.is_some_and(|t| !t.degenerate && t.rho > 0.9 && t.delta > 0.0) {
            e.0 += 1;
        }
    }
    let detail: Vec<String> = per_rate.iter().map(|(k, (a, b))| format!("r={k} {a}/{b}")).collect();
    verdict(
        !completed.is_empty() && frac >= 0.8,
        format!("{rising}/{} completed runs with rho > 0.9 and rising divergence ({:.0}%, need 80%): {}", completed.len(), 100.0 * frac, detail.join(", ")),
    )
}

// ---------------------------------------------------------------------------
// 11. Classifier fixtures.

fn fixture(final_ppl: Option<f64>, nan_steps: &[usize], divergence: f64) -> RunRecord {
    let mut r = RunRecord::failed("fixture".into(), ModelConfig::default(), TrainConfig::default(), None, None, String::new());
    r.error = None;
    r.final_ppl = final_ppl;
    r.nan_event_steps = nan_steps.to_vec();
    r.divergence = vec![(0, 0.0), (50, divergence / 2.0), (100, divergence)];
    r
}

fn criterion_11() -> Verdict {
    const BASE: f64 = 100.0;
    // Baseline weight norm 1000 puts the drift threshold at exactly 1.0.
    const NORM: f64 = 1000.0;
    let cases: [(Option<f64>, &[usize], f64, Outcome, Mode); 12] = [
        (Some(100.0), &[], 0.0, Outcome::Unchanged, Mode::Benign),
        (Some(101.0), &[], 0.5, Outcome::Unchanged, Mode::Benign),
        (Some(99.0), &[], 0.5, Outcome::Unchanged, Mode::Benign),
        (Some(101.01), &[], 0.5, Outcome::Changed, Mode::SilentDegradation),
        (Some(98.99), &[], 0.5, Outcome::Changed, Mode::SilentDegradation),
        (Some(101.0), &[7], 0.5, Outcome::Unchanged, Mode::SpikeRecover),
        (Some(101.01), &[7, 9], 0.5, Outcome::Changed, Mode::SpikeDegrade),
        (Some(100.5), &[], 1.5, Outcome::Unchanged, Mode::GradualDrift),
        (Some(100.5), &[], 1.0, Outcome::Unchanged, Mode::Benign),
        (Some(100.0), &[3], 5.0, Outcome::Unchanged, Mode::SpikeRecover),
        (None, &[], 0.0, Outcome::Crashed, Mode::Crashed),
        (Some(f64::INFINITY), &[2], 0.0, Outcome::Crashed, Mode::Crashed),
    ];
    let mut wrong = Vec::new();
    let mut modes = std::collections::BTreeSet::new();
    for (i, (ppl, nans, div, outcome, mode)) in cases.iter().enumerate() {
        for _ in 0..2 {
            let mut r = fixture(*ppl, nans, *div);
            r.classify(BASE, NORM);
            if r.outcome != *outcome || r.mode != *mode {
                wrong.push(format!("#{i} got {:?}/{:?}", r.outcome, r.mode));
            }
        }
        modes.insert(*mode);
    }
    let ok = wrong.is_empty() && modes.len() == Mode::ALL.len();
    verdict(
        ok,
        format!("{} fixtures over {} modes, {} misclassified {}", cases.len(), modes.len(), wrong.len(), wrong.join(" ")),
    )
}

// ---------------------------------------------------------------------------
// 12. Signature statistics.

fn tv_distance(sig: &ErrorSignature, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for _ in 0..draws {
        let plan = plan_corruption(sig, (16, 16), 1.0, &mut rng).unwrap();
        // The first bit of an element is drawn from the full pmf; later bits
        // are drawn without replacement.
        *counts.entry(plan.element_ops[0].1[0].bit).or_default() += 1;
    }
    let keys: std::collections::BTreeSet<u32> = sig.bit_pmf.keys().chain(counts.keys()).copied().collect();
    0.5 * keys
        .iter()
        .map(|k| {
            let p = sig.bit_pmf.get(k).copied().unwrap_or(0.0);
            let q = counts.get(k).copied().unwrap_or(0) as f64 / draws as f64;
            (p - q).abs()
        })
        .sum::<f64>()
}

fn criterion_12() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut sigs: Vec<ErrorSignature> = Archetype::ALL.iter().map(|&a| synth_archetype(a, &mut rng)).collect();
    let mut broad = sigs[1].clone();
    broad.id = "broad".into();
    broad.bit_pmf = (0..16).map(|b| (b, (b + 1) as f64 / 136.0)).collect();
    sigs.push(broad);
    let mut worst = 0.0f64;
    for (i, s) in sigs.iter().enumerate() {
        worst = worst.max(tv_distance(s, 10_000, 100 + i as u64));
    }

    let patch = synth_archetype(Archetype::Patch3x3, &mut rng);
    assert_eq!(patch.spatial, Spatial::Patch { h: 3, w: 3 });
    let mut patch_ok = true;
    for _ in 0..10_000 {
        let plan = plan_corruption(&patch, (16, 16), 1.0, &mut rng).unwrap();
        let bits: std::collections::BTreeSet<u32> =
            plan.element_ops.iter().flat_map(|(_, ops)| ops.iter().map(|o| o.bit)).collect();
        let rows: std::collections::BTreeSet<usize> = plan.element_ops.iter().map(|(o, _)| o / 16).collect();
        let cols: std::collections::BTreeSet<usize> = plan.element_ops.iter().map(|(o, _)| o % 16).collect();
        patch_ok &= plan.n_elements() == 9 && bits.len() == 1 && rows.len() == 3 && cols.len() == 3;
    }
    verdict(
        worst <= 0.05 && patch_ok,
        format!("worst TV distance {worst:.4} over 10000 draws ({} signatures, limit 0.05); patch3x3 always 9 elements on one bit: {patch_ok}", sigs.len()),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        if !v.pass {
            failed += 1;
        }
        println!("{} [{n:>2}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };
    report(1, "format exhaustiveness", &mut criterion_1);
    report(2, "gradient correctness", &mut criterion_2);
    report(3, "determinism and null fault", &mut criterion_3);
    report(4, "Bernoulli fidelity", &mut criterion_4);
    report(5, "dilution equality", &mut criterion_5);
    report(6, "skip-and-halve", &mut criterion_6);
    report(11, "classifier fixtures", &mut criterion_11);
    report(12, "signature statistics", &mut criterion_12);

    let t = Instant::now();
    let records = catch_unwind(sweep_records).unwrap_or_default();
    println!("     micro campaign: {} runs in {:.1} min", records.len(), t.elapsed().as_secs_f64() / 60.0);
    report(8, "low rates are benign", &mut || criterion_8(&records));
    report(9, "phase asymmetry", &mut || criterion_9(&records));
    report(10, "divergence trend", &mut || criterion_10(&records));

    report(7, "desk baseline", &mut criterion_7);

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
