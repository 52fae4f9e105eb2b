//! Campaign configuration, baselines, resumable sweeps and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{BaselineRef, Mode, Outcome, RunRecord};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::faultengine::{FaultSiteTuple, LayerPolicy, PhasePolicy};
use crate::float_serde;
use crate::model::ModelConfig;
use crate::signatures::{load_signatures, synth_set, Archetype, ErrorSignature};
use crate::trainer::{train_run, write_trace_csv, RunOptions, TrainConfig, TrainFormat};
use crate::weights;

/// Truncated log-normal density over fault rates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatePdf {
    pub median: f64,
    pub sigma: f64,
}

impl Default for RatePdf {
    /// About 5% of the truncated mass lies above r = 0.3.
    fn default() -> Self {
        RatePdf {
            median: 0.01,
            sigma: 2.3466,
        }
    }
}

/// Draws `r ∈ (0, 1]` from the log-normal by rejection.
pub fn sample_rate<R: Rng + ?Sized>(rng: &mut R, pdf: &RatePdf) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let r = pdf.median * (pdf.sigma * z).exp();
        if r > 0.0 && r <= 1.0 {
            return r;
        }
    }
}

/// Either an explicit rate list or `"sampled"` (one draw per run).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RateRepr", into = "RateRepr")]
pub enum RateGrid {
    List(Vec<f64>),
    Sampled,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RateRepr {
    List(Vec<f64>),
    Word(String),
}

impl TryFrom<RateRepr> for RateGrid {
    type Error = String;

    fn try_from(r: RateRepr) -> std::result::Result<Self, String> {
        match r {
            RateRepr::List(v) => Ok(RateGrid::List(v)),
            RateRepr::Word(w) if w == "sampled" => Ok(RateGrid::Sampled),
            RateRepr::Word(w) => Err(format!("rates must be a list or \"sampled\", got {w:?}")),
        }
    }
}

impl From<RateGrid> for RateRepr {
    fn from(g: RateGrid) -> Self {
        match g {
            RateGrid::List(v) => RateRepr::List(v),
            RateGrid::Sampled => RateRepr::Word("sampled".into()),
        }
    }
}

/// Single-run fault settings; sweep grids live in [`GridConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultConfig {
    pub rank: usize,
    pub rate: Option<f64>,
    /// Absolute injection step; takes precedence over `checkpoint_frac`.
    pub checkpoint: Option<usize>,
    pub checkpoint_frac: Option<f64>,
    pub density: Option<f64>,
    pub phase: Option<PhasePolicy>,
    pub layer: LayerPolicy,
    pub tile: (usize, usize),
    /// Signature file; when absent the archetypes are synthesized.
    pub signature_file: Option<PathBuf>,
    pub archetypes: Vec<Archetype>,
    pub signature_seed: u64,
}

impl Default for FaultConfig {
    fn default() -> Self {
        FaultConfig {
            rank: 0,
            rate: None,
            checkpoint: None,
            checkpoint_frac: None,
            density: None,
            phase: None,
            layer: LayerPolicy::Uniform,
            tile: (16, 16),
            signature_file: None,
            archetypes: Archetype::ALL.to_vec(),
            signature_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub formats: Vec<TrainFormat>,
    pub rates: RateGrid,
    pub checkpoint_fracs: Vec<f64>,
    /// Absolute checkpoints; replace `checkpoint_fracs` when set.
    pub checkpoints: Option<Vec<usize>>,
    pub densities: Vec<f64>,
    pub phases: Vec<PhasePolicy>,
    pub seeds_per_cell: usize,
    pub nan_check: Vec<bool>,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub rate_pdf: RatePdf,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            formats: vec![TrainFormat::Fp16, TrainFormat::Bf16, TrainFormat::Fp8],
            rates: RateGrid::List(vec![0.001, 0.005, 0.01, 0.05, 0.1, 1.0]),
            checkpoint_fracs: vec![1.0 / 3.0, 2.0 / 3.0],
            checkpoints: None,
            densities: vec![1.0],
            phases: vec![PhasePolicy::Uniform],
            seeds_per_cell: 10,
            nan_check: vec![true],
            workers: 1,
            out_dir: PathBuf::from("campaign"),
            rate_pdf: RatePdf::default(),
        }
    }
}

/// Whole campaign file: `[model]`, `[train]`, `[fault]`, `[campaign]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fault: FaultConfig,
    pub campaign: GridConfig,
    /// Directory relative paths in the file resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn in_unit(x: f64) -> bool {
    x > 0.0 && x <= 1.0
}

impl CampaignConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: CampaignConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            Error::Parse {
                path: PathBuf::from("<config>"),
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let g = &self.campaign;
        let nonempty = |n: usize, what: &str| {
            if n == 0 {
                Err(Error::config(format!("campaign.{what} must not be empty")))
            } else {
                Ok(())
            }
        };
        nonempty(g.formats.len(), "formats")?;
        nonempty(g.densities.len(), "densities")?;
        nonempty(g.phases.len(), "phases")?;
        nonempty(g.nan_check.len(), "nan_check")?;
        match &g.checkpoints {
            Some(c) => nonempty(c.len(), "checkpoints")?,
            None => nonempty(g.checkpoint_fracs.len(), "checkpoint_fracs")?,
        }
        if let RateGrid::List(r) = &g.rates {
            nonempty(r.len(), "rates")?;
            if let Some(bad) = r.iter().find(|&&x| !in_unit(x)) {
                return Err(Error::config(format!("rate {bad} outside (0, 1]")));
            }
        }
        if let Some(bad) = g.checkpoint_fracs.iter().find(|&&x| !(0.0..1.0).contains(&x)) {
            return Err(Error::config(format!("checkpoint fraction {bad} outside [0, 1)")));
        }
        if let Some(bad) = g.densities.iter().find(|&&x| !in_unit(x)) {
            return Err(Error::config(format!("density {bad} outside (0, 1]")));
        }
        if g.seeds_per_cell == 0 || g.workers == 0 {
            return Err(Error::config("seeds_per_cell and workers must be at least 1"));
        }
        if !in_unit(g.rate_pdf.median) || !(g.rate_pdf.sigma > 0.0 && g.rate_pdf.sigma.is_finite()) {
            return Err(Error::config("rate_pdf needs median in (0, 1] and a positive sigma"));
        }
        let f = &self.fault;
        if let Some(r) = f.rate.filter(|&r| !in_unit(r)) {
            return Err(Error::config(format!("fault rate {r} outside (0, 1]")));
        }
        if let Some(c) = f.checkpoint_frac.filter(|c| !(0.0..1.0).contains(c)) {
            return Err(Error::config(format!("checkpoint fraction {c} outside [0, 1)")));
        }
        if f.signature_file.is_none() && f.archetypes.is_empty() {
            return Err(Error::config("fault needs a signature_file or at least one archetype"));
        }
        Ok(())
    }

    /// The signature pool for every run of this campaign.
    pub fn signatures(&self) -> Result<Vec<ErrorSignature>> {
        match &self.fault.signature_file {
            Some(p) => {
                let path = if p.is_relative() { self.base_dir.join(p) } else { p.clone() };
                load_signatures(&path)
            }
            None => Ok(synth_set(&self.fault.archetypes, self.fault.signature_seed)),
        }
    }

    pub fn train_config(&self, format: TrainFormat, seed: u64, nan_check: bool) -> TrainConfig {
        TrainConfig {
            format,
            seed,
            nan_check,
            ..self.train.clone()
        }
    }

    fn checkpoints(&self) -> Vec<(String, usize)> {
        match &self.campaign.checkpoints {
            Some(steps) => steps.iter().map(|&s| (format!("@{s}"), s)).collect(),
            None => self
                .campaign
                .checkpoint_fracs
                .iter()
                .map(|&f| (format!("{f:.3}"), frac_to_step(f, self.train.total_steps)))
                .collect(),
        }
    }

    /// The full grid × seeds, in a fixed order.
    pub fn jobs(&self) -> Result<Vec<RunSpec>> {
        let g = &self.campaign;
        let mut out = Vec::new();
        for &format in &g.formats {
            for (r_idx, rate) in rate_entries(&g.rates).into_iter().enumerate() {
                for (c_label, checkpoint) in self.checkpoints() {
                    for &density in &g.densities {
                        for &phase in &g.phases {
                            for &nan_check in &g.nan_check {
                                for s in 0..g.seeds_per_cell {
                                    let seed = self.train.seed + s as u64;
                                    let mut spec = RunSpec {
                                        id: String::new(),
                                        format,
                                        rate: rate.unwrap_or(f64::NAN),
                                        rate_sampled: rate.is_none(),
                                        checkpoint,
                                        density,
                                        phase,
                                        nan_check,
                                        seed,
                                    };
                                    spec.id = spec.make_id(&c_label);
                                    if spec.rate_sampled {
                                        spec.rate = sampled_rate_for(&spec.id, r_idx, &g.rate_pdf);
                                    }
                                    out.push(spec);
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = out.iter().find(|j| !seen.insert(j.id.clone())) {
            return Err(Error::config(format!("grid produces duplicate run id {}", dup.id)));
        }
        Ok(out)
    }

    pub fn fault_tuple(&self, spec: &RunSpec, signatures: Vec<ErrorSignature>) -> FaultSiteTuple {
        FaultSiteTuple {
            id: spec.id.clone(),
            rank: self.fault.rank,
            checkpoint: spec.checkpoint,
            rate: spec.rate,
            phase: spec.phase,
            layer: self.fault.layer,
            density: spec.density,
            signatures,
            tile: self.fault.tile,
        }
    }

    /// A single run built from `[fault]`, falling back to the first grid
    /// entry of each axis.
    pub fn single_run(&self, format: Option<TrainFormat>, seed: u64, nan_check: Option<bool>) -> Result<RunSpec> {
        let g = &self.campaign;
        let f = &self.fault;
        let format = format.unwrap_or(g.formats[0]);
        let (c_label, checkpoint) = match (f.checkpoint, f.checkpoint_frac) {
            (Some(s), _) => (format!("@{s}"), s),
            (None, Some(c)) => (format!("{c:.3}"), frac_to_step(c, self.train.total_steps)),
            (None, None) => self.checkpoints()[0].clone(),
        };
        let rate = match (f.rate, &g.rates) {
            (Some(r), _) => Some(r),
            (None, RateGrid::List(v)) => Some(v[0]),
            (None, RateGrid::Sampled) => None,
        };
        let mut spec = RunSpec {
            id: String::new(),
            format,
            rate: rate.unwrap_or(f64::NAN),
            rate_sampled: rate.is_none(),
            checkpoint,
            density: f.density.unwrap_or(g.densities[0]),
            phase: f.phase.unwrap_or(g.phases[0]),
            nan_check: nan_check.unwrap_or(g.nan_check[0]),
            seed,
        };
        spec.id = spec.make_id(&c_label);
        if spec.rate_sampled {
            spec.rate = sampled_rate_for(&spec.id, 0, &g.rate_pdf);
        }
        if !in_unit(spec.rate) || !in_unit(spec.density) {
            return Err(Error::config("rate and density must lie in (0, 1]"));
        }
        if spec.checkpoint > self.train.total_steps {
            return Err(Error::config(format!(
                "checkpoint {} beyond {} training steps",
                spec.checkpoint, self.train.total_steps
            )));
        }
        Ok(spec)
    }
}

fn frac_to_step(frac: f64, total: usize) -> usize {
    (frac * total as f64).round() as usize
}

fn rate_entries(g: &RateGrid) -> Vec<Option<f64>> {
    match g {
        RateGrid::List(v) => v.iter().map(|&r| Some(r)).collect(),
        RateGrid::Sampled => vec![None],
    }
}

fn sampled_rate_for(id: &str, salt: usize, pdf: &RatePdf) -> f64 {
    let digest = Sha256::digest(format!("{id}/{salt}").as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().unwrap());
    sample_rate(&mut ChaCha8Rng::seed_from_u64(seed), pdf)
}

/// One cell × seed of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub id: String,
    pub format: TrainFormat,
    pub rate: f64,
    pub rate_sampled: bool,
    pub checkpoint: usize,
    pub density: f64,
    pub phase: PhasePolicy,
    pub nan_check: bool,
    pub seed: u64,
}

impl RunSpec {
    fn make_id(&self, checkpoint_label: &str) -> String {
        let rate = if self.rate_sampled {
            "s".to_string()
        } else {
            format!("{}", self.rate)
        };
        format!(
            "{}-r{rate}-c{checkpoint_label}-d{}-p{}-n{}-s{}",
            self.format.as_str().to_ascii_lowercase(),
            self.density,
            self.phase,
            u8::from(self.nan_check),
            self.seed
        )
    }
}

/// Append-only JSONL store of [`RunRecord`]s keyed by run id.
pub struct ResultsStore {
    path: PathBuf,
    ids: BTreeSet<String>,
}

impl ResultsStore {
    /// Opens (or creates) the store. A torn final line left by an interrupted
    /// write is discarded; any other malformed line is a parse error.
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut ids = BTreeSet::new();
        if path.exists() {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            for (i, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                let id = parse_record(path, i + 1, line)?.id;
                ids.insert(id);
            }
            if complete < bytes.len() {
                let f = OpenOptions::new().write(true).open(path).map_err(|e| Error::io(path, e))?;
                f.set_len(complete as u64).map_err(|e| Error::io(path, e))?;
            }
        }
        Ok(ResultsStore {
            path: path.to_path_buf(),
            ids,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends one record; a record whose id is already stored is rejected.
    pub fn append(&mut self, rec: &RunRecord) -> Result<()> {
        if self.ids.contains(&rec.id) {
            return Err(Error::config(format!("run {} already in {}", rec.id, self.path.display())));
        }
        let mut line = serde_json::to_string(rec).map_err(|e| Error::contract(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        f.write_all(line.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(&self.path, e))?;
        self.ids.insert(rec.id.clone());
        Ok(())
    }

    /// All records in file order.
    pub fn records(&self) -> Result<Vec<RunRecord>> {
        read_records(&self.path)
    }
}

fn parse_record(path: &Path, line: usize, bytes: &[u8]) -> Result<RunRecord> {
    serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    })
}

/// Reads every complete record of a JSONL store.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(path, i + 1, line.as_bytes())?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct BaselineMeta {
    id: String,
    format: TrainFormat,
    seed: u64,
    #[serde(with = "float_serde")]
    baseline_ppl: f64,
    #[serde(with = "float_serde")]
    initial_ppl: f64,
    #[serde(with = "float_serde")]
    final_weight_norm: f64,
    weights_digest: String,
    model: ModelConfig,
    train: TrainConfig,
}

pub fn baseline_dir(out_dir: &Path, format: TrainFormat, seed: u64) -> PathBuf {
    out_dir
        .join("baselines")
        .join(format!("{}-s{seed}", format.as_str().to_ascii_lowercase()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::contract(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains the fault-free reference for `(format, seed)` and stores its PPL,
/// final weights and divergence snapshots under `out_dir/baselines`.
pub fn run_baseline(cfg: &CampaignConfig, format: TrainFormat, seed: u64, out_dir: &Path) -> Result<BaselineRef> {
    let train = cfg.train_config(format, seed, true);
    let id = format!("baseline-{}-s{seed}", format.as_str().to_ascii_lowercase());
    let out = train_run(
        &cfg.model,
        &train,
        None,
        RunOptions {
            id: id.clone(),
            dataset: Dataset::bundled(),
            baseline: None,
            keep_snapshots: true,
        },
    )?;
    let rec = &out.record;
    let ppl = rec.final_ppl.filter(|p| p.is_finite());
    let healthy = rec.terminated_early.is_none() && ppl.is_some_and(|p| p < cfg.model.vocab_size as f64);
    if !healthy {
        return Err(Error::Baseline(format!(
            "{id} ended with PPL {:?} (early stop {:?})",
            rec.final_ppl, rec.terminated_early
        )));
    }
    let flat = out.params.flatten();
    let base = BaselineRef {
        id,
        format,
        seed,
        baseline_ppl: ppl.unwrap(),
        initial_ppl: rec.initial_ppl.unwrap_or(f64::NAN),
        final_weight_norm: flat.iter().map(|v| v * v).sum::<f64>().sqrt(),
        snapshots: out.snapshots,
    };

    let dir = baseline_dir(out_dir, format, seed);
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    weights::write_params(&tmp.join("weights.bin"), &out.params)?;
    weights::write_snapshots(&tmp.join("snapshots.bin"), &base.snapshots)?;
    write_trace_csv(&tmp.join("trace.csv"), rec)?;
    write_json(
        &tmp.join("baseline.json"),
        &BaselineMeta {
            id: base.id.clone(),
            format,
            seed,
            baseline_ppl: base.baseline_ppl,
            initial_ppl: base.initial_ppl,
            final_weight_norm: base.final_weight_norm,
            weights_digest: rec.weights_digest.clone(),
            model: cfg.model.clone(),
            train,
        },
    )?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
    Ok(base)
}

/// Loads a stored baseline; `None` if absent. A baseline trained under a
/// different model or training config is a configuration error.
pub fn load_baseline(cfg: &CampaignConfig, format: TrainFormat, seed: u64, out_dir: &Path) -> Result<Option<BaselineRef>> {
    let dir = baseline_dir(out_dir, format, seed);
    let meta_path = dir.join("baseline.json");
    if !meta_path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: BaselineMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if meta.model != cfg.model || meta.train != cfg.train_config(format, seed, true) {
        return Err(Error::config(format!(
            "{} was trained with a different configuration; remove it to retrain",
            dir.display()
        )));
    }
    let snapshots = weights::read_snapshots(&dir.join("snapshots.bin"))?;
    Ok(Some(BaselineRef {
        id: meta.id,
        format,
        seed,
        baseline_ppl: meta.baseline_ppl,
        initial_ppl: meta.initial_ppl,
        final_weight_norm: meta.final_weight_norm,
        snapshots,
    }))
}

pub fn ensure_baseline(cfg: &CampaignConfig, format: TrainFormat, seed: u64, out_dir: &Path) -> Result<BaselineRef> {
    match load_baseline(cfg, format, seed, out_dir)? {
        Some(b) => Ok(b),
        None => run_baseline(cfg, format, seed, out_dir),
    }
}

/// Executes one fault run against its baseline. Training errors become a
/// crashed record; the per-step trace goes to `out_dir/traces/<id>.csv`.
pub fn execute_run(
    cfg: &CampaignConfig,
    spec: &RunSpec,
    signatures: &[ErrorSignature],
    baseline: &BaselineRef,
    out_dir: &Path,
) -> Result<RunRecord> {
    let train = cfg.train_config(spec.format, spec.seed, spec.nan_check);
    let tuple = cfg.fault_tuple(spec, signatures.to_vec());
    let result = train_run(
        &cfg.model,
        &train,
        Some(tuple.clone()),
        RunOptions {
            id: spec.id.clone(),
            dataset: Dataset::bundled(),
            baseline: Some(baseline),
            keep_snapshots: false,
        },
    );
    let rec = match result {
        Ok(out) => out.record,
        Err(e) => RunRecord::failed(
            spec.id.clone(),
            cfg.model.clone(),
            train,
            Some(tuple),
            Some(baseline.baseline_ppl),
            e.to_string(),
        ),
    };
    if !rec.steps.is_empty() {
        let traces = out_dir.join("traces");
        fs::create_dir_all(&traces).map_err(|e| Error::io(&traces, e))?;
        write_trace_csv(&traces.join(format!("{}.csv", rec.id)), &rec)?;
    }
    Ok(rec)
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Continue an existing store instead of refusing to touch it.
    pub resume: bool,
    /// Stop after this many new runs.
    pub max_runs: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub total: usize,
    pub already_done: usize,
    pub executed: usize,
}

/// Runs every pending grid point, grouped by baseline so only one set of
/// baseline snapshots is resident at a time. `on_record` sees each new
/// record after it has been stored.
pub fn run_sweep(
    cfg: &CampaignConfig,
    out_dir: &Path,
    opts: &SweepOptions,
    on_record: &(dyn Fn(&RunRecord) + Sync),
) -> Result<SweepSummary> {
    let store = ResultsStore::open(&out_dir.join("results.jsonl"))?;
    if !opts.resume && !store.is_empty() {
        return Err(Error::config(format!(
            "{} already holds {} runs; pass --resume to continue",
            store.path().display(),
            store.len()
        )));
    }
    let jobs = cfg.jobs()?;
    let signatures = cfg.signatures()?;
    let mut pending: BTreeMap<(TrainFormat, u64), Vec<RunSpec>> = BTreeMap::new();
    let mut summary = SweepSummary {
        total: jobs.len(),
        ..Default::default()
    };
    for j in jobs {
        if store.contains(&j.id) {
            summary.already_done += 1;
        } else {
            pending.entry((j.format, j.seed)).or_default().push(j);
        }
    }
    let budget = opts.max_runs.unwrap_or(usize::MAX);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.campaign.workers)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    let store = Mutex::new(store);
    let executed = std::sync::atomic::AtomicUsize::new(0);
    for ((format, seed), mut group) in pending {
        let left = budget - executed.load(std::sync::atomic::Ordering::SeqCst);
        if left == 0 {
            break;
        }
        group.truncate(left);
        let baseline = pool.install(|| ensure_baseline(cfg, format, seed, out_dir))?;
        pool.install(|| {
            group.par_iter().try_for_each(|spec| -> Result<()> {
                let rec = execute_run(cfg, spec, &signatures, &baseline, out_dir)?;
                store.lock().unwrap().append(&rec)?;
                executed.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                on_record(&rec);
                Ok(())
            })
        })?;
    }
    summary.executed = executed.into_inner();
    Ok(summary)
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Fraction of runs showing a NaN/Inf symptom, and of those the part whose
/// PPL also changed (as a fraction of all runs in the cell).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NanShare {
    pub any: f64,
    pub also_changed: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellStats {
    pub format: TrainFormat,
    pub rate: String,
    pub n: usize,
    pub outcomes: [f64; 3],
    pub modes: [f64; 6],
    pub nan_any: NanShare,
    pub nan_loss: NanShare,
    pub nan_weights: NanShare,
    pub nan_activations: NanShare,
    pub ppl_p50: Option<f64>,
    pub ppl_p95: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub cells: Vec<CellStats>,
}

/// Grouping label for a run's rate. Sampled rates are binned by decade.
fn rate_key(rec: &RunRecord) -> (u64, String) {
    let Some(f) = &rec.fault else {
        return (0, "none".into());
    };
    if f.id.contains("-rs-") {
        let edges = [0.001, 0.01, 0.1, 1.0];
        let hi = edges.iter().copied().find(|&e| f.rate <= e).unwrap_or(1.0);
        let lo = edges.iter().copied().rev().find(|&e| e < hi).unwrap_or(0.0);
        ((hi + 2.0).to_bits(), format!("({lo},{hi}]"))
    } else {
        (f.rate.to_bits(), format!("{}", f.rate))
    }
}

/// Per (format, rate) tables. Pure in the set of records: order and
/// duplicate-free input do not matter.
pub fn report(records: &[RunRecord]) -> Report {
    let mut groups: BTreeMap<(TrainFormat, u64, String), Vec<&RunRecord>> = BTreeMap::new();
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    for r in sorted {
        let (k, label) = rate_key(r);
        groups.entry((r.format(), k, label)).or_default().push(r);
    }
    let cells = groups
        .into_iter()
        .map(|((format, _, rate), runs)| {
            let n = runs.len();
            let frac = |pred: &dyn Fn(&RunRecord) -> bool| runs.iter().filter(|r| pred(r)).count() as f64 / n as f64;
            let share = |sym: &dyn Fn(&RunRecord) -> bool| NanShare {
                any: frac(&|r| sym(r)),
                also_changed: frac(&|r| sym(r) && r.outcome == Outcome::Changed),
            };
            let mut ppl: Vec<f64> = runs
                .iter()
                .filter(|r| r.outcome != Outcome::Crashed)
                .filter_map(|r| r.final_ppl)
                .collect();
            ppl.sort_by(f64::total_cmp);
            CellStats {
                format,
                rate,
                n,
                outcomes: Outcome::ALL.map(|o| frac(&|r| r.outcome == o)),
                modes: Mode::ALL.map(|m| frac(&|r| r.mode == m)),
                nan_any: share(&|r| !r.nan_event_steps.is_empty()),
                nan_loss: share(&|r| r.nan_counts.loss > 0),
                nan_weights: share(&|r| r.nan_counts.weights > 0),
                nan_activations: share(&|r| r.nan_counts.activations > 0),
                ppl_p50: percentile(&ppl, 50.0),
                ppl_p95: percentile(&ppl, 95.0),
            }
        })
        .collect();
    Report { cells }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.4}"))
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("format,rate,n");
        for o in Outcome::ALL {
            write!(out, ",outcome_{}", o.as_str()).unwrap();
        }
        for m in Mode::ALL {
            write!(out, ",mode_{}", m.as_str()).unwrap();
        }
        for d in ["any", "loss", "weights", "activations"] {
            write!(out, ",nan_{d},nan_{d}_changed").unwrap();
        }
        out.push_str(",ppl_p50,ppl_p95\n");
        for c in &self.cells {
            write!(out, "{},{},{}", c.format.as_str(), c.rate, c.n).unwrap();
            for v in c.outcomes.iter().chain(&c.modes) {
                write!(out, ",{v:.6}").unwrap();
            }
            for s in [c.nan_any, c.nan_loss, c.nan_weights, c.nan_activations] {
                write!(out, ",{:.6},{:.6}", s.any, s.also_changed).unwrap();
            }
            writeln!(out, ",{},{}", opt(c.ppl_p50), opt(c.ppl_p95)).unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        if self.cells.is_empty() {
            return "no data\n".into();
        }
        let pct = |v: f64| format!("{:5.1}%", 100.0 * v);
        let mut out = String::new();
        writeln!(
            out,
            "{:<9} {:<16} {:>4}  {:>7} {:>7} {:>7}  {:>7} {:>7}  {:>10} {:>10}",
            "format", "rate", "n", "unchg", "chg", "crash", "nan", "nan+chg", "ppl p50", "ppl p95"
        )
        .unwrap();
        for c in &self.cells {
            writeln!(
                out,
                "{:<9} {:<16} {:>4}  {:>7} {:>7} {:>7}  {:>7} {:>7}  {:>10} {:>10}",
                c.format.as_str(),
                c.rate,
                c.n,
                pct(c.outcomes[0]),
                pct(c.outcomes[1]),
                pct(c.outcomes[2]),
                pct(c.nan_any.any),
                pct(c.nan_any.also_changed),
                opt(c.ppl_p50),
                opt(c.ppl_p95)
            )
            .unwrap();
        }
        out.push_str("\nfailure modes\n");
        write!(out, "{:<9} {:<16}", "format", "rate").unwrap();
        for m in Mode::ALL {
            write!(out, " {:>17}", m.as_str()).unwrap();
        }
        out.push('\n');
        for c in &self.cells {
            write!(out, "{:<9} {:<16}", c.format.as_str(), c.rate).unwrap();
            for v in c.modes {
                write!(out, " {:>17}", pct(v)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}
