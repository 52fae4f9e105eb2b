use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prism::analysis::RunRecord;
use prism::campaign::{self, CampaignConfig, ResultsStore, SweepOptions};
use prism::signatures::{save_signatures, synth_set, Archetype};
use prism::trainer::TrainFormat;
use prism::{Error, Result};

/// Fault-injection campaigns for mixed-precision transformer training.
#[derive(Parser)]
#[command(name = "prism", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the fault-free baseline for every configured format.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Only this format instead of the campaign's format list.
        #[arg(long)]
        format: Option<TrainFormat>,
        /// Output directory (defaults to campaign.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute one fault-injection run.
    Run(RunArgs),
    /// Execute the full campaign grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip runs already present in the results store.
        #[arg(long)]
        resume: bool,
    },
    /// Summarize a results store.
    Report {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a synthetic signature file.
    SynthSignatures {
        /// Comma-separated: patch3x3, fma_sporadic, cacheline_row.
        #[arg(long)]
        archetypes: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long)]
    checkpoint_frac: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    format: Option<TrainFormat>,
    #[arg(long, conflicts_with = "archetypes")]
    signatures: Option<PathBuf>,
    #[arg(long)]
    archetypes: Option<String>,
    #[arg(long)]
    no_nan_check: bool,
    #[arg(long)]
    out: PathBuf,
}

fn out_dir(cfg: &CampaignConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| {
        let d = &cfg.campaign.out_dir;
        if d.is_relative() {
            cfg.base_dir.join(d)
        } else {
            d.clone()
        }
    })
}

fn summarize(rec: &RunRecord) -> String {
    let ppl = rec.final_ppl.map_or("-".to_string(), |p| format!("{p:.3}"));
    format!(
        "{}  outcome={} mode={} ppl={} activations={} nan_steps={}",
        rec.id,
        rec.outcome.as_str(),
        rec.mode.as_str(),
        ppl,
        rec.activations(),
        rec.nan_event_steps.len()
    )
}

fn baseline(config: &Path, seed: u64, format: Option<TrainFormat>, out: Option<PathBuf>) -> Result<()> {
    let cfg = CampaignConfig::load(config)?;
    let dir = out_dir(&cfg, out);
    let formats = format.map_or_else(|| cfg.campaign.formats.clone(), |f| vec![f]);
    for f in formats {
        let b = campaign::run_baseline(&cfg, f, seed, &dir)?;
        println!(
            "{}  ppl {:.3} -> {:.3}  stored in {}",
            b.id,
            b.initial_ppl,
            b.baseline_ppl,
            campaign::baseline_dir(&dir, f, seed).display()
        );
    }
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = CampaignConfig::load(&a.config)?;
    if let Some(r) = a.rate {
        cfg.fault.rate = Some(r);
    }
    if let Some(c) = a.checkpoint_frac {
        if !(0.0..1.0).contains(&c) {
            return Err(Error::config(format!("--checkpoint-frac {c} outside [0, 1)")));
        }
        cfg.fault.checkpoint = None;
        cfg.fault.checkpoint_frac = Some(c);
    }
    if let Some(k) = a.rank {
        cfg.fault.rank = k;
    }
    if let Some(d) = a.density {
        cfg.fault.density = Some(d);
    }
    if let Some(p) = a.signatures {
        cfg.fault.signature_file = Some(std::env::current_dir().map_err(|e| Error::io(".", e))?.join(p));
    }
    if let Some(list) = &a.archetypes {
        cfg.fault.signature_file = None;
        cfg.fault.archetypes = Archetype::parse_list(list)?;
    }
    cfg.validate()?;
    let nan_check = a.no_nan_check.then_some(false);
    let spec = cfg.single_run(a.format, a.seed, nan_check)?;
    let signatures = cfg.signatures()?;
    let base = campaign::ensure_baseline(&cfg, spec.format, spec.seed, &a.out)?;
    let rec = campaign::execute_run(&cfg, &spec, &signatures, &base, &a.out)?;
    let mut store = ResultsStore::open(&a.out.join("results.jsonl"))?;
    if !store.contains(&rec.id) {
        store.append(&rec)?;
    }
    println!("{}", summarize(&rec));
    if let Some(e) = &rec.error {
        eprintln!("run failed: {e}");
    }
    Ok(())
}

fn sweep(config: &Path, out: Option<PathBuf>, resume: bool) -> Result<()> {
    let cfg = CampaignConfig::load(config)?;
    let dir = out_dir(&cfg, out);
    let opts = SweepOptions {
        resume,
        max_runs: None,
    };
    let s = campaign::run_sweep(&cfg, &dir, &opts, &|r| println!("{}", summarize(r)))?;
    println!(
        "{} runs in grid, {} already stored, {} executed; results in {}",
        s.total,
        s.already_done,
        s.executed,
        dir.join("results.jsonl").display()
    );
    Ok(())
}

fn report(store: &Path, csv: Option<PathBuf>) -> Result<()> {
    let records = if store.exists() {
        campaign::read_records(store)?
    } else {
        return Err(Error::io(store, std::io::Error::from(std::io::ErrorKind::NotFound)));
    };
    let rep = campaign::report(&records);
    print!("{}", rep.to_text());
    if let Some(p) = csv {
        std::fs::write(&p, rep.to_csv()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn synth(archetypes: &str, out: &Path, seed: u64) -> Result<()> {
    let kinds = Archetype::parse_list(archetypes)?;
    let sigs = synth_set(&kinds, seed);
    save_signatures(out, &sigs)?;
    println!("wrote {} signatures to {}", sigs.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Baseline {
            config,
            seed,
            format,
            out,
        } => baseline(&config, seed, format, out),
        Command::Run(a) => run(a),
        Command::Sweep { config, out, resume } => sweep(&config, out, resume),
        Command::Report { store, csv } => report(&store, csv),
        Command::SynthSignatures { archetypes, out, seed } => synth(&archetypes, &out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
