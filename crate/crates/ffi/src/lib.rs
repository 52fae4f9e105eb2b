//! C ABI over the prism core.
//!
//! Every function returns a [`PrismStatus`]; results come back through out
//! pointers. On failure the message is available from [`prism_last_error`]
//! on the same thread. Handles are opaque and must be released with their
//! matching `*_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use prism::analysis::{classify_mode, classify_outcome, Mode, Outcome, RunRecord};
use prism::campaign::{self, CampaignConfig};
use prism::signatures::{load_signatures, save_signatures, synth_set, Archetype, ErrorSignature};
use prism::softfp::{self, BitMode, BitOp, BitPattern, Format, PatternClass};
use prism::trainer::TrainFormat;
use prism::Error;

pub const PRISM_FORMAT_FP16: u32 = 0;
pub const PRISM_FORMAT_BF16: u32 = 1;
pub const PRISM_FORMAT_FP8_E4M3: u32 = 2;
pub const PRISM_FORMAT_FP8_E5M2: u32 = 3;

pub const PRISM_BIT_FLIP: u32 = 0;
pub const PRISM_BIT_STUCK0: u32 = 1;
pub const PRISM_BIT_STUCK1: u32 = 2;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrismStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Config = 3,
    Contract = 4,
    Parse = 5,
    Validation = 6,
    Io = 7,
    Baseline = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrismPatternClass {
    Zero = 0,
    Subnormal = 1,
    Normal = 2,
    Infinity = 3,
    Nan = 4,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrismOutcome {
    Unchanged = 0,
    Changed = 1,
    Crashed = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrismMode {
    Benign = 0,
    SpikeRecover = 1,
    SpikeDegrade = 2,
    SilentDegradation = 3,
    GradualDrift = 4,
    Crashed = 5,
}

/// A pool of error signatures.
pub struct PrismSignatureSet {
    sigs: Vec<ErrorSignature>,
}

/// A parsed campaign configuration.
pub struct PrismConfig {
    cfg: CampaignConfig,
}

/// The record of one finished run.
pub struct PrismRun {
    record: RunRecord,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(PrismStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => PrismStatus::Config,
            Error::Contract(_) => PrismStatus::Contract,
            Error::Parse { .. } => PrismStatus::Parse,
            Error::Validation(_) => PrismStatus::Validation,
            Error::Io { .. } => PrismStatus::Io,
            Error::Baseline(_) => PrismStatus::Baseline,
        };
        Fail(code, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PrismStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PrismStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PrismStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            PrismStatus::Panic
        }
    }
}

unsafe fn out<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail(PrismStatus::NullArgument, "null output pointer".into()))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail(PrismStatus::NullArgument, "null handle".into()))
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(PrismStatus::NullArgument, "null string".into()));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid("string is not UTF-8"))
}

unsafe fn opt_text<'a>(p: *const c_char) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p).map(Some)
    }
}

fn format(code: u32) -> Result<Format, Fail> {
    match code {
        PRISM_FORMAT_FP16 => Ok(Format::Fp16),
        PRISM_FORMAT_BF16 => Ok(Format::Bf16),
        PRISM_FORMAT_FP8_E4M3 => Ok(Format::Fp8E4M3),
        PRISM_FORMAT_FP8_E5M2 => Ok(Format::Fp8E5M2),
        other => Err(invalid(format!("unknown format code {other}"))),
    }
}

fn pattern(bits: u32, fmt: u32) -> Result<BitPattern, Fail> {
    Ok(BitPattern::new(bits, format(fmt)?)?)
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn prism_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn prism_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by this library. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn prism_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Rounds `value` to the nearest-even pattern of `fmt`, saturating finite
/// overflow to the largest finite value.
#[no_mangle]
pub unsafe extern "C" fn prism_encode(value: f64, fmt: u32, out_bits: *mut u32) -> PrismStatus {
    guard(|| {
        *out(out_bits)? = u32::from(softfp::encode(value, format(fmt)?).bits);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_decode(bits: u32, fmt: u32, out_value: *mut f64) -> PrismStatus {
    guard(|| {
        *out(out_value)? = softfp::decode(pattern(bits, fmt)?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_round_trip(value: f64, fmt: u32, out_value: *mut f64) -> PrismStatus {
    guard(|| {
        *out(out_value)? = softfp::round_trip(value, format(fmt)?);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_classify_pattern(bits: u32, fmt: u32, out_class: *mut PrismPatternClass) -> PrismStatus {
    guard(|| {
        *out(out_class)? = match softfp::classify_pattern(pattern(bits, fmt)?) {
            PatternClass::Zero => PrismPatternClass::Zero,
            PatternClass::Subnormal => PrismPatternClass::Subnormal,
            PatternClass::Normal => PrismPatternClass::Normal,
            PatternClass::Infinity => PrismPatternClass::Infinity,
            PatternClass::Nan => PrismPatternClass::Nan,
        };
        Ok(())
    })
}

/// Applies one bit operation (`PRISM_BIT_*`) at position `bit` (0 = LSB).
#[no_mangle]
pub unsafe extern "C" fn prism_apply_bit_op(bits: u32, fmt: u32, bit: u32, mode: u32, out_bits: *mut u32) -> PrismStatus {
    guard(|| {
        let mode = match mode {
            PRISM_BIT_FLIP => BitMode::Flip,
            PRISM_BIT_STUCK0 => BitMode::Stuck0,
            PRISM_BIT_STUCK1 => BitMode::Stuck1,
            other => return Err(invalid(format!("unknown bit mode {other}"))),
        };
        let p = softfp::apply_bit_ops(pattern(bits, fmt)?, &[BitOp::new(bit, mode)])?;
        *out(out_bits)? = u32::from(p.bits);
        Ok(())
    })
}

/// Outcome of a run given its final PPL (`has_final_ppl == 0` when absent).
#[no_mangle]
pub unsafe extern "C" fn prism_classify_outcome(
    final_ppl: f64,
    has_final_ppl: i32,
    baseline_ppl: f64,
    out_outcome: *mut PrismOutcome,
) -> PrismStatus {
    guard(|| {
        let o = classify_outcome((has_final_ppl != 0).then_some(final_ppl), baseline_ppl);
        *out(out_outcome)? = outcome_code(o);
        Ok(())
    })
}

/// `outcome` is a `PrismOutcome` value.
#[no_mangle]
pub unsafe extern "C" fn prism_classify_mode(
    outcome: u32,
    nan_events: usize,
    final_divergence: f64,
    has_divergence: i32,
    baseline_weight_norm: f64,
    out_mode: *mut PrismMode,
) -> PrismStatus {
    guard(|| {
        let o = match outcome {
            0 => Outcome::Unchanged,
            1 => Outcome::Changed,
            2 => Outcome::Crashed,
            other => return Err(invalid(format!("unknown outcome code {other}"))),
        };
        let m = classify_mode(o, nan_events, (has_divergence != 0).then_some(final_divergence), baseline_weight_norm);
        *out(out_mode)? = mode_code(m);
        Ok(())
    })
}

fn outcome_code(o: Outcome) -> PrismOutcome {
    match o {
        Outcome::Unchanged => PrismOutcome::Unchanged,
        Outcome::Changed => PrismOutcome::Changed,
        Outcome::Crashed => PrismOutcome::Crashed,
    }
}

fn mode_code(m: Mode) -> PrismMode {
    match m {
        Mode::Benign => PrismMode::Benign,
        Mode::SpikeRecover => PrismMode::SpikeRecover,
        Mode::SpikeDegrade => PrismMode::SpikeDegrade,
        Mode::SilentDegradation => PrismMode::SilentDegradation,
        Mode::GradualDrift => PrismMode::GradualDrift,
        Mode::Crashed => PrismMode::Crashed,
    }
}

/// Loads a JSONL signature file.
#[no_mangle]
pub unsafe extern "C" fn prism_signatures_load(path: *const c_char, out_set: *mut *mut PrismSignatureSet) -> PrismStatus {
    guard(|| {
        let slot = out(out_set)?;
        let sigs = load_signatures(&PathBuf::from(text(path)?))?;
        *slot = Box::into_raw(Box::new(PrismSignatureSet { sigs }));
        Ok(())
    })
}

/// Synthesizes signatures for a comma-separated archetype list.
#[no_mangle]
pub unsafe extern "C" fn prism_signatures_synth(
    archetypes: *const c_char,
    seed: u64,
    out_set: *mut *mut PrismSignatureSet,
) -> PrismStatus {
    guard(|| {
        let slot = out(out_set)?;
        let kinds = Archetype::parse_list(text(archetypes)?)?;
        *slot = Box::into_raw(Box::new(PrismSignatureSet {
            sigs: synth_set(&kinds, seed),
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_signatures_len(set: *const PrismSignatureSet, out_len: *mut usize) -> PrismStatus {
    guard(|| {
        *out(out_len)? = handle(set)?.sigs.len();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_signatures_save(set: *const PrismSignatureSet, path: *const c_char) -> PrismStatus {
    guard(|| {
        save_signatures(&PathBuf::from(text(path)?), &handle(set)?.sigs)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_signatures_free(set: *mut PrismSignatureSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Loads a TOML campaign file.
#[no_mangle]
pub unsafe extern "C" fn prism_config_load(path: *const c_char, out_cfg: *mut *mut PrismConfig) -> PrismStatus {
    guard(|| {
        let slot = out(out_cfg)?;
        let cfg = CampaignConfig::load(&PathBuf::from(text(path)?))?;
        *slot = Box::into_raw(Box::new(PrismConfig { cfg }));
        Ok(())
    })
}

/// Parses campaign TOML from a string.
#[no_mangle]
pub unsafe extern "C" fn prism_config_parse(toml: *const c_char, out_cfg: *mut *mut PrismConfig) -> PrismStatus {
    guard(|| {
        let slot = out(out_cfg)?;
        let cfg = CampaignConfig::from_toml_str(text(toml)?)?;
        *slot = Box::into_raw(Box::new(PrismConfig { cfg }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_config_free(cfg: *mut PrismConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

fn train_format(name: Option<&str>) -> Result<Option<TrainFormat>, Fail> {
    name.map(|n| n.parse::<TrainFormat>().map_err(Fail::from)).transpose()
}

/// Trains (or reloads) the fault-free baseline for `format` (NULL: the
/// first configured format) and reports its validation PPL.
#[no_mangle]
pub unsafe extern "C" fn prism_baseline(
    cfg: *const PrismConfig,
    format: *const c_char,
    seed: u64,
    out_dir: *const c_char,
    out_ppl: *mut f64,
) -> PrismStatus {
    guard(|| {
        let cfg = &handle(cfg)?.cfg;
        let slot = out(out_ppl)?;
        let f = train_format(opt_text(format)?)?.unwrap_or(cfg.campaign.formats[0]);
        let b = campaign::ensure_baseline(cfg, f, seed, &PathBuf::from(text(out_dir)?))?;
        *slot = b.baseline_ppl;
        Ok(())
    })
}

/// Executes one fault run. `format` may be NULL (first configured format);
/// `rate <= 0` keeps the configured rate; `sigs` may be NULL to use the
/// configuration's signature source. The baseline is trained if missing.
#[no_mangle]
pub unsafe extern "C" fn prism_run_execute(
    cfg: *const PrismConfig,
    sigs: *const PrismSignatureSet,
    format: *const c_char,
    seed: u64,
    rate: f64,
    out_dir: *const c_char,
    out_run: *mut *mut PrismRun,
) -> PrismStatus {
    guard(|| {
        let mut cfg = handle(cfg)?.cfg.clone();
        let slot = out(out_run)?;
        if rate > 0.0 {
            cfg.fault.rate = Some(rate);
        }
        cfg.validate()?;
        let dir = PathBuf::from(text(out_dir)?);
        let spec = cfg.single_run(train_format(opt_text(format)?)?, seed, None)?;
        let pool = match sigs.as_ref() {
            Some(s) => s.sigs.clone(),
            None => cfg.signatures()?,
        };
        let base = campaign::ensure_baseline(&cfg, spec.format, seed, &dir)?;
        let record = campaign::execute_run(&cfg, &spec, &pool, &base, &dir)?;
        *slot = Box::into_raw(Box::new(PrismRun { record }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_run_outcome(run: *const PrismRun, out_outcome: *mut PrismOutcome) -> PrismStatus {
    guard(|| {
        *out(out_outcome)? = outcome_code(handle(run)?.record.outcome);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_run_mode(run: *const PrismRun, out_mode: *mut PrismMode) -> PrismStatus {
    guard(|| {
        *out(out_mode)? = mode_code(handle(run)?.record.mode);
        Ok(())
    })
}

/// Final validation PPL; `*out_has` is 0 when the run produced none.
#[no_mangle]
pub unsafe extern "C" fn prism_run_final_ppl(run: *const PrismRun, out_ppl: *mut f64, out_has: *mut i32) -> PrismStatus {
    guard(|| {
        let p = handle(run)?.record.final_ppl;
        *out(out_ppl)? = p.unwrap_or(f64::NAN);
        *out(out_has)? = i32::from(p.is_some());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_run_activations(run: *const PrismRun, out_count: *mut usize) -> PrismStatus {
    guard(|| {
        *out(out_count)? = handle(run)?.record.activations();
        Ok(())
    })
}

/// The run record as JSON; release with [`prism_string_free`].
#[no_mangle]
pub unsafe extern "C" fn prism_run_to_json(run: *const PrismRun, out_json: *mut *mut c_char) -> PrismStatus {
    guard(|| {
        let slot = out(out_json)?;
        let s = serde_json::to_string(&handle(run)?.record).map_err(|e| Fail(PrismStatus::Contract, e.to_string()))?;
        *slot = CString::new(s).map_err(|e| Fail(PrismStatus::Contract, e.to_string()))?.into_raw();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn prism_run_free(run: *mut PrismRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
