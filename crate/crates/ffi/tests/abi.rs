use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use prism_ffi::*;

fn last_error() -> String {
    let p = prism_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn softfp_calls() {
    unsafe {
        let mut bits = 0u32;
        assert_eq!(prism_encode(1.0, PRISM_FORMAT_FP16, &mut bits), PrismStatus::Ok);
        assert_eq!(bits, 0x3C00);
        let mut v = 0.0;
        assert_eq!(prism_decode(0x7E, PRISM_FORMAT_FP8_E4M3, &mut v), PrismStatus::Ok);
        assert_eq!(v, 448.0);
        assert_eq!(prism_round_trip(1e6, PRISM_FORMAT_FP16, &mut v), PrismStatus::Ok);
        assert_eq!(v, 65504.0);
        let mut class = PrismPatternClass::Zero;
        assert_eq!(prism_classify_pattern(0x7C00, PRISM_FORMAT_FP16, &mut class), PrismStatus::Ok);
        assert_eq!(class, PrismPatternClass::Infinity);
        // exponent MSB of 1.0 in FP16
        assert_eq!(prism_apply_bit_op(0x3C00, PRISM_FORMAT_FP16, 14, PRISM_BIT_FLIP, &mut bits), PrismStatus::Ok);
        assert_eq!(bits, 0x7C00);
        assert_eq!(prism_apply_bit_op(0x3C00, PRISM_FORMAT_FP16, 0, PRISM_BIT_STUCK1, &mut bits), PrismStatus::Ok);
        assert_eq!(bits, 0x3C01);
    }
}

#[test]
fn errors_are_reported_per_thread() {
    unsafe {
        let mut bits = 0u32;
        assert_eq!(prism_encode(1.0, 17, &mut bits), PrismStatus::InvalidArgument);
        assert!(last_error().contains("format"));
        assert_eq!(prism_encode(1.0, PRISM_FORMAT_BF16, ptr::null_mut()), PrismStatus::NullArgument);
        let mut v = 0.0;
        assert_ne!(prism_decode(0x1FF, PRISM_FORMAT_FP8_E5M2, &mut v), PrismStatus::Ok);
        assert_eq!(prism_apply_bit_op(0, PRISM_FORMAT_FP16, 0, 9, &mut bits), PrismStatus::InvalidArgument);
        let other = std::thread::spawn(|| prism_last_error().is_null()).join().unwrap();
        assert!(other);
    }
}

#[test]
fn classification() {
    unsafe {
        let mut o = PrismOutcome::Crashed;
        assert_eq!(prism_classify_outcome(101.0, 1, 100.0, &mut o), PrismStatus::Ok);
        assert_eq!(o, PrismOutcome::Unchanged);
        assert_eq!(prism_classify_outcome(101.01, 1, 100.0, &mut o), PrismStatus::Ok);
        assert_eq!(o, PrismOutcome::Changed);
        assert_eq!(prism_classify_outcome(0.0, 0, 100.0, &mut o), PrismStatus::Ok);
        assert_eq!(o, PrismOutcome::Crashed);
        let mut m = PrismMode::Benign;
        assert_eq!(prism_classify_mode(PrismOutcome::Unchanged as u32, 2, 0.0, 0, 1.0, &mut m), PrismStatus::Ok);
        assert_eq!(m, PrismMode::SpikeRecover);
        assert_eq!(prism_classify_mode(0, 0, 5.0, 1, 1.0, &mut m), PrismStatus::Ok);
        assert_eq!(m, PrismMode::GradualDrift);
        assert_eq!(prism_classify_mode(7, 0, 0.0, 0, 1.0, &mut m), PrismStatus::InvalidArgument);
    }
}

#[test]
fn signature_handles() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("sigs.jsonl").to_str().unwrap()).unwrap();
    unsafe {
        let mut set = ptr::null_mut();
        let kinds = CString::new("patch3x3,cacheline_row").unwrap();
        assert_eq!(prism_signatures_synth(kinds.as_ptr(), 3, &mut set), PrismStatus::Ok);
        let mut n = 0usize;
        assert_eq!(prism_signatures_len(set, &mut n), PrismStatus::Ok);
        assert_eq!(n, 2);
        assert_eq!(prism_signatures_save(set, path.as_ptr()), PrismStatus::Ok);
        prism_signatures_free(set);

        let mut back = ptr::null_mut();
        assert_eq!(prism_signatures_load(path.as_ptr(), &mut back), PrismStatus::Ok);
        assert_eq!(prism_signatures_len(back, &mut n), PrismStatus::Ok);
        assert_eq!(n, 2);
        prism_signatures_free(back);
        prism_signatures_free(ptr::null_mut());

        let bad = CString::new("patch9x9").unwrap();
        assert_eq!(prism_signatures_synth(bad.as_ptr(), 0, &mut back), PrismStatus::Config);
        let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
        assert_eq!(prism_signatures_load(missing.as_ptr(), &mut back), PrismStatus::Io);
        assert_eq!(prism_signatures_len(ptr::null(), &mut n), PrismStatus::NullArgument);
    }
}

const TINY: &str = r#"
[model]
n_layers = 1
n_heads = 2
d_model = 16
d_ff = 32
seq_len = 16
[train]
total_steps = 12
warmup_steps = 2
batch_per_rank = 2
n_ranks = 2
divergence_every = 4
eval_batch = 4
[fault]
rate = 1.0
checkpoint = 4
[campaign]
formats = ["BF16"]
"#;

#[test]
fn config_and_run_handles() {
    let dir = tempfile::tempdir().unwrap();
    let out = CString::new(dir.path().to_str().unwrap()).unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        let bad = CString::new("[train]\nbogus = 1").unwrap();
        assert_eq!(prism_config_parse(bad.as_ptr(), &mut cfg), PrismStatus::Parse);
        assert!(last_error().contains("bogus"));

        let text = CString::new(TINY).unwrap();
        assert_eq!(prism_config_parse(text.as_ptr(), &mut cfg), PrismStatus::Ok);
        let mut ppl = 0.0;
        assert_eq!(prism_baseline(cfg, ptr::null(), 0, out.as_ptr(), &mut ppl), PrismStatus::Ok);
        assert!(ppl.is_finite() && ppl > 1.0);

        let mut run = ptr::null_mut();
        assert_eq!(prism_run_execute(cfg, ptr::null(), ptr::null(), 0, -1.0, out.as_ptr(), &mut run), PrismStatus::Ok);
        let mut acts = 0usize;
        assert_eq!(prism_run_activations(run, &mut acts), PrismStatus::Ok);
        assert_eq!(acts, 8);
        let mut outcome = PrismOutcome::Unchanged;
        assert_eq!(prism_run_outcome(run, &mut outcome), PrismStatus::Ok);
        let mut mode = PrismMode::Benign;
        assert_eq!(prism_run_mode(run, &mut mode), PrismStatus::Ok);
        assert_eq!(mode == PrismMode::Crashed, outcome == PrismOutcome::Crashed);
        let (mut p, mut has) = (0.0, 0);
        assert_eq!(prism_run_final_ppl(run, &mut p, &mut has), PrismStatus::Ok);
        assert_eq!(has == 0, outcome == PrismOutcome::Crashed);
        let mut json = ptr::null_mut();
        assert_eq!(prism_run_to_json(run, &mut json), PrismStatus::Ok);
        let s = CStr::from_ptr(json).to_str().unwrap().to_owned();
        prism_string_free(json);
        assert!(s.contains("\"id\":\"bf16-r1-c@4-d1-puniform-n1-s0\""));
        prism_run_free(run);

        let fp = CString::new("fp42").unwrap();
        assert_eq!(prism_run_execute(cfg, ptr::null(), fp.as_ptr(), 0, -1.0, out.as_ptr(), &mut run), PrismStatus::Config);
        prism_config_free(cfg);
    }
}

#[test]
fn header_declares_the_api() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/prism.h");
    let h = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "prism_last_error",
        "prism_encode",
        "prism_decode",
        "prism_classify_pattern",
        "prism_apply_bit_op",
        "prism_classify_outcome",
        "prism_signatures_synth",
        "prism_config_parse",
        "prism_run_execute",
        "prism_run_free",
        "typedef struct PrismRun PrismRun",
        "PRISM_STATUS_NULL_ARGUMENT = 1",
    ] {
        assert!(h.contains(sym), "{sym} missing from header");
    }
    // Compile the header as C when a compiler is around.
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        return;
    };
    if !cc.status.success() {
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"prism.h\"\nint main(void) { PrismRun *r = 0; prism_run_free(r); return 0; }\n").unwrap();
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}
