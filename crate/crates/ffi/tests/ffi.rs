use std::ffi::{c_char, CString};
use std::ptr;

use reattention_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { ra_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn small_model(seed: u64) -> *mut RaModel {
    let mut cfg = unsafe { std::mem::zeroed::<RaModelConfig>() };
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(ra_model_config_default(&mut cfg), RaStatus::Ok);
        cfg.n_layer = 1;
        assert_eq!(ra_model_init_random(&cfg, seed, &mut model), RaStatus::Ok);
    }
    model
}

fn small_selection() -> RaSelectionConfig {
    let mut sel = unsafe { std::mem::zeroed::<RaSelectionConfig>() };
    unsafe { assert_eq!(ra_selection_config_default(&mut sel), RaStatus::Ok) };
    sel.l_global = 8;
    sel.l_local = 64;
    sel.l_chunk = 32;
    sel.k_prime = 4;
    sel.span_m = 16;
    sel
}

#[test]
fn defaults_mirror_the_core_crate() {
    let mut cfg = unsafe { std::mem::zeroed::<RaModelConfig>() };
    let mut sel = unsafe { std::mem::zeroed::<RaSelectionConfig>() };
    unsafe {
        assert_eq!(ra_model_config_default(&mut cfg), RaStatus::Ok);
        assert_eq!(ra_selection_config_default(&mut sel), RaStatus::Ok);
    }
    assert_eq!((cfg.n_layer, cfg.n_head, cfg.n_kv_head, cfg.d_model), (2, 4, 2, 128));
    assert_eq!(cfg.attention_mode, RaAttentionMode::Reattention);
    assert_eq!(sel.l_global + sel.k_prime * sel.span_m + sel.l_local, 8192);
    assert_eq!(sel.span_alignment, RaSpanAlignment::Aligned);
}

#[test]
fn generation_round_trip_through_handles() {
    let model = small_model(1);
    let sel = small_selection();
    let mut engine = ptr::null_mut();
    let tokens: Vec<u32> = (0..300).map(|i| (i * 37 % 512) as u32).collect();
    unsafe {
        assert_eq!(
            ra_engine_new(model, &sel, RaAttentionMode::Reattention, &mut engine),
            RaStatus::Ok
        );
        // Engines hold their own reference to the weights.
        ra_model_free(model);

        let mut stats = std::mem::zeroed::<RaEngineStats>();
        assert_eq!(ra_engine_stats(engine, &mut stats), RaStatus::Ok);
        assert_eq!((stats.context_len, stats.max_position), (0, -1));

        let mut next = 0u32;
        assert_eq!(
            ra_engine_prefill(engine, tokens.as_ptr(), tokens.len(), &mut next),
            RaStatus::Ok
        );
        for _ in 0..5 {
            let t = next;
            assert_eq!(ra_engine_decode(engine, t, &mut next), RaStatus::Ok);
        }
        assert_eq!(ra_engine_stats(engine, &mut stats), RaStatus::Ok);
        assert_eq!(stats.context_len, 305);
        assert!(stats.max_position >= 0 && (stats.max_position as usize) < 4096);
        assert!(stats.scratch_peak_bytes > 0 && stats.attention_steps > 0);

        let mut written = 0usize;
        assert_eq!(
            ra_engine_last_logits(engine, ptr::null_mut(), 0, &mut written),
            RaStatus::Ok
        );
        assert_eq!(written, 512);
        let mut logits = vec![0f32; written];
        assert_eq!(
            ra_engine_last_logits(engine, logits.as_mut_ptr(), logits.len(), &mut written),
            RaStatus::Ok
        );
        let best = logits
            .iter()
            .enumerate()
            .fold(0, |b, (i, x)| if *x > logits[b] { i } else { b });
        assert_eq!(best as u32, next);

        let dir = tempfile::tempdir().unwrap();
        let snap = CString::new(dir.path().join("c.rkvc").to_str().unwrap()).unwrap();
        assert_eq!(ra_engine_dump_cache(engine, snap.as_ptr()), RaStatus::Ok);
        let caches = reattention::kv_cache::read_snapshot(&dir.path().join("c.rkvc")).unwrap();
        assert_eq!(caches[0].len(), 305);
        ra_engine_free(engine);
    }
}

#[test]
fn model_save_and_load() {
    let model = small_model(2);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("w.ratw").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(ra_model_save(model, path.as_ptr()), RaStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(ra_model_load(path.as_ptr(), &mut loaded), RaStatus::Ok);
        let (mut a, mut b) = (std::mem::zeroed::<RaModelConfig>(), std::mem::zeroed::<RaModelConfig>());
        assert_eq!(ra_model_config(model, &mut a), RaStatus::Ok);
        assert_eq!(ra_model_config(loaded, &mut b), RaStatus::Ok);
        assert_eq!(a, b);
        assert_eq!(a.n_layer, 1);
        ra_model_free(loaded);

        let missing = CString::new(dir.path().join("none.ratw").to_str().unwrap()).unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(ra_model_load(missing.as_ptr(), &mut out), RaStatus::Io);
        assert!(out.is_null());
        std::fs::write(dir.path().join("bad.ratw"), b"NOPE").unwrap();
        let bad = CString::new(dir.path().join("bad.ratw").to_str().unwrap()).unwrap();
        assert_eq!(ra_model_load(bad.as_ptr(), &mut out), RaStatus::Format);
        ra_model_free(model);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let model = small_model(3);
    let mut sel = small_selection();
    let mut engine = ptr::null_mut();
    let mut next = 0u32;
    unsafe {
        assert_eq!(
            ra_engine_new(ptr::null(), &sel, RaAttentionMode::Window, &mut engine),
            RaStatus::NullPointer
        );
        assert!(last_error().contains("model"));
        assert_eq!(ra_engine_stats(ptr::null(), ptr::null_mut()), RaStatus::NullPointer);
        assert_eq!(ra_engine_decode(ptr::null_mut(), 0, &mut next), RaStatus::NullPointer);
        assert_eq!(ra_model_config_default(ptr::null_mut()), RaStatus::NullPointer);
        assert_eq!(ra_model_save(model, ptr::null()), RaStatus::NullPointer);

        sel.k_prime = 10_000;
        assert_eq!(
            ra_engine_new(model, &sel, RaAttentionMode::Reattention, &mut engine),
            RaStatus::InvalidConfig
        );
        assert!(last_error().contains("exceeds pretrain window"), "{}", last_error());

        let sel = small_selection();
        assert_eq!(
            ra_engine_new(model, &sel, RaAttentionMode::Reattention, &mut engine),
            RaStatus::Ok
        );
        let mut written = 0usize;
        assert_eq!(
            ra_engine_last_logits(engine, ptr::null_mut(), 0, &mut written),
            RaStatus::InvalidArgument
        );
        let bad = [9999u32];
        assert_eq!(
            ra_engine_prefill(engine, bad.as_ptr(), 1, &mut next),
            RaStatus::OutOfRange
        );
        assert!(last_error().contains("9999"));
        assert_eq!(
            ra_engine_prefill(engine, bad.as_ptr(), 0, &mut next),
            RaStatus::InvalidArgument
        );
        ra_engine_free(engine);

        let mut full = ptr::null_mut();
        assert_eq!(
            ra_engine_new(model, &sel, RaAttentionMode::Full, &mut full),
            RaStatus::Ok
        );
        let long = vec![1u32; 5000];
        assert_ne!(
            ra_engine_prefill(full, long.as_ptr(), long.len(), &mut next),
            RaStatus::Ok
        );
        ra_engine_free(full);

        ra_model_free(model);
        ra_model_free(ptr::null_mut());
        ra_engine_free(ptr::null_mut());
    }
}

#[test]
fn error_message_truncates_to_buffer() {
    unsafe {
        assert_eq!(ra_model_config(ptr::null(), ptr::null_mut()), RaStatus::NullPointer);
        let full = ra_last_error_message(ptr::null_mut(), 0);
        assert!(full > 4);
        let mut small = [1 as c_char; 4];
        assert_eq!(ra_last_error_message(small.as_mut_ptr(), 4), full);
        assert_eq!(small[3], 0);
    }
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/reattention.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in [
        "ra_engine_new",
        "ra_engine_prefill",
        "RA_STATUS_OUT_OF_RANGE",
        "RaEngine",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(cc) = which("cc") else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, "#include \"reattention.h\"\nint main(void) { struct RaModelConfig c; return ra_model_config_default(&c) != RA_STATUS_OK; }\n").unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    for lang in ["c", "c++"] {
        let status = std::process::Command::new(&cc)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang, "-I", include])
            .arg(&src)
            .status()
            .unwrap();
        assert!(status.success(), "header fails to compile as {lang}");
    }
}

fn which(bin: &str) -> Result<std::path::PathBuf, ()> {
    std::env::var_os("PATH")
        .and_then(|p| std::env::split_paths(&p).map(|d| d.join(bin)).find(|p| p.is_file()))
        .ok_or(())
}
