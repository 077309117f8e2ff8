// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ffi::{CStr, CString};
use std::ptr;

use stepwise_ffi::*;

fn last_error() -> String {
    let p = sw_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn problem_round_trip() {
    let text = CString::new("a=4+6,b=a-2,b>>?").unwrap();
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(sw_problem_parse(text.as_ptr(), &mut p), SwStatus::Ok);
        let mut ans = 0u8;
        assert_eq!(sw_problem_answer(p, &mut ans), SwStatus::Ok);
        assert_eq!(ans, 8);
        let (mut steps, mut vas) = (0usize, 0usize);
        sw_problem_n_steps(p, &mut steps);
        sw_problem_n_vas(p, &mut vas);
        assert_eq!((steps, vas), (2, 0));

        let mut len = 0usize;
        assert_eq!(sw_problem_prompt_tokens(p, ptr::null_mut(), 0, &mut len), SwStatus::BufferTooSmall);
        assert_eq!(len, 1 + 6 * 2 + 3);
        let mut buf = vec![0u32; len];
        assert_eq!(sw_problem_prompt_tokens(p, buf.as_mut_ptr(), buf.len(), &mut len), SwStatus::Ok);
        let mut tok = vec![0u32; 32];
        let mut n = 0usize;
        assert_eq!(sw_tokenize(text.as_ptr(), tok.as_mut_ptr(), tok.len(), &mut n), SwStatus::Ok);
        assert_eq!(&buf[1..], &tok[..n]);
        sw_problem_free(p);
    }
}

#[test]
fn errors_set_codes_and_messages() {
    let bad = CString::new("a=4+6,b>>?").unwrap();
    let mut p = ptr::null_mut();
    unsafe {
        let s = sw_problem_parse(bad.as_ptr(), &mut p);
        assert_ne!(s, SwStatus::Ok);
        assert!(p.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(sw_problem_parse(ptr::null(), &mut p), SwStatus::NullPointer);
        assert!(last_error().contains("text"));
        let bytes = [0xffu8, 0];
        assert_eq!(sw_problem_parse(bytes.as_ptr().cast(), &mut p), SwStatus::InvalidUtf8);
        let junk = CString::new("a=4#6").unwrap();
        let mut n = 0usize;
        assert_eq!(sw_tokenize(junk.as_ptr(), ptr::null_mut(), 0, &mut n), SwStatus::InvalidInput);
    }
    sw_clear_error();
    assert!(sw_last_error_message().is_null());
}

#[test]
fn error_messages_are_per_thread() {
    unsafe {
        let mut n = 0usize;
        sw_sliding_window_mask(0, 1, ptr::null_mut(), 0, &mut n);
    }
    let here = last_error();
    std::thread::spawn(|| assert!(sw_last_error_message().is_null())).join().unwrap();
    assert_eq!(last_error(), here);
}

#[test]
fn mask_matches_definition() {
    let (seq, w) = (6usize, 3usize);
    let mut buf = vec![0f32; seq * seq];
    let mut n = 0usize;
    unsafe {
        assert_eq!(sw_sliding_window_mask(seq, w, buf.as_mut_ptr(), buf.len(), &mut n), SwStatus::Ok);
    }
    for i in 0..seq {
        for j in 0..seq {
            let visible = j <= i && i - j < w;
            assert_eq!(buf[i * seq + j] == 0.0, visible, "({i},{j})");
        }
    }
}

#[test]
fn model_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("ck").to_str().unwrap()).unwrap();
    let text = CString::new("a=4+6,b=a-2,b>>?").unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(sw_model_init(1, 2, 16, 7, &mut m), SwStatus::Ok);
        let mut count = 0usize;
        sw_model_param_count(m, &mut count);
        assert!(count > 0);
        let mut p = ptr::null_mut();
        sw_problem_parse(text.as_ptr(), &mut p);
        let mut ids = vec![0u32; 32];
        let mut n = 0usize;
        sw_problem_prompt_tokens(p, ids.as_mut_ptr(), ids.len(), &mut n);
        let mut logits = vec![0f32; sw_vocab_size()];
        let mut nl = 0usize;
        assert_eq!(
            sw_model_next_logits(m, ids.as_ptr(), n, 0, logits.as_mut_ptr(), logits.len(), &mut nl),
            SwStatus::Ok
        );
        assert_eq!(nl, sw_vocab_size());
        let argmax = (0..nl).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap() as u32;
        let mut tok = 0u32;
        assert_eq!(sw_model_predict(m, p, 0, &mut tok), SwStatus::Ok);
        assert_eq!(tok, argmax);

        assert_eq!(sw_model_save(m, path.as_ptr()), SwStatus::Ok);
        let mut m2 = ptr::null_mut();
        assert_eq!(sw_model_load(path.as_ptr(), &mut m2), SwStatus::Ok);
        let mut logits2 = vec![0f32; nl];
        sw_model_next_logits(m2, ids.as_ptr(), n, 0, logits2.as_mut_ptr(), logits2.len(), &mut nl);
        assert_eq!(logits, logits2);

        let missing = CString::new(dir.path().join("none").to_str().unwrap()).unwrap();
        let mut m3 = ptr::null_mut();
        assert_eq!(sw_model_load(missing.as_ptr(), &mut m3), SwStatus::Io);
        assert!(m3.is_null());
        sw_model_free(m);
        sw_model_free(m2);
        sw_problem_free(p);
        sw_model_free(ptr::null_mut());
    }
}

#[test]
fn patch_effect_anchors() {
    let l = SwRunLogits { cl_r: 4.0, pt_r: 4.0, cl_rp: 1.0, pt_rp: 1.0, star_r: 0.5, star_rp: 3.0 };
    let mut v = f64::NAN;
    unsafe {
        assert_eq!(sw_patch_effect(&l, SwMetric::A as i32, &mut v), SwStatus::Ok);
        assert_eq!(v, 0.0);
        let full = SwRunLogits { pt_r: l.star_r, pt_rp: l.star_rp, ..l };
        assert_eq!(sw_patch_effect(&full, SwMetric::C as i32, &mut v), SwStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12);
        let flat = SwRunLogits { star_r: 4.0, star_rp: 1.0, ..l };
        assert_eq!(sw_patch_effect(&flat, SwMetric::C as i32, &mut v), SwStatus::Degenerate);
        assert_eq!(sw_patch_effect(&l, 9, &mut v), SwStatus::Config);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/stepwise.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let names: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(names.len() >= 15);
    for n in names {
        assert!(header.contains(&format!("{n}(")), "{n} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(out) = std::process::Command::new("cc")
        .args(["-std=c11", "-Wall", "-Werror", "-fsyntax-only", "-x", "c", "-"])
        .arg(format!("-I{}", concat!(env!("CARGO_MANIFEST_DIR"), "/include")))
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut c| {
            use std::io::Write;
            c.stdin.take().unwrap().write_all(b"#include \"stepwise.h\"\nint main(void) { return SW_STATUS_OK; }\n")?;
            c.wait_with_output()
        })
    else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
