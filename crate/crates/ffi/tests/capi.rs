use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use cryalert::nn::{Network, NetworkConfig};
use cryalert::spectro::StftConfig;
use cryalert::wav_io::{write_wav_file, AudioClip};
use cryalert::Model;
use cryalert_ffi::*;

const CLASSES: [&str; 4] = ["background", "crying", "laughing", "screaming"];

fn write_model(dir: &Path) -> PathBuf {
    let net = Network::<f32>::new(NetworkConfig::canonical(4), 3).unwrap();
    let model = Model::new(net, StftConfig::default(), CLASSES.map(String::from).to_vec()).unwrap();
    let path = dir.join("model.cry");
    model.save(&path).unwrap();
    path
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(cry_last_error_message()) }.to_string_lossy().into_owned()
}

fn load(path: &Path) -> *mut CryModel {
    let mut model = ptr::null_mut();
    let status = unsafe { cry_model_load(cpath(path).as_ptr(), &mut model) };
    assert_eq!(status, CryStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    model
}

fn tone(len: usize) -> Vec<f32> {
    (0..len).map(|i| (i as f32 * 0.2).sin() * 0.5).collect()
}

#[test]
fn load_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let model = load(&write_model(dir.path()));
    unsafe {
        assert_eq!(cry_model_class_count(model), 4);
        for (i, name) in CLASSES.iter().enumerate() {
            assert_eq!(CStr::from_ptr(cry_model_class_name(model, i)).to_str().unwrap(), *name);
        }
        assert!(cry_model_class_name(model, 4).is_null());
        assert_eq!(cry_model_class_count(ptr::null()), 0);
        assert!(cry_model_class_name(ptr::null(), 0).is_null());
        cry_model_free(model);
        cry_model_free(ptr::null_mut());
    }
    assert_eq!(last_error(), "");
}

#[test]
fn load_failures_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = 0x1 as *mut CryModel;
    let missing = dir.path().join("missing.cry");
    assert_eq!(unsafe { cry_model_load(cpath(&missing).as_ptr(), &mut model) }, CryStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("missing.cry"));

    let wav = dir.path().join("clip.wav");
    write_wav_file(&wav, &AudioClip::new(vec![0.0; 400], 16000).unwrap()).unwrap();
    assert_eq!(unsafe { cry_model_load(cpath(&wav).as_ptr(), &mut model) }, CryStatus::NotAModel);

    let good = write_model(dir.path());
    let mut bytes = std::fs::read(&good).unwrap();
    let n = bytes.len();
    bytes[n - 100] ^= 0x40;
    let bad = dir.path().join("bad.cry");
    std::fs::write(&bad, bytes).unwrap();
    assert_eq!(unsafe { cry_model_load(cpath(&bad).as_ptr(), &mut model) }, CryStatus::Corrupt);

    assert_eq!(unsafe { cry_model_load(ptr::null(), &mut model) }, CryStatus::NullPointer);
    assert_eq!(unsafe { cry_model_load(cpath(&good).as_ptr(), ptr::null_mut()) }, CryStatus::NullPointer);
}

#[test]
fn predict_samples_gives_a_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let model = load(&write_model(dir.path()));
    let mut probs = [0.0f64; 4];
    for (samples, rate) in [(tone(16000), 16000), (tone(48000), 48000), (vec![0.0; 8000], 16000)] {
        let status = unsafe { cry_predict_samples(model, samples.as_ptr(), samples.len(), rate, probs.as_mut_ptr(), 4) };
        assert_eq!(status, CryStatus::Ok, "{}", last_error());
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(probs.iter().all(|p| p.is_finite() && *p >= 0.0));
    }

    let short = tone(100);
    let status = unsafe { cry_predict_samples(model, short.as_ptr(), short.len(), 16000, probs.as_mut_ptr(), 4) };
    assert_eq!(status, CryStatus::TooShort);
    assert!(last_error().contains("too short"));

    let clip = tone(16000);
    let status = unsafe { cry_predict_samples(model, clip.as_ptr(), clip.len(), 16000, probs.as_mut_ptr(), 3) };
    assert_eq!(status, CryStatus::InvalidArgument);
    let status = unsafe { cry_predict_samples(model, clip.as_ptr(), clip.len(), 22050, probs.as_mut_ptr(), 4) };
    assert_eq!(status, CryStatus::Unsupported);
    let loud = vec![2.0f32; 16000];
    let status = unsafe { cry_predict_samples(model, loud.as_ptr(), loud.len(), 16000, probs.as_mut_ptr(), 4) };
    assert_ne!(status, CryStatus::Ok);
    let status = unsafe { cry_predict_samples(ptr::null(), clip.as_ptr(), clip.len(), 16000, probs.as_mut_ptr(), 4) };
    assert_eq!(status, CryStatus::NullPointer);
    let status = unsafe { cry_predict_samples(model, clip.as_ptr(), clip.len(), 16000, ptr::null_mut(), 4) };
    assert_eq!(status, CryStatus::NullPointer);
    unsafe { cry_model_free(model) };
}

#[test]
fn predict_wav_matches_samples() {
    let dir = tempfile::tempdir().unwrap();
    let model = load(&write_model(dir.path()));
    let clip = AudioClip::new(tone(16000), 16000).unwrap();
    let wav = dir.path().join("t.wav");
    write_wav_file(&wav, &clip).unwrap();
    let reread = cryalert::wav_io::read_wav_file(&wav).unwrap();

    let mut from_file = [0.0f64; 4];
    let mut from_samples = [0.0f64; 4];
    unsafe {
        assert_eq!(cry_predict_wav(model, cpath(&wav).as_ptr(), from_file.as_mut_ptr(), 4), CryStatus::Ok);
        let s = reread.samples();
        assert_eq!(
            cry_predict_samples(model, s.as_ptr(), s.len(), 16000, from_samples.as_mut_ptr(), 4),
            CryStatus::Ok
        );
        cry_model_free(model);
    }
    assert_eq!(from_file, from_samples);
}

#[test]
fn classify_json_event() {
    let dir = tempfile::tempdir().unwrap();
    let model = load(&write_model(dir.path()));
    let wav = dir.path().join("c.wav");
    write_wav_file(&wav, &AudioClip::new(tone(16000), 16000).unwrap()).unwrap();
    let names: Vec<CString> = ["crying", "screaming"].iter().map(|s| CString::new(*s).unwrap()).collect();
    let ptrs: Vec<*const c_char> = names.iter().map(|c| c.as_ptr()).collect();

    let mut json: *mut c_char = ptr::null_mut();
    let status = unsafe { cry_classify_wav_json(model, cpath(&wav).as_ptr(), ptrs.as_ptr(), 2, 0.5, &mut json) };
    assert_eq!(status, CryStatus::Ok, "{}", last_error());
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_string();
    unsafe { cry_string_free(json) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["threshold"], 0.5);
    assert_eq!(v["probabilities"].as_object().unwrap().len(), 4);
    assert!(v["source"].as_str().unwrap().ends_with("c.wav"));

    let bogus = [CString::new("whining").unwrap()];
    let bogus_ptrs = [bogus[0].as_ptr()];
    let status = unsafe { cry_classify_wav_json(model, cpath(&wav).as_ptr(), bogus_ptrs.as_ptr(), 1, 0.5, &mut json) };
    assert_eq!(status, CryStatus::Config);
    assert!(json.is_null());
    let status = unsafe { cry_classify_wav_json(model, cpath(&wav).as_ptr(), ptrs.as_ptr(), 2, 0.0, &mut json) };
    assert_eq!(status, CryStatus::Config);
    unsafe { cry_model_free(model) };
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(cry_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "cryalert.h"

int main(int argc, char **argv) {
    CryModel *model = NULL;
    if (cry_model_load(argv[1], &model) != CRY_STATUS_OK) {
        fprintf(stderr, "load: %s\n", cry_last_error_message());
        return 1;
    }
    double probs[8];
    CryStatus st = cry_predict_wav(model, argv[2], probs, 8);
    if (st != CRY_STATUS_OK) {
        fprintf(stderr, "predict: %s\n", cry_last_error_message());
        return 1;
    }
    for (size_t i = 0; i < cry_model_class_count(model); i++) {
        printf("%s %.6f\n", cry_model_class_name(model, i), probs[i]);
    }
    cry_model_free(model);
    return cry_model_load("/nonexistent", &model) == CRY_STATUS_IO ? 0 : 2;
}
"#;

/// Builds and runs a C program against the generated header and the static
/// library. Skipped when no C compiler is on PATH.
#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let staticlib = lib_dir.join("libcryalert_ffi.a");
    assert!(staticlib.exists(), "{} missing", staticlib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let exe = dir.path().join("classify");
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&staticlib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let model = write_model(dir.path());
    let wav = dir.path().join("x.wav");
    write_wav_file(&wav, &AudioClip::new(tone(16000), 16000).unwrap()).unwrap();
    let run = Command::new(&exe).arg(&model).arg(&wav).output().unwrap();
    assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    let text = String::from_utf8(run.stdout).unwrap();
    let names: Vec<&str> = text.lines().map(|l| l.split(' ').next().unwrap()).collect();
    assert_eq!(names, CLASSES);
    let sum: f64 = text.lines().map(|l| l.split(' ').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((sum - 1.0).abs() < 1e-5);
}
