use std::ffi::{CStr, CString};
use std::ptr;

use sleepyco::model::{Model, ModelConfig};
use sleepyco::signal::edf::{write_edf, EdfSignal};
use sleepyco::signal::synth::synth_dataset;
use sleepyco::tensor::{checkpoint, Tensor};
use sleepyco::train::calibrate_batchnorm;
use sleepyco_ffi::*;

fn last_error() -> String {
    let p = sleepyco_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        block_channels: vec![4, 4, 4, 4, 4],
        d_f: 8,
        d_m: 8,
        d_ff: 8,
        n_heads: 2,
        n_layers: 1,
        seq_len: 1,
        ..Default::default()
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(sleepyco_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    let s = unsafe { sleepyco_model_new(ptr::null(), 0, ptr::null_mut()) };
    assert_eq!(s, SleepycoStatus::NullPointer);
    assert!(last_error().contains("out"));
    let s = unsafe { sleepyco_metrics(ptr::null(), ptr::null_mut()) };
    assert_eq!(s, SleepycoStatus::NullPointer);
    let mut n = 0usize;
    assert_eq!(unsafe { sleepyco_signal_len(ptr::null(), &mut n) }, SleepycoStatus::NullPointer);
    unsafe {
        sleepyco_model_free(ptr::null_mut());
        sleepyco_signal_free(ptr::null_mut());
    }
}

#[test]
fn success_clears_the_last_error() {
    let mut m = SleepycoMetrics::default();
    let zeros = [0u64; 25];
    assert_eq!(unsafe { sleepyco_metrics(zeros.as_ptr(), &mut m) }, SleepycoStatus::Data);
    assert!(last_error().contains("no entries"));
    let mut diag = [0u64; 25];
    for i in 0..5 {
        diag[i * 6] = 10;
    }
    assert_eq!(unsafe { sleepyco_metrics(diag.as_ptr(), &mut m) }, SleepycoStatus::Ok);
    assert!(sleepyco_last_error().is_null());
    assert_eq!((m.acc, m.mf1, m.kappa), (1.0, 1.0, 1.0));
    assert_eq!(m.per_class_recall, [1.0; 5]);
}

#[test]
fn bad_config_is_a_config_error() {
    let cfg = CString::new(r#"{"d_mm": 3}"#).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { sleepyco_model_new(cfg.as_ptr(), 0, &mut h) }, SleepycoStatus::Config);
    assert!(last_error().contains("d_mm"));
    assert!(h.is_null());
    let cfg = CString::new(r#"{"n_heads": 3}"#).unwrap();
    assert_eq!(unsafe { sleepyco_model_new(cfg.as_ptr(), 0, &mut h) }, SleepycoStatus::Config);
}

#[test]
fn supcon_identical_vectors_closed_form() {
    let z = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
    let labels = [0u32, 0, 1, 1];
    let (mut loss, mut missing) = (0.0, 99usize);
    let s = unsafe { sleepyco_supcon_loss(z.as_ptr(), 4, 2, labels.as_ptr(), 0.5, &mut loss, &mut missing) };
    assert_eq!(s, SleepycoStatus::Ok);
    assert!((loss - 4.0 * 3f64.ln()).abs() < 1e-10, "{loss}");
    assert_eq!(missing, 0);
    let s = unsafe { sleepyco_supcon_loss(z.as_ptr(), 4, 2, labels.as_ptr(), 0.0, &mut loss, ptr::null_mut()) };
    assert_eq!(s, SleepycoStatus::InvalidArgument);
}

#[test]
fn band_stop_in_place() {
    let fs = 100.0;
    let mut x: Vec<f64> = (0..3000).map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / fs).sin()).collect();
    let p = x.as_mut_ptr();
    assert_eq!(unsafe { sleepyco_band_stop(p, x.len(), 8.0, 4.0, fs, p) }, SleepycoStatus::Ok);
    let rms = (x[500..2500].iter().map(|v| v * v).sum::<f64>() / 2000.0).sqrt();
    // a unit tone has RMS 0.707; 20 dB down is 0.0707
    assert!(rms < 0.0707, "rms {rms}");
}

#[test]
fn edf_round_trip() {
    let samples: Vec<f64> = (0..600).map(|i| (i as f64 * 0.05).sin() * 100.0).collect();
    let bytes = write_edf(
        &[EdfSignal {
            label: "C4-A1".into(),
            physical_min: -200.0,
            physical_max: 200.0,
            digital_min: -32768,
            digital_max: 32767,
            samples_per_record: 300,
            samples: samples.clone(),
        }],
        3.0,
        "x",
    )
    .unwrap();
    let ch = CString::new("C4-A1").unwrap();
    let mut sig = ptr::null_mut();
    assert_eq!(unsafe { sleepyco_edf_read(bytes.as_ptr(), bytes.len(), ch.as_ptr(), &mut sig) }, SleepycoStatus::Ok);
    let (mut n, mut fs) = (0usize, 0.0);
    unsafe {
        assert_eq!(sleepyco_signal_len(sig, &mut n), SleepycoStatus::Ok);
        assert_eq!(sleepyco_signal_sample_rate(sig, &mut fs), SleepycoStatus::Ok);
    }
    assert_eq!((n, fs), (600, 100.0));
    let mut out = vec![0.0; n];
    unsafe {
        assert_eq!(sleepyco_signal_copy(sig, out.as_mut_ptr(), n - 1), SleepycoStatus::ShapeMismatch);
        assert_eq!(sleepyco_signal_copy(sig, out.as_mut_ptr(), n), SleepycoStatus::Ok);
        sleepyco_signal_free(sig);
    }
    let step = 400.0 / 65535.0;
    for (a, b) in out.iter().zip(&samples) {
        assert!((a - b).abs() <= step, "{a} vs {b}");
    }
    let missing = CString::new("Fpz-Cz").unwrap();
    let s = unsafe { sleepyco_edf_read(bytes.as_ptr(), bytes.len(), missing.as_ptr(), &mut sig) };
    assert_eq!(s, SleepycoStatus::Data);
    assert!(last_error().contains("C4-A1"));
}

#[test]
fn loaded_model_predicts_like_the_core() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let mut model = Model::new(cfg.clone(), 3).unwrap();
    let subjects: Vec<_> = synth_dataset(1, 1, 20).iter().map(|s| s.to_subject().unwrap()).collect();
    calibrate_batchnorm(&mut model, &subjects, 2, 8, 5).unwrap();
    let path = dir.path().join("m.json");
    checkpoint::save(&path, &model.sequence_snapshot(), serde_json::Value::Null).unwrap();

    let json = CString::new(serde_json::to_string(&cfg).unwrap()).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { sleepyco_model_load(json.as_ptr(), cpath.as_ptr(), &mut h) }, SleepycoStatus::Ok);
    let mut per = 0usize;
    assert_eq!(unsafe { sleepyco_model_sequence_samples(h, &mut per) }, SleepycoStatus::Ok);
    assert_eq!(per, 3000);

    let n = subjects[0].n_epochs().min(6);
    let x = subjects[0].epochs[..n * per].to_vec();
    let mut stages = vec![9u32; n];
    assert_eq!(unsafe { sleepyco_model_predict(h, x.as_ptr(), n, stages.as_mut_ptr()) }, SleepycoStatus::Ok);
    let want = model.predict(&Tensor::new(vec![n, 1, per], x).unwrap()).unwrap();
    assert_eq!(stages.iter().map(|&s| s as usize).collect::<Vec<_>>(), want);
    unsafe { sleepyco_model_free(h) };

    // an architecture mismatch names the offending tensors
    let wide = CString::new(serde_json::to_string(&ModelConfig { d_f: 16, ..cfg }).unwrap()).unwrap();
    let s = unsafe { sleepyco_model_load(wide.as_ptr(), cpath.as_ptr(), &mut h) };
    assert_eq!(s, SleepycoStatus::Checkpoint);
    assert!(last_error().contains("lateral."), "{}", last_error());
}

#[test]
fn fresh_model_needs_running_statistics() {
    let json = CString::new(serde_json::to_string(&tiny_config()).unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { sleepyco_model_new(json.as_ptr(), 1, &mut h) }, SleepycoStatus::Ok);
    let x = vec![0.0; 3000];
    let mut st = [0u32];
    let s = unsafe { sleepyco_model_predict(h, x.as_ptr(), 1, st.as_mut_ptr()) };
    assert_eq!(s, SleepycoStatus::InvalidArgument);
    assert!(last_error().contains("running statistics"));
    assert_eq!(unsafe { sleepyco_model_predict(h, x.as_ptr(), 0, st.as_mut_ptr()) }, SleepycoStatus::InvalidArgument);
    unsafe { sleepyco_model_free(h) };
}
