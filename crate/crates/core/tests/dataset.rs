use std::fs;
use std::path::Path;

use lsunet::dataset::{Manifest, MAX_COVERAGE, MIN_COVERAGE};
use lsunet::io::read_tensor_file;
use lsunet::{load_config, synth_generate, Dataset, Error, Split, SynthOptions};

fn opts(seed: u64) -> SynthOptions {
    SynthOptions { n: 50, size: 64, classes: 1, channels: 3, seed }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "masks"] {
        let d = dir.join(sub);
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_counts_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(dir.path(), &opts(7)).unwrap();
    assert_eq!(m.samples.len(), 50);
    assert_eq!((m.count(Split::Train), m.count(Split::Eval)), (40, 10));
    assert_eq!(Manifest::load(dir.path()).unwrap(), m);
    let train = Dataset::load(dir.path(), Some(Split::Train)).unwrap();
    let eval = Dataset::load(dir.path(), Some(Split::Eval)).unwrap();
    assert_eq!((train.len(), eval.len()), (40, 10));
    assert_eq!(train.images.dims(), [40, 3, 64, 64]);
    assert_eq!(eval.masks.dims(), [10, 1, 64, 64]);
    assert_eq!(Dataset::load(dir.path(), None).unwrap().len(), 50);
}

#[test]
fn synth_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let small = SynthOptions { n: 6, ..opts(3) };
    synth_generate(a.path(), &small).unwrap();
    synth_generate(b.path(), &small).unwrap();
    synth_generate(c.path(), &SynthOptions { seed: 4, ..small }).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn synth_coverage_and_value_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let o = SynthOptions { n: 20, classes: 2, ..opts(9) };
    synth_generate(dir.path(), &o).unwrap();
    let data = Dataset::load(dir.path(), None).unwrap();
    let [n, k, h, w] = data.masks.dims();
    for s in 0..n {
        for c in 0..k {
            let mut fg = 0usize;
            for y in 0..h {
                for x in 0..w {
                    let v = data.masks.at([s, c, y, x]);
                    assert!(v == 0.0 || v == 1.0);
                    fg += (v == 1.0) as usize;
                }
            }
            let cov = fg as f64 / (h * w) as f64;
            assert!((MIN_COVERAGE..=MAX_COVERAGE).contains(&cov), "sample {s} class {c}: {cov}");
        }
    }
    assert!(data.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let raw = read_tensor_file(dir.path().join("images/00000.ten")).unwrap();
    assert_eq!(raw.dims(), [1, 3, 64, 64]);
}

#[test]
fn synth_rejects_bad_size() {
    let dir = tempfile::tempdir().unwrap();
    let err = synth_generate(dir.path(), &SynthOptions { size: 48, ..opts(0) }).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn missing_mask_names_the_stem() {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(dir.path(), &SynthOptions { n: 4, ..opts(1) }).unwrap();
    fs::remove_file(dir.path().join("masks/00002.ten")).unwrap();
    let err = Dataset::load(dir.path(), None).unwrap_err();
    assert!(matches!(&err, Error::Dataset(m) if m.contains("00002")), "{err}");
}

#[test]
fn non_binary_mask_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth_generate(dir.path(), &SynthOptions { n: 2, ..opts(1) }).unwrap();
    let path = dir.path().join("masks/00001.ten");
    let mut m = read_tensor_file(&path).unwrap();
    m.data_mut()[5] = 0.5;
    lsunet::io::write_tensor_file(&path, &m).unwrap();
    let err = Dataset::load(dir.path(), None).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn config_file_defaults_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    fs::write(&path, "{}").unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!((cfg.lr, cfg.lr_min, cfg.epochs), (0.001, 1e-5, 100));

    fs::write(&path, "{\n  \"epochs\": \"ten\"\n}").unwrap();
    let err = load_config(&path).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");

    fs::write(&path, r#"{"epoch": 3}"#).unwrap();
    let err = load_config(&path).unwrap_err().to_string();
    assert!(err.contains("unknown field"), "{err}");

    fs::write(&path, r#"{"stage_widths": [4, 8, 16, 18, 24]}"#).unwrap();
    assert!(matches!(load_config(&path), Err(Error::Config(_))));

    fs::write(&path, r#"{"disable_awl": true, "epochs": 3}"#).unwrap();
    let cfg = load_config(&path).unwrap();
    assert!(cfg.disable_awl);
    assert_eq!(lsunet::RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}
