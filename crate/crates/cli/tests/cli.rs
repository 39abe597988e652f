use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lsunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsunet")).args(args).output().expect("spawn lsunet")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, n: &str, seed: &str) {
    let o = lsunet(&["synth", "--out", arg(dir), "--n", n, "--size", "32", "--seed", seed]);
    assert!(o.status.success(), "{}", stderr(&o));
}

/// Two epochs of a tiny network; returns the checkpoint path.
fn train_small(root: &Path, extra: &str) -> std::path::PathBuf {
    let data = root.join("data");
    synth(&data, "10", "1");
    let cfg = root.join("cfg.json");
    fs::write(&cfg, format!(r#"{{"stage_widths": [4, 8, 16, 16, 24], "batch_size": 4, "epochs": 2{extra}}}"#)).unwrap();
    let ckpt = root.join("run/model.lsc");
    let o = lsunet(&["train", "--config", arg(&cfg), "--data", arg(&data), "--out", arg(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    ckpt
}

#[test]
fn synth_defaults_and_bad_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = lsunet(&["synth", "--out", arg(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("40 train, 10 eval"));
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 50);

    let o = lsunet(&["synth", "--out", arg(&dir.path().join("e")), "--size", "65"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("65"));
}

#[test]
fn synth_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, "4", "9");
    synth(&b, "4", "9");
    for f in ["manifest.json", "images/00003.ten", "masks/00003.ten"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_with_awl_disabled_logs_unit_sigma_and_eval_reads_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path(), r#", "disable_awl": true"#);
    let tsv = fs::read_to_string(dir.path().join("run/run.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        assert_eq!(cols[5..], ["1"; 6], "{row}");
    }

    let o = lsunet(&["eval", "--ckpt", arg(&ckpt), "--data", arg(&dir.path().join("data")), "--split", "eval"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("2 samples") && s.contains("dataset-pooled: mIoU") && s.contains("per-image: mIoU"), "{s}");
}

#[test]
fn missing_mask_exits_one_naming_the_stem() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    synth(&data, "5", "2");
    fs::remove_file(data.join("masks/00003.ten")).unwrap();
    let o = lsunet(&["train", "--data", arg(&data), "--out", arg(&dir.path().join("m.lsc"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("00003"), "{}", stderr(&o));
}

#[test]
fn eval_with_mismatched_architecture_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path(), "");
    let sidecar = dir.path().join("run/model.lsc.json");
    let text = fs::read_to_string(&sidecar).unwrap().replace("24", "32");
    fs::write(&sidecar, text).unwrap();
    let o = lsunet(&["eval", "--ckpt", arg(&ckpt), "--data", arg(&dir.path().join("data"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_catches_corrupted_gelu() {
    let o = lsunet(&["gradcheck", "--scope", "op"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));

    let o = lsunet(&["gradcheck", "--scope", "op", "--corrupt-gelu"]);
    assert_eq!(o.status.code(), Some(1));
    let fails: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("FAIL")).map(String::from).collect();
    assert!(fails.iter().all(|l| l.contains("gelu")), "{fails:?}");
    assert!(!fails.is_empty());
}

#[test]
fn bench_reports_repeatable_counts() {
    let counts = || {
        let o = lsunet(&["bench", "--size", "32"]);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
            .lines()
            .filter(|l| l.starts_with("parameters") || l.starts_with("FLOPs"))
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let a = counts();
    assert_eq!(a.len(), 2);
    assert!(a[0].contains("1817318"), "{a:?}");
    assert_eq!(a, counts());
}

#[test]
fn export_plots_writes_charts_and_rejects_empty_history() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path(), "");
    let out = dir.path().join("plots");
    let o = lsunet(&[
        "export-plots",
        "--run",
        arg(&dir.path().join("run/run.tsv")),
        "--out",
        arg(&out),
        "--ckpt",
        arg(&ckpt),
        "--data",
        arg(&dir.path().join("data")),
        "--panels",
        "1",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["loss.svg", "miou.svg", "dsc.svg", "sigma.svg"] {
        let svg = fs::read_to_string(out.join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{f}");
    }
    let sigma = fs::read_to_string(out.join("sigma.svg")).unwrap();
    assert_eq!(sigma.matches("<polyline").count(), 6);
    let panel = fs::read(out.join("pred_00000.pgm")).unwrap();
    assert!(panel.starts_with(b"P5\n96 32\n255\n"));
    assert_eq!(panel.len(), b"P5\n96 32\n255\n".len() + 96 * 32);

    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    let o = lsunet(&["export-plots", "--run", arg(&empty), "--out", arg(&dir.path().join("p2"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(lsunet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lsunet(&["synth"]).status.code(), Some(1));
    assert!(lsunet(&["--help"]).status.success());
}
