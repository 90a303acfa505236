use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_acla"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn acla")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL_SYNTH: [&str; 4] = ["--set", "synth.n_cycles=60", "--set", "synth.a=3e-3"];

/// Small model and a 6-iteration schedule on top of the shipped config.
fn small_run() -> Vec<String> {
    let mut v = vec!["--config".to_string(), configs().join("default.conf").display().to_string()];
    for s in [
        "model.conv_filters=4,4",
        "model.lstm_hidden=4",
        "model.aug_dim=2",
        "train.warmup_iters=2",
        "train.plateau_iters=2",
        "train.decay_iters=2",
        "run.subsample=30",
    ] {
        v.push("--set".into());
        v.push(s.into());
    }
    v
}

fn prepare(dir: &Path) {
    let mut a: Vec<&str> = SMALL_SYNTH.to_vec();
    a.extend(["synth", "--out", "syn"]);
    ok(dir, &a);
    ok(dir, &["extract", "--data", "syn", "--segments", "3.0:4.2:5", "--out", "syn.csv"]);
}

fn with(base: &[String], extra: &[&str]) -> Vec<String> {
    base.iter().cloned().chain(extra.iter().map(|s| s.to_string())).collect()
}

fn argv(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let t = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let mut a: Vec<&str> = SMALL_SYNTH.to_vec();
        a.extend(["--seed", "3", "synth", "--out", out]);
        ok(t.path(), &a);
    }
    let a = t.path().join("a");
    let names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names.len(), 60 + 3);
    for n in names {
        if n == "manifest.json" {
            continue;
        }
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(t.path().join("b").join(&n)).unwrap(), "{n:?}");
    }
    assert!(a.join("capacity.csv").is_file() && a.join("truth.csv").is_file());
}

#[test]
fn shipped_synth_config_matches_defaults() {
    let t = tempfile::tempdir().unwrap();
    let conf = configs().join("synth.conf");
    let out = ok(t.path(), &["--config", conf.to_str().unwrap(), "--set", "synth.n_cycles=40", "synth", "--out", "s"]);
    assert!(out.contains("40 cycles"), "{out}");
}

#[test]
fn invalid_spec_names_the_parameter() {
    let t = tempfile::tempdir().unwrap();
    let o = run(t.path(), &["--set", "synth.c=-0.5", "synth", "--out", "bad"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("'c'"), "{err}");
}

#[test]
fn grid_presets_set_feature_width() {
    let t = tempfile::tempdir().unwrap();
    let mut a: Vec<&str> = SMALL_SYNTH.to_vec();
    a.extend(["--set", "synth.v_start=2.8", "--set", "synth.v_end=4.3", "synth", "--out", "syn"]);
    ok(t.path(), &a);
    let width = |args: &[&str], out: &str| {
        let mut v = vec!["extract", "--data", "syn", "--out", out];
        v.extend_from_slice(args);
        ok(t.path(), &v);
        fs::read_to_string(t.path().join(out)).unwrap().lines().next().unwrap().split(',').count()
    };
    // header carries the cycle column plus SOH and N_V times
    assert_eq!(width(&["--grid", "oxford"], "ox.csv"), 1 + 22);
    assert_eq!(width(&["--grid", "nasa"], "na.csv"), 1 + 20);
    assert_eq!(width(&["--grid", "tju"], "tj.csv"), 1 + 20);
    assert_eq!(width(&["--grid", "hust"], "hu.csv"), 1 + 18);
    width(&["--segments", "3.0:4.2:21"], "custom.csv");
    assert_eq!(fs::read(t.path().join("ox.csv")).unwrap(), fs::read(t.path().join("custom.csv")).unwrap());
}

#[test]
fn train_is_deterministic_and_eval_writes_reports() {
    let t = tempfile::tempdir().unwrap();
    prepare(t.path());
    let base = small_run();
    let digest = |out: &str| {
        let s = ok(t.path(), &argv(&with(&base, &["--seed", "5", "train", "--features", "syn.csv", "--out", out])));
        s.rsplit("checkpoint ").next().unwrap().trim().to_string()
    };
    let (a, b) = (digest("a.ckpt"), digest("b.ckpt"));
    assert_eq!(a.len(), 64);
    assert_eq!(a, b);
    assert_eq!(fs::read(t.path().join("a.ckpt")).unwrap(), fs::read(t.path().join("b.ckpt")).unwrap());
    let hist = fs::read_to_string(t.path().join("a.history.csv")).unwrap();
    assert!(hist.starts_with("iter,lr,loss\n") && hist.lines().count() == 7);
    assert!(t.path().join("a.manifest.json").is_file());

    let eval = |out: &str, svg: bool| {
        let mut e = with(&base, &["eval", "--checkpoint", "a.ckpt", "--features", "syn.csv", "--truth", "syn/truth.csv", "--out", out]);
        if svg {
            e.push("--svg".into());
        }
        run(t.path(), &argv(&e))
    };
    let o = eval("plain", false);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(t.path().join("plain/report.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), "battery_id,split,n_test,rmse_soh,ae_eol,predicted_eol,true_eol");
    assert!(t.path().join("plain/curve_syn.csv").is_file());
    assert!(!t.path().join("plain/curve_syn.svg").exists());
    assert_eq!(eval("plot", true).status.code(), Some(0));
    let svg = fs::read_to_string(t.path().join("plot/curve_syn.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    eval("plot2", true);
    assert_eq!(svg, fs::read_to_string(t.path().join("plot2/curve_syn.svg")).unwrap());
}

#[test]
fn variant_flag_selects_baselines() {
    let t = tempfile::tempdir().unwrap();
    prepare(t.path());
    let base = small_run();
    for v in ["node", "anode", "acl", "acla"] {
        let out = ok(
            t.path(),
            &argv(&with(&base, &["--set", "train.max_iters=1", "train", "--variant", v, "--features", "syn.csv", "--out", "v.ckpt"])),
        );
        assert!(out.starts_with(&format!("trained {v} ")), "{out}");
    }
}

#[test]
fn missing_config_key_is_named() {
    let t = tempfile::tempdir().unwrap();
    prepare(t.path());
    let text = fs::read_to_string(configs().join("default.conf")).unwrap();
    let cut: String = text.lines().filter(|l| !l.starts_with("train.lookahead_beta")).map(|l| format!("{l}\n")).collect();
    fs::write(t.path().join("cut.conf"), cut).unwrap();
    let o = run(t.path(), &["--config", "cut.conf", "train", "--features", "syn.csv", "--out", "x.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.lookahead_beta"));
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(run(t.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(t.path(), &["train", "--features", "missing.csv", "--out", "x"]).status.code(), Some(2));
    assert_eq!(run(t.path(), &["extract", "--data", ".", "--grid", "oxford", "--out", "f.csv"]).status.code(), Some(2));
    prepare(t.path());
    let diverge = with(&small_run(), &["--set", "train.lr_max=1e9", "train", "--features", "syn.csv", "--out", "d.ckpt"]);
    assert_eq!(run(t.path(), &argv(&diverge)).status.code(), Some(3));
}

#[test]
fn sweeps_emit_expected_rows_and_rerun_identically() {
    let t = tempfile::tempdir().unwrap();
    prepare(t.path());
    let base = small_run();
    let sweep = |kind: &str, out: &str, workers: &str| {
        ok(
            t.path(),
            &argv(&with(
                &base,
                &["--workers", workers, "sweep", kind, "--features", "syn.csv", "--truth", "syn/truth.csv", "--out", out, "--omit-timing"],
            )),
        );
        fs::read_to_string(t.path().join(out)).unwrap()
    };
    let a = sweep("attention", "a1.csv", "1");
    assert_eq!(a.lines().next().unwrap(), "dataset,split,variant,mode,rmse_soh_pct,ae_eol_pct,std_rmse,std_ae,wall_time_s");
    let modes: Vec<&str> = a.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(modes, ["start", "mid", "end", "all"]);
    assert_eq!(a, sweep("attention", "a2.csv", "2"));
    let s = sweep("split", "s1.csv", "1");
    let splits: Vec<&str> = s.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(splits, ["0.5", "0.6", "0.7", "0.8", "0.9"]);
    let manifest = fs::read_to_string(t.path().join("s1.manifest.json")).unwrap();
    assert!(manifest.contains("cell_seeds"));
}
