//! Command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use acla::data::{self, BatterySeries, SynthSpec};
use acla::eval::{self, Dataset, SweepOptions, SweepRow};
use acla::features::{self, GridPreset, VoltageGrid};
use acla::layers::AttentionMode;
use acla::model::{self, Eol, ModelConfig, Params, Variant, DEFAULT_AUG_DIM};
use acla::train::{self, TrainConfig};

use crate::config::{self, Pairs};
use crate::manifest::{self, Manifest};
use crate::{svg, Cli, Command, ExtractArgs, Failure, GridArg, RunArgs, SweepArgs, SweepKind};

pub const DEFAULT_SPLIT: f64 = 0.7;
pub const DEFAULT_SUBSAMPLE: usize = 80;

pub fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Synth => synth(cli),
        Command::Extract(a) => extract(cli, a),
        Command::Train(a) => train_cmd(cli, &a.run),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Sweep(a) => sweep(cli, a),
    }
}

fn need_out(cli: &Cli) -> Result<&Path, Failure> {
    cli.out.as_deref().ok_or_else(|| Failure::Usage("--out is required".into()))
}

fn file_pairs(cli: &Cli) -> Result<Option<Pairs>, Failure> {
    let mut p = match &cli.config {
        Some(path) => Some(config::load(path)?),
        None if cli.sets.is_empty() => None,
        None => Some(Pairs::new()),
    };
    if let Some(p) = p.as_mut() {
        config::apply_sets(p, &cli.sets)?;
    }
    Ok(p)
}

fn synth(cli: &Cli) -> Result<(), Failure> {
    let out = need_out(cli)?;
    let pairs = file_pairs(cli)?.unwrap_or_default();
    let mut spec = SynthSpec::from_pairs(&config::section(&pairs, "synth."), false)?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let b = data::synth_battery(&spec)?;
    fs::create_dir_all(out)?;
    data::write_synth(out, &b)?;
    let mut m = Manifest::new("synth", Some(spec.seed));
    if let Some(c) = &cli.config {
        m.input(c)?;
    }
    m.config(config::canonical(&spec.to_pairs().into_iter().collect()));
    m.output(out);
    m.extra("true_eol", json!(b.true_eol.cycle()));
    m.write(&manifest::path_for(out, true))?;
    match b.true_eol {
        Eol::Cycle(c) => println!("wrote {} cycles to {}; true EOL {c:.3}", b.profiles.len(), out.display()),
        Eol::NotReached => println!("wrote {} cycles to {}; EOL not reached", b.profiles.len(), out.display()),
    }
    Ok(())
}

fn grid_from(a: &ExtractArgs) -> Result<VoltageGrid, Failure> {
    match (&a.grid, &a.segments) {
        (Some(g), None) => Ok(VoltageGrid::preset(match g {
            GridArg::Oxford => GridPreset::Oxford,
            GridArg::Nasa => GridPreset::Nasa,
            GridArg::Tju => GridPreset::Tju,
            GridArg::Hust => GridPreset::Hust,
        })),
        (None, Some(s)) => VoltageGrid::parse_segments(s).map_err(|e| Failure::Usage(e.to_string())),
        _ => Err(Failure::Usage("give exactly one of --grid or --segments".into())),
    }
}

fn extract(cli: &Cli, a: &ExtractArgs) -> Result<(), Failure> {
    let out = need_out(cli)?;
    let grid = grid_from(a)?;
    let profiles = data::load_cycles(&a.data)?;
    let q_0 = a.q0.unwrap_or(profiles[0].capacity_ah);
    let mut rows = Vec::with_capacity(profiles.len());
    for p in &profiles {
        let e = features::extract(p, &grid, q_0)?;
        for seg in e.cc_warnings {
            eprintln!("warning: cycle {}: segment {seg} current varies by more than 5%", p.cycle);
        }
        rows.push((p.cycle, e.features));
    }
    fs::write(out, features::write_feature_csv(&rows))?;
    let mut m = Manifest::new("extract", None);
    m.input(&a.data)?;
    m.config(format!("grid = {grid}\nq_0 = {q_0}\n"));
    m.output(out);
    m.write(&manifest::path_for(out, false))?;
    println!("wrote {} feature rows (N_V = {}) to {}", rows.len(), grid.n_v(), out.display());
    Ok(())
}

/// Split and subsample settings shared by train, eval and sweep.
struct RunSettings {
    split: f64,
    subsample: Option<usize>,
}

fn run_defaults() -> Pairs {
    let mut p = Pairs::new();
    p.insert("run.split".into(), DEFAULT_SPLIT.to_string());
    p.insert("run.subsample".into(), DEFAULT_SUBSAMPLE.to_string());
    p
}

/// Reads `run.*` keys; a key may be absent only when its flag is given.
fn run_settings(pairs: &Pairs, args: &RunArgs) -> Result<RunSettings, Failure> {
    let get = |k: &str| -> Result<Option<&String>, Failure> {
        match pairs.get(k) {
            Some(v) => Ok(Some(v)),
            None if args_cover(args, k) => Ok(None),
            None => Err(Failure::Usage(format!("missing key '{k}'"))),
        }
    };
    let mut split = match get("run.split")? {
        Some(v) => v.parse().map_err(|_| Failure::Usage(format!("key 'run.split': cannot parse '{v}'")))?,
        None => DEFAULT_SPLIT,
    };
    let mut subsample = match get("run.subsample")? {
        Some(v) => v.parse().map_err(|_| Failure::Usage(format!("key 'run.subsample': cannot parse '{v}'")))?,
        None => DEFAULT_SUBSAMPLE,
    };
    if let Some(s) = args.split {
        split = s;
    }
    if let Some(n) = args.subsample {
        subsample = n;
    }
    if !(split > 0.0 && split < 1.0) {
        return Err(Failure::Usage(format!("split fraction must lie in (0, 1), got {split}")));
    }
    Ok(RunSettings {
        split,
        subsample: (subsample > 0).then_some(subsample),
    })
}

fn args_cover(args: &RunArgs, key: &str) -> bool {
    match key {
        "run.split" => args.split.is_some(),
        "run.subsample" => args.subsample.is_some(),
        _ => false,
    }
}

fn battery_id(path: &Path) -> String {
    path.file_stem().map_or("battery".into(), |s| s.to_string_lossy().into_owned())
}

/// Loads a feature file as a full series plus the EOL measured on it.
fn load_series(path: &Path) -> Result<(BatterySeries, Eol), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let rows = features::parse_feature_csv(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let (cycles, feats): (Vec<usize>, Vec<_>) = rows.into_iter().unzip();
    // SOH in the file is already relative to the fresh capacity
    let full = BatterySeries::new(battery_id(path), cycles, feats, 1.0)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let eol = data::measured_eol(&full);
    Ok((full, eol))
}

fn load_batteries(args: &RunArgs, truth: &[PathBuf]) -> Result<Vec<(BatterySeries, Eol)>, Failure> {
    if !truth.is_empty() && truth.len() != args.features.len() {
        return Err(Failure::Usage(format!(
            "--truth needs one file per feature file ({} vs {})",
            truth.len(),
            args.features.len()
        )));
    }
    let mut out = Vec::with_capacity(args.features.len());
    for (i, f) in args.features.iter().enumerate() {
        let (s, measured) = load_series(f)?;
        let eol = match truth.get(i) {
            Some(t) => data::read_true_eol(t)?,
            None => measured,
        };
        out.push((s, eol));
    }
    let n_v = out[0].0.n_v();
    if let Some((s, _)) = out.iter().find(|(s, _)| s.n_v() != n_v) {
        return Err(Failure::Data(format!("'{}' has {} time features, expected {n_v}", s.battery_id, s.n_v())));
    }
    Ok(out)
}

/// Working series: uniform subsample of each full series when it is longer.
fn working(batteries: Vec<(BatterySeries, Eol)>, subsample: Option<usize>) -> Result<Vec<(BatterySeries, Eol)>, Failure> {
    batteries
        .into_iter()
        .map(|(s, e)| match subsample {
            Some(n) if n < s.len() => Ok((data::uniform_sample(&s, n)?, e)),
            _ => Ok((s, e)),
        })
        .collect()
}

fn apply_variant(c: &mut ModelConfig, v: Variant) {
    c.variant = v;
    match v {
        Variant::Acla if c.attention == AttentionMode::None => c.attention = AttentionMode::Start,
        Variant::Acla => {}
        _ => c.attention = AttentionMode::None,
    }
    if v == Variant::Node {
        c.aug_dim = 0;
    } else if c.aug_dim == 0 {
        c.aug_dim = DEFAULT_AUG_DIM;
    }
}

struct Resolved {
    model: ModelConfig,
    train: TrainConfig,
    run: RunSettings,
    seed: u64,
}

impl Resolved {
    fn canonical(&self) -> String {
        let mut p: Pairs = self.model.to_pairs().into_iter().collect();
        p.extend(self.train.to_pairs());
        p.insert("run.split".into(), self.run.split.to_string());
        p.insert("run.subsample".into(), self.run.subsample.unwrap_or(0).to_string());
        config::canonical(&p)
    }
}

/// Config file (complete) or built-in defaults, then `--set`, then flags.
fn resolve(cli: &Cli, args: &RunArgs, n_v: usize) -> Result<Resolved, Failure> {
    let pairs = match &cli.config {
        Some(path) => {
            let mut p = config::load(path)?;
            config::apply_sets(&mut p, &cli.sets)?;
            p
        }
        None => {
            let mut p: Pairs = ModelConfig::for_variant(n_v, Variant::Acla).to_pairs().into_iter().collect();
            p.extend(TrainConfig::default().to_pairs());
            p.extend(run_defaults());
            config::apply_sets(&mut p, &cli.sets)?;
            p
        }
    };
    let mut model = ModelConfig::from_pairs(&config::section(&pairs, "model."))?;
    let mut train = TrainConfig::from_pairs(&config::section(&pairs, "train."))?;
    let run = run_settings(&pairs, args)?;
    if let Some(v) = args.variant {
        apply_variant(&mut model, v.into());
    }
    let seed = cli.seed.unwrap_or(0);
    train.seed = seed;
    model.validate()?;
    train.validate()?;
    if model.n_v != n_v {
        return Err(Failure::Usage(format!("model.n_v is {} but the features have {n_v} time points", model.n_v)));
    }
    Ok(Resolved { model, train, run, seed })
}

fn with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or("out".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}{suffix}"))
}

fn train_cmd(cli: &Cli, args: &RunArgs) -> Result<(), Failure> {
    let out = need_out(cli)?;
    let full = load_batteries(args, &[])?;
    let r = resolve(cli, args, full[0].0.n_v())?;
    let batteries = working(full, r.run.subsample)?;
    let mut parts = Vec::with_capacity(batteries.len());
    for (s, _) in &batteries {
        parts.push(data::chrono_split(s, r.run.split)?.0);
    }
    let init = Params::init(&r.model, r.seed)?;
    let fitted = train::fit(&r.model, &parts, &r.train, init)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let digest = model::save_checkpoint(out, &r.model, &fitted.params)?;
    let hist = with_suffix(out, ".history.csv");
    fs::write(&hist, fitted.history.to_csv())?;
    let mut m = Manifest::new("train", Some(r.seed));
    for f in &args.features {
        m.input(f)?;
    }
    m.config(r.canonical());
    m.output(out);
    m.output(&hist);
    m.extra("checkpoint_sha256", json!(digest));
    m.extra("param_digest", json!(fitted.history.param_digest));
    m.write(&manifest::path_for(out, false))?;
    println!(
        "trained {} on {} series; final loss {:.6e}; checkpoint {digest}",
        r.model.variant,
        parts.len(),
        fitted.history.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{:.3}", 100.0 * x))
}

fn eval_cmd(cli: &Cli, a: &crate::EvalArgs) -> Result<(), Failure> {
    let out = need_out(cli)?;
    let mut pairs = match &cli.config {
        Some(path) => config::load(path)?,
        None => run_defaults(),
    };
    config::apply_sets(&mut pairs, &cli.sets)?;
    let run = run_settings(&pairs, &a.run)?;
    let (cfg, params) = model::load_checkpoint(&a.checkpoint)?;
    let batteries = working(load_batteries(&a.run, &a.truth)?, run.subsample)?;
    fs::create_dir_all(out)?;
    let mut m = Manifest::new("eval", None);
    m.input(&a.checkpoint)?;
    for f in &a.run.features {
        m.input(f)?;
    }
    m.config(format!(
        "{}run.split = {}\nrun.subsample = {}\n",
        cfg.canonical_text(),
        run.split,
        run.subsample.unwrap_or(0)
    ));
    let mut reports = Vec::new();
    let mut first_failure: Option<Failure> = None;
    for (s, eol) in &batteries {
        match eval::evaluate(&cfg, &params, s, run.split, *eol) {
            Ok((rep, curve)) => {
                let cpath = out.join(format!("curve_{}.csv", s.battery_id));
                fs::write(&cpath, curve.to_csv())?;
                m.output(&cpath);
                if a.svg {
                    let spath = out.join(format!("curve_{}.svg", s.battery_id));
                    fs::write(&spath, svg::curve_svg(&s.battery_id, &curve))?;
                    m.output(&spath);
                }
                println!(
                    "{}: RMSE_SOH {}%  AE_EOL {}%  (n_test {})",
                    rep.battery_id,
                    pct(Some(rep.rmse_soh)),
                    pct(rep.ae_eol),
                    rep.n_test
                );
                reports.push(rep);
            }
            Err(e) => {
                let f: Failure = e.into();
                eprintln!("error: {}: {}", s.battery_id, f.message());
                first_failure.get_or_insert(f);
            }
        }
    }
    let rpath = out.join("report.csv");
    fs::write(&rpath, eval::reports_csv(&reports))?;
    m.output(&rpath);
    if let Ok(agg) = eval::aggregate(&reports) {
        println!(
            "mean RMSE_SOH {}% (population std {}), mean AE_EOL {}% (population std {}), {} battery(ies), {} without EOL",
            pct(Some(agg.mean_rmse)),
            pct(Some(agg.std_rmse)),
            pct(agg.mean_ae),
            pct(agg.std_ae),
            agg.n_batteries,
            agg.n_not_reached
        );
    }
    m.write(&manifest::path_for(out, true))?;
    match first_failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn print_rows(rows: &[SweepRow]) {
    println!("population std over batteries; errors in percent");
    for r in rows {
        println!(
            "{:>8} split {:<4} {:<5} {:<10} RMSE {:>8}  AE {:>8}",
            r.dataset,
            r.split,
            r.variant.to_string(),
            r.mode.to_string(),
            pct(Some(r.aggregate.mean_rmse)),
            pct(r.aggregate.mean_ae)
        );
    }
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<(), Failure> {
    let out = need_out(cli)?;
    let full = load_batteries(&a.run, &a.truth)?;
    let r = resolve(cli, &a.run, full[0].0.n_v())?;
    let batteries = working(full, r.run.subsample)?;
    let ds = [Dataset {
        name: a.dataset.clone(),
        batteries,
    }];
    let opts = SweepOptions {
        seed: r.seed,
        workers: cli.workers.unwrap_or(1).max(1),
        omit_timing: a.omit_timing,
    };
    let rows = match a.kind {
        SweepKind::Attention => {
            if r.model.variant != Variant::Acla {
                return Err(Failure::Usage("the attention sweep needs the acla variant".into()));
            }
            eval::attention_sweep(&ds, &eval::SWEEP_MODES, &r.model, &r.train, r.run.split, &opts)?
        }
        SweepKind::Split => eval::split_sweep(&ds, &eval::SPLIT_FRACTIONS, &r.model, &r.train, &opts)?,
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, eval::sweep_csv(&rows))?;
    let mut m = Manifest::new("sweep", Some(r.seed));
    for f in &a.run.features {
        m.input(f)?;
    }
    m.config(r.canonical());
    m.output(out);
    let cells: Vec<_> = rows
        .iter()
        .map(|row| json!({"dataset": row.dataset, "split": row.split, "mode": row.mode.to_string(), "seed": row.seed}))
        .collect();
    m.extra("cell_seeds", json!(cells));
    m.extra("workers", json!(opts.workers));
    m.write(&manifest::path_for(out, false))?;
    print_rows(&rows);
    Ok(())
}
