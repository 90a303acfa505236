//! SOH and EOL error metrics, per-battery evaluation and aggregation, and the
//! attention-placement and training-fraction sweeps.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{self, BatterySeries, DataError};
use crate::layers::AttentionMode;
use crate::model::{self, Eol, EolQuery, ModelConfig, ModelError, Params};
use crate::train::{self, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric input is empty")]
    Empty,
    #[error("predicted and actual lengths differ ({pred} vs {actual})")]
    LengthMismatch { pred: usize, actual: usize },
    #[error("true EOL must be positive, got {0}")]
    NonPositiveEol(f64),
    #[error("split fraction {fraction} leaves {n_test} test points on '{battery}' (need at least 2)")]
    TooFewTestPoints { battery: String, fraction: f64, n_test: usize },
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Root-mean-square SOH error as a fraction.
pub fn rmse_soh(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            actual: actual.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let ss: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// Relative EOL error `|pred − true| / true`; `None` when the prediction
/// never reached the threshold.
pub fn ae_eol(pred: Eol, true_eol: f64) -> Result<Option<f64>> {
    if !(true_eol > 0.0) {
        return Err(EvalError::NonPositiveEol(true_eol));
    }
    Ok(pred.cycle().map(|p| (p - true_eol).abs() / true_eol))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryReport {
    pub battery_id: String,
    pub rmse_soh: f64,
    /// `None` when either EOL is not reached.
    pub ae_eol: Option<f64>,
    pub predicted_eol: Eol,
    pub true_eol: Eol,
    pub n_test: usize,
    pub split_fraction: f64,
}

/// Predicted against measured SOH over the whole working series.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub cycles: Vec<usize>,
    pub soh_actual: Vec<f64>,
    pub soh_pred: Vec<f64>,
    pub n_train: usize,
}

impl Curve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("cycle,soh_actual,soh_pred,part\n");
        for i in 0..self.cycles.len() {
            let part = if i < self.n_train { "train" } else { "test" };
            s.push_str(&format!("{},{},{},{part}\n", self.cycles[i], self.soh_actual[i], self.soh_pred[i]));
        }
        s
    }
}

/// τ spacing of the EOL search grid: a quarter of the working series'
/// mean point spacing.
fn eol_step(series: &BatterySeries) -> f64 {
    0.25 / (series.len() - 1) as f64
}

/// Rolls the model out from the first feature vector of the working series
/// and scores the points after the `fraction` split.
pub fn evaluate(
    config: &ModelConfig,
    params: &Params,
    series: &BatterySeries,
    fraction: f64,
    true_eol: Eol,
) -> Result<(BatteryReport, Curve)> {
    let n_tp = data::n_train(series.len(), fraction);
    let n_test = series.len().saturating_sub(n_tp);
    if n_tp == 0 || n_test < 2 {
        return Err(EvalError::TooFewTestPoints {
            battery: series.battery_id.clone(),
            fraction,
            n_test,
        });
    }
    let tau = series.taus();
    let rows = series.rows();
    let pred = model::rollout(config, params, &rows[0], &tau)?;
    let soh_pred: Vec<f64> = pred.iter().map(|r| r[0]).collect();
    let soh_actual = series.soh();
    let rmse = rmse_soh(&soh_pred[n_tp..], &soh_actual[n_tp..])?;
    let q = EolQuery::new(tau[n_tp - 1], eol_step(series));
    let predicted_eol = model::predict_eol(config, params, &rows[0], &series.cycle_map, &q)?;
    let ae = match true_eol {
        Eol::Cycle(t) => ae_eol(predicted_eol, t)?,
        Eol::NotReached => None,
    };
    Ok((
        BatteryReport {
            battery_id: series.battery_id.clone(),
            rmse_soh: rmse,
            ae_eol: ae,
            predicted_eol,
            true_eol,
            n_test,
            split_fraction: fraction,
        },
        Curve {
            cycles: series.cycles.clone(),
            soh_actual,
            soh_pred,
            n_train: n_tp,
        },
    ))
}

pub fn reports_csv(reports: &[BatteryReport]) -> String {
    let mut s = String::from("battery_id,split,n_test,rmse_soh,ae_eol,predicted_eol,true_eol\n");
    let eol = |e: Eol| e.cycle().map_or("NA".to_string(), |c| c.to_string());
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.battery_id,
            r.split_fraction,
            r.n_test,
            r.rmse_soh,
            r.ae_eol.map_or("NA".to_string(), |a| a.to_string()),
            eol(r.predicted_eol),
            eol(r.true_eol)
        ));
    }
    s
}

/// Mean and population standard deviation across batteries.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub n_batteries: usize,
    pub mean_rmse: f64,
    pub std_rmse: f64,
    /// `None` when no battery has an AE value.
    pub mean_ae: Option<f64>,
    pub std_ae: Option<f64>,
    /// Batteries whose AE is missing because an EOL was not reached.
    pub n_not_reached: usize,
    /// The std values are 0 by definition.
    pub single_battery: bool,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = (v.iter().sum::<f64>() / n).clamp(lo, hi);
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(reports: &[BatteryReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(EvalError::Empty);
    }
    let rmse: Vec<f64> = reports.iter().map(|r| r.rmse_soh).collect();
    let ae: Vec<f64> = reports.iter().filter_map(|r| r.ae_eol).collect();
    let (mean_rmse, std_rmse) = mean_std(&rmse);
    let (mean_ae, std_ae) = if ae.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&ae);
        (Some(m), Some(s))
    };
    Ok(AggregateReport {
        n_batteries: reports.len(),
        mean_rmse,
        std_rmse,
        mean_ae,
        std_ae,
        n_not_reached: reports.len() - ae.len(),
        single_battery: reports.len() == 1,
    })
}

/// Batteries evaluated together; each carries its working series and the
/// reference EOL.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub batteries: Vec<(BatterySeries, Eol)>,
}

impl Dataset {
    /// Uses the measured 0.8 crossing of each series as its reference EOL.
    pub fn measured(name: impl Into<String>, series: Vec<BatterySeries>) -> Self {
        Self {
            name: name.into(),
            batteries: series
                .into_iter()
                .map(|s| {
                    let e = data::measured_eol(&s);
                    (s, e)
                })
                .collect(),
        }
    }
}

/// Seed for sweep cell `index`: a SplitMix64 step over `base ^ index`.
pub fn cell_seed(base: u64, index: u64) -> u64 {
    let mut z = (base ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub seed: u64,
    /// Worker threads; 1 runs cells sequentially.
    pub workers: usize,
    /// Records wall times as `None` so tables compare byte for byte.
    pub omit_timing: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            omit_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dataset: String,
    pub split: f64,
    pub variant: model::Variant,
    pub mode: AttentionMode,
    pub seed: u64,
    pub aggregate: AggregateReport,
    pub reports: Vec<BatteryReport>,
    pub wall_time_s: Option<f64>,
}

pub const SWEEP_HEADER: &str = "dataset,split,variant,mode,rmse_soh_pct,ae_eol_pct,std_rmse,std_ae,wall_time_s";

/// Sweep table; error columns are percentages, standard deviations are
/// population values.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let pct = |v: Option<f64>| v.map_or("NA".to_string(), |x| (100.0 * x).to_string());
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let a = &r.aggregate;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.dataset,
            r.split,
            r.variant,
            r.mode,
            pct(Some(a.mean_rmse)),
            pct(a.mean_ae),
            pct(Some(a.std_rmse)),
            pct(a.std_ae),
            r.wall_time_s.map_or("NA".to_string(), |t| format!("{t:.3}"))
        ));
    }
    s
}

struct Cell<'a> {
    dataset: &'a Dataset,
    config: ModelConfig,
    fraction: f64,
    seed: u64,
}

fn run_cell(cell: &Cell<'_>, tc: &TrainConfig, omit_timing: bool) -> Result<SweepRow> {
    let start = Instant::now();
    let mut train_parts = Vec::with_capacity(cell.dataset.batteries.len());
    for (s, _) in &cell.dataset.batteries {
        let (tr, _) = data::chrono_split(s, cell.fraction)?;
        train_parts.push(tr);
    }
    let init = Params::init(&cell.config, cell.seed)?;
    let fitted = train::fit(&cell.config, &train_parts, tc, init)?;
    let mut reports = Vec::with_capacity(train_parts.len());
    for (s, eol) in &cell.dataset.batteries {
        reports.push(evaluate(&cell.config, &fitted.params, s, cell.fraction, *eol)?.0);
    }
    let elapsed = start.elapsed().as_secs_f64();
    Ok(SweepRow {
        dataset: cell.dataset.name.clone(),
        split: cell.fraction,
        variant: cell.config.variant,
        mode: cell.config.attention,
        seed: cell.seed,
        aggregate: aggregate(&reports)?,
        reports,
        wall_time_s: (!omit_timing).then_some(elapsed),
    })
}

fn run_cells(cells: &[Cell<'_>], tc: &TrainConfig, opts: &SweepOptions) -> Result<Vec<SweepRow>> {
    if opts.workers <= 1 {
        return cells.iter().map(|c| run_cell(c, tc, opts.omit_timing)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| EvalError::InvalidSweep(e.to_string()))?;
    pool.install(|| cells.par_iter().map(|c| run_cell(c, tc, opts.omit_timing)).collect())
}

fn check_datasets(datasets: &[Dataset]) -> Result<()> {
    if datasets.is_empty() || datasets.iter().any(|d| d.batteries.is_empty()) {
        return Err(EvalError::InvalidSweep("every dataset needs at least one battery".into()));
    }
    Ok(())
}

/// The four placements of Table-4 style sweeps.
pub const SWEEP_MODES: [AttentionMode; 4] = [AttentionMode::Start, AttentionMode::Mid, AttentionMode::End, AttentionMode::All];

/// One row per (dataset, mode). Every mode of a dataset shares that
/// dataset's cell seed so only the attention window differs.
pub fn attention_sweep(
    datasets: &[Dataset],
    modes: &[AttentionMode],
    base: &ModelConfig,
    tc: &TrainConfig,
    fraction: f64,
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    check_datasets(datasets)?;
    let mut cells = Vec::new();
    for (di, d) in datasets.iter().enumerate() {
        for &mode in modes {
            let config = ModelConfig { attention: mode, ..base.clone() };
            config.validate()?;
            cells.push(Cell {
                dataset: d,
                config,
                fraction,
                seed: cell_seed(opts.seed, di as u64),
            });
        }
    }
    run_cells(&cells, tc, opts)
}

/// One row per (dataset, fraction), seeded per dataset as in [`attention_sweep`].
pub fn split_sweep(
    datasets: &[Dataset],
    fractions: &[f64],
    config: &ModelConfig,
    tc: &TrainConfig,
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    check_datasets(datasets)?;
    config.validate()?;
    let mut cells = Vec::new();
    for (di, d) in datasets.iter().enumerate() {
        for &fraction in fractions {
            for (s, _) in &d.batteries {
                let n_test = s.len().saturating_sub(data::n_train(s.len(), fraction));
                if n_test < 2 {
                    return Err(EvalError::TooFewTestPoints {
                        battery: s.battery_id.clone(),
                        fraction,
                        n_test,
                    });
                }
            }
            cells.push(Cell {
                dataset: d,
                config: config.clone(),
                fraction,
                seed: cell_seed(opts.seed, di as u64),
            });
        }
    }
    run_cells(&cells, tc, opts)
}

/// Training fractions of the split sweep.
pub const SPLIT_FRACTIONS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
