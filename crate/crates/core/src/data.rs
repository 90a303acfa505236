//! Cycle ingestion, subsampling, chronological splitting and the synthetic
//! degradation generator.
//!
//! On-disk layout of a battery directory:
//!
//! ```text
//! capacity.csv    cycle,capacity_ah
//! cycle_<k>.csv   time_s,voltage_v,current_a
//! truth.csv       cycle,soh_true,true_eol       (synthetic batteries only)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::features::{self, ChargeProfile, FeatureError, FeatureVector, Sample, VoltageGrid};
use crate::model::{self, CycleMap, Eol};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no capacity index at {0}")]
    MissingCapacityIndex(PathBuf),
    #[error("{file}: cycle file for cycle {cycle} is missing")]
    MissingCycleFile { file: PathBuf, cycle: usize },
    #[error("{file}:{line}: time does not increase")]
    NonMonotoneTime { file: PathBuf, line: usize },
    #[error("{file}:{line}: {msg}")]
    Parse { file: PathBuf, line: usize, msg: String },
    #[error("{0}")]
    Empty(String),
    #[error("series has {len} entries, cannot sample {n}")]
    TooShort { len: usize, n: usize },
    #[error("split fraction {fraction} of {n_tot} entries leaves an empty side")]
    DegenerateSplit { fraction: f64, n_tot: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One battery's feature trajectory with its τ ↔ cycle map.
#[derive(Debug, Clone, PartialEq)]
pub struct BatterySeries {
    pub battery_id: String,
    pub cycles: Vec<usize>,
    pub features: Vec<FeatureVector>,
    /// Defined over the full working series; splits keep their parent's map.
    pub cycle_map: CycleMap,
    pub q_0: f64,
}

impl BatterySeries {
    pub fn new(battery_id: impl Into<String>, cycles: Vec<usize>, features: Vec<FeatureVector>, q_0: f64) -> Result<Self> {
        if cycles.len() != features.len() {
            return Err(DataError::InvalidSeries("cycle and feature counts differ".into()));
        }
        if cycles.len() < 2 {
            return Err(DataError::InvalidSeries("a series needs at least two cycles".into()));
        }
        if cycles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DataError::InvalidSeries("cycles must be strictly increasing".into()));
        }
        let n_v = features[0].times.len();
        if features.iter().any(|f| f.times.len() != n_v) {
            return Err(DataError::InvalidSeries("feature vectors differ in length".into()));
        }
        let soh0 = features[0].soh;
        if !(soh0 > 0.95 && soh0 <= 1.05) {
            return Err(DataError::InvalidSeries(format!("first SOH {soh0} outside (0.95, 1.05]")));
        }
        let cycle_map = CycleMap::new(cycles[0] as f64, cycles[cycles.len() - 1] as f64)
            .map_err(|e| DataError::InvalidSeries(e.to_string()))?;
        Ok(Self {
            battery_id: battery_id.into(),
            cycles,
            features,
            cycle_map,
            q_0,
        })
    }

    pub fn len(&self) -> usize {
        self.cycles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cycles.is_empty()
    }

    pub fn n_v(&self) -> usize {
        self.features[0].times.len()
    }

    /// τ coordinate of every entry under the series' cycle map.
    pub fn taus(&self) -> Vec<f64> {
        self.cycles.iter().map(|&c| self.cycle_map.to_tau(c as f64)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.features.iter().map(FeatureVector::to_vec).collect()
    }

    pub fn soh(&self) -> Vec<f64> {
        self.features.iter().map(|f| f.soh).collect()
    }

    fn subset(&self, idx: impl IntoIterator<Item = usize>) -> Self {
        let idx: Vec<usize> = idx.into_iter().collect();
        Self {
            battery_id: self.battery_id.clone(),
            cycles: idx.iter().map(|&i| self.cycles[i]).collect(),
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            cycle_map: self.cycle_map,
            q_0: self.q_0,
        }
    }
}

/// Extracts features from every profile into a series.
pub fn series_from_profiles(id: &str, profiles: &[ChargeProfile], grid: &VoltageGrid, q_0: f64) -> Result<BatterySeries> {
    let features = profiles
        .iter()
        .map(|p| features::extract_features(p, grid, q_0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    BatterySeries::new(id, profiles.iter().map(|p| p.cycle).collect(), features, q_0)
}

/// `n` entries at indices `round(i·(len−1)/(n−1))`; endpoints always kept.
pub fn uniform_sample(series: &BatterySeries, n: usize) -> Result<BatterySeries> {
    let len = series.len();
    if n < 2 || len < n {
        return Err(DataError::TooShort { len, n });
    }
    let (num, den) = (len - 1, n - 1);
    // round half up in integer arithmetic
    let mut idx: Vec<usize> = (0..n).map(|i| (2 * i * num + den) / (2 * den)).collect();
    idx.dedup();
    let mut out = series.subset(idx);
    out.cycle_map = CycleMap::new(out.cycles[0] as f64, out.cycles[out.len() - 1] as f64)
        .map_err(|e| DataError::InvalidSeries(e.to_string()))?;
    Ok(out)
}

/// Number of training entries for a split: `floor(fraction · n_tot)`.
pub fn n_train(n_tot: usize, fraction: f64) -> usize {
    // the tolerance absorbs products such as 0.29·100 = 28.999999999999996
    (fraction * n_tot as f64 + 1e-9).floor() as usize
}

/// Earliest `floor(fraction·N)` entries for training, the rest for testing.
pub fn chrono_split(series: &BatterySeries, fraction: f64) -> Result<(BatterySeries, BatterySeries)> {
    let n_tot = series.len();
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::DegenerateSplit { fraction, n_tot });
    }
    let n_tp = n_train(n_tot, fraction);
    if n_tp == 0 || n_tp >= n_tot {
        return Err(DataError::DegenerateSplit { fraction, n_tot });
    }
    Ok((series.subset(0..n_tp), series.subset(n_tp..n_tot)))
}

fn parse_f64(file: &Path, line: usize, field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| DataError::Parse {
            file: file.to_path_buf(),
            line,
            msg: format!("bad number '{}'", field.trim()),
        })
}

/// Data lines of a CSV after checking the header; yields `(line_no, fields)`.
fn csv_rows(file: &Path, text: &str, header: &str) -> Result<Vec<(usize, Vec<String>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((_, h)) => {
            return Err(DataError::Parse {
                file: file.to_path_buf(),
                line: 1,
                msg: format!("expected header '{header}', got '{}'", h.trim()),
            })
        }
        None => {
            return Err(DataError::Parse {
                file: file.to_path_buf(),
                line: 1,
                msg: "empty file".into(),
            })
        }
    }
    let width = header.split(',').count();
    let mut out = Vec::new();
    for (i, l) in lines {
        if l.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = l.split(',').map(|s| s.trim().to_string()).collect();
        if fields.len() != width {
            return Err(DataError::Parse {
                file: file.to_path_buf(),
                line: i + 1,
                msg: format!("expected {width} fields, got {}", fields.len()),
            });
        }
        out.push((i + 1, fields));
    }
    Ok(out)
}

pub const CAPACITY_FILE: &str = "capacity.csv";
pub const TRUTH_FILE: &str = "truth.csv";

pub fn cycle_file_name(cycle: usize) -> String {
    format!("cycle_{cycle}.csv")
}

/// Reads one cycle file.
pub fn read_cycle_file(path: &Path, cycle: usize, capacity_ah: f64) -> Result<ChargeProfile> {
    let text = fs::read_to_string(path)?;
    let mut samples: Vec<Sample> = Vec::new();
    for (line, f) in csv_rows(path, &text, "time_s,voltage_v,current_a")? {
        let s = Sample {
            time_s: parse_f64(path, line, &f[0])?,
            voltage_v: parse_f64(path, line, &f[1])?,
            current_a: parse_f64(path, line, &f[2])?,
        };
        if samples.last().is_some_and(|p| s.time_s <= p.time_s) {
            return Err(DataError::NonMonotoneTime {
                file: path.to_path_buf(),
                line,
            });
        }
        samples.push(s);
    }
    Ok(ChargeProfile::new(cycle, samples, capacity_ah)?)
}

/// Loads every cycle listed in the capacity index, sorted by cycle.
pub fn load_cycles(dir: &Path) -> Result<Vec<ChargeProfile>> {
    let index = dir.join(CAPACITY_FILE);
    if !index.is_file() {
        return Err(DataError::MissingCapacityIndex(index));
    }
    let text = fs::read_to_string(&index)?;
    let mut caps = BTreeMap::new();
    for (line, f) in csv_rows(&index, &text, "cycle,capacity_ah")? {
        let cycle: usize = f[0].parse().map_err(|_| DataError::Parse {
            file: index.clone(),
            line,
            msg: format!("bad cycle '{}'", f[0]),
        })?;
        let cap = parse_f64(&index, line, &f[1])?;
        if caps.insert(cycle, cap).is_some() {
            return Err(DataError::Parse {
                file: index.clone(),
                line,
                msg: format!("cycle {cycle} listed twice"),
            });
        }
    }
    if caps.is_empty() {
        return Err(DataError::Empty(format!("{} lists no cycles", index.display())));
    }
    caps.into_iter()
        .map(|(cycle, cap)| {
            let path = dir.join(cycle_file_name(cycle));
            if !path.is_file() {
                return Err(DataError::MissingCycleFile { file: path, cycle });
            }
            read_cycle_file(&path, cycle, cap)
        })
        .collect()
}

pub fn cycle_csv(p: &ChargeProfile) -> String {
    let mut s = String::from("time_s,voltage_v,current_a\n");
    for x in &p.samples {
        s.push_str(&format!("{},{},{}\n", x.time_s, x.voltage_v, x.current_a));
    }
    s
}

pub fn capacity_csv(profiles: &[ChargeProfile]) -> String {
    let mut s = String::from("cycle,capacity_ah\n");
    for p in profiles {
        s.push_str(&format!("{},{}\n", p.cycle, p.capacity_ah));
    }
    s
}

/// Writes the capacity index and one file per cycle into `dir`.
pub fn write_cycles(dir: &Path, profiles: &[ChargeProfile]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CAPACITY_FILE), capacity_csv(profiles))?;
    for p in profiles {
        fs::write(dir.join(cycle_file_name(p.cycle)), cycle_csv(p))?;
    }
    Ok(())
}

/// Shape of the synthetic charging curve
/// `v(x) = v_start + (v_end − v_start)·xᵏ / (xᵏ + r(1−x)ᵏ)` over normalized time
/// `x`, with `k = k0 + k1(1−SOH)` and `r = r0 + r1(1−SOH)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveShape {
    pub v_start: f64,
    pub v_end: f64,
    /// CC duration of a fresh cell; scales with SOH.
    pub duration_s: f64,
    pub k0: f64,
    pub k1: f64,
    pub r0: f64,
    pub r1: f64,
    pub n_samples: usize,
    pub current_a: f64,
}

impl Default for CurveShape {
    fn default() -> Self {
        Self {
            v_start: 2.9,
            v_end: 4.25,
            duration_s: 3600.0,
            k0: 1.5,
            k1: 2.0,
            r0: 1.0,
            r1: 3.0,
            n_samples: 400,
            current_a: 1.0,
        }
    }
}

impl CurveShape {
    pub fn params(&self, soh: f64) -> (f64, f64) {
        (self.k0 + self.k1 * (1.0 - soh), self.r0 + self.r1 * (1.0 - soh))
    }

    /// Curve fraction `s(x)` in `[0, 1]`.
    pub fn fraction(&self, soh: f64, x: f64) -> f64 {
        let (k, r) = self.params(soh);
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let a = x.powf(k);
        a / (a + r * (1.0 - x).powf(k))
    }

    pub fn voltage(&self, soh: f64, x: f64) -> f64 {
        self.v_start + (self.v_end - self.v_start) * self.fraction(soh, x)
    }

    /// Normalized time at which the curve reaches `v`.
    pub fn inverse(&self, soh: f64, v: f64) -> f64 {
        let u = (v - self.v_start) / (self.v_end - self.v_start);
        let (k, r) = self.params(soh);
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        let q = (r * u / (1.0 - u)).powf(1.0 / k);
        q / (1.0 + q)
    }
}

/// Parametric degradation `SOH(k) = 1 − a·k^b − c·(e^{d·k} − 1)` plus noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub q_0: f64,
    pub n_cycles: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub curve: CurveShape,
    /// Standard deviation of additive SOH noise on the measured capacity.
    pub noise_sigma: f64,
    /// Standard deviation of additive voltage noise; 0 keeps curves exact.
    pub curve_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            q_0: 2.0,
            n_cycles: 400,
            a: 4e-4,
            b: 1.0,
            c: 0.01,
            d: 0.006,
            curve: CurveShape::default(),
            noise_sigma: 0.0,
            curve_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Cycles scanned when looking for the true end of life.
pub const EOL_SCAN_LIMIT: usize = 1_000_000;

impl SynthSpec {
    pub fn soh_noiseless(&self, k: f64) -> f64 {
        let power = if self.a == 0.0 { 0.0 } else { self.a * k.powf(self.b) };
        let knee = if self.c == 0.0 { 0.0 } else { self.c * (self.d * k).exp_m1() };
        1.0 - power - knee
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        for (name, v) in [("a", self.a), ("b", self.b), ("c", self.c), ("d", self.d)] {
            // negative terms make the noiseless SOH non-monotone
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("parameter '{name}' must be finite and >= 0 (non-monotone SOH), got {v}"));
            }
        }
        if !(self.q_0 > 0.0) {
            return bad(format!("parameter 'q_0' must be positive, got {}", self.q_0));
        }
        if self.n_cycles < 2 {
            return bad(format!("parameter 'n_cycles' must be at least 2, got {}", self.n_cycles));
        }
        if !(self.noise_sigma >= 0.0) || !(self.curve_noise_sigma >= 0.0) {
            return bad("noise levels must be >= 0".into());
        }
        let c = &self.curve;
        if !(c.v_end > c.v_start) || !(c.duration_s > 0.0) || c.n_samples < 2 {
            return bad("curve needs v_end > v_start, positive duration and at least 2 samples".into());
        }
        if !(c.k0 > 0.0) || !(c.r0 > 0.0) || c.k1 < 0.0 || c.r1 < 0.0 {
            return bad("curve shape needs k0, r0 > 0 and k1, r1 >= 0".into());
        }
        let last = self.soh_noiseless(self.n_cycles as f64);
        if !(last > 0.05) {
            return bad(format!(
                "noiseless SOH falls to {last} by cycle {}; capacities must stay positive",
                self.n_cycles
            ));
        }
        Ok(())
    }

    /// First cycle with noiseless SOH below 0.8, interpolated between
    /// integer cycles.
    pub fn true_eol(&self) -> Eol {
        let mut prev = self.soh_noiseless(0.0);
        for k in 1..=EOL_SCAN_LIMIT {
            let cur = self.soh_noiseless(k as f64);
            if cur < model::EOL_THRESHOLD {
                let w = (prev - model::EOL_THRESHOLD) / (prev - cur);
                return Eol::Cycle((k - 1) as f64 + w);
            }
            prev = cur;
        }
        Eol::NotReached
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let c = &self.curve;
        [
            ("synth.q_0", self.q_0.to_string()),
            ("synth.n_cycles", self.n_cycles.to_string()),
            ("synth.a", self.a.to_string()),
            ("synth.b", self.b.to_string()),
            ("synth.c", self.c.to_string()),
            ("synth.d", self.d.to_string()),
            ("synth.noise_sigma", self.noise_sigma.to_string()),
            ("synth.curve_noise_sigma", self.curve_noise_sigma.to_string()),
            ("synth.v_start", c.v_start.to_string()),
            ("synth.v_end", c.v_end.to_string()),
            ("synth.duration_s", c.duration_s.to_string()),
            ("synth.k0", c.k0.to_string()),
            ("synth.k1", c.k1.to_string()),
            ("synth.r0", c.r0.to_string()),
            ("synth.r1", c.r1.to_string()),
            ("synth.n_samples", c.n_samples.to_string()),
            ("synth.current_a", c.current_a.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Reads `synth.*` keys; absent keys keep their defaults unless
    /// `require_all` is set.
    pub fn from_pairs(map: &BTreeMap<String, String>, require_all: bool) -> Result<Self> {
        let mut s = Self::default();
        let keys: Vec<String> = s.to_pairs().into_iter().map(|(k, _)| k).collect();
        for k in &keys {
            let Some(v) = map.get(k) else {
                if require_all {
                    return Err(DataError::InvalidSpec(format!("missing key '{k}'")));
                }
                continue;
            };
            let f = || {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| DataError::InvalidSpec(format!("key '{k}': cannot parse '{v}'")))
            };
            let u = || {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| DataError::InvalidSpec(format!("key '{k}': cannot parse '{v}'")))
            };
            match k.as_str() {
                "synth.q_0" => s.q_0 = f()?,
                "synth.n_cycles" => s.n_cycles = u()?,
                "synth.a" => s.a = f()?,
                "synth.b" => s.b = f()?,
                "synth.c" => s.c = f()?,
                "synth.d" => s.d = f()?,
                "synth.noise_sigma" => s.noise_sigma = f()?,
                "synth.curve_noise_sigma" => s.curve_noise_sigma = f()?,
                "synth.v_start" => s.curve.v_start = f()?,
                "synth.v_end" => s.curve.v_end = f()?,
                "synth.duration_s" => s.curve.duration_s = f()?,
                "synth.k0" => s.curve.k0 = f()?,
                "synth.k1" => s.curve.k1 = f()?,
                "synth.r0" => s.curve.r0 = f()?,
                "synth.r1" => s.curve.r1 = f()?,
                "synth.n_samples" => s.curve.n_samples = u()?,
                "synth.current_a" => s.curve.current_a = f()?,
                _ => unreachable!("key list comes from to_pairs"),
            }
        }
        Ok(s)
    }
}

/// Generated cycles and their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthBattery {
    pub profiles: Vec<ChargeProfile>,
    /// Noiseless SOH per generated cycle.
    pub soh_true: Vec<f64>,
    pub true_eol: Eol,
}

/// Cycles `1..=n_cycles` with capacity `q_0·(SOH(k) + noise)` and a charging
/// curve whose shape follows the noiseless SOH.
pub fn synth_battery(spec: &SynthSpec) -> Result<SynthBattery> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cap_noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let v_noise = Normal::new(0.0, spec.curve_noise_sigma).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let c = &spec.curve;
    let mut profiles = Vec::with_capacity(spec.n_cycles);
    let mut soh_true = Vec::with_capacity(spec.n_cycles);
    for k in 1..=spec.n_cycles {
        let soh = spec.soh_noiseless(k as f64);
        let measured = if spec.noise_sigma > 0.0 { soh + cap_noise.sample(&mut rng) } else { soh };
        if !(measured > 0.0) {
            return Err(DataError::InvalidSpec(format!("cycle {k}: capacity noise drove SOH to {measured}")));
        }
        let duration = c.duration_s * soh;
        let samples = (0..c.n_samples)
            .map(|i| {
                let x = i as f64 / (c.n_samples - 1) as f64;
                let mut v = c.voltage(soh, x);
                if spec.curve_noise_sigma > 0.0 {
                    v += v_noise.sample(&mut rng);
                }
                Sample {
                    time_s: x * duration,
                    voltage_v: v,
                    current_a: c.current_a,
                }
            })
            .collect();
        profiles.push(ChargeProfile::new(k, samples, spec.q_0 * measured)?);
        soh_true.push(soh);
    }
    Ok(SynthBattery {
        profiles,
        soh_true,
        true_eol: spec.true_eol(),
    })
}

/// `cycle,soh_true,true_eol`; the EOL column repeats the same value (or `NA`).
pub fn truth_csv(b: &SynthBattery) -> String {
    let eol = match b.true_eol {
        Eol::Cycle(c) => c.to_string(),
        Eol::NotReached => "NA".to_string(),
    };
    let mut s = String::from("cycle,soh_true,true_eol\n");
    for (p, soh) in b.profiles.iter().zip(&b.soh_true) {
        s.push_str(&format!("{},{},{}\n", p.cycle, soh, eol));
    }
    s
}

/// Reads the EOL column of a truth file.
pub fn read_true_eol(path: &Path) -> Result<Eol> {
    let text = fs::read_to_string(path)?;
    let rows = csv_rows(path, &text, "cycle,soh_true,true_eol")?;
    let (line, f) = rows
        .first()
        .ok_or_else(|| DataError::Empty(format!("{} has no rows", path.display())))?;
    if f[2] == "NA" {
        Ok(Eol::NotReached)
    } else {
        Ok(Eol::Cycle(parse_f64(path, *line, &f[2])?))
    }
}

/// Writes cycles, capacity index and truth file for a synthetic battery.
pub fn write_synth(dir: &Path, b: &SynthBattery) -> Result<()> {
    write_cycles(dir, &b.profiles)?;
    fs::write(dir.join(TRUTH_FILE), truth_csv(b))?;
    Ok(())
}

/// End of life measured on a series: first downward crossing of 0.8.
pub fn measured_eol(series: &BatterySeries) -> Eol {
    let cycles: Vec<f64> = series.cycles.iter().map(|&c| c as f64).collect();
    model::first_crossing(&cycles, &series.soh(), model::EOL_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::GridPreset;

    fn toy_series(n: usize) -> BatterySeries {
        let cycles: Vec<usize> = (1..=n).collect();
        let features = cycles
            .iter()
            .map(|&c| FeatureVector {
                soh: 1.0 - 0.001 * c as f64,
                times: vec![0.0, 0.5, 1.0],
            })
            .collect();
        BatterySeries::new("toy", cycles, features, 2.0).unwrap()
    }

    #[test]
    fn uniform_sample_examples() {
        let s = toy_series(80);
        assert_eq!(uniform_sample(&s, 80).unwrap(), s);
        let s = toy_series(159);
        let u = uniform_sample(&s, 80).unwrap();
        assert_eq!(u.len(), 80);
        assert!(u.cycles.iter().enumerate().all(|(i, &c)| c == 2 * i + 1));
        let u = uniform_sample(&toy_series(1000), 80).unwrap();
        assert_eq!((u.cycles[0], u.cycles[79]), (1, 1000));
        assert_eq!(uniform_sample(&u, 80).unwrap(), u);
        assert!(uniform_sample(&toy_series(10), 11).is_err());
        assert!(uniform_sample(&toy_series(10), 1).is_err());
    }

    #[test]
    fn split_examples() {
        let s = toy_series(80);
        let (tr, te) = chrono_split(&s, 0.7).unwrap();
        assert_eq!((tr.len(), te.len()), (56, 24));
        assert_eq!(chrono_split(&s, 0.5).unwrap().0.len(), 40);
        assert_eq!(chrono_split(&s, 0.9).unwrap().1.len(), 8);
        assert!(te.cycles[0] > *tr.cycles.last().unwrap());
        assert_eq!(tr.cycle_map, s.cycle_map);
        let mut joined = tr.cycles.clone();
        joined.extend(&te.cycles);
        assert_eq!(joined, s.cycles);
        assert!(chrono_split(&toy_series(2), 0.2).is_err());
        assert!(chrono_split(&s, 1.0).is_err());
        assert_eq!(n_train(100, 0.29), 29);
    }

    #[test]
    fn synth_degradation_examples() {
        let flat = SynthSpec { a: 0.0, b: 0.0, c: 0.0, d: 0.0, n_cycles: 20, ..SynthSpec::default() };
        let b = synth_battery(&flat).unwrap();
        assert!(b.soh_true.iter().all(|&s| s == 1.0));
        assert_eq!(b.true_eol, Eol::NotReached);

        let linear = SynthSpec { a: 2e-4, b: 1.0, c: 0.0, d: 0.0, n_cycles: 50, ..SynthSpec::default() };
        assert!((linear.soh_noiseless(10.0) - (1.0 - 2e-3)).abs() < 1e-15);
        let eol = linear.true_eol().cycle().unwrap();
        assert!((eol - 1000.0).abs() < 1e-6, "{eol}");

        let bad = SynthSpec { c: -0.1, ..SynthSpec::default() };
        let msg = synth_battery(&bad).unwrap_err().to_string();
        assert!(msg.contains("'c'"), "{msg}");
    }

    #[test]
    fn synth_is_deterministic_and_noise_is_seeded() {
        let spec = SynthSpec { noise_sigma: 0.002, curve_noise_sigma: 1e-4, n_cycles: 30, ..SynthSpec::default() };
        let a = synth_battery(&spec).unwrap();
        let b = synth_battery(&spec).unwrap();
        assert_eq!(a, b);
        let c = synth_battery(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.profiles[0].capacity_ah, c.profiles[0].capacity_ah);
    }

    #[test]
    fn noiseless_soh_matches_generator() {
        let spec = SynthSpec::default();
        let b = synth_battery(&spec).unwrap();
        for (p, s) in b.profiles.iter().zip(&b.soh_true) {
            let got = features::soh(p.capacity_ah, spec.q_0).unwrap();
            assert!((got - spec.soh_noiseless(p.cycle as f64)).abs() < 1e-12);
            assert!((got - s).abs() < 1e-12);
        }
        assert!(b.soh_true.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn curve_inverse_round_trips() {
        let c = CurveShape::default();
        for soh in [1.0, 0.9, 0.75] {
            for i in 1..20 {
                let x = i as f64 / 20.0;
                let v = c.voltage(soh, x);
                assert!((c.inverse(soh, v) - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_round_trip_reproduces_features() {
        let spec = SynthSpec { n_cycles: 12, ..SynthSpec::default() };
        let b = synth_battery(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synth(dir.path(), &b).unwrap();
        let loaded = load_cycles(dir.path()).unwrap();
        assert_eq!(loaded, b.profiles);
        let grid = VoltageGrid::preset(GridPreset::Nasa);
        let s1 = series_from_profiles("x", &b.profiles, &grid, spec.q_0).unwrap();
        let s2 = series_from_profiles("x", &loaded, &grid, spec.q_0).unwrap();
        for (f1, f2) in s1.features.iter().zip(&s2.features) {
            for (a, c) in f1.to_vec().iter().zip(f2.to_vec()) {
                assert!((a - c).abs() < 1e-9);
            }
        }
        assert_eq!(read_true_eol(&dir.path().join(TRUTH_FILE)).unwrap(), b.true_eol);
    }

    #[test]
    fn loader_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_cycles(dir.path()), Err(DataError::MissingCapacityIndex(_))));

        fs::write(dir.path().join(CAPACITY_FILE), "cycle,capacity_ah\n3,1.9\n1,2.0\n2,1.95\n").unwrap();
        for k in 1..=3 {
            fs::write(
                dir.path().join(cycle_file_name(k)),
                "time_s,voltage_v,current_a\n0,3.0,1\n10,3.5,1\n20,4.0,1\n",
            )
            .unwrap();
        }
        let p = load_cycles(dir.path()).unwrap();
        assert_eq!(p.iter().map(|p| p.cycle).collect::<Vec<_>>(), vec![1, 2, 3]);

        fs::write(
            dir.path().join(cycle_file_name(2)),
            "time_s,voltage_v,current_a\n0,3.0,1\n10,3.5,1\n5,4.0,1\n",
        )
        .unwrap();
        match load_cycles(dir.path()) {
            Err(DataError::NonMonotoneTime { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(dir.path().join(cycle_file_name(2)), "time_s,voltage_v,current_a\n0,3.0,1\n10,x,1\n").unwrap();
        match load_cycles(dir.path()) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn synth_spec_pairs_round_trip() {
        let spec = SynthSpec { a: 1.5e-4, seed: 0, ..SynthSpec::default() };
        let map: BTreeMap<String, String> = spec.to_pairs().into_iter().collect();
        assert_eq!(SynthSpec::from_pairs(&map, true).unwrap(), spec);
        let mut partial = map.clone();
        partial.remove("synth.k1");
        assert!(SynthSpec::from_pairs(&partial, true).unwrap_err().to_string().contains("synth.k1"));
        assert_eq!(SynthSpec::from_pairs(&partial, false).unwrap(), spec);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_partitions_in_order(n in 4usize..200, frac in 0.05f64..0.95) {
                let s = toy_series(n);
                if let Ok((tr, te)) = chrono_split(&s, frac) {
                    prop_assert_eq!(tr.len() + te.len(), n);
                    prop_assert_eq!(tr.len(), (frac * n as f64 + 1e-9).floor() as usize);
                    prop_assert!(tr.cycles.last().unwrap() < &te.cycles[0]);
                }
            }

            #[test]
            fn uniform_sample_keeps_endpoints_and_is_idempotent(len in 2usize..400, n in 2usize..100) {
                prop_assume!(n <= len);
                let s = toy_series(len);
                let u = uniform_sample(&s, n).unwrap();
                prop_assert_eq!(u.len(), n);
                prop_assert_eq!(u.cycles[0], 1);
                prop_assert_eq!(*u.cycles.last().unwrap(), len);
                prop_assert_eq!(uniform_sample(&u, n).unwrap(), u);
            }
        }
    }
}
