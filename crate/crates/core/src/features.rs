//! Charging-curve features: SOH and normalized charging times at fixed
//! voltages of the constant-current phase.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("capacity must be positive, got {0}")]
    NonPositiveCapacity(f64),
    #[error("profile spans {v_min}..{v_max} V and does not cover {v_lo}..{v_hi} V")]
    RangeNotCovered { v_lo: f64, v_hi: f64, v_min: f64, v_max: f64 },
    #[error("current varies by {cv:.3} (coefficient of variation) inside {v_lo}..{v_hi} V")]
    NotConstantCurrent { cv: f64, v_lo: f64, v_hi: f64 },
    #[error("voltage {v} outside window span {lo}..{hi}")]
    OutOfSpan { v: f64, lo: f64, hi: f64 },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid voltage grid: {0}")]
    InvalidGrid(String),
    #[error("need at least {needed} feature vectors, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Above this current coefficient of variation a window is flagged.
pub const CC_WARN_CV: f64 = 0.05;
/// Above this it is rejected.
pub const CC_ERROR_CV: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub time_s: f64,
    pub voltage_v: f64,
    pub current_a: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChargeProfile {
    pub cycle: usize,
    pub samples: Vec<Sample>,
    pub capacity_ah: f64,
}

impl ChargeProfile {
    pub fn new(cycle: usize, samples: Vec<Sample>, capacity_ah: f64) -> Result<Self> {
        if !(capacity_ah > 0.0) || !capacity_ah.is_finite() {
            return Err(FeatureError::NonPositiveCapacity(capacity_ah));
        }
        if samples.len() < 2 {
            return Err(FeatureError::InvalidProfile(format!("cycle {cycle}: fewer than 2 samples")));
        }
        for (i, s) in samples.iter().enumerate() {
            if !(s.time_s.is_finite() && s.voltage_v.is_finite() && s.current_a.is_finite()) {
                return Err(FeatureError::InvalidProfile(format!("cycle {cycle}: non-finite sample {i}")));
            }
            if i > 0 && !(s.time_s > samples[i - 1].time_s) {
                return Err(FeatureError::InvalidProfile(format!(
                    "cycle {cycle}: time not strictly increasing at sample {i}"
                )));
            }
        }
        Ok(Self {
            cycle,
            samples,
            capacity_ah,
        })
    }
}

/// `q_k / q_0`.
pub fn soh(q_k: f64, q_0: f64) -> Result<f64> {
    for q in [q_k, q_0] {
        if !(q > 0.0) || !q.is_finite() {
            return Err(FeatureError::NonPositiveCapacity(q));
        }
    }
    Ok(q_k / q_0)
}

/// Samples of one constant-current window, voltages strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CcWindow {
    pub samples: Vec<Sample>,
    pub current_cv: f64,
    /// Current variation above [`CC_WARN_CV`].
    pub warning: bool,
}

/// Drops every sample whose voltage does not exceed the last kept one, so
/// the first sample of a tied run survives.
pub fn monotone_cleanup(samples: &[Sample]) -> Vec<Sample> {
    let mut out: Vec<Sample> = Vec::with_capacity(samples.len());
    for s in samples {
        if out.last().is_none_or(|l| s.voltage_v > l.voltage_v) {
            out.push(*s);
        }
    }
    out
}

/// The run from the last sample at or below `v_lo` to the first sample at
/// or above `v_hi`, after monotone cleanup.
pub fn cc_window(profile: &ChargeProfile, v_lo: f64, v_hi: f64) -> Result<CcWindow> {
    if !(v_hi > v_lo) {
        return Err(FeatureError::InvalidGrid(format!("window {v_lo}..{v_hi} is empty")));
    }
    let clean = monotone_cleanup(&profile.samples);
    let not_covered = || FeatureError::RangeNotCovered {
        v_lo,
        v_hi,
        v_min: clean.first().map_or(f64::NAN, |s| s.voltage_v),
        v_max: clean.last().map_or(f64::NAN, |s| s.voltage_v),
    };
    let start = clean.iter().rposition(|s| s.voltage_v <= v_lo).ok_or_else(not_covered)?;
    let end = start + clean[start..].iter().position(|s| s.voltage_v >= v_hi).ok_or_else(not_covered)?;
    let samples = clean[start..=end].to_vec();
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.current_a).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.current_a - mean).powi(2)).sum::<f64>() / n;
    let cv = if mean != 0.0 { var.sqrt() / mean.abs() } else { f64::INFINITY };
    if cv > CC_ERROR_CV {
        return Err(FeatureError::NotConstantCurrent { cv, v_lo, v_hi });
    }
    Ok(CcWindow {
        samples,
        current_cv: cv,
        warning: cv > CC_WARN_CV,
    })
}

/// Time at voltage `v` by linear interpolation between the bracketing
/// samples of a strictly increasing voltage run.
pub fn time_at_voltage(samples: &[Sample], v: f64) -> Result<f64> {
    let (lo, hi) = match (samples.first(), samples.last()) {
        (Some(a), Some(b)) => (a.voltage_v, b.voltage_v),
        _ => return Err(FeatureError::OutOfSpan { v, lo: f64::NAN, hi: f64::NAN }),
    };
    if !(v >= lo && v <= hi) {
        return Err(FeatureError::OutOfSpan { v, lo, hi });
    }
    // first index whose voltage is >= v
    let j = samples.partition_point(|s| s.voltage_v < v);
    let b = samples[j];
    if b.voltage_v == v || j == 0 {
        return Ok(b.time_s);
    }
    let a = samples[j - 1];
    let w = (v - a.voltage_v) / (b.voltage_v - a.voltage_v);
    Ok(a.time_s + w * (b.time_s - a.time_s))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub v_lo: f64,
    pub v_hi: f64,
    pub n_points: usize,
}

impl Segment {
    /// Equidistant voltages including both endpoints.
    pub fn voltages(&self) -> Vec<f64> {
        let n = self.n_points;
        let step = (self.v_hi - self.v_lo) / (n - 1) as f64;
        let mut v: Vec<f64> = (0..n).map(|i| self.v_lo + i as f64 * step).collect();
        v[n - 1] = self.v_hi;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridPreset {
    Oxford,
    Nasa,
    Tju,
    Hust,
}

impl FromStr for GridPreset {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oxford" => Ok(Self::Oxford),
            "nasa" => Ok(Self::Nasa),
            "tju" => Ok(Self::Tju),
            "hust" => Ok(Self::Hust),
            _ => Err(FeatureError::InvalidGrid(format!("unknown preset '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageGrid {
    segments: Vec<Segment>,
}

impl VoltageGrid {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(FeatureError::InvalidGrid("no segments".into()));
        }
        for (i, s) in segments.iter().enumerate() {
            if s.n_points < 2 || !(s.v_hi > s.v_lo) || !s.v_lo.is_finite() || !s.v_hi.is_finite() {
                return Err(FeatureError::InvalidGrid(format!(
                    "segment {}: need v_hi > v_lo and at least 2 points, got {}:{}:{}",
                    i + 1,
                    s.v_lo,
                    s.v_hi,
                    s.n_points
                )));
            }
            if i > 0 && !(s.v_lo > segments[i - 1].v_hi) {
                return Err(FeatureError::InvalidGrid(format!(
                    "segment {} overlaps or precedes segment {}",
                    i + 1,
                    i
                )));
            }
        }
        Ok(Self { segments })
    }

    pub fn preset(p: GridPreset) -> Self {
        let seg = |v_lo, v_hi, n_points| Segment { v_lo, v_hi, n_points };
        let segments = match p {
            GridPreset::Oxford => vec![seg(3.0, 4.2, 21)],
            GridPreset::Nasa | GridPreset::Tju => vec![seg(3.6, 4.2, 19)],
            GridPreset::Hust => vec![seg(3.15, 3.45, 13), seg(3.475, 3.55, 4)],
        };
        Self::new(segments).expect("presets are valid")
    }

    /// Parses `lo:hi:n[,lo:hi:n...]`.
    pub fn parse_segments(spec: &str) -> Result<Self> {
        let bad = |m: String| FeatureError::InvalidGrid(m);
        let segments = spec
            .split(',')
            .map(|part| {
                let f: Vec<&str> = part.trim().split(':').collect();
                if f.len() != 3 {
                    return Err(bad(format!("segment '{part}' is not lo:hi:n")));
                }
                Ok(Segment {
                    v_lo: f[0].parse().map_err(|_| bad(format!("bad voltage '{}'", f[0])))?,
                    v_hi: f[1].parse().map_err(|_| bad(format!("bad voltage '{}'", f[1])))?,
                    n_points: f[2].parse().map_err(|_| bad(format!("bad point count '{}'", f[2])))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(segments)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn n_v(&self) -> usize {
        self.segments.iter().map(|s| s.n_points).sum()
    }

    pub fn voltages(&self) -> Vec<f64> {
        self.segments.iter().flat_map(Segment::voltages).collect()
    }

    pub fn v_min(&self) -> f64 {
        self.segments[0].v_lo
    }

    pub fn v_max(&self) -> f64 {
        self.segments[self.segments.len() - 1].v_hi
    }
}

impl fmt::Display for VoltageGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.segments.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}:{}:{}", s.v_lo, s.v_hi, s.n_points)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub soh: f64,
    pub times: Vec<f64>,
}

impl FeatureVector {
    /// `(SOH, t_1, ..., t_{N_V})`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.times.len() + 1);
        v.push(self.soh);
        v.extend_from_slice(&self.times);
        v
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            soh: v[0],
            times: v[1..].to_vec(),
        }
    }
}

/// Features plus any windows whose current variation was flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub features: FeatureVector,
    /// Indices of segments whose window exceeded [`CC_WARN_CV`].
    pub cc_warnings: Vec<usize>,
}

/// Normalized times at every grid voltage: each segment is read from its
/// own CC window, and all times are mapped affinely so the lowest grid
/// voltage sits at 0 and the highest at 1.
pub fn extract(profile: &ChargeProfile, grid: &VoltageGrid, q_0: f64) -> Result<Extraction> {
    let soh = soh(profile.capacity_ah, q_0)?;
    let mut raw = Vec::with_capacity(grid.n_v());
    let mut cc_warnings = Vec::new();
    for (i, seg) in grid.segments().iter().enumerate() {
        let w = cc_window(profile, seg.v_lo, seg.v_hi)?;
        if w.warning {
            cc_warnings.push(i);
        }
        for v in seg.voltages() {
            raw.push(time_at_voltage(&w.samples, v)?);
        }
    }
    let t_start = raw[0];
    let t_end = raw[raw.len() - 1];
    let span = t_end - t_start;
    if !(span > 0.0) {
        return Err(FeatureError::InvalidProfile(format!(
            "cycle {}: charging time does not advance across the grid",
            profile.cycle
        )));
    }
    let times = raw.iter().map(|t| (t - t_start) / span).collect();
    Ok(Extraction {
        features: FeatureVector { soh, times },
        cc_warnings,
    })
}

pub fn extract_features(profile: &ChargeProfile, grid: &VoltageGrid, q_0: f64) -> Result<FeatureVector> {
    Ok(extract(profile, grid, q_0)?.features)
}

/// Symmetric Pearson correlation matrix; `None` where a column is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlation {
    pub n: usize,
    pub entries: Vec<Option<f64>>,
}

impl Correlation {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i * self.n + j]
    }
}

/// Pearson coefficients between columns of `rows` (two-pass: means first,
/// then centred sums).
pub fn feature_correlation(rows: &[Vec<f64>]) -> Result<Correlation> {
    if rows.len() < 3 {
        return Err(FeatureError::InsufficientData { needed: 3, got: rows.len() });
    }
    let n = rows[0].len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(FeatureError::InvalidProfile("feature rows differ in length".into()));
    }
    let len = rows.len() as f64;
    let means: Vec<f64> = (0..n).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / len).collect();
    let mut cov = vec![0.0; n * n];
    for r in rows {
        for i in 0..n {
            let di = r[i] - means[i];
            for j in i..n {
                cov[i * n + j] += di * (r[j] - means[j]);
            }
        }
    }
    let mut entries = vec![None; n * n];
    for i in 0..n {
        for j in i..n {
            let (vi, vj) = (cov[i * n + i], cov[j * n + j]);
            let e = if vi > 0.0 && vj > 0.0 {
                Some(if i == j { 1.0 } else { (cov[i * n + j] / (vi.sqrt() * vj.sqrt())).clamp(-1.0, 1.0) })
            } else {
                None
            };
            entries[i * n + j] = e;
            entries[j * n + i] = e;
        }
    }
    Ok(Correlation { n, entries })
}

/// Feature table with header `cycle,soh,t_1,...,t_{N_V}`.
pub fn write_feature_csv(rows: &[(usize, FeatureVector)]) -> String {
    let n_v = rows.first().map_or(0, |r| r.1.times.len());
    let mut s = String::from("cycle,soh");
    for i in 1..=n_v {
        s.push_str(&format!(",t_{i}"));
    }
    s.push('\n');
    for (cycle, f) in rows {
        s.push_str(&cycle.to_string());
        s.push(',');
        s.push_str(&f.soh.to_string());
        for t in &f.times {
            s.push(',');
            s.push_str(&t.to_string());
        }
        s.push('\n');
    }
    s
}

pub fn parse_feature_csv(text: &str) -> Result<Vec<(usize, FeatureVector)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(FeatureError::Parse {
        line: 1,
        msg: "empty feature file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let n_v = cols.len().saturating_sub(2);
    let expected: Vec<String> = ["cycle".to_string(), "soh".to_string()]
        .into_iter()
        .chain((1..=n_v).map(|i| format!("t_{i}")))
        .collect();
    if cols != expected || n_v == 0 {
        return Err(FeatureError::Parse {
            line: 1,
            msg: format!("expected header 'cycle,soh,t_1,...', got '{header}'"),
        });
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n_v + 2 {
            return Err(FeatureError::Parse {
                line: line_no,
                msg: format!("expected {} fields, got {}", n_v + 2, fields.len()),
            });
        }
        let cycle = fields[0].parse().map_err(|_| FeatureError::Parse {
            line: line_no,
            msg: format!("bad cycle '{}'", fields[0]),
        })?;
        let vals = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| FeatureError::Parse {
                    line: line_no,
                    msg: format!("bad number '{f}'"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if out.last().is_some_and(|(c, _): &(usize, FeatureVector)| cycle <= *c) {
            return Err(FeatureError::Parse {
                line: line_no,
                msg: format!("cycle {cycle} is not after the previous row"),
            });
        }
        out.push((cycle, FeatureVector::from_slice(&vals)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(points: &[(f64, f64)], n: usize, current: f64) -> ChargeProfile {
        // piecewise-linear voltage through (time, voltage) knots, n samples per piece
        let mut samples = Vec::new();
        for w in points.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            for i in 0..n {
                let a = i as f64 / n as f64;
                samples.push(Sample {
                    time_s: t0 + a * (t1 - t0),
                    voltage_v: v0 + a * (v1 - v0),
                    current_a: current,
                });
            }
        }
        let &(t, v) = points.last().unwrap();
        samples.push(Sample {
            time_s: t,
            voltage_v: v,
            current_a: current,
        });
        ChargeProfile::new(1, samples, 1.0).unwrap()
    }

    #[test]
    fn soh_examples() {
        assert_eq!(soh(2.0, 2.0).unwrap(), 1.0);
        assert!((soh(1.6, 2.0).unwrap() - 0.8).abs() < 1e-15);
        assert!((soh(0.74 * 0.9, 0.74).unwrap() - 0.9).abs() < 1e-15);
        assert!(soh(0.0, 2.0).is_err());
        assert!(soh(1.0, -1.0).is_err());
    }

    #[test]
    fn window_examples() {
        let p = ramp(&[(0.0, 3.0), (1200.0, 4.2)], 12, 1.5);
        let w = cc_window(&p, 3.6, 4.2).unwrap();
        assert_eq!(w.samples[0].voltage_v, 3.6);
        assert_eq!(w.samples.last().unwrap().voltage_v, 4.2);
        assert!(!w.warning);

        let peak = ramp(&[(0.0, 3.0), (1000.0, 4.0)], 10, 1.5);
        assert!(matches!(cc_window(&peak, 3.6, 4.2), Err(FeatureError::RangeNotCovered { .. })));

        let mut s = ramp(&[(0.0, 3.0), (1200.0, 4.2)], 12, 1.5).samples;
        s.insert(
            5,
            Sample {
                time_s: (s[4].time_s + s[5].time_s) / 2.0,
                voltage_v: s[4].voltage_v,
                current_a: 1.5,
            },
        );
        let p = ChargeProfile::new(1, s, 1.0).unwrap();
        let w = cc_window(&p, 3.0, 4.2).unwrap();
        assert_eq!(w.samples.len(), 13);
        assert!(w.samples.windows(2).all(|x| x[1].voltage_v > x[0].voltage_v));
    }

    #[test]
    fn window_current_checks() {
        let mut p = ramp(&[(0.0, 3.0), (1200.0, 4.2)], 12, 1.5);
        for (i, s) in p.samples.iter_mut().enumerate() {
            s.current_a = if i % 2 == 0 { 1.4 } else { 1.6 };
        }
        assert!(cc_window(&p, 3.0, 4.2).unwrap().warning);
        for (i, s) in p.samples.iter_mut().enumerate() {
            s.current_a = if i % 2 == 0 { 1.0 } else { 2.0 };
        }
        assert!(matches!(cc_window(&p, 3.0, 4.2), Err(FeatureError::NotConstantCurrent { .. })));
    }

    #[test]
    fn interpolation_examples() {
        let p = ramp(&[(0.0, 3.0), (1200.0, 4.2)], 7, 1.0);
        assert!((time_at_voltage(&p.samples, 3.6).unwrap() - 600.0).abs() < 1e-9);
        let s = &p.samples[3];
        assert_eq!(time_at_voltage(&p.samples, s.voltage_v).unwrap(), s.time_s);
        let p = ramp(&[(0.0, 3.0), (800.0, 4.0), (1200.0, 4.2)], 1, 1.0);
        assert!((time_at_voltage(&p.samples, 4.1).unwrap() - 1000.0).abs() < 1e-9);
        assert!(time_at_voltage(&p.samples, 4.3).is_err());
    }

    #[test]
    fn presets_and_parsing() {
        let ox = VoltageGrid::preset(GridPreset::Oxford);
        assert_eq!(ox.n_v() + 1, 22);
        assert_eq!(VoltageGrid::preset(GridPreset::Nasa).n_v() + 1, 20);
        assert_eq!(VoltageGrid::preset(GridPreset::Tju).n_v() + 1, 20);
        let hust = VoltageGrid::preset(GridPreset::Hust);
        assert_eq!(hust.n_v() + 1, 18);
        assert_eq!(hust.segments().len(), 2);
        assert_eq!(VoltageGrid::parse_segments("3.0:4.2:21").unwrap(), ox);
        assert_eq!(VoltageGrid::parse_segments(&hust.to_string()).unwrap(), hust);
        assert!(VoltageGrid::parse_segments("3.0:4.2").is_err());
        assert!(VoltageGrid::parse_segments("3.0:3.5:4,3.4:3.6:3").is_err());
        assert!(VoltageGrid::parse_segments("3.0:4.2:1").is_err());
        let v = VoltageGrid::preset(GridPreset::Nasa).voltages();
        assert_eq!((v[0], v[18]), (3.6, 4.2));
    }

    #[test]
    fn oxford_linear_ramp_times() {
        let p = ramp(&[(0.0, 3.0), (1200.0, 4.2)], 240, 1.0);
        let f = extract_features(&p, &VoltageGrid::preset(GridPreset::Oxford), 1.0).unwrap();
        assert_eq!(f.times.len(), 21);
        for (i, t) in f.times.iter().enumerate() {
            assert!((t - i as f64 * 0.05).abs() < 1e-12, "{i}: {t}");
        }
        assert_eq!(f.times[0], 0.0);
        assert_eq!(f.times[20], 1.0);
    }

    #[test]
    fn hust_dual_segment() {
        let p = ramp(&[(0.0, 3.0), (900.0, 3.5), (1400.0, 3.6)], 50, 2.0);
        let f = extract_features(&p, &VoltageGrid::preset(GridPreset::Hust), 1.1).unwrap();
        assert_eq!(f.to_vec().len(), 18);
        assert_eq!(f.times[0], 0.0);
        assert_eq!(f.times[16], 1.0);
        assert!(f.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn correlation_examples() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, -(i as f64), 3.0, (i * i) as f64]).collect();
        let c = feature_correlation(&rows).unwrap();
        assert_eq!(c.get(0, 0), Some(1.0));
        assert!((c.get(0, 1).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(c.get(2, 0), None);
        assert_eq!(c.get(2, 2), None);
        assert!(feature_correlation(&rows[..2]).is_err());
    }

    #[test]
    fn correlation_matches_sum_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows: Vec<Vec<f64>> = (0..100).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let c = feature_correlation(&rows).unwrap();
        let n = rows.len() as f64;
        for i in 0..5 {
            for j in 0..5 {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for r in &rows {
                    sx += r[i];
                    sy += r[j];
                    sxx += r[i] * r[i];
                    syy += r[j] * r[j];
                    sxy += r[i] * r[j];
                }
                let want = (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt());
                assert!((c.get(i, j).unwrap() - want).abs() < 1e-10);
                assert_eq!(c.get(i, j), c.get(j, i));
            }
        }
    }

    #[test]
    fn feature_csv_round_trip() {
        let rows = vec![
            (1, FeatureVector { soh: 1.0, times: vec![0.0, 0.123456789012345, 1.0] }),
            (3, FeatureVector { soh: 0.9876543210987654, times: vec![0.0, 0.5, 1.0] }),
        ];
        let text = write_feature_csv(&rows);
        assert!(text.starts_with("cycle,soh,t_1,t_2,t_3\n"));
        assert_eq!(parse_feature_csv(&text).unwrap(), rows);
        let err = parse_feature_csv("cycle,soh,t_1\n1,0.9,0\n2,abc,0\n").unwrap_err();
        assert_eq!(err, FeatureError::Parse { line: 3, msg: "bad number 'abc'".into() });
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn profile(knots: &[f64]) -> ChargeProfile {
            // monotone voltage from cumulative positive increments over 3.0..4.2
            let total: f64 = knots.iter().sum();
            let mut t = 0.0;
            let mut samples = vec![Sample { time_s: 0.0, voltage_v: 2.9, current_a: 1.0 }];
            let n = knots.len();
            for (i, k) in knots.iter().enumerate() {
                t += k;
                let v = 2.9 + 1.4 * (i + 1) as f64 / n as f64;
                samples.push(Sample { time_s: t / total * 3600.0, voltage_v: v, current_a: 1.0 });
            }
            ChargeProfile::new(1, samples, 1.0).unwrap()
        }

        proptest! {
            #[test]
            fn endpoints_monotone_and_unit_invariant(
                knots in proptest::collection::vec(0.01f64..5.0, 20..60),
                exp in -6i32..6,
                scale in 0.001f64..1000.0,
            ) {
                let grid = VoltageGrid::preset(GridPreset::Oxford);
                let p = profile(&knots);
                let f = extract_features(&p, &grid, 1.0).unwrap();
                prop_assert_eq!(f.times[0], 0.0);
                prop_assert_eq!(*f.times.last().unwrap(), 1.0);
                prop_assert!(f.times.windows(2).all(|w| w[1] >= w[0]));
                prop_assert!(f.times.iter().all(|t| (0.0..=1.0).contains(t)));

                let rescale = |c: f64| {
                    let mut q = p.clone();
                    q.samples.iter_mut().for_each(|s| s.time_s *= c);
                    extract_features(&q, &grid, 1.0).unwrap()
                };
                // powers of two rescale exactly; other factors agree to rounding
                prop_assert_eq!(&rescale(2f64.powi(exp)), &f);
                for (a, b) in rescale(scale).times.iter().zip(&f.times) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn grid_spacing_is_uniform(lo in 0.5f64..4.0, width in 0.01f64..2.0, n in 2usize..40) {
                let seg = Segment { v_lo: lo, v_hi: lo + width, n_points: n };
                let v = seg.voltages();
                let step = width / (n - 1) as f64;
                for w in v.windows(2) {
                    prop_assert!(((w[1] - w[0]) - step).abs() < 1e-12);
                }
                prop_assert_eq!(v[0], lo);
                prop_assert_eq!(v[n - 1], lo + width);
            }
        }
    }
}
