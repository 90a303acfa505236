//! Differentiable building blocks recorded on a [`Tape`]: the windowed
//! feature attention, same-padded 1D convolution, an LSTM and an affine map.
//!
//! Sequences are time-major `L × C` matrices. Feature vectors are `1 × n` rows
//! whose entry 0 is SOH and entries `1..=n_v` are the normalized charging times.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Axis, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerError {
    #[error("attention window p = {p}, m = {m} invalid for {n_v} time features")]
    WindowOutOfRange { p: usize, m: usize, n_v: usize },
    #[error("attention mode '{mode}' needs at least {needed} time features, got {n_v}")]
    TooFewFeatures { mode: String, needed: usize, n_v: usize },
    #[error("unknown attention mode '{0}'")]
    UnknownMode(String),
    #[error("convolution kernel size must be odd, got {0}")]
    EvenKernel(usize),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LayerError>;

/// Where attention is placed inside the time-feature block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    None,
    Start,
    Mid,
    End,
    All,
    Custom { p: usize, m: usize },
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionMode::None => f.write_str("none"),
            AttentionMode::Start => f.write_str("start"),
            AttentionMode::Mid => f.write_str("mid"),
            AttentionMode::End => f.write_str("end"),
            AttentionMode::All => f.write_str("all"),
            AttentionMode::Custom { p, m } => write!(f, "custom:{p}:{m}"),
        }
    }
}

impl FromStr for AttentionMode {
    type Err = LayerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "start" => Ok(Self::Start),
            "mid" => Ok(Self::Mid),
            "end" => Ok(Self::End),
            "all" => Ok(Self::All),
            other => {
                let parts: Vec<&str> = other.split(':').collect();
                match parts.as_slice() {
                    ["custom", p, m] => {
                        let p = p.parse().map_err(|_| LayerError::UnknownMode(s.into()))?;
                        let m = m.parse().map_err(|_| LayerError::UnknownMode(s.into()))?;
                        Ok(Self::Custom { p, m })
                    }
                    _ => Err(LayerError::UnknownMode(s.into())),
                }
            }
        }
    }
}

/// Resolved attention window: `m` consecutive time features starting at the
/// 1-based time index `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub mode: AttentionMode,
    pub p: usize,
    pub m: usize,
    pub n_v: usize,
}

/// Window length used by the start/mid/end placements.
pub const TARGETED_WINDOW: usize = 3;

impl AttentionSpec {
    pub fn resolve(mode: AttentionMode, n_v: usize) -> Result<Self> {
        let targeted = |mode: AttentionMode| {
            if n_v < TARGETED_WINDOW {
                Err(LayerError::TooFewFeatures {
                    mode: mode.to_string(),
                    needed: TARGETED_WINDOW,
                    n_v,
                })
            } else {
                Ok(())
            }
        };
        let (p, m) = match mode {
            AttentionMode::None => (1, 0),
            AttentionMode::Start => {
                targeted(mode)?;
                (1, TARGETED_WINDOW)
            }
            AttentionMode::Mid => {
                targeted(mode)?;
                ((n_v - TARGETED_WINDOW) / 2 + 1, TARGETED_WINDOW)
            }
            AttentionMode::End => {
                targeted(mode)?;
                (n_v - TARGETED_WINDOW + 1, TARGETED_WINDOW)
            }
            AttentionMode::All => (1, n_v),
            AttentionMode::Custom { p, m } => (p, m),
        };
        let spec = Self { mode, p, m, n_v };
        spec.validate()?;
        Ok(spec)
    }

    pub fn none(n_v: usize) -> Self {
        Self {
            mode: AttentionMode::None,
            p: 1,
            m: 0,
            n_v,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = if self.m == 0 {
            true
        } else {
            self.m <= self.n_v && self.p >= 1 && self.p + self.m <= self.n_v + 1
        };
        if ok {
            Ok(())
        } else {
            Err(LayerError::WindowOutOfRange {
                p: self.p,
                m: self.m,
                n_v: self.n_v,
            })
        }
    }

    pub fn is_active(&self) -> bool {
        self.m > 0
    }

    /// Columns of the feature row covered by the window (SOH is column 0).
    pub fn columns(&self) -> std::ops::Range<usize> {
        self.p..self.p + self.m
    }
}

/// `A = F·W + b` for feature rows `F` (`N × (n_v+1)`), `W` (`(n_v+1) × m`), `b` (`1 × m`).
pub fn attention_scores(tape: &mut Tape, features: Var, w: Var, b: Var) -> Result<Var> {
    let a = tape.matmul(features, w)?;
    Ok(tape.add(a, b)?)
}

/// Row-wise softmax of the scores.
pub fn attention_weights(tape: &mut Tape, scores: Var) -> Var {
    tape.softmax_rows(scores)
}

/// Multiplies the windowed time features of one feature row by `alpha`;
/// every other column (SOH included) is passed through untouched. The row
/// may carry extra trailing columns (augmentation), which also pass through.
pub fn apply_attention(tape: &mut Tape, row: Var, alpha: Var, spec: &AttentionSpec) -> Result<Var> {
    spec.validate()?;
    if !spec.is_active() {
        return Ok(row);
    }
    let (r, cols) = tape.shape(row);
    if r != 1 || spec.p + spec.m > cols {
        return Err(LayerError::WindowOutOfRange {
            p: spec.p,
            m: spec.m,
            n_v: spec.n_v,
        });
    }
    if tape.shape(alpha) != (1, spec.m) {
        return Err(AutodiffError::ShapeMismatch {
            op: autodiff::OpKind::Mul,
            lhs: vec![1, spec.m],
            rhs: {
                let (a, b) = tape.shape(alpha);
                vec![a, b]
            },
        }
        .into());
    }
    let window = tape.slice_cols(row, spec.columns())?;
    let attended = tape.mul(window, alpha)?;
    let mut parts = Vec::with_capacity(3);
    if spec.p > 0 {
        parts.push(tape.slice_cols(row, 0..spec.p)?);
    }
    parts.push(attended);
    if spec.p + spec.m < cols {
        parts.push(tape.slice_cols(row, spec.p + spec.m..cols)?);
    }
    Ok(tape.concat(&parts, Axis::Cols)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// Same-padded cross-correlation of an `L × C_in` sequence.
///
/// `kernels` is `(K·C_in) × C_out` with row `k·C_in + c` holding tap `k` of
/// input channel `c`; `bias` is `1 × C_out`.
pub fn conv1d(tape: &mut Tape, x: Var, kernels: Var, bias: Var, activation: Activation) -> Result<Var> {
    let (len, c_in) = tape.shape(x);
    let (kc, _c_out) = tape.shape(kernels);
    if c_in == 0 || kc % c_in != 0 {
        return Err(AutodiffError::ShapeMismatch {
            op: autodiff::OpKind::MatMul,
            lhs: vec![len, c_in],
            rhs: {
                let (a, b) = tape.shape(kernels);
                vec![a, b]
            },
        }
        .into());
    }
    let k = kc / c_in;
    if k % 2 == 0 {
        return Err(LayerError::EvenKernel(k));
    }
    let pad = k / 2;
    let padded = if pad > 0 {
        let z = tape.filled(pad, c_in, 0.0);
        tape.concat(&[z, x, z], Axis::Rows)?
    } else {
        x
    };
    let columns = if k > 1 {
        let taps = (0..k)
            .map(|tap| tape.slice_rows(padded, tap..tap + len))
            .collect::<autodiff::Result<Vec<_>>>()?;
        tape.concat(&taps, Axis::Cols)?
    } else {
        padded
    };
    let y = tape.matmul(columns, kernels)?;
    let y = tape.add(y, bias)?;
    Ok(activation.apply(tape, y))
}

/// LSTM weights; gate blocks are ordered input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    /// `C_in × 4H`
    pub w_ih: Var,
    /// `H × 4H`
    pub w_hh: Var,
    /// `1 × 4H`
    pub bias: Var,
}

/// Hidden and cell states after every step of an LSTM run.
#[derive(Debug, Clone)]
pub struct LstmStates {
    pub hidden: Vec<Var>,
    pub cell: Vec<Var>,
}

/// Runs the recurrence over the rows of `x` from zero hidden and cell states.
pub fn lstm_states(tape: &mut Tape, x: Var, p: &LstmVars) -> Result<LstmStates> {
    let (len, _) = tape.shape(x);
    let (h_dim, four_h) = tape.shape(p.w_hh);
    if four_h != 4 * h_dim || tape.shape(p.w_ih).1 != four_h || tape.shape(p.bias) != (1, four_h) {
        let (a, b) = tape.shape(p.w_ih);
        return Err(AutodiffError::ShapeMismatch {
            op: autodiff::OpKind::MatMul,
            lhs: vec![a, b],
            rhs: vec![h_dim, four_h],
        }
        .into());
    }
    let projected = tape.matmul(x, p.w_ih)?;
    let projected = tape.add(projected, p.bias)?;
    let mut out = LstmStates {
        hidden: Vec::with_capacity(len),
        cell: Vec::with_capacity(len),
    };
    let mut state: Option<(Var, Var)> = None;
    for t in 0..len {
        let mut gates = tape.slice_rows(projected, t..t + 1)?;
        if let Some((h, _)) = state {
            let rec = tape.matmul(h, p.w_hh)?;
            gates = tape.add(gates, rec)?;
        }
        let i = tape.slice_cols(gates, 0..h_dim)?;
        let g = tape.slice_cols(gates, 2 * h_dim..3 * h_dim)?;
        let o = tape.slice_cols(gates, 3 * h_dim..4 * h_dim)?;
        let i = tape.sigmoid(i);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let ig = tape.mul(i, g)?;
        // with c_0 = 0 the forget term vanishes on the first step
        let c = match state {
            Some((_, c_prev)) => {
                let f = tape.slice_cols(gates, h_dim..2 * h_dim)?;
                let f = tape.sigmoid(f);
                let fc = tape.mul(f, c_prev)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        out.hidden.push(h);
        out.cell.push(c);
        state = Some((h, c));
    }
    Ok(out)
}

/// Hidden state (`1 × H`) after every step.
pub fn lstm_forward(tape: &mut Tape, x: Var, p: &LstmVars) -> Result<Vec<Var>> {
    Ok(lstm_states(tape, x, p)?.hidden)
}

/// `x·W + b` for `x` (`N × in`), `W` (`in × out`), `b` (`1 × out`).
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// Uniform `[-1/√fan_in, 1/√fan_in]` initialization.
pub fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, values).expect("consistent length")
}
