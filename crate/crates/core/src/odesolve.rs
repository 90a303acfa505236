//! Initial-value problem integration and adjoint sensitivities.
//!
//! [`dopri5`] is the Dormand–Prince 5(4) embedded pair with FSAL, a PI
//! step-size controller and step clamping onto the observation grid, so
//! states are produced exactly at every requested time without dense
//! output. [`rk4_fixed`] is classical RK4 with a fixed number of equal
//! substeps per grid interval; [`rk4_fixed_tape`] records the same scheme
//! on an autodiff tape for discretize-then-optimize gradients.
//! [`adjoint_grad`] integrates the continuous adjoint backward through
//! each observation interval.

use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("step budget of {max_steps} exhausted at t = {t}")]
    StepBudgetExceeded { t: f64, max_steps: usize },
    #[error("vector field produced a non-finite derivative at t = {t}")]
    NonFiniteDerivative { t: f64 },
    #[error("step size underflow at t = {t} (h = {h})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("invalid problem: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, SolveError>;

/// Observation grid and tolerances for an adaptive solve.
#[derive(Debug, Clone, PartialEq)]
pub struct IvpSpec {
    pub t_grid: Vec<f64>,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

pub const DEFAULT_RTOL: f64 = 1e-6;
pub const DEFAULT_ATOL: f64 = 1e-8;
pub const DEFAULT_MAX_STEPS: usize = 100_000;

impl IvpSpec {
    pub fn new(t_grid: Vec<f64>, rtol: f64, atol: f64, max_steps: usize) -> Result<Self> {
        let spec = Self {
            t_grid,
            rtol,
            atol,
            max_steps,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_defaults(t_grid: Vec<f64>) -> Result<Self> {
        Self::new(t_grid, DEFAULT_RTOL, DEFAULT_ATOL, DEFAULT_MAX_STEPS)
    }

    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.t_grid)?;
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(SolveError::InvalidSpec(format!(
                "tolerances must be positive (rtol {}, atol {})",
                self.rtol, self.atol
            )));
        }
        if self.max_steps == 0 {
            return Err(SolveError::InvalidSpec("max_steps must be positive".into()));
        }
        Ok(())
    }
}

fn validate_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.len() < 2 {
        return Err(SolveError::InvalidSpec(format!(
            "time grid needs at least 2 points, got {}",
            t_grid.len()
        )));
    }
    if t_grid.iter().any(|t| !t.is_finite()) {
        return Err(SolveError::InvalidSpec("time grid contains non-finite values".into()));
    }
    if let Some(w) = t_grid.windows(2).find(|w| w[1] <= w[0]) {
        return Err(SolveError::InvalidSpec(format!(
            "time grid not strictly increasing ({} then {})",
            w[0], w[1]
        )));
    }
    Ok(())
}

/// States at the requested times; `states[i]` belongs to `times[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }
}

fn check_finite(t: f64, dy: &[f64]) -> Result<()> {
    if dy.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SolveError::NonFiniteDerivative { t })
    }
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 5.0;
const PI_BETA: f64 = 0.04;
const PI_ALPHA: f64 = 0.2 - 0.75 * PI_BETA;

/// Integrator state carried across grid intervals.
struct Dopri5<'f, F> {
    field: &'f mut F,
    rtol: f64,
    atol: f64,
    max_steps: usize,
    steps: usize,
    h: Option<f64>,
    err_prev: f64,
    k: [Vec<f64>; 7],
    /// `k[0]` holds f(t, y) for the current point.
    fsal_valid: bool,
    scratch: Vec<f64>,
    y_new: Vec<f64>,
}

impl<'f, F: FnMut(f64, &[f64], &mut [f64])> Dopri5<'f, F> {
    fn new(field: &'f mut F, dim: usize, rtol: f64, atol: f64, max_steps: usize) -> Self {
        Self {
            field,
            rtol,
            atol,
            max_steps,
            steps: 0,
            h: None,
            err_prev: 1e-4,
            k: std::array::from_fn(|_| vec![0.0; dim]),
            fsal_valid: false,
            scratch: vec![0.0; dim],
            y_new: vec![0.0; dim],
        }
    }

    fn eval(&mut self, t: f64, y: &[f64], stage: usize) -> Result<()> {
        (self.field)(t, y, &mut self.k[stage]);
        check_finite(t, &self.k[stage])
    }

    fn scaled_norm(&self, v: &[f64], y: &[f64]) -> f64 {
        let n = v.len().max(1) as f64;
        let s: f64 = v
            .iter()
            .zip(y)
            .map(|(v, y)| {
                let sc = self.atol + self.rtol * y.abs();
                (v / sc) * (v / sc)
            })
            .sum();
        (s / n).sqrt()
    }

    /// Hairer–Nørsett–Wanner starting step.
    fn initial_step(&mut self, t: f64, y: &[f64], dir: f64, span: f64) -> Result<f64> {
        let d0 = self.scaled_norm(y, y);
        let f0 = self.k[0].clone();
        let d1 = self.scaled_norm(&f0, y);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(span);
        let y1: Vec<f64> = y.iter().zip(&f0).map(|(y, f)| y + dir * h0 * f).collect();
        self.eval(t + dir * h0, &y1, 1)?;
        let diff: Vec<f64> = self.k[1].iter().zip(&f0).map(|(a, b)| a - b).collect();
        let d2 = self.scaled_norm(&diff, y) / h0;
        let dmax = d1.max(d2);
        let h1 = if dmax <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / dmax).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(span))
    }

    /// Advances `y` from `t0` to exactly `t1` (either direction).
    fn integrate(&mut self, t0: f64, t1: f64, y: &mut [f64]) -> Result<()> {
        let dir = if t1 >= t0 { 1.0 } else { -1.0 };
        let mut t = t0;
        if !self.fsal_valid {
            self.eval(t, y, 0)?;
            self.fsal_valid = true;
        }
        let mut h = match self.h {
            Some(h) => h,
            None => self.initial_step(t, y, dir, (t1 - t0).abs())?,
        };
        loop {
            let remaining = (t1 - t).abs();
            if remaining == 0.0 {
                break;
            }
            let mut last = false;
            let mut step = h;
            if step >= remaining {
                step = remaining;
                last = true;
            }
            if step < 1e-14 * t.abs().max(1.0) {
                return Err(SolveError::StepSizeUnderflow { t, h: step });
            }
            if self.steps >= self.max_steps {
                return Err(SolveError::StepBudgetExceeded {
                    t,
                    max_steps: self.max_steps,
                });
            }
            self.steps += 1;
            let hs = dir * step;
            let err = self.attempt(t, hs, y)?;
            if err <= 1.0 {
                let fac = (SAFETY * err.max(1e-10).powf(-PI_ALPHA) * self.err_prev.powf(PI_BETA))
                    .clamp(MIN_FACTOR, MAX_FACTOR);
                self.err_prev = err.max(1e-4);
                y.copy_from_slice(&self.y_new);
                self.k.swap(0, 6);
                t = if last { t1 } else { t + hs };
                // a clamped final step says nothing about the natural step size
                h = if last { h.max(step * fac) } else { step * fac };
                if last {
                    break;
                }
            } else {
                let fac = (SAFETY * err.powf(-PI_ALPHA)).clamp(MIN_FACTOR, 1.0);
                h = step * fac;
            }
        }
        self.h = Some(h);
        Ok(())
    }

    /// One trial step; leaves the 5th-order solution in `y_new`, f(y_new) in
    /// `k[6]`, and returns the scaled error norm.
    fn attempt(&mut self, t: f64, h: f64, y: &[f64]) -> Result<f64> {
        let n = y.len();
        macro_rules! stage {
            ($idx:expr, $c:expr, [$($j:expr => $a:expr),*]) => {{
                for i in 0..n {
                    let mut acc = 0.0;
                    $( acc += $a * self.k[$j][i]; )*
                    self.scratch[i] = y[i] + h * acc;
                }
                let s = std::mem::take(&mut self.scratch);
                let r = self.eval(t + $c * h, &s, $idx);
                self.scratch = s;
                r?;
            }};
        }
        stage!(1, C2, [0 => A21]);
        stage!(2, C3, [0 => A31, 1 => A32]);
        stage!(3, C4, [0 => A41, 1 => A42, 2 => A43]);
        stage!(4, C5, [0 => A51, 1 => A52, 2 => A53, 3 => A54]);
        stage!(5, 1.0, [0 => A61, 1 => A62, 2 => A63, 3 => A64, 4 => A65]);
        for i in 0..n {
            let k = &self.k;
            self.y_new[i] = y[i] + h * (A71 * k[0][i] + A73 * k[2][i] + A74 * k[3][i] + A75 * k[4][i] + A76 * k[5][i]);
        }
        let yn = std::mem::take(&mut self.y_new);
        let r = self.eval(t + h, &yn, 6);
        self.y_new = yn;
        r?;
        let mut s = 0.0;
        for i in 0..n {
            let k = &self.k;
            let e = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
            let sc = self.atol + self.rtol * y[i].abs().max(self.y_new[i].abs());
            s += (e / sc) * (e / sc);
        }
        Ok((s / n.max(1) as f64).sqrt())
    }
}

/// Adaptive Dormand–Prince 5(4) solve reporting states at `spec.t_grid`.
pub fn dopri5<F>(mut field: F, y0: &[f64], spec: &IvpSpec) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    spec.validate()?;
    let mut solver = Dopri5::new(&mut field, y0.len(), spec.rtol, spec.atol, spec.max_steps);
    let mut y = y0.to_vec();
    let mut states = Vec::with_capacity(spec.t_grid.len());
    states.push(y.clone());
    for w in spec.t_grid.windows(2) {
        solver.integrate(w[0], w[1], &mut y)?;
        states.push(y.clone());
    }
    Ok(Trajectory {
        times: spec.t_grid.clone(),
        states,
    })
}

/// Classical RK4 with `substeps` equal steps per grid interval.
pub fn rk4_fixed<F>(mut field: F, y0: &[f64], t_grid: &[f64], substeps: usize) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    validate_grid(t_grid)?;
    if substeps == 0 {
        return Err(SolveError::InvalidSpec("substeps must be at least 1".into()));
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut states = vec![y.clone()];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for w in t_grid.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            let t = w[0] + s as f64 * h;
            field(t, &y, &mut k1);
            check_finite(t, &k1)?;
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k1[i];
            }
            field(t + 0.5 * h, &tmp, &mut k2);
            check_finite(t + 0.5 * h, &k2)?;
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k2[i];
            }
            field(t + 0.5 * h, &tmp, &mut k3);
            check_finite(t + 0.5 * h, &k3)?;
            for i in 0..n {
                tmp[i] = y[i] + h * k3[i];
            }
            field(t + h, &tmp, &mut k4);
            check_finite(t + h, &k4)?;
            for i in 0..n {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        states.push(y.clone());
    }
    Ok(Trajectory {
        times: t_grid.to_vec(),
        states,
    })
}

/// RK4 recorded on `tape`; returns one state node per grid time (the first
/// is `y0` itself). `field` maps `(tape, t, state)` to the derivative node.
pub fn rk4_fixed_tape<F>(tape: &mut Tape, mut field: F, y0: Var, t_grid: &[f64], substeps: usize) -> Result<Vec<Var>>
where
    F: FnMut(&mut Tape, f64, Var) -> autodiff::Result<Var>,
{
    validate_grid(t_grid)?;
    if substeps == 0 {
        return Err(SolveError::InvalidSpec("substeps must be at least 1".into()));
    }
    let mut eval = |tape: &mut Tape, t: f64, y: Var| -> Result<Var> {
        let k = field(tape, t, y)?;
        check_finite(t, tape.value(k))?;
        Ok(k)
    };
    let mut y = y0;
    let mut out = vec![y0];
    for w in t_grid.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            let t = w[0] + s as f64 * h;
            let k1 = eval(tape, t, y)?;
            let d = tape.scale(k1, 0.5 * h);
            let y2 = tape.add(y, d)?;
            let k2 = eval(tape, t + 0.5 * h, y2)?;
            let d = tape.scale(k2, 0.5 * h);
            let y3 = tape.add(y, d)?;
            let k3 = eval(tape, t + 0.5 * h, y3)?;
            let d = tape.scale(k3, h);
            let y4 = tape.add(y, d)?;
            let k4 = eval(tape, t + h, y4)?;
            let k23 = tape.add(k2, k3)?;
            let k23 = tape.scale(k23, 2.0);
            let k14 = tape.add(k1, k4)?;
            let ksum = tape.add(k14, k23)?;
            let incr = tape.scale(ksum, h / 6.0);
            y = tape.add(y, incr)?;
        }
        out.push(y);
    }
    Ok(out)
}

/// A vector field with trainable parameters that can report vector-Jacobian
/// products, as needed by [`adjoint_grad`].
pub trait ParamField {
    fn dim(&self) -> usize;
    fn n_params(&self) -> usize;
    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]);
    /// Writes `f(t, y)` to `dy`, `aᵀ ∂f/∂y` to `vjp_y` and `aᵀ ∂f/∂θ` to `vjp_p`.
    fn vjp(&self, t: f64, y: &[f64], a: &[f64], dy: &mut [f64], vjp_y: &mut [f64], vjp_p: &mut [f64]);
}

/// Signature of a field recorded on a tape: `(tape, t, state row, parameter nodes) -> derivative row`.
pub type TapeFieldFn<'a> = dyn Fn(&mut Tape, f64, Var, &[Var]) -> autodiff::Result<Var> + Sync + 'a;

/// [`ParamField`] whose derivative and VJPs come from recording `f` on a fresh tape.
pub struct TapeField<'a> {
    dim: usize,
    params: Vec<Tensor>,
    f: Box<TapeFieldFn<'a>>,
}

impl<'a> TapeField<'a> {
    pub fn new<F>(dim: usize, params: Vec<Tensor>, f: F) -> Self
    where
        F: Fn(&mut Tape, f64, Var, &[Var]) -> autodiff::Result<Var> + Sync + 'a,
    {
        Self {
            dim,
            params,
            f: Box::new(f),
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn record(&self, tape: &mut Tape, t: f64, y: &[f64], trainable: bool) -> (Var, Vec<Var>, Var) {
        let yv = tape
            .leaf_values(1, self.dim, y.to_vec(), trainable)
            .expect("state length matches field dimension");
        let pv: Vec<Var> = self.params.iter().map(|p| tape.leaf(p, trainable)).collect();
        let out = (self.f)(tape, t, yv, &pv).expect("tape field shapes are consistent");
        (yv, pv, out)
    }
}

impl ParamField for TapeField<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn eval(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let mut tape = Tape::new();
        let (_, _, out) = self.record(&mut tape, t, y, false);
        dy.copy_from_slice(tape.value(out));
    }

    fn vjp(&self, t: f64, y: &[f64], a: &[f64], dy: &mut [f64], vjp_y: &mut [f64], vjp_p: &mut [f64]) {
        let mut tape = Tape::new();
        let (yv, pv, out) = self.record(&mut tape, t, y, true);
        dy.copy_from_slice(tape.value(out));
        let av = tape.constant(1, self.dim, a.to_vec()).expect("adjoint length");
        let prod = tape.mul(out, av).expect("same shape");
        let root = tape.sum(prod);
        tape.backward(root).expect("scalar root");
        copy_grad(&tape, yv, vjp_y);
        let mut off = 0;
        for (p, v) in self.params.iter().zip(&pv) {
            copy_grad(&tape, *v, &mut vjp_p[off..off + p.len()]);
            off += p.len();
        }
    }
}

fn copy_grad(tape: &Tape, v: Var, out: &mut [f64]) {
    match tape.grad(v) {
        Some(g) => out.copy_from_slice(g),
        None => out.iter_mut().for_each(|o| *o = 0.0),
    }
}

/// Loss gradients with respect to the initial state and the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointGradient {
    pub d_y0: Vec<f64>,
    pub d_params: Vec<f64>,
    /// Forward trajectory the gradients were computed along.
    pub forward: Trajectory,
}

/// Gradients of a loss that depends on the states at `spec.t_grid`.
///
/// The forward pass runs [`dopri5`]. The backward pass integrates the
/// augmented system `[y, a, g]` with `ẏ = f`, `ȧ = -aᵀ∂f/∂y`,
/// `ġ = -aᵀ∂f/∂θ` from each observation time to the previous one, restoring
/// `y` to the stored forward state and injecting `dloss_dstates[i]` into
/// `a` at every observation.
pub fn adjoint_grad<P: ParamField>(
    field: &P,
    y0: &[f64],
    spec: &IvpSpec,
    dloss_dstates: &[Vec<f64>],
) -> Result<AdjointGradient> {
    spec.validate()?;
    let d = field.dim();
    let np = field.n_params();
    if y0.len() != d {
        return Err(SolveError::InvalidSpec(format!(
            "initial state has {} entries, field dimension is {d}",
            y0.len()
        )));
    }
    if dloss_dstates.len() != spec.t_grid.len() || dloss_dstates.iter().any(|r| r.len() != d) {
        return Err(SolveError::InvalidSpec(format!(
            "loss gradient must have {} rows of length {d}",
            spec.t_grid.len()
        )));
    }
    let forward = dopri5(|t, y, dy| field.eval(t, y, dy), y0, spec)?;

    let mut z = vec![0.0; 2 * d + np];
    let n = spec.t_grid.len();
    z[d..2 * d].copy_from_slice(&dloss_dstates[n - 1]);
    let mut vy = vec![0.0; d];
    let mut vp = vec![0.0; np];
    let mut aug_field = |t: f64, z: &[f64], dz: &mut [f64]| {
        let (y, rest) = z.split_at(d);
        let a = &rest[..d];
        let (dy, drest) = dz.split_at_mut(d);
        field.vjp(t, y, a, dy, &mut vy, &mut vp);
        for (o, v) in drest[..d].iter_mut().zip(&vy) {
            *o = -v;
        }
        for (o, v) in drest[d..].iter_mut().zip(&vp) {
            *o = -v;
        }
    };
    let mut solver = Dopri5::new(&mut aug_field, z.len(), spec.rtol, spec.atol, spec.max_steps);
    for i in (1..n).rev() {
        z[..d].copy_from_slice(&forward.states[i]);
        solver.fsal_valid = false;
        solver.integrate(spec.t_grid[i], spec.t_grid[i - 1], &mut z)?;
        for (a, g) in z[d..2 * d].iter_mut().zip(&dloss_dstates[i - 1]) {
            *a += g;
        }
    }
    Ok(AdjointGradient {
        d_y0: z[d..2 * d].to_vec(),
        d_params: z[2 * d..].to_vec(),
        forward,
    })
}
