//! Trajectory loss, the three-phase learning-rate schedule, AdamW with
//! Lookahead, and the training loop.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::data::BatterySeries;
use crate::model::{self, GradMode, ModelConfig, ModelError, Params, Solver};
use crate::odesolve::{self, IvpSpec, SolveError, TapeField};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("iteration {iter} outside 1..={total}")]
    IterOutOfRange { iter: usize, total: usize },
    #[error("prediction has {pred} rows of length {pred_len}, target has {target} rows of length {target_len}")]
    LengthMismatch {
        pred: usize,
        pred_len: usize,
        target: usize,
        target_len: usize,
    },
    #[error("training diverged at iteration {iter}: loss {loss}")]
    Diverged { iter: usize, loss: f64 },
    #[error("non-finite gradient at iteration {iter} (parameter index {index})")]
    NonFiniteGradient { iter: usize, index: usize },
    #[error("no training series")]
    NoSeries,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Loss above which training is abandoned.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Mean over points of `(ŜOH − SOH)² + ‖t̂ − t‖²/N_V`.
pub fn loss(pred: &[Vec<f64>], target: &[Vec<f64>], n_v: usize) -> Result<f64> {
    check_lengths(pred, target, n_v)?;
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        let soh = (p[0] - t[0]).powi(2);
        let times: f64 = p[1..=n_v].iter().zip(&t[1..=n_v]).map(|(a, b)| (a - b).powi(2)).sum();
        total += soh + times / n_v as f64;
    }
    Ok(total / pred.len() as f64)
}

fn check_lengths(pred: &[Vec<f64>], target: &[Vec<f64>], n_v: usize) -> Result<()> {
    let bad = pred.len() != target.len()
        || pred.is_empty()
        || pred.iter().any(|r| r.len() < n_v + 1)
        || target.iter().any(|r| r.len() != n_v + 1);
    if bad {
        return Err(TrainError::LengthMismatch {
            pred: pred.len(),
            pred_len: pred.first().map_or(0, Vec::len),
            target: target.len(),
            target_len: target.first().map_or(0, Vec::len),
        });
    }
    Ok(())
}

/// Derivative of [`loss`] with respect to each predicted state; entries past
/// the feature block (augmented coordinates) are zero.
pub fn loss_grad(pred: &[Vec<f64>], target: &[Vec<f64>], n_v: usize) -> Result<Vec<Vec<f64>>> {
    check_lengths(pred, target, n_v)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let mut g = vec![0.0; p.len()];
            g[0] = 2.0 * (p[0] - t[0]) / n;
            for i in 1..=n_v {
                g[i] = 2.0 * (p[i] - t[i]) / (n * n_v as f64);
            }
            g
        })
        .collect())
}

/// [`loss`] recorded on a tape; `pred` nodes may carry trailing augmented columns.
pub fn loss_tape(tape: &mut Tape, pred: &[Var], target: &[Vec<f64>], n_v: usize) -> Result<Var> {
    if pred.len() != target.len() || pred.is_empty() || target.iter().any(|t| t.len() != n_v + 1) {
        return Err(TrainError::LengthMismatch {
            pred: pred.len(),
            pred_len: pred.first().map_or(0, |p| tape.shape(*p).1),
            target: target.len(),
            target_len: target.first().map_or(0, Vec::len),
        });
    }
    let mut w = vec![1.0 / n_v as f64; n_v + 1];
    w[0] = 1.0;
    let w = tape.constant(1, n_v + 1, w)?;
    let mut terms = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let feats = tape.slice_cols(*p, 0..n_v + 1)?;
        let neg = tape.constant(1, n_v + 1, t.iter().map(|v| -v).collect())?;
        let diff = tape.add(feats, neg)?;
        let sq = tape.square(diff);
        let weighted = tape.mul(sq, w)?;
        terms.push(tape.sum(weighted));
    }
    let all = tape.concat(&terms, crate::autodiff::Axis::Cols)?;
    let total = tape.sum(all);
    Ok(tape.scale(total, 1.0 / pred.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayShape {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_final: f64,
    pub warmup_iters: usize,
    pub plateau_iters: usize,
    pub decay_iters: usize,
    pub decay: DecayShape,
    pub lookahead_s: usize,
    pub lookahead_beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Stops after this many iterations of the schedule when set.
    pub max_iters: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 0.01,
            lr_final: 1e-5,
            warmup_iters: 220,
            plateau_iters: 500,
            decay_iters: 280,
            decay: DecayShape::Linear,
            lookahead_s: 5,
            lookahead_beta: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            max_iters: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_iters(&self) -> usize {
        self.warmup_iters + self.plateau_iters + self.decay_iters
    }

    /// Iterations `fit` will run.
    pub fn run_iters(&self) -> usize {
        self.max_iters.map_or(self.total_iters(), |m| m.min(self.total_iters()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.warmup_iters == 0 || self.plateau_iters == 0 || self.decay_iters == 0 {
            return bad("all phase lengths must be positive");
        }
        if !(self.lr_max > 0.0) || !(self.lr_final > 0.0) || !(self.lr_final < self.lr_max) {
            return bad("need 0 < lr_final < lr_max");
        }
        if !(self.lookahead_beta > 0.0 && self.lookahead_beta <= 1.0) {
            return bad("lookahead_beta must lie in (0, 1]");
        }
        if self.lookahead_s == 0 {
            return bad("lookahead_s must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("need beta1, beta2 in [0, 1) and eps > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        Ok(())
    }

    /// Learning rate at 1-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> Result<f64> {
        let total = self.total_iters();
        if iter == 0 || iter > total {
            return Err(TrainError::IterOutOfRange { iter, total });
        }
        let w = self.warmup_iters;
        let p = w + self.plateau_iters;
        Ok(if iter <= w {
            self.lr_max * (iter as f64 / w as f64)
        } else if iter <= p {
            self.lr_max
        } else {
            let frac = (iter - p) as f64 / self.decay_iters as f64;
            match self.decay {
                DecayShape::Linear => self.lr_max * (1.0 - frac) + self.lr_final * frac,
                DecayShape::Cosine => self.lr_final + (self.lr_max - self.lr_final) * 0.5 * (1.0 + (PI * frac).cos()),
            }
        })
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("train.lr_max", self.lr_max.to_string()),
            ("train.lr_final", self.lr_final.to_string()),
            ("train.warmup_iters", self.warmup_iters.to_string()),
            ("train.plateau_iters", self.plateau_iters.to_string()),
            ("train.decay_iters", self.decay_iters.to_string()),
            (
                "train.decay",
                match self.decay {
                    DecayShape::Linear => "linear",
                    DecayShape::Cosine => "cosine",
                }
                .to_string(),
            ),
            ("train.lookahead_s", self.lookahead_s.to_string()),
            ("train.lookahead_beta", self.lookahead_beta.to_string()),
            ("train.beta1", self.beta1.to_string()),
            ("train.beta2", self.beta2.to_string()),
            ("train.eps", self.eps.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.max_iters", self.max_iters.map_or("none".to_string(), |m| m.to_string())),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Builds a config from `train.*` keys, all of which must be present.
    pub fn from_pairs(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .map(|s| s.trim())
                .ok_or_else(|| TrainError::InvalidConfig(format!("missing key '{k}'")))
        };
        let f = |k: &str| -> Result<f64> {
            let v = get(k)?;
            v.parse().map_err(|_| TrainError::InvalidConfig(format!("key '{k}': cannot parse '{v}'")))
        };
        let u = |k: &str| -> Result<usize> {
            let v = get(k)?;
            v.parse().map_err(|_| TrainError::InvalidConfig(format!("key '{k}': cannot parse '{v}'")))
        };
        let decay = match get("train.decay")? {
            "linear" => DecayShape::Linear,
            "cosine" => DecayShape::Cosine,
            other => return Err(TrainError::InvalidConfig(format!("key 'train.decay': unknown shape '{other}'"))),
        };
        let max_iters = match get("train.max_iters")? {
            "none" => None,
            _ => Some(u("train.max_iters")?),
        };
        Ok(Self {
            lr_max: f("train.lr_max")?,
            lr_final: f("train.lr_final")?,
            warmup_iters: u("train.warmup_iters")?,
            plateau_iters: u("train.plateau_iters")?,
            decay_iters: u("train.decay_iters")?,
            decay,
            lookahead_s: u("train.lookahead_s")?,
            lookahead_beta: f("train.lookahead_beta")?,
            beta1: f("train.beta1")?,
            beta2: f("train.beta2")?,
            eps: f("train.eps")?,
            weight_decay: f("train.weight_decay")?,
            max_iters,
            seed: 0,
        })
    }
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    pub fn from_config(n: usize, c: &TrainConfig) -> Self {
        Self::new(n, c.beta1, c.beta2, c.eps, c.weight_decay)
    }

    /// One update: `θ ← θ(1 − lr·λ)`, then the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                iter: self.t as usize + 1,
                index,
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * self.weight_decay * params[i];
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `slow ← slow + β(fast − slow)`, then `fast ← slow`.
pub fn lookahead_sync(slow: &mut [f64], fast: &mut [f64], beta: f64) {
    for (s, f) in slow.iter_mut().zip(fast.iter_mut()) {
        *s += beta * (*f - *s);
        *f = *s;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub entries: Vec<HistoryEntry>,
    /// SHA-256 of the final parameters as little-endian f64.
    pub param_digest: String,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,lr,loss\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.iter, e.lr, e.loss));
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.loss)
    }
}

pub fn param_digest(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    model::hex_digest(&bytes)
}

/// Loss and gradient (flattened in parameter order) of one series under `params`.
pub fn loss_and_grad(config: &ModelConfig, params: &Params, series: &BatterySeries) -> Result<(f64, Vec<f64>)> {
    let tau = series.taus();
    let target = series.rows();
    let n_v = config.n_v;
    let f0 = &target[0];
    match config.grad_mode {
        GradMode::Unrolled => {
            let mut tape = Tape::new();
            let pv = params.on_tape(&mut tape, true);
            let states = model::rollout_tape(&mut tape, config, &pv, f0, &tau)?;
            let l = loss_tape(&mut tape, &states, &target, n_v)?;
            let value = tape.value(l)[0];
            tape.backward(l)?;
            let mut grad = Vec::with_capacity(params.n_values());
            for (v, t) in pv.iter().zip(&params.tensors) {
                match tape.grad(*v) {
                    Some(g) => grad.extend_from_slice(g),
                    None => grad.extend(std::iter::repeat_n(0.0, t.len())),
                }
            }
            Ok((value, grad))
        }
        GradMode::Adjoint => {
            let Solver::Dopri5 { rtol, atol, max_steps } = config.solver else {
                return Err(TrainError::InvalidConfig("adjoint gradients need the dopri5 solver".into()));
            };
            let states = model::rollout_states(config, params, f0, &tau)?;
            let value = loss(&states, &target, n_v)?;
            let dl = loss_grad(&states, &target, n_v)?;
            let spec = config.attention_spec()?;
            let cfg = config.clone();
            let field = TapeField::new(config.state_dim(), params.tensors.clone(), move |tape, _t, y, p| {
                model::vector_field(tape, &cfg, &spec, p, y).map_err(|e| AutodiffError::InvalidArgument {
                    op: crate::autodiff::OpKind::Leaf,
                    detail: e.to_string(),
                })
            });
            let ivp = IvpSpec::new(tau, rtol, atol, max_steps)?;
            let y0 = model::augment(f0, config.aug_dim);
            let g = odesolve::adjoint_grad(&field, &y0, &ivp, &dl)?;
            Ok((value, g.d_params))
        }
    }
}

/// Trained parameters (Lookahead slow weights) and the loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: Params,
    pub history: TrainHistory,
}

/// Runs the schedule over `series`, one battery per iteration in
/// round-robin order. A final Lookahead sync is applied when the last
/// iteration does not fall on a sync boundary.
pub fn fit(config: &ModelConfig, series: &[BatterySeries], tc: &TrainConfig, init: Params) -> Result<FitResult> {
    tc.validate()?;
    init.check(config)?;
    if series.is_empty() {
        return Err(TrainError::NoSeries);
    }
    for s in series {
        if s.n_v() != config.n_v {
            return Err(TrainError::InvalidConfig(format!(
                "series '{}' has {} time features, model expects {}",
                s.battery_id,
                s.n_v(),
                config.n_v
            )));
        }
    }
    let mut work = init.clone();
    let mut fast = init.flat();
    let mut slow = fast.clone();
    let mut opt = AdamW::from_config(fast.len(), tc);
    let iters = tc.run_iters();
    let mut entries = Vec::with_capacity(iters);
    for iter in 1..=iters {
        let s = &series[(iter - 1) % series.len()];
        work.set_flat(&fast);
        let (l, grad) = loss_and_grad(config, &work, s)?;
        if !l.is_finite() || l > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged { iter, loss: l });
        }
        let lr = tc.lr_at(iter)?;
        opt.step(&mut fast, &grad, lr).map_err(|e| match e {
            TrainError::NonFiniteGradient { index, .. } => TrainError::NonFiniteGradient { iter, index },
            other => other,
        })?;
        if iter % tc.lookahead_s == 0 || iter == iters {
            lookahead_sync(&mut slow, &mut fast, tc.lookahead_beta);
        }
        entries.push(HistoryEntry { iter, lr, loss: l });
    }
    let mut params = init;
    params.set_flat(&slow);
    Ok(FitResult {
        history: TrainHistory {
            entries,
            param_digest: param_digest(&slow),
        },
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tensor};
    use crate::features::FeatureVector;
    use crate::layers::AttentionMode;
    use crate::model::Variant;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn loss_examples() {
        let t = vec![vec![0.9, 0.1, 0.2, 0.3, 0.4]];
        assert_eq!(loss(&t, &t, 4).unwrap(), 0.0);
        let p = vec![vec![1.0, 0.1, 0.2, 0.3, 0.4]];
        assert!((loss(&p, &t, 4).unwrap() - 0.01).abs() < 1e-12);
        let p = vec![vec![0.9, 0.2, 0.3, 0.4, 0.5]];
        assert!((loss(&p, &t, 4).unwrap() - 0.01).abs() < 1e-12);
        assert!(loss(&p, &[], 4).is_err());
    }

    #[test]
    fn tape_loss_matches_numeric_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n_v = 4;
        for seed in 0..10 {
            let target: Vec<Vec<f64>> = (0..6).map(|_| (0..=n_v).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            // predictions carry 2 augmented columns that the loss ignores
            let pred = Tensor::matrix(6, n_v + 3, (0..6 * (n_v + 3)).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let rows: Vec<Vec<f64>> = pred.values().chunks(n_v + 3).map(<[f64]>::to_vec).collect();
            let f = |t: &mut Tape, x: Var| {
                let parts: Vec<Var> = (0..6).map(|i| t.slice_rows(x, i..i + 1)).collect::<std::result::Result<_, _>>()?;
                loss_tape(t, &parts, &target, n_v).map_err(|e| AutodiffError::InvalidArgument {
                    op: crate::autodiff::OpKind::Leaf,
                    detail: e.to_string(),
                })
            };
            let mut tape = Tape::new();
            let x = tape.leaf(&pred, true);
            let l = f(&mut tape, x).unwrap();
            assert!((tape.value(l)[0] - loss(&rows, &target, n_v).unwrap()).abs() < 1e-14);
            tape.backward(l).unwrap();
            let analytic: Vec<f64> = loss_grad(&rows, &target, n_v).unwrap().concat();
            for (a, b) in tape.grad(x).unwrap().iter().zip(&analytic) {
                assert!((a - b).abs() < 1e-14);
            }
            assert!(grad_check(f, &pred, 1e-5).unwrap() < 1e-4, "seed {seed}");
        }
    }

    #[test]
    fn schedule_values() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(220).unwrap(), 0.01);
        assert_eq!(c.lr_at(500).unwrap(), 0.01);
        assert_eq!(c.lr_at(720).unwrap(), 0.01);
        assert_eq!(c.lr_at(1000).unwrap(), 1e-5);
        assert_eq!(c.lr_at(110).unwrap(), 0.005);
        assert!((c.lr_at(1).unwrap() - 0.01 / 220.0).abs() < 1e-18);
        assert!(c.lr_at(0).is_err());
        assert!(c.lr_at(1001).is_err());
        let cos = TrainConfig { decay: DecayShape::Cosine, ..c };
        assert_eq!(cos.lr_at(1000).unwrap(), 1e-5);
        assert_eq!(cos.lr_at(720).unwrap(), 0.01);
    }

    #[test]
    fn adamw_examples() {
        let mut p = vec![1.0, -2.0];
        let mut opt = AdamW::new(2, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut opt = AdamW::new(2, 0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![1.0 * (1.0 - 0.05), -2.0 * (1.0 - 0.05)]);

        assert!(opt.step(&mut p, &[f64::NAN, 0.0], 0.1).is_err());
    }

    #[test]
    fn adamw_three_step_unroll() {
        // constant gradient g: m_t = g(1−β1^t), v_t = g²(1−β2^t),
        // so every bias-corrected step is lr·g/(|g| + eps)
        let (g, lr, wd, eps) = (0.3, 0.05, 0.01, 1e-8);
        let mut p = vec![2.0];
        let mut opt = AdamW::new(1, 0.9, 0.999, eps, wd);
        let mut expect = 2.0;
        let table = [(1, 0.1, 0.001), (2, 0.19, 0.001999), (3, 0.271, 0.002997001)];
        for (t, b1t, b2t) in table {
            opt.step(&mut p, &[g], lr).unwrap();
            assert!((opt.m[0] - g * b1t).abs() < 1e-15, "m at {t}");
            assert!((opt.v[0] - g * g * b2t).abs() < 1e-15, "v at {t}");
            expect -= lr * wd * expect;
            expect -= lr * ((g * b1t) / b1t) / (((g * g * b2t) / b2t).sqrt() + eps);
            assert!((p[0] - expect).abs() < 1e-12);
        }
        let (c, step) = (1.0 - lr * wd, lr * g / (g + eps));
        assert!((p[0] - (2.0 * c.powi(3) - step * (c * c + c + 1.0))).abs() < 1e-12);
    }

    #[test]
    fn lookahead_examples() {
        let (mut s, mut f) = (vec![0.0], vec![2.0]);
        lookahead_sync(&mut s, &mut f, 0.5);
        assert_eq!((s[0], f[0]), (1.0, 1.0));
        let (mut s, mut f) = (vec![0.3], vec![-1.7]);
        lookahead_sync(&mut s, &mut f, 1.0);
        assert_eq!((s[0], f[0]), (-1.7, -1.7));
        let (mut s, mut f) = (vec![0.4], vec![0.4]);
        lookahead_sync(&mut s, &mut f, 0.5);
        assert_eq!((s[0], f[0]), (0.4, 0.4));
    }

    fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            n_v: 3,
            aug_dim: if variant == Variant::Node { 0 } else { 2 },
            variant,
            attention: if variant == Variant::Acla { AttentionMode::Start } else { AttentionMode::None },
            conv_filters: [3, 2],
            kernel_size: 3,
            lstm_hidden: 4,
            mlp_hidden: 8,
            solver: Solver::Rk4 { substeps: 1 },
            grad_mode: GradMode::Unrolled,
        }
    }

    fn decaying_series(n: usize, rate: f64) -> BatterySeries {
        let cycles: Vec<usize> = (1..=n).collect();
        let features = cycles
            .iter()
            .map(|&c| {
                let soh = 1.0 - rate * (c - 1) as f64 / n as f64;
                FeatureVector {
                    soh,
                    times: vec![0.0, 0.4 + 0.3 * (1.0 - soh), 1.0],
                }
            })
            .collect();
        BatterySeries::new("s", cycles, features, 1.0).unwrap()
    }

    fn short_schedule(iters: usize) -> TrainConfig {
        TrainConfig {
            warmup_iters: iters / 5,
            plateau_iters: iters / 2,
            decay_iters: iters - iters / 5 - iters / 2,
            lr_max: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_returns_init() {
        let c = tiny_config(Variant::Acla);
        let init = Params::init(&c, 1).unwrap();
        let tc = TrainConfig { max_iters: Some(0), ..TrainConfig::default() };
        let r = fit(&c, &[decaying_series(8, 0.1)], &tc, init.clone()).unwrap();
        assert_eq!(r.params, init);
        assert!(r.history.entries.is_empty());
    }

    #[test]
    fn lookahead_off_equals_plain_adamw() {
        let c = tiny_config(Variant::Anode);
        let s = decaying_series(8, 0.1);
        let init = Params::init(&c, 2).unwrap();
        let tc = TrainConfig { lookahead_beta: 1.0, lookahead_s: 1, ..short_schedule(50) };
        let r = fit(&c, std::slice::from_ref(&s), &tc, init.clone()).unwrap();

        let mut p = init.clone();
        let mut w = init.flat();
        let mut opt = AdamW::from_config(w.len(), &tc);
        for iter in 1..=50 {
            p.set_flat(&w);
            let (_, g) = loss_and_grad(&c, &p, &s).unwrap();
            opt.step(&mut w, &g, tc.lr_at(iter).unwrap()).unwrap();
        }
        for (a, b) in r.params.flat().iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_small_step_decreases_loss() {
        for variant in [Variant::Acla, Variant::Node] {
            let c = tiny_config(variant);
            let s = decaying_series(10, 0.15);
            let init = Params::init(&c, 4).unwrap();
            let (l0, g) = loss_and_grad(&c, &init, &s).unwrap();
            let mut w = init.flat();
            AdamW::new(w.len(), 0.9, 0.999, 1e-8, 1e-4).step(&mut w, &g, 1e-4).unwrap();
            let mut p = init.clone();
            p.set_flat(&w);
            let (l1, _) = loss_and_grad(&c, &p, &s).unwrap();
            assert!(l1 < l0, "{variant}: {l1} !< {l0}");
        }
    }

    #[test]
    fn fit_descends_on_flat_series_and_is_reproducible() {
        let c = tiny_config(Variant::Anode);
        let s = decaying_series(8, 0.0);
        let init = Params::init(&c, 5).unwrap();
        let tc = short_schedule(40);
        let a = fit(&c, std::slice::from_ref(&s), &tc, init.clone()).unwrap();
        let b = fit(&c, std::slice::from_ref(&s), &tc, init).unwrap();
        assert_eq!(a.history, b.history);
        let first = a.history.entries[0].loss;
        assert!(a.history.final_loss().unwrap() < first);
        assert!(a.history.to_csv().starts_with("iter,lr,loss\n1,"));
    }

    #[test]
    fn adjoint_gradient_matches_unrolled() {
        let mut c = tiny_config(Variant::Acla);
        let s = decaying_series(6, 0.1);
        let p = Params::init(&c, 6).unwrap();
        c.solver = Solver::Rk4 { substeps: 16 };
        let (lu, gu) = loss_and_grad(&c, &p, &s).unwrap();
        c.solver = Solver::Dopri5 { rtol: 1e-10, atol: 1e-12, max_steps: 100_000 };
        c.grad_mode = GradMode::Adjoint;
        let (la, ga) = loss_and_grad(&c, &p, &s).unwrap();
        assert!((lu - la).abs() < 1e-9);
        for (a, b) in ga.iter().zip(&gu) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-4), "{a} vs {b}");
        }
    }

    #[test]
    fn config_pairs_round_trip() {
        let tc = TrainConfig { max_iters: Some(50), decay: DecayShape::Cosine, ..TrainConfig::default() };
        let map: BTreeMap<String, String> = tc.to_pairs().into_iter().collect();
        assert_eq!(TrainConfig::from_pairs(&map).unwrap(), tc);
        let mut m = map.clone();
        m.remove("train.lr_max");
        assert!(TrainConfig::from_pairs(&m).unwrap_err().to_string().contains("train.lr_max"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn loss_is_nonnegative_and_zero_only_at_target(
                p in proptest::collection::vec(-1.0f64..1.0, 12),
                t in proptest::collection::vec(-1.0f64..1.0, 12),
            ) {
                let pr: Vec<Vec<f64>> = p.chunks(4).map(<[f64]>::to_vec).collect();
                let tr: Vec<Vec<f64>> = t.chunks(4).map(<[f64]>::to_vec).collect();
                let l = loss(&pr, &tr, 3).unwrap();
                prop_assert!(l >= 0.0);
                prop_assert_eq!(l == 0.0, pr == tr);
                prop_assert_eq!(loss(&tr, &tr, 3).unwrap(), 0.0);
            }

            #[test]
            fn schedule_is_piecewise_linear(i in 1usize..1000) {
                let c = TrainConfig::default();
                let lr = c.lr_at(i).unwrap();
                let expect = if i <= 220 {
                    0.01 * i as f64 / 220.0
                } else if i <= 720 {
                    0.01
                } else {
                    0.01 + (1e-5 - 0.01) * (i - 720) as f64 / 280.0
                };
                prop_assert!((lr - expect).abs() < 1e-15);
            }
        }
    }
}
