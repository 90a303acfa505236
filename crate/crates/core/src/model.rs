//! The ACLA vector field and its baselines, state augmentation, rollout,
//! end-of-life extrapolation and the checkpoint format.
//!
//! The field maps a `1 × D` state row (`D = n_v + 1 + aug_dim`) to its
//! derivative. For ACL/ACLA it runs attention over the feature block, then
//! treats the state as a length-`D` single-channel sequence through two
//! convolutions and an LSTM, and maps the last hidden state to `D` outputs.
//! NODE and ANODE use a two-layer tanh perceptron instead.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{self, AutodiffError, Tape, Tensor, Var};
use crate::layers::{self, Activation, AttentionMode, AttentionSpec, LayerError, LstmVars};
use crate::odesolve::{self, IvpSpec, SolveError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter '{name}' has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("vector field produced a non-finite value at τ = {t}")]
    NonFinite { t: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub const DEFAULT_AUG_DIM: usize = 20;
pub const EOL_THRESHOLD: f64 = 0.8;
/// EOL search horizon as a multiple of the training horizon in τ.
pub const DEFAULT_HORIZON_FACTOR: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Node,
    Anode,
    Acl,
    Acla,
}

impl Variant {
    pub fn uses_stack(self) -> bool {
        matches!(self, Variant::Acl | Variant::Acla)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Node => "node",
            Variant::Anode => "anode",
            Variant::Acl => "acl",
            Variant::Acla => "acla",
        })
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "node" => Ok(Variant::Node),
            "anode" => Ok(Variant::Anode),
            "acl" => Ok(Variant::Acl),
            "acla" => Ok(Variant::Acla),
            _ => Err(ModelError::InvalidConfig(format!("unknown variant '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Solver {
    Rk4 { substeps: usize },
    Dopri5 { rtol: f64, atol: f64, max_steps: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Backpropagation through the recorded RK4 steps.
    Unrolled,
    /// Continuous adjoint over a Dopri5 forward solve.
    Adjoint,
}

impl fmt::Display for GradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradMode::Unrolled => "unrolled",
            GradMode::Adjoint => "adjoint",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_v: usize,
    pub aug_dim: usize,
    pub variant: Variant,
    pub attention: AttentionMode,
    pub conv_filters: [usize; 2],
    pub kernel_size: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: usize,
    pub solver: Solver,
    pub grad_mode: GradMode,
}

impl ModelConfig {
    /// Full ACLA model with the given attention placement.
    pub fn acla(n_v: usize, attention: AttentionMode) -> Self {
        Self {
            n_v,
            aug_dim: DEFAULT_AUG_DIM,
            variant: Variant::Acla,
            attention,
            conv_filters: [64, 32],
            kernel_size: 3,
            lstm_hidden: 64,
            mlp_hidden: 64,
            solver: Solver::Rk4 { substeps: 1 },
            grad_mode: GradMode::Unrolled,
        }
    }

    /// Defaults for `variant`: attention `start` for ACLA, none otherwise,
    /// and no augmentation for NODE.
    pub fn for_variant(n_v: usize, variant: Variant) -> Self {
        let mut c = Self::acla(n_v, AttentionMode::Start);
        c.variant = variant;
        if variant != Variant::Acla {
            c.attention = AttentionMode::None;
        }
        if variant == Variant::Node {
            c.aug_dim = 0;
        }
        c
    }

    pub fn feature_len(&self) -> usize {
        self.n_v + 1
    }

    pub fn state_dim(&self) -> usize {
        self.n_v + 1 + self.aug_dim
    }

    /// Resolved attention window (inactive for variants without attention).
    pub fn attention_spec(&self) -> Result<AttentionSpec> {
        Ok(AttentionSpec::resolve(self.attention, self.n_v)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_v == 0 {
            return bad("n_v must be at least 1".into());
        }
        let spec = self.attention_spec()?;
        match self.variant {
            Variant::Node if self.aug_dim != 0 => return bad("NODE has no augmented dimensions".into()),
            Variant::Acla if spec.m == 0 => return bad("ACLA needs an attention window with m > 0".into()),
            Variant::Node | Variant::Anode | Variant::Acl if self.attention != AttentionMode::None => {
                return bad(format!("{} takes no attention (got '{}')", self.variant, self.attention));
            }
            _ => {}
        }
        if self.variant.uses_stack() {
            if self.kernel_size % 2 == 0 {
                return bad(format!("kernel size must be odd, got {}", self.kernel_size));
            }
            if self.conv_filters.contains(&0) || self.lstm_hidden == 0 {
                return bad("layer widths must be positive".into());
            }
        } else if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive".into());
        }
        match (self.solver, self.grad_mode) {
            (Solver::Rk4 { substeps: 0 }, _) => bad("rk4 substeps must be at least 1".into()),
            (Solver::Rk4 { .. }, GradMode::Unrolled) | (Solver::Dopri5 { .. }, GradMode::Adjoint) => Ok(()),
            (Solver::Rk4 { .. }, GradMode::Adjoint) => bad("adjoint gradients need the dopri5 solver".into()),
            (Solver::Dopri5 { .. }, GradMode::Unrolled) => bad("unrolled gradients need the rk4 solver".into()),
        }
    }

    /// Parameter tensors in declaration order: name, rows, cols, fan-in.
    pub fn layout(&self) -> Result<Vec<ParamSlot>> {
        let d = self.state_dim();
        let f = self.feature_len();
        let spec = self.attention_spec()?;
        let mut out = Vec::new();
        let mut push = |name: &'static str, rows: usize, cols: usize, fan_in: usize| {
            out.push(ParamSlot { name, rows, cols, fan_in })
        };
        if self.variant.uses_stack() {
            if spec.is_active() {
                push("attn_w", f, spec.m, f);
                push("attn_b", 1, spec.m, f);
            }
            let [c1, c2] = self.conv_filters;
            let k = self.kernel_size;
            let h = self.lstm_hidden;
            push("conv1_w", k, c1, k);
            push("conv1_b", 1, c1, k);
            push("conv2_w", k * c1, c2, k * c1);
            push("conv2_b", 1, c2, k * c1);
            push("lstm_w_ih", c2, 4 * h, h);
            push("lstm_w_hh", h, 4 * h, h);
            push("lstm_b", 1, 4 * h, h);
            push("head_w", h, d, h);
            push("head_b", 1, d, h);
        } else {
            let h = self.mlp_hidden;
            push("mlp_w1", d, h, d);
            push("mlp_b1", 1, h, d);
            push("mlp_w2", h, d, h);
            push("mlp_b2", 1, d, h);
        }
        Ok(out)
    }

    /// Canonical `key=value` lines, one per field, in a fixed order.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            s.push_str(&k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let (solver, substeps, rtol, atol, max_steps) = match self.solver {
            Solver::Rk4 { substeps } => ("rk4", substeps, odesolve::DEFAULT_RTOL, odesolve::DEFAULT_ATOL, odesolve::DEFAULT_MAX_STEPS),
            Solver::Dopri5 { rtol, atol, max_steps } => ("dopri5", 1, rtol, atol, max_steps),
        };
        [
            ("model.variant", self.variant.to_string()),
            ("model.n_v", self.n_v.to_string()),
            ("model.aug_dim", self.aug_dim.to_string()),
            ("model.attention", self.attention.to_string()),
            ("model.conv_filters", format!("{},{}", self.conv_filters[0], self.conv_filters[1])),
            ("model.kernel_size", self.kernel_size.to_string()),
            ("model.lstm_hidden", self.lstm_hidden.to_string()),
            ("model.mlp_hidden", self.mlp_hidden.to_string()),
            ("model.solver", solver.to_string()),
            ("model.rk4_substeps", substeps.to_string()),
            ("model.rtol", format!("{rtol:e}")),
            ("model.atol", format!("{atol:e}")),
            ("model.max_steps", max_steps.to_string()),
            ("model.grad_mode", self.grad_mode.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub const KEYS: [&'static str; 14] = [
        "model.variant",
        "model.n_v",
        "model.aug_dim",
        "model.attention",
        "model.conv_filters",
        "model.kernel_size",
        "model.lstm_hidden",
        "model.mlp_hidden",
        "model.solver",
        "model.rk4_substeps",
        "model.rtol",
        "model.atol",
        "model.max_steps",
        "model.grad_mode",
    ];

    /// Builds a config from `key → value` entries; every key in
    /// [`ModelConfig::KEYS`] must be present.
    pub fn from_pairs(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .map(|s| s.trim())
                .ok_or_else(|| ModelError::InvalidConfig(format!("missing key '{k}'")))
        };
        fn num<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| ModelError::InvalidConfig(format!("key '{k}': cannot parse '{v}'")))
        }
        let filters: Vec<&str> = get("model.conv_filters")?.split(',').collect();
        if filters.len() != 2 {
            return Err(ModelError::InvalidConfig("key 'model.conv_filters': expected two comma-separated counts".into()));
        }
        let solver = match get("model.solver")? {
            "rk4" => Solver::Rk4 {
                substeps: num("model.rk4_substeps", get("model.rk4_substeps")?)?,
            },
            "dopri5" => Solver::Dopri5 {
                rtol: num("model.rtol", get("model.rtol")?)?,
                atol: num("model.atol", get("model.atol")?)?,
                max_steps: num("model.max_steps", get("model.max_steps")?)?,
            },
            other => return Err(ModelError::InvalidConfig(format!("key 'model.solver': unknown solver '{other}'"))),
        };
        let grad_mode = match get("model.grad_mode")? {
            "unrolled" => GradMode::Unrolled,
            "adjoint" => GradMode::Adjoint,
            other => return Err(ModelError::InvalidConfig(format!("key 'model.grad_mode': unknown mode '{other}'"))),
        };
        // keys below are required even when the chosen solver ignores them
        get("model.rk4_substeps")?;
        get("model.rtol")?;
        get("model.atol")?;
        get("model.max_steps")?;
        Ok(Self {
            variant: get("model.variant")?.parse()?,
            n_v: num("model.n_v", get("model.n_v")?)?,
            aug_dim: num("model.aug_dim", get("model.aug_dim")?)?,
            attention: get("model.attention")?
                .parse()
                .map_err(|e: LayerError| ModelError::InvalidConfig(format!("key 'model.attention': {e}")))?,
            conv_filters: [
                num("model.conv_filters", filters[0].trim())?,
                num("model.conv_filters", filters[1].trim())?,
            ],
            kernel_size: num("model.kernel_size", get("model.kernel_size")?)?,
            lstm_hidden: num("model.lstm_hidden", get("model.lstm_hidden")?)?,
            mlp_hidden: num("model.mlp_hidden", get("model.mlp_hidden")?)?,
            solver,
            grad_mode,
        })
    }

    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidConfig(format!("malformed line '{line}'")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_pairs(&map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub fan_in: usize,
}

/// Parameter tensors in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub names: Vec<&'static str>,
    pub tensors: Vec<Tensor>,
}

impl Params {
    /// Uniform `±1/√fan_in` initialization from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.layout()?;
        Ok(Self {
            names: layout.iter().map(|s| s.name).collect(),
            tensors: layout
                .iter()
                .map(|s| layers::uniform_init(&mut rng, s.rows, s.cols, s.fan_in))
                .collect(),
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        let layout = config.layout()?;
        Ok(Self {
            names: layout.iter().map(|s| s.name).collect(),
            tensors: layout.iter().map(|s| Tensor::zeros(vec![s.rows, s.cols])).collect(),
        })
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.values().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.n_values(), "flat parameter length");
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.values_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| *n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        let i = self.names.iter().position(|n| *n == name)?;
        Some(&self.tensors[i])
    }

    /// Checks names and shapes against the config's layout.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let layout = config.layout()?;
        if layout.len() != self.tensors.len() {
            return Err(ModelError::InvalidInput(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for (slot, t) in layout.iter().zip(&self.tensors) {
            let got = t.dims2();
            if got != (slot.rows, slot.cols) {
                return Err(ModelError::ParamShape {
                    name: slot.name.to_string(),
                    expected: (slot.rows, slot.cols),
                    got,
                });
            }
        }
        Ok(())
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t, trainable)).collect()
    }
}

/// The vector field recorded on `tape`. `params` are the nodes returned by
/// [`Params::on_tape`] (or any nodes in the same order and shapes).
pub fn vector_field(tape: &mut Tape, config: &ModelConfig, spec: &AttentionSpec, params: &[Var], state: Var) -> Result<Var> {
    if config.variant.uses_stack() {
        let mut i = 0;
        let mut next = || {
            let v = params[i];
            i += 1;
            v
        };
        let mut x = state;
        if spec.is_active() {
            let (w, b) = (next(), next());
            let feats = tape.slice_cols(state, 0..config.feature_len())?;
            let scores = layers::attention_scores(tape, feats, w, b)?;
            let alpha = layers::attention_weights(tape, scores);
            x = layers::apply_attention(tape, state, alpha, spec)?;
        }
        let seq = tape.transpose(x);
        let (c1w, c1b, c2w, c2b) = (next(), next(), next(), next());
        let h1 = layers::conv1d(tape, seq, c1w, c1b, Activation::Tanh)?;
        let h2 = layers::conv1d(tape, h1, c2w, c2b, Activation::Tanh)?;
        let lstm = LstmVars {
            w_ih: next(),
            w_hh: next(),
            bias: next(),
        };
        let hidden = layers::lstm_forward(tape, h2, &lstm)?;
        let last = *hidden.last().expect("state dimension is positive");
        let (hw, hb) = (next(), next());
        Ok(layers::linear(tape, last, hw, hb)?)
    } else {
        let h = layers::linear(tape, state, params[0], params[1])?;
        let h = tape.tanh(h);
        Ok(layers::linear(tape, h, params[2], params[3])?)
    }
}

/// Derivative at one state, computed on a throwaway tape.
pub fn eval_field(config: &ModelConfig, params: &Params, state: &[f64]) -> Result<Vec<f64>> {
    let spec = config.attention_spec()?;
    let mut tape = Tape::new();
    let pv = params.on_tape(&mut tape, false);
    let s = tape.leaf_values(1, state.len(), state.to_vec(), false)?;
    let out = vector_field(&mut tape, config, &spec, &pv, s)?;
    let v = tape.value(out).to_vec();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ModelError::NonFinite { t: f64::NAN });
    }
    Ok(v)
}

/// `F_0` followed by `aug_dim` zeros.
pub fn augment(f0: &[f64], aug_dim: usize) -> Vec<f64> {
    let mut s = Vec::with_capacity(f0.len() + aug_dim);
    s.extend_from_slice(f0);
    s.resize(f0.len() + aug_dim, 0.0);
    s
}

fn check_tau_grid(tau: &[f64]) -> Result<()> {
    if tau.first() != Some(&0.0) {
        return Err(ModelError::InvalidInput("τ grid must start at 0".into()));
    }
    if tau.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ModelError::InvalidInput("τ grid must be strictly increasing".into()));
    }
    Ok(())
}

fn check_f0(config: &ModelConfig, f0: &[f64]) -> Result<()> {
    if f0.len() != config.feature_len() {
        return Err(ModelError::InvalidInput(format!(
            "initial feature vector has {} entries, expected {}",
            f0.len(),
            config.feature_len()
        )));
    }
    Ok(())
}

/// Full augmented states at every τ, integrated with the configured solver.
pub fn rollout_states(config: &ModelConfig, params: &Params, f0: &[f64], tau: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_f0(config, f0)?;
    check_tau_grid(tau)?;
    params.check(config)?;
    let y0 = augment(f0, config.aug_dim);
    if tau.len() == 1 {
        return Ok(vec![y0]);
    }
    let spec = config.attention_spec()?;
    let d = config.state_dim();
    let mut failure: Option<ModelError> = None;
    let field = |_t: f64, y: &[f64], dy: &mut [f64]| {
        let mut tape = Tape::new();
        let pv = params.on_tape(&mut tape, false);
        let res = tape
            .leaf_values(1, d, y.to_vec(), false)
            .map_err(ModelError::from)
            .and_then(|s| vector_field(&mut tape, config, &spec, &pv, s));
        match res {
            Ok(out) => dy.copy_from_slice(tape.value(out)),
            Err(e) => {
                failure.get_or_insert(e);
                dy.iter_mut().for_each(|v| *v = f64::NAN);
            }
        }
    };
    let traj = match config.solver {
        Solver::Rk4 { substeps } => odesolve::rk4_fixed(field, &y0, tau, substeps),
        Solver::Dopri5 { rtol, atol, max_steps } => {
            let ivp = IvpSpec::new(tau.to_vec(), rtol, atol, max_steps)?;
            odesolve::dopri5(field, &y0, &ivp)
        }
    };
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(traj.map_err(|e| match e {
        SolveError::NonFiniteDerivative { t } => ModelError::NonFinite { t },
        other => other.into(),
    })?
    .states)
}

/// Predicted `(SOH, t_1..t_{n_v})` rows at every τ; augmented coordinates dropped.
pub fn rollout(config: &ModelConfig, params: &Params, f0: &[f64], tau: &[f64]) -> Result<Vec<Vec<f64>>> {
    let f = config.feature_len();
    Ok(rollout_states(config, params, f0, tau)?
        .into_iter()
        .map(|mut s| {
            s.truncate(f);
            s
        })
        .collect())
}

/// RK4 rollout recorded on `tape` against parameter nodes `params`; returns
/// the full state node at every τ.
pub fn rollout_tape(tape: &mut Tape, config: &ModelConfig, params: &[Var], f0: &[f64], tau: &[f64]) -> Result<Vec<Var>> {
    check_f0(config, f0)?;
    check_tau_grid(tau)?;
    let substeps = match config.solver {
        Solver::Rk4 { substeps } => substeps,
        Solver::Dopri5 { .. } => {
            return Err(ModelError::InvalidConfig("tape rollout needs the rk4 solver".into()));
        }
    };
    let spec = config.attention_spec()?;
    let y0 = tape.constant(1, config.state_dim(), augment(f0, config.aug_dim))?;
    let mut failure: Option<ModelError> = None;
    let field = |tape: &mut Tape, _t: f64, y: Var| -> autodiff::Result<Var> {
        vector_field(tape, config, &spec, params, y).map_err(|e| {
            let msg = e.to_string();
            failure.get_or_insert(e);
            AutodiffError::InvalidArgument {
                op: autodiff::OpKind::Leaf,
                detail: msg,
            }
        })
    };
    let out = odesolve::rk4_fixed_tape(tape, field, y0, tau, substeps);
    if let Some(e) = failure {
        return Err(e);
    }
    out.map_err(|e| match e {
        SolveError::NonFiniteDerivative { t } => ModelError::NonFinite { t },
        other => other.into(),
    })
}

/// Affine map between τ and physical cycle numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleMap {
    pub cycle0: f64,
    pub cycle_last: f64,
}

impl CycleMap {
    pub fn new(cycle0: f64, cycle_last: f64) -> Result<Self> {
        if !(cycle_last > cycle0) || !cycle0.is_finite() || !cycle_last.is_finite() {
            return Err(ModelError::InvalidInput(format!(
                "cycle map needs cycle_last > cycle0, got {cycle0}..{cycle_last}"
            )));
        }
        Ok(Self { cycle0, cycle_last })
    }

    pub fn from_cycles(cycles: &[f64]) -> Result<Self> {
        match (cycles.first(), cycles.last()) {
            (Some(&a), Some(&b)) => Self::new(a, b),
            _ => Err(ModelError::InvalidInput("empty cycle list".into())),
        }
    }

    pub fn to_tau(&self, cycle: f64) -> f64 {
        (cycle - self.cycle0) / (self.cycle_last - self.cycle0)
    }

    pub fn to_cycle(&self, tau: f64) -> f64 {
        self.cycle0 + tau * (self.cycle_last - self.cycle0)
    }

    pub fn taus(&self, cycles: &[f64]) -> Vec<f64> {
        cycles.iter().map(|&c| self.to_tau(c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Eol {
    Cycle(f64),
    NotReached,
}

impl Eol {
    pub fn cycle(self) -> Option<f64> {
        match self {
            Eol::Cycle(c) => Some(c),
            Eol::NotReached => None,
        }
    }
}

/// First downward crossing of `threshold`, linearly interpolated between
/// the bracketing samples.
pub fn first_crossing(cycles: &[f64], soh: &[f64], threshold: f64) -> Eol {
    for i in 1..cycles.len().min(soh.len()) {
        let (s0, s1) = (soh[i - 1], soh[i]);
        if s0 >= threshold && s1 < threshold {
            let w = (s0 - threshold) / (s0 - s1);
            return Eol::Cycle(cycles[i - 1] + w * (cycles[i] - cycles[i - 1]));
        }
    }
    if soh.first().is_some_and(|&s| s < threshold) {
        // already below at the start
        return Eol::Cycle(cycles[0]);
    }
    Eol::NotReached
}

/// Options for [`predict_eol`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EolQuery {
    pub threshold: f64,
    /// Search the τ range `[0, horizon_tau]`.
    pub horizon_tau: f64,
    /// τ spacing of the evaluation grid.
    pub step_tau: f64,
}

impl EolQuery {
    /// Default horizon (3× `train_horizon_tau`) on steps of `step_tau`.
    pub fn new(train_horizon_tau: f64, step_tau: f64) -> Self {
        Self {
            threshold: EOL_THRESHOLD,
            horizon_tau: DEFAULT_HORIZON_FACTOR * train_horizon_tau,
            step_tau,
        }
    }
}

/// Extrapolated end of life in cycles, or [`Eol::NotReached`] within the horizon.
pub fn predict_eol(config: &ModelConfig, params: &Params, f0: &[f64], map: &CycleMap, q: &EolQuery) -> Result<Eol> {
    if !(q.threshold > 0.0 && q.threshold < 1.0) {
        return Err(ModelError::InvalidInput(format!("threshold must lie in (0, 1), got {}", q.threshold)));
    }
    if !(q.step_tau > 0.0) || !(q.horizon_tau >= q.step_tau) || !q.horizon_tau.is_finite() {
        return Err(ModelError::InvalidInput(format!(
            "EOL horizon {} and step {} are not usable",
            q.horizon_tau, q.step_tau
        )));
    }
    let n = (q.horizon_tau / q.step_tau).ceil() as usize;
    if n > 1_000_000 {
        return Err(ModelError::InvalidInput("EOL grid exceeds 10^6 points".into()));
    }
    let tau: Vec<f64> = (0..=n).map(|i| i as f64 * q.step_tau).collect();
    let rows = rollout(config, params, f0, &tau)?;
    let soh: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let cycles: Vec<f64> = tau.iter().map(|&t| map.to_cycle(t)).collect();
    Ok(first_crossing(&cycles, &soh, q.threshold))
}

const CKPT_MAGIC: &[u8; 8] = b"ACLACKPT";
const CKPT_VERSION: u32 = 1;

/// Serializes the config and parameters: magic, version (u32 LE), SHA-256
/// of the canonical config text, the text itself (u64 LE length prefix),
/// the value count (u64 LE) and every parameter value as f64 LE in
/// declaration order.
pub fn checkpoint_bytes(config: &ModelConfig, params: &Params) -> Result<Vec<u8>> {
    params.check(config)?;
    let text = config.canonical_text();
    let mut out = Vec::with_capacity(64 + text.len() + 8 * params.n_values());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(text.as_bytes()));
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.n_values() as u64).to_le_bytes());
    for t in &params.tensors {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Params)> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut r = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if r.len() < n {
            return Err(bad("truncated file"));
        }
        let (a, b) = r.split_at(n);
        r = b;
        Ok(a)
    };
    if take(8)? != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let digest = take(32)?.to_vec();
    let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let text = std::str::from_utf8(take(len)?).map_err(|_| bad("config text is not UTF-8"))?;
    if Sha256::digest(text.as_bytes()).as_slice() != digest.as_slice() {
        return Err(bad("config digest mismatch"));
    }
    let config = ModelConfig::from_canonical_text(text)?;
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let mut params = Params::zeros(&config)?;
    if n != params.n_values() {
        return Err(ModelError::Checkpoint(format!(
            "{n} stored values, configuration needs {}",
            params.n_values()
        )));
    }
    let raw = take(8 * n)?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if !r.is_empty() {
        return Err(bad("trailing bytes"));
    }
    params.set_flat(&values);
    Ok((config, params))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &Params) -> Result<String> {
    let bytes = checkpoint_bytes(config, params)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(hex_digest(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Params)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

/// Lower-case hex SHA-256.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
