//! Low-rank adapters in gated (`B·Diag(v)·A`) and vanilla (`B·A`) form.
//!
//! An adapter attaches to a [`LinearLayer`] and adds `scaling·B·Diag(v)·A` to its
//! weight. The increment is never materialized on the forward path: the input is
//! pushed through `A`, rescaled row-wise by the gate vector and mapped back up
//! through `B`. The number of nonzero gates is the adapter's rank, so pruning
//! gates is how the rank adapts.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, random_gaussian, random_uniform, scale_columns, scale_rows, Matrix, Rng, Vector};
use crate::model_kit::{LinearLayer, ParamKind, ToyModel};
use crate::tasks::TaskMode;

/// Standard deviation of the gaussian `A` initialization.
pub const LORA_A_STD: f64 = 0.02;
/// Default magnitude threshold for counting a gate as alive.
pub const DEFAULT_RANK_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    Gated,
    Vanilla,
}

/// How the gate vector of a gated adapter starts out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInit {
    /// Uniform on `[-1, 1)`.
    #[default]
    Uniform,
    /// All ones; with no gate updates this is exactly a vanilla adapter.
    Ones,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub mode: AdapterMode,
    /// r x n
    pub a: Matrix,
    /// m x r
    pub b: Matrix,
    /// Present exactly when `mode` is gated.
    pub gate: Option<Vector>,
    pub scaling: f64,
}

impl AdapterState {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len() + self.gate.as_ref().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rank();
        if r == 0 {
            return Err(Error::Parameter("adapter rank must be at least 1".into()));
        }
        if self.b.cols() != r {
            return Err(Error::Shape(format!(
                "adapter B is {}x{} but A has rank {r}",
                self.b.rows(),
                self.b.cols()
            )));
        }
        match (self.mode, &self.gate) {
            (AdapterMode::Gated, Some(v)) if v.len() == r => {}
            (AdapterMode::Gated, Some(v)) => {
                return Err(Error::Shape(format!(
                    "gate vector has length {} but rank is {r}",
                    v.len()
                )))
            }
            (AdapterMode::Gated, None) => {
                return Err(Error::Contract("gated adapter without a gate vector".into()))
            }
            (AdapterMode::Vanilla, Some(_)) => {
                return Err(Error::Contract("vanilla adapter carrying a gate vector".into()))
            }
            (AdapterMode::Vanilla, None) => {}
        }
        if !(self.scaling > 0.0 && self.scaling.is_finite()) {
            return Err(Error::Parameter(format!(
                "adapter scaling must be positive, got {}",
                self.scaling
            )));
        }
        Ok(())
    }

    /// Full-precision JSON checkpoint.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&AdapterRecord::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let record: AdapterRecord = serde_json::from_str(text)?;
        record.try_into()
    }
}

/// Flat on-disk form of an adapter: shapes plus row-major buffers.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRecord {
    pub mode: AdapterMode,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub scaling: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub v: Option<Vec<f64>>,
}

impl From<&AdapterState> for AdapterRecord {
    fn from(s: &AdapterState) -> Self {
        AdapterRecord {
            mode: s.mode,
            m: s.out_dim(),
            n: s.in_dim(),
            r: s.rank(),
            scaling: s.scaling,
            a: s.a.as_slice().to_vec(),
            b: s.b.as_slice().to_vec(),
            v: s.gate.clone(),
        }
    }
}

impl TryFrom<AdapterRecord> for AdapterState {
    type Error = Error;

    fn try_from(rec: AdapterRecord) -> Result<Self> {
        let state = AdapterState {
            mode: rec.mode,
            a: Matrix::from_vec(rec.r, rec.n, rec.a)?,
            b: Matrix::from_vec(rec.m, rec.r, rec.b)?,
            gate: rec.v,
            scaling: rec.scaling,
        };
        state.validate()?;
        Ok(state)
    }
}

/// Adapter shape and initialization, independent of where it attaches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSpec {
    pub mode: AdapterMode,
    pub rank: usize,
    pub scaling: f64,
    pub gate_init: GateInit,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        AdapterSpec {
            mode: AdapterMode::Gated,
            rank: 8,
            scaling: 1.0,
            gate_init: GateInit::Uniform,
        }
    }
}

pub fn init_adapter(
    rng: &mut Rng,
    mode: AdapterMode,
    m: usize,
    n: usize,
    r: usize,
    scaling: f64,
) -> Result<AdapterState> {
    init_adapter_with(rng, m, n, &AdapterSpec {
        mode,
        rank: r,
        scaling,
        gate_init: GateInit::Uniform,
    })
}

/// `A ~ N(0, 0.02²)`, `B = 0`, gates per `spec.gate_init`. `A` is drawn before
/// the gates so gated and vanilla adapters from the same stream share `A`.
pub fn init_adapter_with(rng: &mut Rng, m: usize, n: usize, spec: &AdapterSpec) -> Result<AdapterState> {
    let r = spec.rank;
    if m == 0 || n == 0 || r == 0 {
        return Err(Error::Parameter(format!(
            "adapter dimensions must be positive, got m={m} n={n} r={r}"
        )));
    }
    if r > m.min(n) {
        log::warn!("adapter rank {r} exceeds min(m, n) = {}", m.min(n));
    }
    let a = random_gaussian(rng, r, n, LORA_A_STD)?;
    let b = Matrix::zeros(m, r);
    let gate = match (spec.mode, spec.gate_init) {
        (AdapterMode::Vanilla, _) => None,
        (AdapterMode::Gated, GateInit::Uniform) => Some(random_uniform(rng, r, -1.0, 1.0)?),
        (AdapterMode::Gated, GateInit::Ones) => Some(vec![1.0; r]),
    };
    let state = AdapterState {
        mode: spec.mode,
        a,
        b,
        gate,
        scaling: spec.scaling,
    };
    state.validate()?;
    Ok(state)
}

/// `ΔW = scaling·B·Diag(v)·A` (gated) or `scaling·B·A` (vanilla), as an m x n matrix.
pub fn delta(s: &AdapterState) -> Matrix {
    let scaled_b = match &s.gate {
        Some(v) => scale_columns(&s.b, v).expect("validated adapter"),
        None => s.b.clone(),
    };
    let mut out = scaled_b.matmul(&s.a).expect("validated adapter");
    if s.scaling != 1.0 {
        out.scale_in_place(s.scaling);
    }
    out
}

/// Intermediates of the adapter branch, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BranchCache {
    /// A·x (r x N)
    pub projected: Matrix,
    /// Diag(v)·A·x (r x N); equals `projected` for vanilla adapters.
    pub gated: Matrix,
}

/// Adapter contribution `scaling·B·Diag(v)·(A·x)`, never forming an m x n matrix.
pub(crate) fn branch_forward(s: &AdapterState, x: &Matrix) -> Result<(Matrix, BranchCache)> {
    let projected = s.a.matmul(x)?;
    let gated = match &s.gate {
        Some(v) => scale_rows(&projected, v)?,
        None => projected.clone(),
    };
    let mut out = s.b.matmul(&gated)?;
    if s.scaling != 1.0 {
        out.scale_in_place(s.scaling);
    }
    Ok((out, BranchCache { projected, gated }))
}

pub(crate) struct BranchGrads {
    pub a: Option<Matrix>,
    pub b: Option<Matrix>,
    pub gate: Option<Vector>,
    /// Contribution to the gradient wrt the layer input.
    pub input: Option<Matrix>,
}

pub(crate) struct BranchWants {
    pub a: bool,
    pub b: bool,
    pub gate: bool,
    pub input: bool,
}

pub(crate) fn branch_backward(
    s: &AdapterState,
    cache: &BranchCache,
    x: &Matrix,
    dy: &Matrix,
    wants: BranchWants,
) -> Result<BranchGrads> {
    let b_grad = if wants.b {
        let mut g = dy.matmul_t(&cache.gated)?;
        g.scale_in_place(s.scaling);
        Some(g)
    } else {
        None
    };
    let need_inner = wants.a || wants.gate || wants.input;
    if !need_inner {
        return Ok(BranchGrads {
            a: None,
            b: b_grad,
            gate: None,
            input: None,
        });
    }
    // d(gated) = scaling·Bᵀ·dy
    let mut d_gated = s.b.t_matmul(dy)?;
    if s.scaling != 1.0 {
        d_gated.scale_in_place(s.scaling);
    }
    let gate_grad = match (&s.gate, wants.gate) {
        (Some(_), true) => Some(
            (0..d_gated.rows())
                .map(|i| {
                    d_gated
                        .row(i)
                        .iter()
                        .zip(cache.projected.row(i))
                        .map(|(g, h)| g * h)
                        .sum()
                })
                .collect(),
        ),
        _ => None,
    };
    let d_projected = match &s.gate {
        Some(v) => scale_rows(&d_gated, v)?,
        None => d_gated,
    };
    let a_grad = if wants.a {
        Some(d_projected.matmul_t(x)?)
    } else {
        None
    };
    let input = if wants.input {
        Some(s.a.t_matmul(&d_projected)?)
    } else {
        None
    };
    Ok(BranchGrads {
        a: a_grad,
        b: b_grad,
        gate: gate_grad,
        input,
    })
}

/// `(W0 + ΔW)·x + bias` for `host` with adapter `s`, ignoring any adapter the
/// host itself carries.
pub fn adapted_forward(host: &LinearLayer, s: &AdapterState, x: &Matrix) -> Result<Matrix> {
    if s.out_dim() != host.out_dim() || s.in_dim() != host.in_dim() {
        return Err(Error::Shape(format!(
            "adapter {}x{} does not fit host {}x{}",
            s.out_dim(),
            s.in_dim(),
            host.out_dim(),
            host.in_dim()
        )));
    }
    let mut y = host.weight.matmul(x)?;
    let (branch, _) = branch_forward(s, x)?;
    y.add_assign(&branch)?;
    y.add_row_broadcast(&host.bias)?;
    Ok(y)
}

/// Folds the adapter into the host weight. The returned layer carries no adapter.
pub fn merge(host: &LinearLayer, s: &AdapterState) -> Result<LinearLayer> {
    let d = delta(s);
    let weight = host.weight.add(&d)?;
    LinearLayer::new(weight, host.bias.clone())
}

/// Gates above `eps` for gated adapters; the fixed rank for vanilla ones.
pub fn effective_rank(s: &AdapterState, eps: f64) -> usize {
    match &s.gate {
        Some(v) => linalg::l0_norm(v, eps),
        None => s.rank(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    LinearProbe,
    Bitfit,
    AffineLn,
    Fft,
    Lora,
    Arena,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::LinearProbe,
        StrategyKind::Bitfit,
        StrategyKind::AffineLn,
        StrategyKind::Fft,
        StrategyKind::Lora,
        StrategyKind::Arena,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::LinearProbe => "linear_probe",
            StrategyKind::Bitfit => "bitfit",
            StrategyKind::AffineLn => "affine_ln",
            StrategyKind::Fft => "fft",
            StrategyKind::Lora => "lora",
            StrategyKind::Arena => "arena",
        }
    }

    /// Adapter form this strategy injects, if any.
    pub fn adapter_mode(self) -> Option<AdapterMode> {
        match self {
            StrategyKind::Lora => Some(AdapterMode::Vanilla),
            StrategyKind::Arena => Some(AdapterMode::Gated),
            _ => None,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Set of parameter-group names.
pub type ParamSet = BTreeSet<String>;

/// Attaches one freshly initialized adapter to every attachment point of the
/// model. Each attachment point draws from its own forked stream.
pub fn inject_adapters(model: &mut ToyModel, rng: &Rng, spec: &AdapterSpec) -> Result<usize> {
    let points = model.attachment_points();
    for (i, point) in points.iter().enumerate() {
        let host = model
            .linear_at_mut(point)
            .ok_or_else(|| Error::Config(format!("attachment point `{point}` not found")))?;
        let mut stream = rng.fork(i as u64);
        let state = init_adapter_with(&mut stream, host.out_dim(), host.in_dim(), spec)?;
        host.adapter = Some(state);
    }
    model.touch();
    Ok(points.len())
}

/// Parameter groups a strategy trains. In novel mode every strategy also trains
/// the head.
pub fn trainable_parameters(model: &ToyModel, strategy: StrategyKind, mode: TaskMode) -> Result<ParamSet> {
    let infos = model.param_infos();
    let select = |pred: &dyn Fn(ParamKind, bool) -> bool| -> ParamSet {
        infos
            .iter()
            .filter(|p| pred(p.kind, p.is_head))
            .map(|p| p.name.clone())
            .collect()
    };
    let mut set = match strategy {
        StrategyKind::LinearProbe => select(&|_, head| head),
        StrategyKind::Bitfit => select(&|k, _| k == ParamKind::Bias),
        StrategyKind::AffineLn => select(&|k, _| matches!(k, ParamKind::LnGamma | ParamKind::LnBeta)),
        StrategyKind::Fft => select(&|_, _| true),
        StrategyKind::Lora => {
            if model.adapters().any(|(_, s)| s.mode == AdapterMode::Gated) {
                return Err(Error::Config("lora strategy found gated adapters".into()));
            }
            select(&|k, _| matches!(k, ParamKind::AdapterA | ParamKind::AdapterB))
        }
        StrategyKind::Arena => {
            if model.adapters().any(|(_, s)| s.mode == AdapterMode::Vanilla) {
                return Err(Error::Config("arena strategy found vanilla adapters".into()));
            }
            select(&|k, _| {
                matches!(
                    k,
                    ParamKind::AdapterA | ParamKind::AdapterB | ParamKind::Gate
                )
            })
        }
    };
    if set.is_empty() {
        return Err(Error::Config(format!(
            "strategy `{strategy}` selects no parameter groups on this model"
        )));
    }
    if mode == TaskMode::Novel {
        let head = select(&|_, head| head);
        if head.is_empty() {
            return Err(Error::Config("novel mode requires a `head` layer".into()));
        }
        set.extend(head);
    }
    Ok(set)
}

pub fn count_trainable(model: &ToyModel, strategy: StrategyKind, mode: TaskMode) -> Result<usize> {
    let set = trainable_parameters(model, strategy, mode)?;
    Ok(model
        .param_infos()
        .iter()
        .filter(|p| set.contains(&p.name))
        .map(|p| p.len)
        .sum())
}
