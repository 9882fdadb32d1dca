//! Small differentiable networks with explicit forward and backward passes.
//!
//! Activations are laid out feature-major: a batch is a matrix whose columns are
//! samples (or tokens). Every trainable tensor is addressed by a dotted group
//! name such as `fc1.weight` or `attn.w_k.gate`, which is what strategies,
//! optimizers and gradient maps key on.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{branch_backward, branch_forward, AdapterState, BranchCache, BranchWants, ParamSet};
use crate::error::{Error, Result};
use crate::linalg::{random_gaussian, Matrix, Rng, Vector};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DICE_SMOOTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    LnGamma,
    LnBeta,
    AdapterA,
    AdapterB,
    Gate,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub kind: ParamKind,
    pub is_head: bool,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    /// out x in
    pub weight: Matrix,
    pub bias: Vector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterState>,
}

#[derive(Clone, Debug)]
pub(crate) struct LinearCache {
    input: Matrix,
    branch: Option<BranchCache>,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Vector) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Shape(format!(
                "bias of length {} for {}x{} weight",
                bias.len(),
                weight.rows(),
                weight.cols()
            )));
        }
        Ok(LinearLayer {
            weight,
            bias,
            adapter: None,
        })
    }

    /// Gaussian weight with std `1/sqrt(in)`, zero bias.
    pub fn random(rng: &mut Rng, input: usize, output: usize) -> Result<Self> {
        let w = random_gaussian(rng, output, input, 1.0 / (input as f64).sqrt())?;
        LinearLayer::new(w, vec![0.0; output])
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `W·x + b`, ignoring any attached adapter.
    pub fn forward_plain(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = self.weight.matmul(x)?;
        y.add_row_broadcast(&self.bias)?;
        Ok(y)
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, LinearCache)> {
        let mut y = self.weight.matmul(x)?;
        let branch = match &self.adapter {
            Some(s) => {
                let (contribution, cache) = branch_forward(s, x)?;
                y.add_assign(&contribution)?;
                Some(cache)
            }
            None => None,
        };
        y.add_row_broadcast(&self.bias)?;
        Ok((
            y,
            LinearCache {
                input: x.clone(),
                branch,
            },
        ))
    }

    fn backward(
        &self,
        cache: &LinearCache,
        dy: &Matrix,
        prefix: &str,
        wants: &dyn Fn(&str) -> bool,
        need_dx: bool,
        grads: &mut Gradients,
    ) -> Result<Option<Matrix>> {
        let name = |suffix: &str| format!("{prefix}.{suffix}");
        let x = &cache.input;
        let weight_name = name("weight");
        if wants(&weight_name) {
            grads.insert(weight_name, dy.matmul_t(x)?.into_vec());
        }
        let bias_name = name("bias");
        if wants(&bias_name) {
            grads.insert(bias_name, dy.row_sums());
        }
        let mut dx = if need_dx {
            Some(self.weight.t_matmul(dy)?)
        } else {
            None
        };
        if let (Some(s), Some(bc)) = (&self.adapter, &cache.branch) {
            let (an, bn, gn) = (name("lora_a"), name("lora_b"), name("gate"));
            let bw = branch_backward(
                s,
                bc,
                x,
                dy,
                BranchWants {
                    a: wants(&an),
                    b: wants(&bn),
                    gate: s.gate.is_some() && wants(&gn),
                    input: need_dx,
                },
            )?;
            if let Some(g) = bw.a {
                grads.insert(an, g.into_vec());
            }
            if let Some(g) = bw.b {
                grads.insert(bn, g.into_vec());
            }
            if let Some(g) = bw.gate {
                grads.insert(gn, g);
            }
            if let (Some(dx), Some(extra)) = (dx.as_mut(), bw.input) {
                dx.add_assign(&extra)?;
            }
        }
        Ok(dx)
    }

    fn collect_infos(&self, prefix: &str, is_head: bool, out: &mut Vec<ParamInfo>) {
        let mut push = |suffix: &str, kind, len| {
            out.push(ParamInfo {
                name: format!("{prefix}.{suffix}"),
                kind,
                is_head,
                len,
            })
        };
        push("weight", ParamKind::Weight, self.weight.len());
        push("bias", ParamKind::Bias, self.bias.len());
        if let Some(s) = &self.adapter {
            push("lora_a", ParamKind::AdapterA, s.a.len());
            push("lora_b", ParamKind::AdapterB, s.b.len());
            if let Some(v) = &s.gate {
                push("gate", ParamKind::Gate, v.len());
            }
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.weight"), self.weight.as_mut_slice()));
        out.push((format!("{prefix}.bias"), self.bias.as_mut_slice()));
        if let Some(s) = &mut self.adapter {
            out.push((format!("{prefix}.lora_a"), s.a.as_mut_slice()));
            out.push((format!("{prefix}.lora_b"), s.b.as_mut_slice()));
            if let Some(v) = &mut s.gate {
                out.push((format!("{prefix}.gate"), v.as_mut_slice()));
            }
        }
    }
}

/// Per-column normalization over the feature axis with affine `gamma`, `beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Vector,
    pub beta: Vector,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            eps: LAYER_NORM_EPS,
        }
    }

    /// Normalized columns before the affine map, plus per-column `1/std`.
    pub fn normalize(&self, x: &Matrix) -> Result<(Matrix, Vector)> {
        let d = self.gamma.len();
        if x.rows() != d {
            return Err(Error::Shape(format!(
                "layer norm over {d} features got {} rows",
                x.rows()
            )));
        }
        let n = x.cols();
        let mut mean = vec![0.0; n];
        for r in 0..d {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= d as f64);
        let mut var = vec![0.0; n];
        for r in 0..d {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vector = var
            .iter()
            .map(|s| 1.0 / (s / d as f64 + self.eps).sqrt())
            .collect();
        let mut xhat = Matrix::zeros(d, n);
        for r in 0..d {
            let src = x.row(r);
            for (c, out) in xhat.row_mut(r).iter_mut().enumerate() {
                *out = (src[c] - mean[c]) * inv_std[c];
            }
        }
        Ok((xhat, inv_std))
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix, Vector)> {
        let (xhat, inv_std) = self.normalize(x)?;
        let mut y = xhat.clone();
        for r in 0..y.rows() {
            let (g, b) = (self.gamma[r], self.beta[r]);
            y.row_mut(r).iter_mut().for_each(|v| *v = g * *v + b);
        }
        Ok((y, xhat, inv_std))
    }

    fn backward(&self, xhat: &Matrix, inv_std: &[f64], dy: &Matrix) -> (Vector, Vector, Matrix) {
        let (d, n) = xhat.shape();
        let mut d_gamma = vec![0.0; d];
        let mut d_beta = vec![0.0; d];
        let mut dxhat = Matrix::zeros(d, n);
        for r in 0..d {
            let (dyr, xr) = (dy.row(r), xhat.row(r));
            d_gamma[r] = dyr.iter().zip(xr).map(|(a, b)| a * b).sum();
            d_beta[r] = dyr.iter().sum();
            let g = self.gamma[r];
            dxhat
                .row_mut(r)
                .iter_mut()
                .zip(dyr)
                .for_each(|(o, v)| *o = g * v);
        }
        let mut mean_d = vec![0.0; n];
        let mut mean_dx = vec![0.0; n];
        for r in 0..d {
            for c in 0..n {
                mean_d[c] += dxhat.get(r, c);
                mean_dx[c] += dxhat.get(r, c) * xhat.get(r, c);
            }
        }
        let mut dx = Matrix::zeros(d, n);
        for r in 0..d {
            for c in 0..n {
                let v = dxhat.get(r, c) - mean_d[c] / d as f64 - xhat.get(r, c) * mean_dx[c] / d as f64;
                dx.set(r, c, v * inv_std[c]);
            }
        }
        (d_gamma, d_beta, dx)
    }
}

/// Single-head self-attention with a residual connection:
/// `Y = X + W_o·(V·softmax(QᵀK/√d)ᵀ) + b_o`.
///
/// Columns are tokens. With `seq_len = Some(t)` the columns are split into
/// consecutive sequences of `t` tokens that attend only within themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub w_q: LinearLayer,
    pub w_k: LinearLayer,
    pub w_v: LinearLayer,
    pub w_o: LinearLayer,
    pub seq_len: Option<usize>,
}

#[derive(Clone, Debug)]
pub(crate) struct AttentionCache {
    q: (Matrix, LinearCache),
    k: (Matrix, LinearCache),
    v: (Matrix, LinearCache),
    o: LinearCache,
    probs: Vec<Matrix>,
    seq: usize,
}

/// Row-wise softmax.
pub fn softmax_rows(s: &Matrix) -> Matrix {
    let mut p = s.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    p
}

impl AttentionBlock {
    pub fn random(rng: &mut Rng, d: usize, seq_len: Option<usize>) -> Result<Self> {
        Ok(AttentionBlock {
            w_q: LinearLayer::random(rng, d, d)?,
            w_k: LinearLayer::random(rng, d, d)?,
            w_v: LinearLayer::random(rng, d, d)?,
            w_o: LinearLayer::random(rng, d, d)?,
            seq_len,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.in_dim()
    }

    fn seq_for(&self, n: usize) -> Result<usize> {
        let t = self.seq_len.unwrap_or(n);
        if t == 0 || n % t != 0 {
            return Err(Error::Shape(format!(
                "attention over {n} tokens with sequence length {t}"
            )));
        }
        Ok(t)
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, AttentionCache)> {
        let d = self.dim();
        if x.rows() != d {
            return Err(Error::Shape(format!(
                "attention of width {d} got {} rows",
                x.rows()
            )));
        }
        let n = x.cols();
        let t = self.seq_for(n)?;
        let scale = 1.0 / (self.w_q.out_dim() as f64).sqrt();
        let (q, qc) = self.w_q.forward(x)?;
        let (k, kc) = self.w_k.forward(x)?;
        let (v, vc) = self.w_v.forward(x)?;
        let mut attended = Matrix::zeros(v.rows(), n);
        let mut probs = Vec::with_capacity(n / t);
        for start in (0..n).step_by(t) {
            let (qs, ks, vs) = (
                q.columns(start, start + t),
                k.columns(start, start + t),
                v.columns(start, start + t),
            );
            let mut scores = qs.t_matmul(&ks)?;
            scores.scale_in_place(scale);
            let p = softmax_rows(&scores);
            let os = vs.matmul_t(&p)?;
            for r in 0..os.rows() {
                attended.row_mut(r)[start..start + t].copy_from_slice(os.row(r));
            }
            probs.push(p);
        }
        let (mut y, oc) = self.w_o.forward(&attended)?;
        y.add_assign(x)?;
        Ok((
            y,
            AttentionCache {
                q: (q, qc),
                k: (k, kc),
                v: (v, vc),
                o: oc,
                probs,
                seq: t,
            },
        ))
    }

    fn backward(
        &self,
        cache: &AttentionCache,
        dy: &Matrix,
        prefix: &str,
        wants: &dyn Fn(&str) -> bool,
        need_dx: bool,
        grads: &mut Gradients,
    ) -> Result<Option<Matrix>> {
        let scale = 1.0 / (self.w_q.out_dim() as f64).sqrt();
        let d_att = self
            .w_o
            .backward(&cache.o, dy, &format!("{prefix}.w_o"), wants, true, grads)?
            .expect("requested input gradient");
        let (q, k, v) = (&cache.q.0, &cache.k.0, &cache.v.0);
        let n = q.cols();
        let t = cache.seq;
        let mut dq = Matrix::zeros(q.rows(), n);
        let mut dk = Matrix::zeros(k.rows(), n);
        let mut dv = Matrix::zeros(v.rows(), n);
        for (i, start) in (0..n).step_by(t).enumerate() {
            let p = &cache.probs[i];
            let (qs, ks, vs) = (
                q.columns(start, start + t),
                k.columns(start, start + t),
                v.columns(start, start + t),
            );
            let dos = d_att.columns(start, start + t);
            let dvs = dos.matmul(p)?;
            let dp = dos.t_matmul(&vs)?;
            let mut ds = Matrix::zeros(t, t);
            for r in 0..t {
                let (pr, dpr) = (p.row(r), dp.row(r));
                let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                for (c, out) in ds.row_mut(r).iter_mut().enumerate() {
                    *out = pr[c] * (dpr[c] - dot) * scale;
                }
            }
            let dqs = ks.matmul_t(&ds)?;
            let dks = qs.matmul(&ds)?;
            for (dst, src) in [(&mut dq, &dqs), (&mut dk, &dks), (&mut dv, &dvs)] {
                for r in 0..src.rows() {
                    dst.row_mut(r)[start..start + t].copy_from_slice(src.row(r));
                }
            }
        }
        let mut dx = if need_dx { Some(dy.clone()) } else { None };
        for (layer, c, dz, tag) in [
            (&self.w_q, &cache.q.1, &dq, "w_q"),
            (&self.w_k, &cache.k.1, &dk, "w_k"),
            (&self.w_v, &cache.v.1, &dv, "w_v"),
        ] {
            let part = layer.backward(c, dz, &format!("{prefix}.{tag}"), wants, need_dx, grads)?;
            if let (Some(acc), Some(part)) = (dx.as_mut(), part) {
                acc.add_assign(&part)?;
            }
        }
        Ok(dx)
    }

    fn sublayers(&self) -> [(&'static str, &LinearLayer); 4] {
        [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Linear(LinearLayer),
    LayerNorm(LayerNorm),
    Relu,
    Attention(AttentionBlock),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedLayer {
    pub name: String,
    pub layer: Layer,
}

/// Final nonlinearity applied to the last layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Identity,
    /// Elementwise, for binary masks.
    Sigmoid,
    /// Over rows (classes) within each column.
    Softmax,
}

pub const HEAD: &str = "head";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyModel {
    pub layers: Vec<NamedLayer>,
    pub output: OutputKind,
    #[serde(skip)]
    version: u64,
}

impl PartialEq for ToyModel {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.output == other.output
    }
}

#[derive(Clone, Debug)]
enum LayerCache {
    Linear(LinearCache),
    LayerNorm { xhat: Matrix, inv_std: Vector },
    Relu { input: Matrix },
    Attention(Box<AttentionCache>),
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    layers: Vec<LayerCache>,
    output: Matrix,
    first_non_finite: Option<String>,
}

impl ForwardCache {
    /// Name of the first layer whose output contained NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.first_non_finite.as_deref()
    }
}

/// Gradients keyed by parameter-group name, flattened row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients(BTreeMap<String, Vector>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn insert(&mut self, name: String, grad: Vector) {
        self.0.insert(name, grad);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl ToyModel {
    pub fn new(layers: Vec<NamedLayer>, output: OutputKind) -> Self {
        ToyModel {
            layers,
            output,
            version: 0,
        }
    }

    /// One linear map named `proj`; the host for planted-rank tasks.
    pub fn linear(weight: Matrix, bias: Vector) -> Result<Self> {
        Ok(ToyModel::new(
            vec![NamedLayer {
                name: "proj".into(),
                layer: Layer::Linear(LinearLayer::new(weight, bias)?),
            }],
            OutputKind::Identity,
        ))
    }

    /// `fc1 → ln1 → relu → fc2 → relu → head`.
    pub fn mlp(rng: &mut Rng, input: usize, hidden: usize, output: usize, kind: OutputKind) -> Result<Self> {
        let layer = |name: &str, layer| NamedLayer {
            name: name.into(),
            layer,
        };
        Ok(ToyModel::new(
            vec![
                layer("fc1", Layer::Linear(LinearLayer::random(rng, input, hidden)?)),
                layer("ln1", Layer::LayerNorm(LayerNorm::new(hidden))),
                layer("relu1", Layer::Relu),
                layer("fc2", Layer::Linear(LinearLayer::random(rng, hidden, hidden)?)),
                layer("relu2", Layer::Relu),
                layer(HEAD, Layer::Linear(LinearLayer::random(rng, hidden, output)?)),
            ],
            kind,
        ))
    }

    /// `embed → attn → head`.
    pub fn attention(
        rng: &mut Rng,
        input: usize,
        d: usize,
        output: usize,
        seq_len: Option<usize>,
        kind: OutputKind,
    ) -> Result<Self> {
        let layer = |name: &str, layer| NamedLayer {
            name: name.into(),
            layer,
        };
        Ok(ToyModel::new(
            vec![
                layer("embed", Layer::Linear(LinearLayer::random(rng, input, d)?)),
                layer("attn", Layer::Attention(AttentionBlock::random(rng, d, seq_len)?)),
                layer(HEAD, Layer::Linear(LinearLayer::random(rng, d, output)?)),
            ],
            kind,
        ))
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Marks parameters as changed; outstanding caches become stale.
    pub fn touch(&mut self) {
        self.version = self.version.wrapping_add(1);
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match &l.layer {
            Layer::Linear(lin) => Some(lin.in_dim()),
            Layer::LayerNorm(ln) => Some(ln.gamma.len()),
            Layer::Attention(a) => Some(a.dim()),
            Layer::Relu => None,
        })
    }

    /// Linear layers that receive adapters: `w_k` and `w_v` of every attention
    /// block when the model has attention, otherwise every non-head linear layer.
    pub fn attachment_points(&self) -> Vec<String> {
        let attn: Vec<String> = self
            .layers
            .iter()
            .filter(|l| matches!(l.layer, Layer::Attention(_)))
            .flat_map(|l| [format!("{}.w_k", l.name), format!("{}.w_v", l.name)])
            .collect();
        if !attn.is_empty() {
            return attn;
        }
        self.layers
            .iter()
            .filter(|l| l.name != HEAD && matches!(l.layer, Layer::Linear(_)))
            .map(|l| l.name.clone())
            .collect()
    }

    /// Looks up a linear layer by path (`fc1`, `attn.w_k`).
    pub fn linear_at(&self, path: &str) -> Option<&LinearLayer> {
        let (top, sub) = match path.split_once('.') {
            Some((a, b)) => (a, Some(b)),
            None => (path, None),
        };
        let layer = self.layers.iter().find(|l| l.name == top)?;
        match (&layer.layer, sub) {
            (Layer::Linear(lin), None) => Some(lin),
            (Layer::Attention(a), Some(s)) => a.sublayers().into_iter().find(|(n, _)| *n == s).map(|(_, l)| l),
            _ => None,
        }
    }

    pub fn linear_at_mut(&mut self, path: &str) -> Option<&mut LinearLayer> {
        self.touch();
        let (top, sub) = match path.split_once('.') {
            Some((a, b)) => (a, Some(b)),
            None => (path, None),
        };
        let layer = self.layers.iter_mut().find(|l| l.name == top)?;
        match (&mut layer.layer, sub) {
            (Layer::Linear(lin), None) => Some(lin),
            (Layer::Attention(a), Some("w_q")) => Some(&mut a.w_q),
            (Layer::Attention(a), Some("w_k")) => Some(&mut a.w_k),
            (Layer::Attention(a), Some("w_v")) => Some(&mut a.w_v),
            (Layer::Attention(a), Some("w_o")) => Some(&mut a.w_o),
            _ => None,
        }
    }

    /// `(attachment path, adapter)` for every attached adapter, in layer order.
    pub fn adapters(&self) -> impl Iterator<Item = (String, &AdapterState)> {
        self.linears()
            .into_iter()
            .filter_map(|(path, lin)| lin.adapter.as_ref().map(|s| (path, s)))
    }

    fn linears(&self) -> Vec<(String, &LinearLayer)> {
        let mut out = Vec::new();
        for l in &self.layers {
            match &l.layer {
                Layer::Linear(lin) => out.push((l.name.clone(), lin)),
                Layer::Attention(a) => {
                    for (tag, lin) in a.sublayers() {
                        out.push((format!("{}.{tag}", l.name), lin));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Every parameter group, in a fixed order.
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for l in &self.layers {
            match &l.layer {
                Layer::Linear(lin) => lin.collect_infos(&l.name, l.name == HEAD, &mut out),
                Layer::LayerNorm(ln) => {
                    for (suffix, kind) in [("gamma", ParamKind::LnGamma), ("beta", ParamKind::LnBeta)] {
                        out.push(ParamInfo {
                            name: format!("{}.{suffix}", l.name),
                            kind,
                            is_head: false,
                            len: ln.gamma.len(),
                        });
                    }
                }
                Layer::Attention(a) => {
                    for (tag, lin) in a.sublayers() {
                        lin.collect_infos(&format!("{}.{tag}", l.name), false, &mut out);
                    }
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Mutable views of every parameter group, in the same order as
    /// [`param_infos`](Self::param_infos).
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.touch();
        let mut out = Vec::new();
        for l in &mut self.layers {
            match &mut l.layer {
                Layer::Linear(lin) => lin.collect_mut(&l.name, &mut out),
                Layer::LayerNorm(ln) => {
                    out.push((format!("{}.gamma", l.name), ln.gamma.as_mut_slice()));
                    out.push((format!("{}.beta", l.name), ln.beta.as_mut_slice()));
                }
                Layer::Attention(a) => {
                    a.w_q.collect_mut(&format!("{}.w_q", l.name), &mut out);
                    a.w_k.collect_mut(&format!("{}.w_k", l.name), &mut out);
                    a.w_v.collect_mut(&format!("{}.w_v", l.name), &mut out);
                    a.w_o.collect_mut(&format!("{}.w_o", l.name), &mut out);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Copy of one parameter group.
    pub fn param(&self, name: &str) -> Option<Vector> {
        let mut copy = self.clone();
        copy.params_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.to_vec())
    }

    pub fn num_params(&self) -> usize {
        self.param_infos().iter().map(|p| p.len).sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut first_non_finite = None;
        for l in &self.layers {
            let shape_ctx = |e: Error| match e {
                Error::Shape(msg) => Error::Shape(format!("layer `{}`: {msg}", l.name)),
                other => other,
            };
            let (out, cache) = match &l.layer {
                Layer::Linear(lin) => {
                    if h.rows() != lin.in_dim() {
                        return Err(Error::Shape(format!(
                            "layer `{}` expects {} input features, got {}",
                            l.name,
                            lin.in_dim(),
                            h.rows()
                        )));
                    }
                    let (y, c) = lin.forward(&h).map_err(shape_ctx)?;
                    (y, LayerCache::Linear(c))
                }
                Layer::LayerNorm(ln) => {
                    let (y, xhat, inv_std) = ln.forward(&h).map_err(shape_ctx)?;
                    (y, LayerCache::LayerNorm { xhat, inv_std })
                }
                Layer::Relu => (h.map(|v| v.max(0.0)), LayerCache::Relu { input: h }),
                Layer::Attention(a) => {
                    let (y, c) = a.forward(&h).map_err(shape_ctx)?;
                    (y, LayerCache::Attention(Box::new(c)))
                }
            };
            if first_non_finite.is_none() && !out.is_finite() {
                first_non_finite = Some(l.name.clone());
            }
            caches.push(cache);
            h = out;
        }
        let out = match self.output {
            OutputKind::Identity => h,
            OutputKind::Sigmoid => h.map(sigmoid),
            OutputKind::Softmax => softmax_rows(&h.transpose()).transpose(),
        };
        if first_non_finite.is_none() && !out.is_finite() {
            first_non_finite = Some("output".into());
        }
        Ok((
            out.clone(),
            ForwardCache {
                version: self.version,
                layers: caches,
                output: out,
                first_non_finite,
            },
        ))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Gradients of every parameter group.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &Matrix) -> Result<Gradients> {
        self.backward_for(cache, grad_output, None)
    }

    /// Gradients of the listed groups only (all groups when `wanted` is `None`).
    pub fn backward_for(
        &self,
        cache: &ForwardCache,
        grad_output: &Matrix,
        wanted: Option<&ParamSet>,
    ) -> Result<Gradients> {
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(Error::Contract(
                "forward cache does not belong to the current model state".into(),
            ));
        }
        if grad_output.shape() != cache.output.shape() {
            return Err(Error::Shape(format!(
                "output gradient {}x{} vs output {}x{}",
                grad_output.rows(),
                grad_output.cols(),
                cache.output.rows(),
                cache.output.cols()
            )));
        }
        let wants = |name: &str| wanted.is_none_or(|w| w.contains(name));
        let mut dh = match self.output {
            OutputKind::Identity => grad_output.clone(),
            OutputKind::Sigmoid => grad_output.zip_map(&cache.output, |g, s| g * s * (1.0 - s))?,
            OutputKind::Softmax => {
                let mut dz = grad_output.clone();
                for c in 0..dz.cols() {
                    let dot: f64 = (0..dz.rows())
                        .map(|r| grad_output.get(r, c) * cache.output.get(r, c))
                        .sum();
                    for r in 0..dz.rows() {
                        let s = cache.output.get(r, c);
                        dz.set(r, c, s * (grad_output.get(r, c) - dot));
                    }
                }
                dz
            }
        };
        // Input gradients are only needed above the lowest layer with a wanted group.
        let infos = self.param_infos();
        let lowest = self
            .layers
            .iter()
            .position(|l| {
                infos
                    .iter()
                    .any(|p| wants(&p.name) && p.name.split('.').next() == Some(l.name.as_str()))
            })
            .unwrap_or(self.layers.len());
        let mut grads = Gradients::default();
        for (i, (l, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            if i < lowest {
                break;
            }
            let need_dx = i > lowest;
            let next = match (&l.layer, c) {
                (Layer::Linear(lin), LayerCache::Linear(lc)) => {
                    lin.backward(lc, &dh, &l.name, &wants, need_dx, &mut grads)?
                }
                (Layer::LayerNorm(ln), LayerCache::LayerNorm { xhat, inv_std }) => {
                    let (dg, db, dx) = ln.backward(xhat, inv_std, &dh);
                    let (gn, bn) = (format!("{}.gamma", l.name), format!("{}.beta", l.name));
                    if wants(&gn) {
                        grads.insert(gn, dg);
                    }
                    if wants(&bn) {
                        grads.insert(bn, db);
                    }
                    Some(dx)
                }
                (Layer::Relu, LayerCache::Relu { input }) => {
                    Some(dh.zip_map(input, |g, x| if x > 0.0 { g } else { 0.0 })?)
                }
                (Layer::Attention(a), LayerCache::Attention(ac)) => {
                    a.backward(ac, &dh, &l.name, &wants, need_dx, &mut grads)?
                }
                _ => {
                    return Err(Error::Contract(format!(
                        "cache entry for layer `{}` has the wrong kind",
                        l.name
                    )))
                }
            };
            match next {
                Some(d) => dh = d,
                None => break,
            }
        }
        Ok(grads)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn expect_same_shape(op: &str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: prediction {}x{} vs target {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// `1 − (2Σpg + s)/(Σp + Σg + s)` over all entries, with its gradient wrt `pred`.
pub fn soft_dice_loss(pred: &Matrix, target: &Matrix, smooth: f64) -> Result<(f64, Matrix)> {
    expect_same_shape("soft_dice_loss", pred, target)?;
    let (p, g) = (pred.as_slice(), target.as_slice());
    let (loss, grad) = dice_terms(p, g, smooth);
    Ok((loss, Matrix::from_vec(pred.rows(), pred.cols(), grad)?))
}

fn dice_terms(p: &[f64], g: &[f64], smooth: f64) -> (f64, Vec<f64>) {
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<f64>() + g.iter().sum::<f64>() + smooth;
    let numer = 2.0 * inter + smooth;
    let loss = 1.0 - numer / denom;
    let grad = g
        .iter()
        .map(|&gk| -(2.0 * gk * denom - numer) / (denom * denom))
        .collect();
    (loss, grad)
}

/// Mean soft Dice loss over column groups of `group` columns (one group per
/// image) and over classes. A single-row prediction is a binary mask; with
/// several rows, row 0 is background and the mean runs over rows `1..`.
pub fn grouped_dice_loss(pred: &Matrix, target: &Matrix, group: usize, smooth: f64) -> Result<(f64, Matrix)> {
    expect_same_shape("grouped_dice_loss", pred, target)?;
    let n = pred.cols();
    if group == 0 || n % group != 0 {
        return Err(Error::Shape(format!(
            "{n} columns do not split into groups of {group}"
        )));
    }
    let classes: Vec<usize> = if pred.rows() == 1 {
        vec![0]
    } else {
        (1..pred.rows()).collect()
    };
    let terms = (n / group * classes.len()) as f64;
    let mut grad = Matrix::zeros(pred.rows(), n);
    let mut total = 0.0;
    for start in (0..n).step_by(group) {
        for &c in &classes {
            let p = &pred.row(c)[start..start + group];
            let g = &target.row(c)[start..start + group];
            let (loss, dg) = dice_terms(p, g, smooth);
            total += loss;
            for (dst, d) in grad.row_mut(c)[start..start + group].iter_mut().zip(dg) {
                *dst = d / terms;
            }
        }
    }
    Ok((total / terms, grad))
}

/// Mean over foreground classes (rows `1..`) of the soft Dice loss.
pub fn multiclass_dice_loss(pred: &Matrix, target: &Matrix, smooth: f64) -> Result<(f64, Matrix)> {
    grouped_dice_loss(pred, target, pred.cols(), smooth)
}

pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    expect_same_shape("mse_loss", pred, target)?;
    let count = pred.len() as f64;
    let diff = pred.sub(target)?;
    let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / count;
    Ok((loss, diff.scale(2.0 / count)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftDice,
    MulticlassDice,
}

impl LossKind {
    /// Loss and its gradient wrt `pred`; Dice variants average over groups of
    /// `group` columns.
    pub fn evaluate(self, pred: &Matrix, target: &Matrix, group: usize) -> Result<(f64, Matrix)> {
        match self {
            LossKind::Mse => mse_loss(pred, target),
            LossKind::SoftDice | LossKind::MulticlassDice => {
                grouped_dice_loss(pred, target, group, DICE_SMOOTH)
            }
        }
    }
}

/// `2|P∩G| / (|P|+|G|)`, defined as 1 when both masks are empty.
pub fn dice_score(pred_mask: &Matrix, gt_mask: &Matrix) -> Result<f64> {
    expect_same_shape("dice_score", pred_mask, gt_mask)?;
    let binary = |m: &Matrix| m.as_slice().iter().all(|&x| x == 0.0 || x == 1.0);
    if !binary(pred_mask) || !binary(gt_mask) {
        return Err(Error::Contract("dice_score expects binary masks".into()));
    }
    let inter: f64 = pred_mask
        .as_slice()
        .iter()
        .zip(gt_mask.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    let total = pred_mask.sum() + gt_mask.sum();
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / total)
}

/// Entries `>= threshold` become 1, the rest 0.
pub fn binarize(m: &Matrix, threshold: f64) -> Matrix {
    m.map(|x| if x >= threshold { 1.0 } else { 0.0 })
}
