//! Seeded few-shot task generators with known ground truth.
//!
//! Two families: a planted low-rank linear regression (`y = (W0 + ΔW*)x + ε`
//! with `rank ΔW* = r*`) and a 32×32 toy segmentation task built from Gaussian
//! blobs, with a pre-training routine that produces the frozen base model.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::adapters::ParamSet;
use crate::error::{Error, Result};
use crate::linalg::{random_gaussian, Matrix, Rng};
use crate::model_kit::{binarize, dice_score, LossKind, OutputKind, ParamKind, ToyModel};
use crate::prox_optimizer::{adamw_step, cosine_lr, CosineSchedule, OptimizerState, ProxConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    Base,
    Novel,
}

impl TaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::Base => "base",
            TaskMode::Novel => "novel",
        }
    }
}

pub const PLANTED_QUERY_SAMPLES: usize = 256;
pub const SEGMENTATION_QUERY_IMAGES: usize = 8;
pub const FOURIER_FEATURES: usize = 8;
/// Intensity, x/grid, y/grid, then the Fourier features.
pub const PIXEL_FEATURES: usize = 3 + FOURIER_FEATURES;
const FEATURE_SEED: u64 = 0x0A2E_7A5E_EDFE_A7u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMeta {
    pub family: String,
    pub k: usize,
    pub mode: TaskMode,
    pub planted_rank: Option<usize>,
    pub noise_sigma: Option<f64>,
}

/// A support set of `K` examples and a held-out query set. Each example spans
/// `group` consecutive columns (one column per sample, or one per pixel).
#[derive(Debug, Serialize, Deserialize)]
pub struct Task {
    pub support_x: Matrix,
    pub support_y: Matrix,
    query_x: Matrix,
    query_y: Matrix,
    pub loss_kind: LossKind,
    pub group: usize,
    pub meta: TaskMeta,
    #[serde(skip)]
    query_reads: AtomicUsize,
}

impl Clone for Task {
    fn clone(&self) -> Self {
        Task {
            support_x: self.support_x.clone(),
            support_y: self.support_y.clone(),
            query_x: self.query_x.clone(),
            query_y: self.query_y.clone(),
            loss_kind: self.loss_kind,
            group: self.group,
            meta: self.meta.clone(),
            query_reads: AtomicUsize::new(self.query_reads()),
        }
    }
}

impl PartialEq for Task {
    fn eq(&self, other: &Self) -> bool {
        self.support_x == other.support_x
            && self.support_y == other.support_y
            && self.query_x == other.query_x
            && self.query_y == other.query_y
            && self.loss_kind == other.loss_kind
            && self.group == other.group
            && self.meta == other.meta
    }
}

impl Task {
    pub fn new(
        support: (Matrix, Matrix),
        query: (Matrix, Matrix),
        loss_kind: LossKind,
        group: usize,
        meta: TaskMeta,
    ) -> Result<Self> {
        let task = Task {
            support_x: support.0,
            support_y: support.1,
            query_x: query.0,
            query_y: query.1,
            loss_kind,
            group,
            meta,
            query_reads: AtomicUsize::new(0),
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.group;
        let check = |x: &Matrix, y: &Matrix, what: &str| -> Result<()> {
            if x.cols() != y.cols() {
                return Err(Error::Shape(format!(
                    "{what}: {} input columns vs {} target columns",
                    x.cols(),
                    y.cols()
                )));
            }
            if g == 0 || x.cols() % g != 0 || x.cols() == 0 {
                return Err(Error::Shape(format!(
                    "{what}: {} columns do not form whole examples of {g}",
                    x.cols()
                )));
            }
            Ok(())
        };
        check(&self.support_x, &self.support_y, "support")?;
        check(&self.query_x, &self.query_y, "query")?;
        if self.support_x.rows() != self.query_x.rows() || self.support_y.rows() != self.query_y.rows() {
            return Err(Error::Shape("support and query feature sizes differ".into()));
        }
        if self.support_examples() != self.meta.k {
            return Err(Error::Shape(format!(
                "meta says K = {} but support holds {} examples",
                self.meta.k,
                self.support_examples()
            )));
        }
        Ok(())
    }

    pub fn support_examples(&self) -> usize {
        self.support_x.cols() / self.group
    }

    pub fn query_examples(&self) -> usize {
        self.query_x.cols() / self.group
    }

    pub fn input_dim(&self) -> usize {
        self.support_x.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.support_y.rows()
    }

    /// Support columns of the given examples, in order.
    pub fn support_batch(&self, examples: &[usize]) -> (Matrix, Matrix) {
        let g = self.group;
        let idx: Vec<usize> = examples.iter().flat_map(|&e| e * g..(e + 1) * g).collect();
        (self.support_x.select_columns(&idx), self.support_y.select_columns(&idx))
    }

    /// Held-out data. Every call is counted.
    pub fn query(&self) -> (&Matrix, &Matrix) {
        self.query_reads.fetch_add(1, Ordering::SeqCst);
        (&self.query_x, &self.query_y)
    }

    pub fn query_reads(&self) -> usize {
        self.query_reads.load(Ordering::SeqCst)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let task: Task = serde_json::from_str(text)?;
        task.validate()?;
        Ok(task)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spectrum {
    /// Every planted singular value equals 1.
    #[default]
    Flat,
    /// `s_i = 2^{-i}` for `i = 0..r*`.
    Decaying,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedSpec {
    pub m: usize,
    pub n: usize,
    pub r_star: usize,
    pub noise_sigma: f64,
    pub spectrum: Spectrum,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            m: 32,
            n: 32,
            r_star: 2,
            noise_sigma: 0.25,
            spectrum: Spectrum::Flat,
        }
    }
}

/// A planted task together with its generating matrices.
#[derive(Clone, Debug)]
pub struct PlantedDraw {
    pub task: Task,
    pub base_weight: Matrix,
    pub planted_delta: Matrix,
}

/// Columns of a `rows × cols` Gaussian matrix, orthonormalized.
pub fn random_orthonormal(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix> {
    if cols > rows {
        return Err(Error::Parameter(format!(
            "cannot fit {cols} orthonormal columns in dimension {rows}"
        )));
    }
    let g = random_gaussian(rng, rows, cols, 1.0)?;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for c in 0..cols {
        let mut v = g.col(c);
        // Two passes keep the basis orthogonal to machine precision.
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::Contract("degenerate Gaussian draw".into()));
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    let refs: Vec<&[f64]> = basis.iter().map(|v| v.as_slice()).collect();
    Ok(Matrix::from_columns(&refs))
}

pub fn planted_rank_task(
    rng: &Rng,
    m: usize,
    n: usize,
    r_star: usize,
    k: usize,
    noise_sigma: f64,
) -> Result<(Task, Matrix)> {
    let spec = PlantedSpec {
        m,
        n,
        r_star,
        noise_sigma,
        spectrum: Spectrum::Flat,
    };
    let draw = planted_rank_task_with(rng, &spec, k)?;
    Ok((draw.task, draw.base_weight))
}

pub fn planted_rank_task_with(rng: &Rng, spec: &PlantedSpec, k: usize) -> Result<PlantedDraw> {
    let PlantedSpec { m, n, r_star, .. } = *spec;
    if m == 0 || n == 0 {
        return Err(Error::Parameter("planted task needs m, n >= 1".into()));
    }
    if r_star > m.min(n) {
        return Err(Error::Parameter(format!(
            "r_star = {r_star} exceeds min(m, n) = {}",
            m.min(n)
        )));
    }
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::Parameter("noise_sigma must be finite and >= 0".into()));
    }
    let base_weight = random_gaussian(&mut rng.fork(1), m, n, 1.0 / (n as f64).sqrt())?;
    let planted_delta = if r_star == 0 {
        Matrix::zeros(m, n)
    } else {
        let u = random_orthonormal(&mut rng.fork(2), m, r_star)?;
        let v = random_orthonormal(&mut rng.fork(3), n, r_star)?;
        let s: Vec<f64> = (0..r_star)
            .map(|i| match spec.spectrum {
                Spectrum::Flat => 1.0,
                Spectrum::Decaying => 0.5f64.powi(i as i32),
            })
            .collect();
        crate::linalg::scale_columns(&u, &s)?.matmul_t(&v)?
    };
    let target = base_weight.add(&planted_delta)?;
    let sample = |stream: u64, cols: usize| -> Result<(Matrix, Matrix)> {
        let mut r = rng.fork(stream);
        let x = random_gaussian(&mut r, n, cols, 1.0)?;
        let noise = random_gaussian(&mut r, m, cols, spec.noise_sigma)?;
        let y = target.matmul(&x)?.add(&noise)?;
        Ok((x, y))
    };
    let task = Task::new(
        sample(4, k)?,
        sample(5, PLANTED_QUERY_SAMPLES)?,
        LossKind::Mse,
        1,
        TaskMeta {
            family: "planted_rank".into(),
            k,
            mode: TaskMode::Base,
            planted_rank: Some(r_star),
            noise_sigma: Some(spec.noise_sigma),
        },
    )?;
    Ok(PlantedDraw {
        task,
        base_weight,
        planted_delta,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    #[default]
    Mlp,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationSpec {
    pub grid: usize,
    /// Foreground classes; 1 gives a binary mask, more gives a one-hot map
    /// whose row 0 is background.
    pub classes: usize,
    pub noise_sigma: f64,
    pub query_images: usize,
}

impl Default for SegmentationSpec {
    fn default() -> Self {
        SegmentationSpec {
            grid: 32,
            classes: 1,
            noise_sigma: 0.1,
            query_images: SEGMENTATION_QUERY_IMAGES,
        }
    }
}

impl SegmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 8 {
            return Err(Error::Parameter("segmentation grid must be at least 8".into()));
        }
        if self.classes == 0 {
            return Err(Error::Parameter("segmentation needs at least one class".into()));
        }
        if self.query_images == 0 {
            return Err(Error::Parameter("segmentation needs query images".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Parameter("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.grid * self.grid
    }

    pub fn output_rows(&self) -> usize {
        if self.classes == 1 {
            1
        } else {
            self.classes + 1
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        if self.classes == 1 {
            LossKind::SoftDice
        } else {
            LossKind::MulticlassDice
        }
    }

    pub fn output_kind(&self) -> OutputKind {
        if self.classes == 1 {
            OutputKind::Sigmoid
        } else {
            OutputKind::Softmax
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    sigma_major: f64,
    sigma_minor: f64,
    angle: f64,
    amplitude: f64,
    class: usize,
}

impl Blob {
    fn draw(rng: &mut Rng, grid: f64, mode: TaskMode, class: usize) -> Blob {
        let margin = grid * 0.2;
        let cx = rng.uniform(margin, grid - margin);
        let cy = rng.uniform(margin, grid - margin);
        let boost = 1.0 + 0.6 * (class as f64 - 1.0);
        match mode {
            TaskMode::Base => {
                let s = rng.uniform(2.0, 4.0) * grid / 32.0;
                Blob {
                    cx,
                    cy,
                    sigma_major: s,
                    sigma_minor: s,
                    angle: 0.0,
                    amplitude: rng.uniform(0.8, 1.2) * boost,
                    class,
                }
            }
            TaskMode::Novel => Blob {
                cx,
                cy,
                sigma_major: rng.uniform(4.0, 6.0) * grid / 32.0,
                sigma_minor: rng.uniform(1.2, 2.0) * grid / 32.0,
                angle: rng.uniform(0.0, PI),
                amplitude: rng.uniform(1.6, 2.4) * boost,
                class,
            },
        }
    }

    /// Value relative to the peak, in `(0, 1]`.
    fn profile(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (-0.5 * (u * u / (self.sigma_major * self.sigma_major) + v * v / (self.sigma_minor * self.sigma_minor)))
            .exp()
    }
}

/// Fixed random Fourier map of `(intensity, x/grid, y/grid)`.
#[derive(Clone, Debug)]
struct FourierMap {
    omega: [[f64; 3]; FOURIER_FEATURES],
    phase: [f64; FOURIER_FEATURES],
}

impl FourierMap {
    fn fixed() -> Self {
        let mut rng = Rng::new(FEATURE_SEED);
        let mut omega = [[0.0; 3]; FOURIER_FEATURES];
        let mut phase = [0.0; FOURIER_FEATURES];
        for j in 0..FOURIER_FEATURES {
            for w in omega[j].iter_mut() {
                *w = 2.0 * rng.standard_normal();
            }
            phase[j] = rng.uniform(0.0, 2.0 * PI);
        }
        FourierMap { omega, phase }
    }
}

const BACKGROUND_PEDESTAL: f64 = 0.5;

/// One image as per-pixel features (row-major pixel order) and labels.
fn render_image(rng: &mut Rng, spec: &SegmentationSpec, mode: TaskMode, map: &FourierMap) -> (Vec<[f64; PIXEL_FEATURES]>, Vec<usize>) {
    let grid = spec.grid;
    let g = grid as f64;
    let blobs: Vec<Blob> = if spec.classes == 1 {
        let count = 1 + rng.below(2);
        (0..count).map(|_| Blob::draw(rng, g, mode, 1)).collect()
    } else {
        (1..=spec.classes).map(|c| Blob::draw(rng, g, mode, c)).collect()
    };
    let pedestal = match mode {
        TaskMode::Base => 0.0,
        TaskMode::Novel => BACKGROUND_PEDESTAL,
    };
    let mut feats = Vec::with_capacity(grid * grid);
    let mut labels = Vec::with_capacity(grid * grid);
    for row in 0..grid {
        for col in 0..grid {
            let (x, y) = (col as f64, row as f64);
            let mut intensity = pedestal + spec.noise_sigma * rng.standard_normal();
            let mut label = 0;
            let mut strongest = 0.0;
            for b in &blobs {
                let p = b.profile(x, y);
                intensity += b.amplitude * p;
                if p >= 0.5 && p > strongest {
                    strongest = p;
                    label = b.class;
                }
            }
            let base = [intensity, x / g, y / g];
            let mut f = [0.0; PIXEL_FEATURES];
            f[..3].copy_from_slice(&base);
            for j in 0..FOURIER_FEATURES {
                let arg: f64 = map.omega[j].iter().zip(&base).map(|(w, b)| w * b).sum::<f64>() + map.phase[j];
                f[3 + j] = arg.cos();
            }
            feats.push(f);
            labels.push(label);
        }
    }
    (feats, labels)
}

/// Renders `count` images, keeping the pixels in `keep` (all when `None`).
fn render_set(
    rng: &Rng,
    spec: &SegmentationSpec,
    mode: TaskMode,
    count: usize,
    keep: Option<(&mut Rng, usize)>,
) -> Result<(Matrix, Matrix)> {
    let map = FourierMap::fixed();
    let rows_out = spec.output_rows();
    let per = keep.as_ref().map_or(spec.pixels(), |k| k.1.min(spec.pixels()));
    let mut x = Matrix::zeros(PIXEL_FEATURES, count * per);
    let mut y = Matrix::zeros(rows_out, count * per);
    let mut picker = keep;
    for i in 0..count {
        let (feats, labels) = render_image(&mut rng.fork(i as u64), spec, mode, &map);
        let chosen: Vec<usize> = match picker.as_mut() {
            None => (0..feats.len()).collect(),
            Some((r, _)) => {
                let mut all: Vec<usize> = (0..feats.len()).collect();
                r.shuffle(&mut all);
                all.truncate(per);
                all
            }
        };
        for (j, &p) in chosen.iter().enumerate() {
            let c = i * per + j;
            for (f, &v) in feats[p].iter().enumerate() {
                x.set(f, c, v);
            }
            let row = if rows_out == 1 { 0 } else { labels[p] };
            if rows_out > 1 || labels[p] > 0 {
                y.set(row, c, 1.0);
            }
        }
    }
    Ok((x, y))
}

pub fn toy_segmentation_task(rng: &Rng, k: usize, mode: TaskMode) -> Result<Task> {
    toy_segmentation_task_with(rng, &SegmentationSpec::default(), k, mode)
}

pub fn toy_segmentation_task_with(rng: &Rng, spec: &SegmentationSpec, k: usize, mode: TaskMode) -> Result<Task> {
    spec.validate()?;
    if k == 0 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    Task::new(
        render_set(&rng.fork(1), spec, mode, k, None)?,
        render_set(&rng.fork(2), spec, mode, spec.query_images, None)?,
        spec.loss_kind(),
        spec.pixels(),
        TaskMeta {
            family: "segmentation".into(),
            k,
            mode,
            planted_rank: None,
            noise_sigma: Some(spec.noise_sigma),
        },
    )
}

/// Mean per-image Dice of thresholded (binary) or argmax (multi-class)
/// predictions; multi-class Dice averages the foreground classes.
pub fn segmentation_dice(pred: &Matrix, target: &Matrix, group: usize, threshold: f64) -> Result<f64> {
    if pred.shape() != target.shape() || group == 0 || pred.cols() % group != 0 {
        return Err(Error::Shape("segmentation_dice: inconsistent shapes".into()));
    }
    let images = pred.cols() / group;
    let mut total = 0.0;
    for i in 0..images {
        let p = pred.columns(i * group, (i + 1) * group);
        let t = target.columns(i * group, (i + 1) * group);
        if p.rows() == 1 {
            total += dice_score(&binarize(&p, threshold), &t)?;
        } else {
            let mut hard = Matrix::zeros(p.rows(), group);
            for c in 0..group {
                let col = p.col(c);
                let best = (0..col.len()).fold(0, |b, r| if col[r] > col[b] { r } else { b });
                hard.set(best, c, 1.0);
            }
            let classes = p.rows() - 1;
            let mut s = 0.0;
            for r in 1..p.rows() {
                s += dice_score(&Matrix::column(hard.row(r)).transpose(), &Matrix::column(t.row(r)).transpose())?;
            }
            total += s / classes as f64;
        }
    }
    Ok(total / images as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSpec {
    pub architecture: Architecture,
    pub hidden: usize,
    /// Base-mode images seen per epoch.
    pub examples: usize,
    pub epochs: usize,
    pub batch_images: usize,
    /// Pixels sampled per image in each step.
    pub pixels_per_image: usize,
    pub lr: f64,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        PretrainSpec {
            architecture: Architecture::Mlp,
            hidden: 32,
            examples: 2048,
            epochs: 4,
            batch_images: 8,
            pixels_per_image: 256,
            lr: 1e-2,
        }
    }
}

/// Untrained toy model with the architecture used for segmentation.
pub fn fresh_segmentation_model(rng: &mut Rng, seg: &SegmentationSpec, spec: &PretrainSpec) -> Result<ToyModel> {
    match spec.architecture {
        Architecture::Mlp => ToyModel::mlp(rng, PIXEL_FEATURES, spec.hidden, seg.output_rows(), seg.output_kind()),
        Architecture::Attention => ToyModel::attention(
            rng,
            PIXEL_FEATURES,
            spec.hidden,
            seg.output_rows(),
            Some(seg.grid),
            seg.output_kind(),
        ),
    }
}

pub fn pretrain_toy_model(rng: &Rng, epochs: usize) -> Result<ToyModel> {
    let spec = PretrainSpec {
        epochs,
        ..Default::default()
    };
    pretrain_with(rng, &SegmentationSpec::default(), &spec)
}

/// Full fine-tuning on base-mode images under the soft Dice loss.
pub fn pretrain_with(rng: &Rng, seg: &SegmentationSpec, spec: &PretrainSpec) -> Result<ToyModel> {
    seg.validate()?;
    if spec.examples == 0 || spec.batch_images == 0 || spec.pixels_per_image == 0 || spec.hidden == 0 {
        return Err(Error::Parameter("pretraining sizes must be positive".into()));
    }
    let mut model = fresh_segmentation_model(&mut rng.fork(0), seg, spec)?;
    let trainable: ParamSet = model.param_infos().into_iter().map(|p| p.name).collect();
    let prox = ProxConfig {
        base_lr: spec.lr,
        schedule: CosineSchedule {
            total_epochs: spec.epochs.max(1),
            min_lr: 0.0,
        },
        ..Default::default()
    };
    // Attention mixes pixels within a row, so it needs whole images.
    let per = match spec.architecture {
        Architecture::Mlp => spec.pixels_per_image.min(seg.pixels()),
        Architecture::Attention => seg.pixels(),
    };
    let steps = spec.examples.div_ceil(spec.batch_images);
    let data = rng.fork(1);
    let mut state = OptimizerState::new();
    for epoch in 0..spec.epochs {
        let lr = cosine_lr(epoch, &prox);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let first = step * spec.batch_images;
            let count = spec.batch_images.min(spec.examples - first);
            let images = data.fork(first as u64);
            let mut picker = data.fork(((epoch * steps + step) as u64) << 20 | 0xF);
            let keep = match spec.architecture {
                Architecture::Mlp => Some((&mut picker, per)),
                Architecture::Attention => None,
            };
            let (x, y) = render_set(&images, seg, TaskMode::Base, count, keep)?;
            let (pred, cache) = model.forward(&x)?;
            let (loss, grad) = seg.loss_kind().evaluate(&pred, &y, per)?;
            if !loss.is_finite() {
                let layer = cache.first_non_finite().unwrap_or("loss").to_string();
                return Err(Error::NonFinite { layer });
            }
            let grads = model.backward_for(&cache, &grad, Some(&trainable))?;
            for (name, param) in model.params_mut() {
                if let Some(g) = grads.get(&name) {
                    adamw_step(&mut state, &name, param, g, lr, &prox.adamw)?;
                }
            }
            epoch_loss += loss;
        }
        debug!("pretrain epoch {epoch}: loss {:.4}", epoch_loss / steps as f64);
    }
    info!("pretrained {:?} segmentation model for {} epochs", spec.architecture, spec.epochs);
    debug_assert!(model.param_infos().iter().all(|p| p.kind != ParamKind::Gate));
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_noiseless_oracle_is_exact() {
        let draw = planted_rank_task_with(
            &Rng::new(5),
            &PlantedSpec {
                noise_sigma: 0.0,
                ..Default::default()
            },
            10,
        )
        .unwrap();
        let w = draw.base_weight.add(&draw.planted_delta).unwrap();
        let (qx, qy) = draw.task.query();
        let pred = w.matmul(qx).unwrap();
        assert!(pred.max_abs_diff(qy) < 1e-12);
        assert_eq!(draw.task.query_reads(), 1);
        assert_eq!(draw.task.support_examples(), 10);
        assert_eq!(draw.task.query_examples(), PLANTED_QUERY_SAMPLES);
    }

    #[test]
    fn planted_degenerate_and_errors() {
        let (task, w0) = planted_rank_task(&Rng::new(1), 6, 4, 0, 3, 0.0).unwrap();
        let pred = w0.matmul(&task.support_x).unwrap();
        assert!(pred.max_abs_diff(&task.support_y) < 1e-12);
        assert!(matches!(planted_rank_task(&Rng::new(1), 6, 4, 5, 3, 0.1), Err(Error::Parameter(_))));
        assert!(matches!(planted_rank_task(&Rng::new(1), 6, 4, 2, 0, 0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn orthonormal_columns() {
        let q = random_orthonormal(&mut Rng::new(2), 9, 4).unwrap();
        let gram = q.t_matmul(&q).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(4)) < 1e-12);
    }

    #[test]
    fn decaying_spectrum_norm() {
        let spec = PlantedSpec {
            r_star: 3,
            spectrum: Spectrum::Decaying,
            ..Default::default()
        };
        let d = planted_rank_task_with(&Rng::new(3), &spec, 4).unwrap().planted_delta;
        let energy = d.frobenius_norm().powi(2);
        assert!((energy - (1.0 + 0.25 + 0.0625)).abs() < 1e-12);
    }

    #[test]
    fn segmentation_masks_nonempty_and_not_full() {
        for mode in [TaskMode::Base, TaskMode::Novel] {
            let task = toy_segmentation_task(&Rng::new(11), 6, mode).unwrap();
            let px = task.group;
            assert_eq!(px, 1024);
            assert_eq!(task.input_dim(), PIXEL_FEATURES);
            for i in 0..task.support_examples() {
                let (_, y) = task.support_batch(&[i]);
                let on = y.sum();
                assert!(on > 0.0 && on < px as f64, "mask area {on}");
            }
            let (_, qy) = task.query();
            for i in 0..task.query_examples() {
                let on = qy.columns(i * px, (i + 1) * px).sum();
                assert!(on > 0.0 && on < px as f64);
            }
        }
    }

    #[test]
    fn segmentation_is_seeded_and_features_fixed() {
        let a = toy_segmentation_task(&Rng::new(4), 2, TaskMode::Novel).unwrap();
        let b = toy_segmentation_task(&Rng::new(4), 2, TaskMode::Novel).unwrap();
        assert_eq!(a, b);
        let c = toy_segmentation_task(&Rng::new(5), 2, TaskMode::Novel).unwrap();
        assert_ne!(a.support_x, c.support_x);
        // Pixel coordinates are features 1 and 2.
        assert_eq!(a.support_x.get(1, 33), 1.0 / 32.0);
        assert_eq!(a.support_x.get(2, 33), 1.0 / 32.0);
    }

    #[test]
    fn multiclass_labels_are_one_hot() {
        let spec = SegmentationSpec {
            classes: 2,
            ..Default::default()
        };
        let task = toy_segmentation_task_with(&Rng::new(8), &spec, 2, TaskMode::Base).unwrap();
        assert_eq!(task.output_dim(), 3);
        assert_eq!(task.loss_kind, LossKind::MulticlassDice);
        for c in 0..task.support_y.cols() {
            assert_eq!(task.support_y.col(c).iter().sum::<f64>(), 1.0);
        }
        for r in 1..3 {
            assert!(task.support_y.row(r).iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn dice_of_perfect_and_empty_predictions() {
        let task = toy_segmentation_task(&Rng::new(2), 3, TaskMode::Base).unwrap();
        let y = &task.support_y;
        assert_eq!(segmentation_dice(y, y, 1024, 0.5).unwrap(), 1.0);
        let zero = Matrix::zeros(1, y.cols());
        assert_eq!(segmentation_dice(&zero, y, 1024, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn task_json_round_trip() {
        let (task, _) = planted_rank_task(&Rng::new(9), 3, 4, 1, 2, 0.1).unwrap();
        let back = Task::from_json(&task.to_json().unwrap()).unwrap();
        assert_eq!(back, task);
        assert_eq!(back.query_reads(), 0);
    }
}
