//! Patch-triplet embedding network.
//!
//! `f(r) = normalize(W2 · relu(W1 · s(r) + b1) + b2)` where `s` standardizes
//! each input dimension with statistics gathered from the training patches.
//! The network is trained on (anchor, positive, negative) patch triplets with
//! the hinge `max(0, m + ‖f_a − f_p‖² − ‖f_a − f_n‖²)`; anchor and positive
//! come from one authentic image, the negative from another. Negatives are
//! sampled uniformly, never mined.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng;

pub const MODEL_MAGIC: &[u8; 4] = b"TSM1";
pub const DEFAULT_HIDDEN: usize = 1024;
pub const DEFAULT_EMBED: usize = 512;
pub const DEFAULT_MARGIN: f64 = 0.04;
pub const DEFAULT_TRIPLETS: usize = 15_000;

#[derive(thiserror::Error, Debug)]
pub enum TripletError {
    #[error("input has dimension {got}, model expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("pre-normalization embedding has zero norm")]
    ZeroNorm,
    #[error("empty triplet batch")]
    EmptyBatch,
    #[error("need at least 2 images with at least 2 patches each ({0})")]
    InsufficientPatches(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("model file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("model file {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("model file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Rounds to the nearest f32 so that persisted parameters reload bit-exactly.
fn f32_exact(a: &mut [f64]) {
    for v in a {
        *v = *v as f32 as f64;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletModel {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Per-dimension standardization applied before the first layer.
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

/// Gradient of the loss with respect to every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Gradients {
    pub fn zeros_like(m: &TripletModel) -> Self {
        Self {
            w1: Array2::zeros(m.w1.raw_dim()),
            b1: Array1::zeros(m.b1.raw_dim()),
            w2: Array2::zeros(m.w2.raw_dim()),
            b2: Array1::zeros(m.b2.raw_dim()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }
}

impl TripletModel {
    /// Glorot-uniform initialization with identity standardization.
    pub fn init(input_dim: usize, hidden: usize, embed: usize, seed: u64) -> Self {
        let mut rng = rng::named(seed, "triplet-init");
        let mut glorot = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a) as f32 as f64)
        };
        let w1 = glorot(hidden, input_dim);
        let w2 = glorot(embed, hidden);
        Self {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(embed),
            mean: Array1::zeros(input_dim),
            std: Array1::ones(input_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Fits the input standardization to `rows`. Constant dimensions keep a
    /// unit scale.
    pub fn fit_standardizer<'a>(&mut self, rows: impl IntoIterator<Item = &'a [f64]>) {
        let d = self.input_dim();
        let mut n = 0usize;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for r in rows {
            n += 1;
            for ((s, q), &v) in sum.iter_mut().zip(&mut sq).zip(r) {
                *s += v;
                *q += v * v;
            }
        }
        if n == 0 {
            return;
        }
        for k in 0..d {
            let mu = sum[k] / n as f64;
            let var = (sq[k] / n as f64 - mu * mu).max(0.0);
            let sd = var.sqrt();
            self.mean[k] = mu;
            self.std[k] = if sd > 1e-12 { sd } else { 1.0 };
        }
        f32_exact(self.mean.as_slice_mut().unwrap());
        f32_exact(self.std.as_slice_mut().unwrap());
    }

    /// Rounds all parameters to f32 precision.
    pub fn round_to_f32(&mut self) {
        for a in [&mut self.w1, &mut self.w2] {
            a.mapv_inplace(|v| v as f32 as f64);
        }
        for a in [&mut self.b1, &mut self.b2, &mut self.mean, &mut self.std] {
            a.mapv_inplace(|v| v as f32 as f64);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }

    fn standardize(&self, rows: &[&[f64]]) -> Result<Array2<f64>, TripletError> {
        let d = self.input_dim();
        let mut x = Array2::<f64>::zeros((rows.len(), d));
        for (mut out, r) in x.rows_mut().into_iter().zip(rows) {
            if r.len() != d {
                return Err(TripletError::DimMismatch {
                    expected: d,
                    got: r.len(),
                });
            }
            Zip::from(&mut out)
                .and(*r)
                .and(&self.mean)
                .and(&self.std)
                .for_each(|o, &v, &m, &s| *o = (v - m) / s);
        }
        Ok(x)
    }

    fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Activations, TripletError> {
        let mut z1 = x.dot(&self.w1.t());
        z1 += &self.b1;
        let h = z1.mapv(|v| v.max(0.0));
        let mut z2 = h.dot(&self.w2.t());
        z2 += &self.b2;
        let norms: Array1<f64> = z2.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        if norms.iter().any(|&n| n == 0.0) {
            return Err(TripletError::ZeroNorm);
        }
        let y = &z2 / &norms.view().insert_axis(Axis(1));
        Ok(Activations { z1, h, norms, y })
    }

    /// Embeds one raw feature vector.
    pub fn forward(&self, r: &[f64]) -> Result<Vec<f64>, TripletError> {
        Ok(self.embed(&[r])?.row(0).to_vec())
    }

    /// Embeds many raw feature vectors, one output row per input.
    pub fn embed(&self, rows: &[&[f64]]) -> Result<Array2<f64>, TripletError> {
        if rows.is_empty() {
            return Ok(Array2::zeros((0, self.embed_dim())));
        }
        let x = self.standardize(rows)?;
        Ok(self.forward_batch(x.view())?.y)
    }

    /// Embeds in chunks to bound memory.
    pub fn embed_chunked(&self, rows: &[&[f64]], chunk: usize) -> Result<Array2<f64>, TripletError> {
        let mut out = Array2::zeros((rows.len(), self.embed_dim()));
        for (i, c) in rows.chunks(chunk.max(1)).enumerate() {
            let e = self.embed(c)?;
            let start = i * chunk.max(1);
            out.slice_mut(s![start..start + c.len(), ..]).assign(&e);
        }
        Ok(out)
    }

    pub fn apply_step(&mut self, g: &Gradients, step: f64) {
        self.w1.scaled_add(-step, &g.w1);
        self.b1.scaled_add(-step, &g.b1);
        self.w2.scaled_add(-step, &g.w2);
        self.b2.scaled_add(-step, &g.b2);
    }
}

struct Activations {
    z1: Array2<f64>,
    h: Array2<f64>,
    norms: Array1<f64>,
    y: Array2<f64>,
}

/// Reference to patch `patch` of image `image` in a [`FeatureBank`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchRef {
    pub image: usize,
    pub patch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: PatchRef,
    pub positive: PatchRef,
    pub negative: PatchRef,
}

/// Patch features grouped by image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureBank {
    pub images: Vec<Vec<Vec<f64>>>,
}

impl FeatureBank {
    pub fn new(images: Vec<Vec<Vec<f64>>>) -> Self {
        Self { images }
    }

    pub fn get(&self, r: PatchRef) -> &[f64] {
        &self.images[r.image][r.patch]
    }

    pub fn patch_counts(&self) -> Vec<usize> {
        self.images.iter().map(Vec::len).collect()
    }
}

/// `‖u − v‖²`.
pub fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Summed triplet hinge over `batch` and its gradient.
pub fn triplet_loss(model: &TripletModel, bank: &FeatureBank, batch: &[Triplet], margin: f64) -> Result<(f64, Gradients), TripletError> {
    if batch.is_empty() {
        return Err(TripletError::EmptyBatch);
    }
    let b = batch.len();
    let rows: Vec<&[f64]> = batch
        .iter()
        .map(|t| bank.get(t.anchor))
        .chain(batch.iter().map(|t| bank.get(t.positive)))
        .chain(batch.iter().map(|t| bank.get(t.negative)))
        .collect();
    let x = model.standardize(&rows)?;
    let act = model.forward_batch(x.view())?;

    let e = model.embed_dim();
    let mut dy = Array2::<f64>::zeros((3 * b, e));
    let mut loss = 0.0;
    let mut active = Vec::new();
    for i in 0..b {
        let (fa, fp, fneg) = (act.y.row(i), act.y.row(b + i), act.y.row(2 * b + i));
        let dap = sq_dist(fa.as_slice().unwrap(), fp.as_slice().unwrap());
        let dan = sq_dist(fa.as_slice().unwrap(), fneg.as_slice().unwrap());
        let hinge = margin + dap - dan;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        active.extend([i, b + i, 2 * b + i]);
        for k in 0..e {
            let (a, p, n) = (fa[k], fp[k], fneg[k]);
            dy[(i, k)] = 2.0 * (n - p);
            dy[(b + i, k)] = -2.0 * (a - p);
            dy[(2 * b + i, k)] = 2.0 * (a - n);
        }
    }

    let mut grads = Gradients::zeros_like(model);
    if active.is_empty() {
        return Ok((loss, grads));
    }
    active.sort_unstable();
    let sel_x = x.select(Axis(0), &active);
    let sel_h = act.h.select(Axis(0), &active);
    let sel_z1 = act.z1.select(Axis(0), &active);
    // through y = z / ‖z‖: dz = (dy − y (y·dy)) / ‖z‖
    let mut dz2 = Array2::<f64>::zeros((active.len(), e));
    for (r, &i) in active.iter().enumerate() {
        let y = act.y.row(i);
        let g = dy.row(i);
        let proj = y.dot(&g);
        let n = act.norms[i];
        Zip::from(dz2.row_mut(r))
            .and(&g)
            .and(&y)
            .for_each(|o, &gk, &yk| *o = (gk - yk * proj) / n);
    }
    grads.w2 = dz2.t().dot(&sel_h);
    grads.b2 = dz2.sum_axis(Axis(0));
    let mut dz1 = dz2.dot(&model.w2);
    Zip::from(&mut dz1).and(&sel_z1).for_each(|d, &z| {
        if z <= 0.0 {
            *d = 0.0
        }
    });
    grads.w1 = dz1.t().dot(&sel_x);
    grads.b1 = dz1.sum_axis(Axis(0));
    Ok((loss, grads))
}

/// Summed triplet hinge without gradients, evaluated in chunks.
pub fn triplet_loss_value(model: &TripletModel, bank: &FeatureBank, triplets: &[Triplet], margin: f64) -> Result<f64, TripletError> {
    let mut total = 0.0;
    for chunk in triplets.chunks(256) {
        let rows: Vec<&[f64]> = chunk
            .iter()
            .flat_map(|t| [bank.get(t.anchor), bank.get(t.positive), bank.get(t.negative)])
            .collect();
        let y = model.embed(&rows)?;
        for k in 0..chunk.len() {
            let (a, p, n) = (y.row(3 * k), y.row(3 * k + 1), y.row(3 * k + 2));
            let dap = (&a - &p).mapv(|v| v * v).sum();
            let dan = (&a - &n).mapv(|v| v * v).sum();
            total += (margin + dap - dan).max(0.0);
        }
    }
    Ok(total)
}

/// Draws `n` triplets: anchor and positive are distinct patches of a
/// uniformly chosen image, the negative a uniform patch of a different
/// uniformly chosen image.
pub fn sample_triplets(patch_counts: &[usize], n: usize, seed: u64) -> Result<Vec<Triplet>, TripletError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if patch_counts.len() < 2 {
        return Err(TripletError::InsufficientPatches(format!(
            "{} image(s) given",
            patch_counts.len()
        )));
    }
    if let Some((i, c)) = patch_counts.iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(TripletError::InsufficientPatches(format!(
            "image {i} has {c} patch(es)"
        )));
    }
    let mut rng = rng::named(seed, "triplet-sample");
    let k = patch_counts.len();
    Ok((0..n)
        .map(|_| {
            let img = rng.random_range(0..k);
            let a = rng.random_range(0..patch_counts[img]);
            let mut p = rng.random_range(0..patch_counts[img] - 1);
            if p >= a {
                p += 1;
            }
            let mut other = rng.random_range(0..k - 1);
            if other >= img {
                other += 1;
            }
            let neg = rng.random_range(0..patch_counts[other]);
            Triplet {
                anchor: PatchRef { image: img, patch: a },
                positive: PatchRef { image: img, patch: p },
                negative: PatchRef {
                    image: other,
                    patch: neg,
                },
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub lr0: f64,
    pub halving_period: usize,
    pub batch: usize,
    pub max_epochs: usize,
    pub hidden: usize,
    pub embed: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            lr0: 0.1,
            halving_period: 8,
            batch: 128,
            max_epochs: 64,
            hidden: DEFAULT_HIDDEN,
            embed: DEFAULT_EMBED,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `lr0 / 2^⌊epoch / period⌋`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 / 2f64.powi((epoch / self.halving_period.max(1)) as i32)
    }

    pub fn validate(&self) -> Result<(), TripletError> {
        let mut bad = Vec::new();
        if !(self.margin > 0.0) {
            bad.push("margin must be > 0");
        }
        if !(self.lr0 > 0.0) {
            bad.push("lr0 must be > 0");
        }
        if self.batch == 0 {
            bad.push("batch must be >= 1");
        }
        if self.halving_period == 0 {
            bad.push("halving period must be >= 1");
        }
        if self.hidden == 0 || self.embed == 0 {
            bad.push("layer widths must be >= 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            bad.push("val fraction must be in [0, 1)");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TripletError::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-triplet loss over the epoch's minibatches.
    pub train_loss: f64,
    /// Mean per-triplet loss on the held-out triplets after the epoch.
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> f64 {
        self.best_epoch
            .map(|e| self.epochs[e].val_loss)
            .unwrap_or(self.initial_val_loss)
    }
}

fn mean_loss(model: &TripletModel, bank: &FeatureBank, t: &[Triplet], m: f64) -> Result<f64, TripletError> {
    if t.is_empty() {
        return Ok(0.0);
    }
    Ok(triplet_loss_value(model, bank, t, m)? / t.len() as f64)
}

/// Minibatch SGD on the mean batch hinge with a step schedule; returns the
/// parameters with the lowest validation loss.
pub fn train(bank: &FeatureBank, triplets: &[Triplet], config: &TrainConfig) -> Result<(TripletModel, TrainLog), TripletError> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(TripletError::EmptyBatch);
    }
    let dim = bank.get(triplets[0].anchor).len();
    let mut rng: ChaCha8Rng = rng::named(config.seed, "triplet-train");

    let mut order: Vec<Triplet> = triplets.to_vec();
    order.shuffle(&mut rng);
    let n_val = ((triplets.len() as f64) * config.val_fraction).round() as usize;
    let n_val = n_val.min(triplets.len() - 1);
    let (val, train_set) = order.split_at(n_val);
    let mut train_set = train_set.to_vec();
    // without held-out triplets the training set doubles as validation
    let val: Vec<Triplet> = if val.is_empty() {
        train_set.clone()
    } else {
        val.to_vec()
    };

    let mut model = TripletModel::init(dim, config.hidden, config.embed, config.seed);
    let mut seen: Vec<PatchRef> = train_set
        .iter()
        .flat_map(|t| [t.anchor, t.positive, t.negative])
        .collect();
    seen.sort_unstable();
    seen.dedup();
    model.fit_standardizer(seen.iter().map(|&r| bank.get(r)));

    let mut log = TrainLog {
        initial_train_loss: mean_loss(&model, bank, &train_set, config.margin)?,
        initial_val_loss: mean_loss(&model, bank, &val, config.margin)?,
        ..TrainLog::default()
    };
    let mut best = model.clone();
    let mut best_val = log.initial_val_loss;

    for epoch in 0..config.max_epochs {
        let lr = config.learning_rate(epoch);
        train_set.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_set.chunks(config.batch) {
            let (loss, grads) = triplet_loss(&model, bank, batch, config.margin)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TripletError::Diverged { epoch, loss });
            }
            epoch_loss += loss;
            model.apply_step(&grads, lr / batch.len() as f64);
        }
        let val_loss = mean_loss(&model, bank, &val, config.margin)?;
        if !val_loss.is_finite() {
            return Err(TripletError::Diverged {
                epoch,
                loss: val_loss,
            });
        }
        log.epochs.push(EpochLog {
            epoch,
            lr,
            train_loss: epoch_loss / train_set.len() as f64,
            val_loss,
        });
        log::debug!(
            "triplet epoch {epoch}: lr {lr:.4} train {:.5} val {val_loss:.5}",
            epoch_loss / train_set.len() as f64
        );
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            log.best_epoch = Some(epoch);
        }
    }
    best.round_to_f32();
    Ok((best, log))
}

/// `TSM1` layout: magic, u32 input dim, u32 hidden, u32 embed, then
/// little-endian f32 W1, b1, W2, b2 (row-major), mean, std.
pub fn encode_model(m: &TripletModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * (m.param_count() + 2 * m.input_dim()));
    out.extend_from_slice(MODEL_MAGIC);
    for v in [m.input_dim(), m.hidden_dim(), m.embed_dim()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let arrays = m
        .w1
        .iter()
        .chain(&m.b1)
        .chain(&m.w2)
        .chain(&m.b2)
        .chain(&m.mean)
        .chain(&m.std);
    for &v in arrays {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<TripletModel, TripletError> {
    if bytes.len() < 16 || &bytes[..4] != MODEL_MAGIC {
        return Err(TripletError::Format {
            path: path.into(),
            reason: "missing TSM1 magic".into(),
        });
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (d, h, e) = (u(4), u(8), u(12));
    if d == 0 || h == 0 || e == 0 {
        return Err(TripletError::Format {
            path: path.into(),
            reason: format!("degenerate dimensions {d}/{h}/{e}"),
        });
    }
    let floats = h * d + h + e * h + e + 2 * d;
    let expected = 16 + 4 * floats;
    if bytes.len() != expected {
        return Err(TripletError::Truncated {
            path: path.into(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut vals = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut take = |n: usize| -> Vec<f64> { vals.by_ref().take(n).collect() };
    let w1 = Array2::from_shape_vec((h, d), take(h * d)).unwrap();
    let b1 = Array1::from(take(h));
    let w2 = Array2::from_shape_vec((e, h), take(e * h)).unwrap();
    let b2 = Array1::from(take(e));
    let mean = Array1::from(take(d));
    let std = Array1::from(take(d));
    Ok(TripletModel {
        w1,
        b1,
        w2,
        b2,
        mean,
        std,
    })
}

pub fn save_model(path: &Path, m: &TripletModel) -> Result<(), TripletError> {
    fs::write(path, encode_model(m)).map_err(|source| TripletError::Io {
        path: path.into(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<TripletModel, TripletError> {
    let bytes = fs::read(path).map_err(|source| TripletError::Io {
        path: path.into(),
        source,
    })?;
    decode_model(&bytes, path)
}
