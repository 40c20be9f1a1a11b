//! Appearance stream: face crops, a small convolutional classifier producing
//! `F(q)`, and ingestion of externally computed face scores.
//!
//! Network: `conv3×3(c1) → ReLU → maxpool2 → conv3×3(c2) → ReLU → maxpool2 →
//! dense → logit`, zero padding, `F = σ(logit)`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::exec;
use crate::fusion_eval::{self, FaceKey};
use crate::imagecore::{to_luma, Image, ImageError, Rect};
use crate::rng;

pub const APPEARANCE_MAGIC: &[u8; 4] = b"TSA1";
pub const DEFAULT_CROP: usize = 64;
pub const DEFAULT_C1: usize = 8;
pub const DEFAULT_C2: usize = 16;
pub const DEFAULT_BATCH: usize = 32;
pub const EXTERNAL_HEADER: &str = "image,face_index,score";

#[derive(thiserror::Error, Debug)]
pub enum AppearanceError {
    #[error("degenerate face rectangle {0:?}")]
    DegenerateRect(Rect),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("crop size must be a positive multiple of 4, got {0}")]
    CropSize(usize),
    #[error("crop has {actual} pixels, model expects {expected}")]
    CropShape { expected: usize, actual: usize },
    #[error("crop pixel {0} outside [0,1]")]
    PixelRange(usize),
    #[error("both classes are required (tampered {pos}, authentic {neg})")]
    SingleClass { pos: usize, neg: usize },
    #[error("{crops} crops but {labels} labels")]
    LabelCount { crops: usize, labels: usize },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid appearance config: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: truncated model, expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: {reason}")]
    Scores { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Grayscale face crop, row-major, `size × size`, values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceCrop {
    size: usize,
    pixels: Vec<f64>,
}

impl FaceCrop {
    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self, AppearanceError> {
        if pixels.len() != size * size {
            return Err(AppearanceError::CropShape {
                expected: size * size,
                actual: pixels.len(),
            });
        }
        if let Some(i) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(AppearanceError::PixelRange(i));
        }
        Ok(Self { size, pixels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }
}

/// Bilinear resampling of `face` to `size × size` with pixel-center
/// alignment and edge clamping, on the luma channel scaled to `[0,1]`.
pub fn crop_resize(img: &Image, face: Rect, size: usize) -> Result<FaceCrop, AppearanceError> {
    if face.w == 0 || face.h == 0 {
        return Err(AppearanceError::DegenerateRect(face));
    }
    if size == 0 {
        return Err(AppearanceError::CropSize(size));
    }
    let region = to_luma(&img.crop(face)?);
    let (w, h) = (face.w as usize, face.h as usize);
    let px = region.data();
    let src = |x: usize, y: usize| px[y * w + x] as f64;
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n as f64 / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    let mut pixels = Vec::with_capacity(size * size);
    for i in 0..size {
        let (y0, y1, fy) = coord(i, h);
        for j in 0..size {
            let (x0, x1, fx) = coord(j, w);
            let top = src(x0, y0) * (1.0 - fx) + src(x1, y0) * fx;
            let bot = src(x0, y1) * (1.0 - fx) + src(x1, y1) * fx;
            pixels.push(((top * (1.0 - fy) + bot * fy) / 255.0).clamp(0.0, 1.0));
        }
    }
    FaceCrop::new(size, pixels)
}

/// Parameters live in one flat vector:
/// `conv1_w [c1][3][3] | conv1_b [c1] | conv2_w [c2][c1][3][3] | conv2_b [c2] |
/// dense_w [c2][size/4][size/4] | dense_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceModel {
    size: usize,
    c1: usize,
    c2: usize,
    params: Vec<f64>,
}

#[derive(Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wd: usize,
    bd: usize,
    total: usize,
}

fn offsets(size: usize, c1: usize, c2: usize) -> Offsets {
    let q = size / 4;
    let w1 = 0;
    let b1 = w1 + c1 * 9;
    let w2 = b1 + c1;
    let b2 = w2 + c2 * c1 * 9;
    let wd = b2 + c2;
    let bd = wd + c2 * q * q;
    Offsets {
        w1,
        b1,
        w2,
        b2,
        wd,
        bd,
        total: bd + 1,
    }
}

struct Cache {
    z1: Vec<f64>,
    arg1: Vec<usize>,
    p1: Vec<f64>,
    z2: Vec<f64>,
    arg2: Vec<usize>,
    p2: Vec<f64>,
    logit: f64,
}

/// Same-padded 3×3 cross-correlation of `cin` planes of side `n` into `cout`.
fn conv3(input: &[f64], n: usize, cin: usize, cout: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cout * n * n];
    for k in 0..cout {
        let plane = &mut out[k * n * n..(k + 1) * n * n];
        plane.fill(b[k]);
        for c in 0..cin {
            let src = &input[c * n * n..(c + 1) * n * n];
            let kw = &w[(k * cin + c) * 9..(k * cin + c + 1) * 9];
            for u in 0..3 {
                for v in 0..3 {
                    let wt = kw[u * 3 + v];
                    // output (i,j) reads input (i+u-1, j+v-1)
                    let i_lo = 1usize.saturating_sub(u);
                    let i_hi = (n + 1 - u).min(n);
                    let j_lo = 1usize.saturating_sub(v);
                    let j_hi = (n + 1 - v).min(n);
                    for i in i_lo..i_hi {
                        let si = (i + u - 1) * n;
                        let row = &mut plane[i * n..(i + 1) * n];
                        for j in j_lo..j_hi {
                            row[j] += wt * src[si + j + v - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// ReLU then 2×2 max-pool; returns pooled values and the flat argmax of
/// each pooled cell (first maximum in row-major order).
fn relu_pool(z: &[f64], n: usize, ch: usize) -> (Vec<f64>, Vec<usize>) {
    let m = n / 2;
    let mut out = Vec::with_capacity(ch * m * m);
    let mut arg = Vec::with_capacity(ch * m * m);
    for c in 0..ch {
        for i in 0..m {
            for j in 0..m {
                let mut best = (f64::NEG_INFINITY, 0);
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = c * n * n + (2 * i + di) * n + 2 * j + dj;
                    let v = z[idx].max(0.0);
                    if v > best.0 {
                        best = (v, idx);
                    }
                }
                out.push(best.0);
                arg.push(best.1);
            }
        }
    }
    (out, arg)
}

pub fn sigmoid(z: f64) -> f64 {
    crate::svmstream::sigmoid(z)
}

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_with_logit(logit: f64, tampered: bool) -> f64 {
    let y = if tampered { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

impl AppearanceModel {
    /// Glorot-uniform convolutions, zero biases and a zero dense head, so a
    /// fresh model outputs `F = 0.5`.
    pub fn init(size: usize, c1: usize, c2: usize, seed: u64) -> Result<Self, AppearanceError> {
        if size == 0 || size % 4 != 0 {
            return Err(AppearanceError::CropSize(size));
        }
        if c1 == 0 || c2 == 0 {
            return Err(AppearanceError::Config("channel counts must be positive".into()));
        }
        let o = offsets(size, c1, c2);
        let mut params = vec![0.0; o.total];
        let mut rng = rng::named(seed, "appearance-init");
        let a1 = (6.0 / (9.0 + 9.0 * c1 as f64)).sqrt();
        for p in &mut params[o.w1..o.b1] {
            *p = rng.random_range(-a1..a1);
        }
        let a2 = (6.0 / (9.0 * c1 as f64 + 9.0 * c2 as f64)).sqrt();
        for p in &mut params[o.w2..o.b2] {
            *p = rng.random_range(-a2..a2);
        }
        let mut m = Self { size, c1, c2, params };
        m.round_to_f32();
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> (usize, usize) {
        (self.c1, self.c2)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    fn check(&self, crop: &FaceCrop) -> Result<(), AppearanceError> {
        if crop.size != self.size {
            return Err(AppearanceError::CropShape {
                expected: self.size * self.size,
                actual: crop.pixels.len(),
            });
        }
        Ok(())
    }

    fn forward_cached(&self, x: &[f64]) -> Cache {
        let o = offsets(self.size, self.c1, self.c2);
        let p = &self.params;
        let n = self.size;
        let z1 = conv3(x, n, 1, self.c1, &p[o.w1..o.b1], &p[o.b1..o.w2]);
        let (p1, arg1) = relu_pool(&z1, n, self.c1);
        let z2 = conv3(&p1, n / 2, self.c1, self.c2, &p[o.w2..o.b2], &p[o.b2..o.wd]);
        let (p2, arg2) = relu_pool(&z2, n / 2, self.c2);
        let logit = p[o.bd] + p[o.wd..o.bd].iter().zip(&p2).map(|(a, b)| a * b).sum::<f64>();
        Cache {
            z1,
            arg1,
            p1,
            z2,
            arg2,
            p2,
            logit,
        }
    }

    pub fn logit(&self, crop: &FaceCrop) -> Result<f64, AppearanceError> {
        self.check(crop)?;
        Ok(self.forward_cached(&crop.pixels).logit)
    }

    /// `F(q) = σ(logit)`.
    pub fn forward(&self, crop: &FaceCrop) -> Result<f64, AppearanceError> {
        Ok(sigmoid(self.logit(crop)?))
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_grad(&self, crop: &FaceCrop, tampered: bool) -> Result<(f64, Vec<f64>), AppearanceError> {
        self.check(crop)?;
        let n = self.size;
        let h = n / 2;
        let (c1, c2) = (self.c1, self.c2);
        let o = offsets(n, c1, c2);
        let p = &self.params;
        let c = self.forward_cached(&crop.pixels);
        let y = if tampered { 1.0 } else { 0.0 };
        let loss = bce_with_logit(c.logit, tampered);
        let dlogit = sigmoid(c.logit) - y;
        let mut g = vec![0.0; o.total];

        g[o.bd] = dlogit;
        for (gw, &a) in g[o.wd..o.bd].iter_mut().zip(&c.p2) {
            *gw = dlogit * a;
        }
        let mut dz2 = vec![0.0; c2 * h * h];
        for (k, &idx) in c.arg2.iter().enumerate() {
            if c.z2[idx] > 0.0 {
                dz2[idx] += dlogit * p[o.wd + k];
            }
        }
        let mut dp1 = vec![0.0; c1 * h * h];
        for k in 0..c2 {
            let dz = &dz2[k * h * h..(k + 1) * h * h];
            g[o.b2 + k] = dz.iter().sum();
            for ch in 0..c1 {
                let src = &c.p1[ch * h * h..(ch + 1) * h * h];
                let base = o.w2 + (k * c1 + ch) * 9;
                for u in 0..3 {
                    for v in 0..3 {
                        let wt = p[base + u * 3 + v];
                        let mut acc = 0.0;
                        for i in 1usize.saturating_sub(u)..(h + 1 - u).min(h) {
                            let si = (i + u - 1) * h;
                            for j in 1usize.saturating_sub(v)..(h + 1 - v).min(h) {
                                let d = dz[i * h + j];
                                acc += d * src[si + j + v - 1];
                                dp1[ch * h * h + si + j + v - 1] += d * wt;
                            }
                        }
                        g[base + u * 3 + v] = acc;
                    }
                }
            }
        }
        let mut dz1 = vec![0.0; c1 * n * n];
        for (k, &idx) in c.arg1.iter().enumerate() {
            if c.z1[idx] > 0.0 {
                dz1[idx] += dp1[k];
            }
        }
        let x = &crop.pixels;
        for k in 0..c1 {
            let dz = &dz1[k * n * n..(k + 1) * n * n];
            g[o.b1 + k] = dz.iter().sum();
            for u in 0..3 {
                for v in 0..3 {
                    let mut acc = 0.0;
                    for i in 1usize.saturating_sub(u)..(n + 1 - u).min(n) {
                        let si = (i + u - 1) * n;
                        for j in 1usize.saturating_sub(v)..(n + 1 - v).min(n) {
                            acc += dz[i * n + j] * x[si + j + v - 1];
                        }
                    }
                    g[o.w1 + k * 9 + u * 3 + v] = acc;
                }
            }
        }
        Ok((loss, g))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Scores every crop; order-independent and parallel under the feature flag.
pub fn score_crops(model: &AppearanceModel, crops: &[FaceCrop]) -> Result<Vec<f64>, AppearanceError> {
    exec::try_map(crops, |_, c| model.forward(c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceConfig {
    pub size: usize,
    pub c1: usize,
    pub c2: usize,
    pub lr0: f64,
    pub halving_period: usize,
    pub batch: usize,
    pub max_epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            size: DEFAULT_CROP,
            c1: DEFAULT_C1,
            c2: DEFAULT_C2,
            lr0: 0.1,
            halving_period: 8,
            batch: DEFAULT_BATCH,
            max_epochs: 32,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl AppearanceConfig {
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5f64.powi((epoch / self.halving_period) as i32)
    }

    pub fn validate(&self) -> Result<(), AppearanceError> {
        let mut bad = Vec::new();
        if self.size == 0 || self.size % 4 != 0 {
            bad.push(format!("size {} is not a positive multiple of 4", self.size));
        }
        if self.c1 == 0 || self.c2 == 0 {
            bad.push("channel counts must be positive".to_string());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            bad.push(format!("lr0 {} must be positive", self.lr0));
        }
        if self.halving_period == 0 {
            bad.push("halving_period must be positive".into());
        }
        if self.batch == 0 {
            bad.push("batch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            bad.push(format!("val_fraction {} outside [0,1)", self.val_fraction));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(AppearanceError::Config(bad.join("; ")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// `None` when the validation split holds a single class.
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AppearanceLog {
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub epochs: Vec<AppearanceEpoch>,
    pub best_epoch: Option<usize>,
}

impl AppearanceLog {
    pub fn best(&self) -> Option<&AppearanceEpoch> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|x| x.epoch == e))
    }
}

fn split_eval(model: &AppearanceModel, crops: &[FaceCrop], labels: &[bool], idx: &[usize]) -> (f64, f64, Option<f64>) {
    let logits: Vec<f64> = exec::map(idx, |_, &i| model.forward_cached(&crops[i].pixels).logit);
    let loss = idx
        .iter()
        .zip(&logits)
        .map(|(&i, &z)| bce_with_logit(z, labels[i]))
        .sum::<f64>()
        / idx.len() as f64;
    let acc = idx
        .iter()
        .zip(&logits)
        .filter(|(&i, &z)| (z > 0.0) == labels[i])
        .count() as f64
        / idx.len() as f64;
    let ls: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
    let auc = fusion_eval::auc_rank(&logits, &ls).ok();
    (loss, acc, auc)
}

/// SGD on binary cross-entropy with a halving schedule, a seeded 80/20
/// split and best-validation-loss checkpointing.
pub fn train_appearance(
    crops: &[FaceCrop],
    labels: &[bool],
    config: &AppearanceConfig,
) -> Result<(AppearanceModel, AppearanceLog), AppearanceError> {
    config.validate()?;
    if crops.len() != labels.len() {
        return Err(AppearanceError::LabelCount {
            crops: crops.len(),
            labels: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(AppearanceError::SingleClass {
            pos,
            neg: labels.len() - pos,
        });
    }
    if let Some(c) = crops.iter().find(|c| c.size != config.size) {
        return Err(AppearanceError::CropShape {
            expected: config.size * config.size,
            actual: c.pixels.len(),
        });
    }
    let mut rng: ChaCha8Rng = rng::named(config.seed, "appearance-train");
    let mut order: Vec<usize> = (0..crops.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((crops.len() as f64) * config.val_fraction).round() as usize;
    let n_val = n_val.min(crops.len() - 1);
    let (val, train) = order.split_at(n_val);
    let mut train = train.to_vec();
    let val: Vec<usize> = if val.is_empty() { train.clone() } else { val.to_vec() };

    let mut model = AppearanceModel::init(config.size, config.c1, config.c2, config.seed)?;
    let (initial_val_loss, _, _) = split_eval(&model, crops, labels, &val);
    let (initial_train_loss, _, _) = split_eval(&model, crops, labels, &train);
    let mut log = AppearanceLog {
        initial_train_loss,
        initial_val_loss,
        ..AppearanceLog::default()
    };
    let mut best = model.clone();
    let mut best_val = initial_val_loss;

    for epoch in 0..config.max_epochs {
        let lr = config.learning_rate(epoch);
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train.chunks(config.batch) {
            let per = exec::try_map(batch, |_, &i| model.loss_grad(&crops[i], labels[i]))?;
            let mut grad: Vec<f64> = vec![0.0; model.params.len()];
            for (loss, g) in &per {
                epoch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(AppearanceError::Diverged { epoch, loss: f64::NAN });
            }
            let step = lr / batch.len() as f64;
            for (p, g) in model.params.iter_mut().zip(&grad) {
                *p -= step * g;
            }
        }
        let train_loss = epoch_loss / train.len() as f64;
        let (val_loss, val_accuracy, val_auc) = split_eval(&model, crops, labels, &val);
        if !train_loss.is_finite() || !val_loss.is_finite() || !model.is_finite() {
            return Err(AppearanceError::Diverged {
                epoch,
                loss: if train_loss.is_finite() { val_loss } else { train_loss },
            });
        }
        log::debug!("appearance epoch {epoch}: lr {lr:.4} train {train_loss:.5} val {val_loss:.5} acc {val_accuracy:.3}");
        log.epochs.push(AppearanceEpoch {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_accuracy,
            val_auc,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            log.best_epoch = Some(epoch);
        }
    }
    best.round_to_f32();
    Ok((best, log))
}

/// `TSA1` layout: magic, u32 crop size, u32 c1, u32 c2, then the flat
/// parameter vector as little-endian f32 in the documented layer order.
pub fn encode_appearance(m: &AppearanceModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.params.len());
    out.extend_from_slice(APPEARANCE_MAGIC);
    for v in [m.size, m.c1, m.c2] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &p in &m.params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

pub fn decode_appearance(bytes: &[u8], path: &Path) -> Result<AppearanceModel, AppearanceError> {
    let bad = |reason: &str| AppearanceError::Format {
        path: path.into(),
        reason: reason.into(),
    };
    if bytes.len() < 16 || &bytes[..4] != APPEARANCE_MAGIC {
        return Err(bad("missing TSA1 magic"));
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (size, c1, c2) = (u(4), u(8), u(12));
    if size == 0 || size % 4 != 0 || c1 == 0 || c2 == 0 {
        return Err(bad("degenerate architecture"));
    }
    let total = offsets(size, c1, c2).total;
    let expected = 16 + 4 * total;
    if bytes.len() != expected {
        return Err(AppearanceError::Truncated {
            path: path.into(),
            expected,
            actual: bytes.len(),
        });
    }
    let params: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let m = AppearanceModel { size, c1, c2, params };
    if !m.is_finite() {
        return Err(bad("non-finite parameter"));
    }
    Ok(m)
}

pub fn save_appearance(m: &AppearanceModel, path: &Path) -> Result<(), AppearanceError> {
    std::fs::write(path, encode_appearance(m)).map_err(|source| AppearanceError::Io {
        path: path.into(),
        source,
    })
}

pub fn load_appearance(path: &Path) -> Result<AppearanceModel, AppearanceError> {
    let bytes = std::fs::read(path).map_err(|source| AppearanceError::Io {
        path: path.into(),
        source,
    })?;
    decode_appearance(&bytes, path)
}

/// Face scores computed outside this crate, keyed by (image, face index).
pub type ExternalScores = BTreeMap<FaceKey, f64>;

pub fn parse_external_scores(text: &str, path: &Path) -> Result<ExternalScores, AppearanceError> {
    let bad = |reason: String| AppearanceError::Scores {
        path: path.into(),
        reason,
    };
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().map(str::trim).collect::<Vec<_>>().join(",") != EXTERNAL_HEADER {
        return Err(bad(format!("expected header {EXTERNAL_HEADER:?}")));
    }
    let mut out = ExternalScores::new();
    for (k, rec) in r.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| bad(format!("row {row}: {e}")))?;
        if rec.len() != 3 {
            return Err(bad(format!("row {row}: expected 3 fields, found {}", rec.len())));
        }
        let image = rec[0].trim().to_string();
        if image.is_empty() {
            return Err(bad(format!("row {row}: empty image path")));
        }
        let idx: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {row}: bad face index {:?}", &rec[1])))?;
        let score: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("row {row}: bad score {:?}", &rec[2])))?;
        if !score.is_finite() {
            return Err(bad(format!("row {row}: score not finite")));
        }
        let key = (image, idx);
        if out.contains_key(&key) {
            return Err(bad(format!("row {row}: duplicate face {}", fusion_eval::face_id(&key))));
        }
        out.insert(key, score);
    }
    Ok(out)
}

pub fn load_external_scores(path: &Path) -> Result<ExternalScores, AppearanceError> {
    let text = std::fs::read_to_string(path).map_err(|source| AppearanceError::Io {
        path: path.into(),
        source,
    })?;
    parse_external_scores(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_model(size: usize, c1: usize, c2: usize, seed: u64) -> AppearanceModel {
        let mut m = AppearanceModel::init(size, c1, c2, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
        for p in m.params_mut() {
            *p = r.random_range(-0.5..0.5);
        }
        m
    }

    fn random_crop(size: usize, seed: u64) -> FaceCrop {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        FaceCrop::new(size, (0..size * size).map(|_| r.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn constant_faces_give_constant_crops() {
        let img = Image::filled(40, 40, 77);
        let c = crop_resize(&img, Rect::new(4, 4, 16, 16), 16).unwrap();
        assert!(c.pixels().iter().all(|&p| p == 77.0 / 255.0));
        let c = crop_resize(&img, Rect::new(0, 0, 32, 32), 16).unwrap();
        assert!(c.pixels().iter().all(|&p| (p - 77.0 / 255.0).abs() < 1e-15));
        assert!(matches!(
            crop_resize(&img, Rect::new(0, 0, 0, 4), 8),
            Err(AppearanceError::DegenerateRect(_))
        ));
        assert!(crop_resize(&img, Rect::new(30, 30, 16, 16), 8).is_err());
    }

    #[test]
    fn bilinear_matches_scalar_oracle() {
        let img = Image::new(2, 2, 1, vec![0, 255, 0, 255]).unwrap();
        let c = crop_resize(&img, Rect::new(0, 0, 2, 2), 4).unwrap();
        // source x = (j + 0.5)·2/4 − 0.5 clamped to [0,1]
        let want = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                assert!((c.pixels()[i * 4 + j] - want[j]).abs() < 1e-12);
            }
        }
        // a generic 5×3 region against per-pixel evaluation
        let img = Image::from_fn(7, 6, |x, y| ((x * 37 + y * 91) % 256) as u8);
        let face = Rect::new(1, 2, 5, 3);
        let c = crop_resize(&img, face, 8).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let sx = ((j as f64 + 0.5) * 5.0 / 8.0 - 0.5).clamp(0.0, 4.0);
                let sy = ((i as f64 + 0.5) * 3.0 / 8.0 - 0.5).clamp(0.0, 2.0);
                let mut v = 0.0;
                for (yy, wy) in [(sy.floor(), 1.0 - sy.fract()), (sy.floor() + 1.0, sy.fract())] {
                    for (xx, wx) in [(sx.floor(), 1.0 - sx.fract()), (sx.floor() + 1.0, sx.fract())] {
                        if wx * wy == 0.0 {
                            continue;
                        }
                        v += wx * wy * img.get(1 + xx as u32, 2 + yy as u32, 0) as f64;
                    }
                }
                assert!((c.pixels()[i * 8 + j] - v / 255.0).abs() < 1e-12, "{i},{j}");
            }
        }
    }

    fn oracle_logit(m: &AppearanceModel, x: &[f64]) -> f64 {
        let (n, (c1, c2)) = (m.size(), m.channels());
        let p = m.params();
        let w1 = |k: usize, u: usize, v: usize| p[k * 9 + u * 3 + v];
        let b1 = |k: usize| p[c1 * 9 + k];
        let base2 = c1 * 10;
        let w2 = |k: usize, c: usize, u: usize, v: usize| p[base2 + ((k * c1 + c) * 3 + u) * 3 + v];
        let b2 = |k: usize| p[base2 + c2 * c1 * 9 + k];
        let based = base2 + c2 * c1 * 9 + c2;
        let at = |img: &dyn Fn(isize, isize) -> f64, i: isize, j: isize, lim: isize| {
            if i < 0 || j < 0 || i >= lim || j >= lim {
                0.0
            } else {
                img(i, j)
            }
        };
        let xin = |i: isize, j: isize| x[(i * n as isize + j) as usize];
        let a1 = |k: usize, i: isize, j: isize| -> f64 {
            let mut s = b1(k);
            for u in 0..3 {
                for v in 0..3 {
                    s += w1(k, u, v) * at(&xin, i + u as isize - 1, j + v as isize - 1, n as isize);
                }
            }
            s.max(0.0)
        };
        let p1 = |k: usize, i: isize, j: isize| -> f64 {
            a1(k, 2 * i, 2 * j)
                .max(a1(k, 2 * i, 2 * j + 1))
                .max(a1(k, 2 * i + 1, 2 * j))
                .max(a1(k, 2 * i + 1, 2 * j + 1))
        };
        let h = (n / 2) as isize;
        let a2 = |k: usize, i: isize, j: isize| -> f64 {
            let mut s = b2(k);
            for c in 0..c1 {
                let pc = |ii: isize, jj: isize| p1(c, ii, jj);
                for u in 0..3 {
                    for v in 0..3 {
                        s += w2(k, c, u, v) * at(&pc, i + u as isize - 1, j + v as isize - 1, h);
                    }
                }
            }
            s.max(0.0)
        };
        let q = n / 4;
        let mut logit = p[p.len() - 1];
        for k in 0..c2 {
            for i in 0..q as isize {
                for j in 0..q as isize {
                    let v = a2(k, 2 * i, 2 * j)
                        .max(a2(k, 2 * i, 2 * j + 1))
                        .max(a2(k, 2 * i + 1, 2 * j))
                        .max(a2(k, 2 * i + 1, 2 * j + 1));
                    logit += p[based + (k * q + i as usize) * q + j as usize] * v;
                }
            }
        }
        logit
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        for seed in 0..5 {
            let m = random_model(8, 3, 4, seed);
            let c = random_crop(8, 100 + seed);
            let got = m.logit(&c).unwrap();
            let want = oracle_logit(&m, c.pixels());
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn fresh_model_outputs_half() {
        let m = AppearanceModel::init(16, 8, 16, 3).unwrap();
        for s in 0..4 {
            assert_eq!(m.forward(&random_crop(16, s)).unwrap(), 0.5);
        }
        assert!(AppearanceModel::init(10, 8, 16, 3).is_err());
        assert!(m.forward(&random_crop(8, 0)).is_err());
    }

    /// Central finite differences over every parameter of a tiny network.
    pub(crate) fn gradient_check(seed: u64) -> f64 {
        let m = random_model(8, 2, 3, seed);
        let c = random_crop(8, seed + 1000);
        let y = seed % 2 == 0;
        let (_, g) = m.loss_grad(&c, y).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..g.len() {
            let mut mp = m.clone();
            mp.params_mut()[k] += h;
            let mut mm = m.clone();
            mm.params_mut()[k] -= h;
            let lp = mp.loss_grad(&c, y).unwrap().0;
            let lm = mm.loss_grad(&c, y).unwrap().0;
            let num = (lp - lm) / (2.0 * h);
            let rel = (num - g[k]).abs() / num.abs().max(g[k].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let e = gradient_check(seed);
            assert!(e < 1e-4, "seed {seed}: rel err {e}");
        }
    }

    fn square_task(n: usize, size: usize, seed: u64) -> (Vec<FaceCrop>, Vec<bool>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut crops = Vec::new();
        let mut labels = Vec::new();
        for k in 0..n {
            let mut px: Vec<f64> = (0..size * size).map(|_| r.random_range(0.1..0.6)).collect();
            let tampered = k % 2 == 0;
            if tampered {
                let (x0, y0) = (r.random_range(0..=size - 8), r.random_range(0..=size - 8));
                for y in y0..y0 + 8 {
                    for x in x0..x0 + 8 {
                        px[y * size + x] = 1.0;
                    }
                }
            }
            crops.push(FaceCrop::new(size, px).unwrap());
            labels.push(tampered);
        }
        (crops, labels)
    }

    #[test]
    fn learns_bright_square_task() {
        let (crops, labels) = square_task(400, 32, 9);
        let cfg = AppearanceConfig {
            size: 32,
            max_epochs: 24,
            seed: 4,
            ..AppearanceConfig::default()
        };
        let (model, log) = train_appearance(&crops, &labels, &cfg).unwrap();
        assert!((log.initial_train_loss - std::f64::consts::LN_2).abs() < 0.1);
        let best = log.best().expect("improved over init");
        assert!(best.val_accuracy >= 0.95, "{log:?}");
        // loss decreases across 4-epoch windows
        let means: Vec<f64> = log
            .epochs
            .chunks(4)
            .map(|w| w.iter().map(|e| e.train_loss).sum::<f64>() / w.len() as f64)
            .collect();
        assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
        let short = AppearanceConfig { max_epochs: 2, ..cfg };
        let a = train_appearance(&crops, &labels, &short).unwrap();
        let b = train_appearance(&crops, &labels, &short).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, model);
    }

    #[test]
    fn trainer_rejects_bad_inputs() {
        let (crops, _) = square_task(8, 8, 1);
        let cfg = AppearanceConfig {
            size: 8,
            ..AppearanceConfig::default()
        };
        assert!(matches!(
            train_appearance(&crops, &[true; 8], &cfg),
            Err(AppearanceError::SingleClass { .. })
        ));
        assert!(matches!(
            train_appearance(&crops, &[true; 3], &cfg),
            Err(AppearanceError::LabelCount { .. })
        ));
        let labels: Vec<bool> = (0..8).map(|k| k % 2 == 0).collect();
        let wild = AppearanceConfig {
            lr0: 1e300,
            ..cfg.clone()
        };
        assert!(matches!(
            train_appearance(&crops, &labels, &wild),
            Err(AppearanceError::Diverged { .. })
        ));
        let broken = AppearanceConfig {
            batch: 0,
            size: 6,
            ..cfg
        };
        match train_appearance(&crops, &labels, &broken) {
            Err(AppearanceError::Config(msg)) => assert!(msg.contains("size") && msg.contains("batch")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn model_file_roundtrip() {
        let mut m = random_model(8, 2, 3, 5);
        m.round_to_f32();
        let bytes = encode_appearance(&m);
        assert_eq!(&bytes[..4], b"TSA1");
        assert_eq!(decode_appearance(&bytes, Path::new("m")).unwrap(), m);
        assert!(matches!(
            decode_appearance(&bytes[..bytes.len() - 4], Path::new("m")),
            Err(AppearanceError::Truncated { .. })
        ));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            decode_appearance(&wrong, Path::new("m")),
            Err(AppearanceError::Format { .. })
        ));
    }

    #[test]
    fn external_scores_parse_contract() {
        let p = Path::new("s.csv");
        assert!(parse_external_scores("image,face_index,score\n", p).unwrap().is_empty());
        let m = parse_external_scores("image,face_index,score\na.png,1,0.73\n", p).unwrap();
        assert_eq!(m[&("a.png".to_string(), 1)], 0.73);
        assert!(parse_external_scores("image,face_index,score\na.png,0,1\na.png,0,2\n", p).is_err());
        assert!(parse_external_scores("image,face_index,score\na.png,x,1\n", p).is_err());
        assert!(parse_external_scores("image,face_index,score\na.png,0,NaN\n", p).is_err());
        assert!(parse_external_scores("image,face_index,score\na.png,0\n", p).is_err());
        assert!(parse_external_scores("img,idx,score\n", p).is_err());
    }

    proptest! {
        #[test]
        fn crops_of_constant_images_are_constant(v in any::<u8>(), size in 1usize..24, w in 1u32..30, h in 1u32..30) {
            let img = Image::filled(32, 32, v);
            let c = crop_resize(&img, Rect::new(1, 1, w, h), size).unwrap();
            for &p in c.pixels() {
                prop_assert!((p - v as f64 / 255.0).abs() < 1e-12);
            }
        }

        #[test]
        fn outputs_are_probabilities_and_order_free(seed in any::<u64>()) {
            let m = random_model(8, 2, 3, seed);
            let crops: Vec<FaceCrop> = (0..4).map(|k| random_crop(8, seed.wrapping_add(k))).collect();
            let a = score_crops(&m, &crops).unwrap();
            let mut rev = crops.clone();
            rev.reverse();
            let mut b = score_crops(&m, &rev).unwrap();
            b.reverse();
            prop_assert_eq!(&a, &b);
            for f in a {
                prop_assert!(f > 0.0 && f < 1.0);
            }
        }
    }
}
