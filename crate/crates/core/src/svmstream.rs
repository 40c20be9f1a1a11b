//! Per-face linear SVM trained on the fly.
//!
//! For a test face, background patches of the same image are the negative
//! class and an equal number of patches drawn from other images are the
//! positive class. The trained model scores each face patch with
//! `S(x) = σ(w·x + b)`, and the face score is the mean over its patches.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};

use crate::imagecore::{FacePartition, Image, ImageError, PatchGrid};
use crate::rng;

pub const DEFAULT_C: f64 = 100.0;
pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_MAX_EPOCHS: usize = 1000;

#[derive(thiserror::Error, Debug)]
pub enum SvmError {
    #[error("training data holds a single class")]
    SingleClass,
    #[error("no training samples")]
    Empty,
    #[error("sample {index} has dimension {got}, expected {expected}")]
    DimMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("the face covers every patch; no background patches remain")]
    NoBackground,
    #[error("the face covers no patch")]
    NoFacePatches,
    #[error("positive pool is empty")]
    EmptyPool,
    #[error("positive pool too small: {required} required, {available} available")]
    PoolTooSmall { required: usize, available: usize },
    #[error("expected {expected} patch scores, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("i/o error writing {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: DEFAULT_C,
            tol: DEFAULT_TOL,
            max_epochs: DEFAULT_MAX_EPOCHS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub b: f64,
    pub c: f64,
    pub trained: bool,
    /// Dual multipliers, one per training sample.
    pub alpha: Vec<f64>,
    /// Dual objective after each epoch.
    pub dual_history: Vec<f64>,
    pub converged: bool,
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.b
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        if self.decision(x) >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn epochs(&self) -> usize {
        self.dual_history.len()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `½(‖w‖² + b²) + C Σ max(0, 1 − yᵢ(w·xᵢ + b))`; the bias is regularized
/// because it is learned as the weight of a constant feature.
pub fn primal_objective(w: &[f64], b: f64, xs: &[&[f64]], ys: &[f64], c: f64) -> f64 {
    let reg = 0.5 * (dot(w, w) + b * b);
    let loss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| (1.0 - y * (dot(w, x) + b)).max(0.0))
        .sum();
    reg + c * loss
}

/// L2-regularized hinge-loss SVM by dual coordinate descent.
///
/// Labels must be ±1. Stops once the largest projected-gradient violation in
/// an epoch falls below `tol`, or after `max_epochs` epochs.
pub fn solve(xs: &[&[f64]], ys: &[f64], config: &SvmConfig) -> Result<LinearSvm, SvmError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(SvmError::Empty);
    }
    let d = xs[0].len();
    if let Some((index, x)) = xs.iter().enumerate().find(|(_, x)| x.len() != d) {
        return Err(SvmError::DimMismatch {
            index,
            expected: d,
            got: x.len(),
        });
    }
    let has_pos = ys.iter().any(|&y| y > 0.0);
    let has_neg = ys.iter().any(|&y| y < 0.0);
    if !(has_pos && has_neg) {
        return Err(SvmError::SingleClass);
    }
    let ys: Vec<f64> = ys.iter().map(|&y| if y > 0.0 { 1.0 } else { -1.0 }).collect();
    let n = xs.len();
    let c = config.c;
    let qd: Vec<f64> = xs.iter().map(|x| dot(x, x) + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::named(config.seed, "svm-dcd");
    let mut history = Vec::new();
    let mut converged = false;

    for _ in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut max_violation: f64 = 0.0;
        for &i in &order {
            let yi = ys[i];
            let g = yi * (dot(&w, xs[i]) + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, c);
                let delta = (alpha[i] - old) * yi;
                for (wk, &xk) in w.iter_mut().zip(xs[i]) {
                    *wk += delta * xk;
                }
                b += delta;
            }
        }
        let dual = alpha.iter().sum::<f64>() - 0.5 * (dot(&w, &w) + b * b);
        history.push(dual);
        if max_violation < config.tol {
            converged = true;
            break;
        }
    }
    Ok(LinearSvm {
        w,
        b,
        c,
        trained: true,
        alpha,
        dual_history: history,
        converged,
    })
}

/// Logistic map of the SVM margin into `(0, 1)`.
pub fn score_patch(svm: &LinearSvm, x: &[f64]) -> f64 {
    sigmoid(svm.decision(x))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean patch score of a face, together with the per-patch scores.
pub fn face_score(svm: &LinearSvm, face_patches: &[&[f64]]) -> Result<(f64, Vec<f64>), SvmError> {
    if face_patches.is_empty() {
        return Err(SvmError::NoFacePatches);
    }
    let scores: Vec<f64> = face_patches.iter().map(|x| score_patch(svm, x)).collect();
    Ok((scores.iter().sum::<f64>() / scores.len() as f64, scores))
}

/// A patch embedding from some image, available as a positive sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub image: usize,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceSvmProblem {
    /// Grid indices of the test face's patches.
    pub test_patches: Vec<usize>,
    pub test: Vec<Vec<f64>>,
    /// Same-image background patches, label −1.
    pub negatives: Vec<Vec<f64>>,
    /// Patches from other images, label +1.
    pub positives: Vec<Vec<f64>>,
    /// Source image of each positive.
    pub positive_sources: Vec<usize>,
}

impl FaceSvmProblem {
    pub fn samples(&self) -> (Vec<&[f64]>, Vec<f64>) {
        let xs: Vec<&[f64]> = self
            .positives
            .iter()
            .chain(&self.negatives)
            .map(Vec::as_slice)
            .collect();
        let ys = std::iter::repeat_n(1.0, self.positives.len())
            .chain(std::iter::repeat_n(-1.0, self.negatives.len()))
            .collect();
        (xs, ys)
    }
}

/// Builds the balanced per-face training set. Pool entries from `image` are
/// never used as positives.
pub fn assemble_problem(image: usize, embeddings: &[Vec<f64>], partition: &FacePartition, pool: &[PoolEntry], seed: u64) -> Result<FaceSvmProblem, SvmError> {
    if partition.face.is_empty() {
        return Err(SvmError::NoFacePatches);
    }
    if partition.background.is_empty() {
        return Err(SvmError::NoBackground);
    }
    let eligible: Vec<&PoolEntry> = pool.iter().filter(|p| p.image != image).collect();
    if eligible.is_empty() {
        return Err(SvmError::EmptyPool);
    }
    let need = partition.background.len();
    if eligible.len() < need {
        return Err(SvmError::PoolTooSmall {
            required: need,
            available: eligible.len(),
        });
    }
    let mut rng = rng::stream(seed, image as u64);
    let mut picks = index::sample(&mut rng, eligible.len(), need).into_vec();
    picks.sort_unstable();
    Ok(FaceSvmProblem {
        test_patches: partition.face.clone(),
        test: partition.face.iter().map(|&i| embeddings[i].clone()).collect(),
        negatives: partition
            .background
            .iter()
            .map(|&i| embeddings[i].clone())
            .collect(),
        positives: picks.iter().map(|&k| eligible[k].embedding.clone()).collect(),
        positive_sources: picks.iter().map(|&k| eligible[k].image).collect(),
    })
}

/// Outcome of scoring one face.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceOutcome {
    /// Mean S over the face's patches.
    pub score: f64,
    pub n_patches: usize,
    /// S for every grid patch, face and background alike.
    pub patch_scores: Vec<f64>,
    pub svm: LinearSvm,
}

/// Assembles, solves and scores one face.
pub fn score_face(image: usize, embeddings: &[Vec<f64>], partition: &FacePartition, pool: &[PoolEntry], config: &SvmConfig, seed: u64) -> Result<FaceOutcome, SvmError> {
    let problem = assemble_problem(image, embeddings, partition, pool, seed)?;
    let (xs, ys) = problem.samples();
    let svm = solve(&xs, &ys, config)?;
    let face: Vec<&[f64]> = problem.test.iter().map(Vec::as_slice).collect();
    let (score, _) = face_score(&svm, &face)?;
    let patch_scores = embeddings.iter().map(|e| score_patch(&svm, e)).collect();
    Ok(FaceOutcome {
        score,
        n_patches: face.len(),
        patch_scores,
        svm,
    })
}

/// Per-pixel mean of S over all windows covering the pixel, as 8-bit luma
/// (`floor(255·S + 0.5)`); uncovered pixels are 0.
pub fn score_map(grid: &PatchGrid, scores: &[f64]) -> Result<Image, SvmError> {
    if scores.len() != grid.len() {
        return Err(SvmError::CountMismatch {
            expected: grid.len(),
            got: scores.len(),
        });
    }
    let (w, h) = (grid.width as usize, grid.height as usize);
    let mut sum = vec![0.0f64; w * h];
    let mut cnt = vec![0u32; w * h];
    for (r, &s) in grid.positions.iter().zip(scores) {
        for y in r.y as usize..(r.y + r.h) as usize {
            for x in r.x as usize..(r.x + r.w) as usize {
                sum[y * w + x] += s;
                cnt[y * w + x] += 1;
            }
        }
    }
    let data = sum
        .iter()
        .zip(&cnt)
        .map(|(&s, &c)| {
            if c == 0 {
                0
            } else {
                (255.0 * s / c as f64 + 0.5).floor().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    Ok(Image::new(grid.width, grid.height, 1, data)?)
}

/// Sidecar listing `x<TAB>y<TAB>S` per patch.
pub fn score_sidecar(grid: &PatchGrid, scores: &[f64]) -> String {
    let mut out = String::new();
    for (r, s) in grid.positions.iter().zip(scores) {
        let _ = writeln!(out, "{}\t{}\t{}", r.x, r.y, s);
    }
    out
}

/// Writes `<stem>.png` and `<stem>.txt`.
pub fn write_score_map(dir: &Path, stem: &str, grid: &PatchGrid, scores: &[f64]) -> Result<(), SvmError> {
    let img = score_map(grid, scores)?;
    img.save_png(&dir.join(format!("{stem}.png")))?;
    let side = dir.join(format!("{stem}.txt"));
    fs::write(&side, score_sidecar(grid, scores)).map_err(|source| SvmError::Io { path: side, source })
}
