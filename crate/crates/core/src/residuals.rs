//! Rich-model style noise-residual features.
//!
//! A patch is filtered by a bank of zero-sum high-pass kernels; each residual
//! map is quantized, truncated to `[-T, T]` and summarized by normalized
//! histograms of four consecutive samples taken horizontally and vertically.
//! In CFA-aware mode the quantized map is first split into its four 2×2
//! lattice phases and co-occurrences are counted inside each phase.
//!
//! Feature layout: for each filter (bank order), for each direction
//! (horizontal, vertical), for each phase ((0,0),(0,1),(1,0),(1,1) when
//! CFA-aware), one block of `(2T+1)^4` bins.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::exec;
use crate::imagecore::{Image, PatchGrid, Rect};

pub const FEATURE_MAGIC: &[u8; 4] = b"TSF1";
/// Tuple length of the co-occurrence histograms.
pub const COOC_ORDER: usize = 4;

#[derive(thiserror::Error, Debug)]
pub enum FeatureError {
    #[error("plane {width}x{height} is smaller than the {kw}x{kh} kernel")]
    PlaneTooSmall { width: u32, height: u32, kw: usize, kh: usize },
    #[error("residual map {rows}x{cols} too small for a {direction:?} 4-tuple")]
    TooFewSites {
        rows: usize,
        cols: usize,
        direction: Direction,
    },
    #[error("patch is {width}x{height}x{channels}, expected {window}x{window} luma")]
    PatchShape {
        width: u32,
        height: u32,
        channels: u8,
        window: u32,
    },
    #[error("invalid feature config: {0}")]
    Config(String),
    #[error("feature file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("feature file {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Horizontal,
    Vertical,
}

pub const DIRECTIONS: [Direction; 2] = [Direction::Horizontal, Direction::Vertical];

/// Zero-sum predictor kernel plus its quantization step.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualFilter {
    pub name: String,
    rows: usize,
    cols: usize,
    kernel: Vec<f64>,
    pub q: f64,
}

impl ResidualFilter {
    pub fn new(name: &str, rows: usize, cols: usize, kernel: Vec<f64>, q: f64) -> Result<Self, FeatureError> {
        if rows == 0 || cols == 0 || kernel.len() != rows * cols {
            return Err(FeatureError::Config(format!("kernel {name} has a bad shape")));
        }
        let sum: f64 = kernel.iter().sum();
        if sum.abs() > 1e-12 {
            return Err(FeatureError::Config(format!(
                "kernel {name} sums to {sum}, not 0"
            )));
        }
        if !(q > 0.0) {
            return Err(FeatureError::Config(format!("kernel {name} has q <= 0")));
        }
        Ok(Self {
            name: name.into(),
            rows,
            cols,
            kernel,
            q,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    #[inline]
    pub fn coeff(&self, r: usize, c: usize) -> f64 {
        self.kernel[r * self.cols + c]
    }
}

/// D1h, D1v, D2h and the 3×3 KB predictor.
pub fn default_filter_bank() -> Vec<ResidualFilter> {
    vec![
        ResidualFilter::new("d1h", 1, 2, vec![-1.0, 1.0], 1.0).unwrap(),
        ResidualFilter::new("d1v", 2, 1, vec![-1.0, 1.0], 1.0).unwrap(),
        ResidualFilter::new("d2h", 1, 3, vec![1.0, -2.0, 1.0], 2.0).unwrap(),
        ResidualFilter::new(
            "kb",
            3,
            3,
            vec![-1.0, 2.0, -1.0, 2.0, -4.0, 2.0, -1.0, 2.0, -1.0],
            4.0,
        )
        .unwrap(),
    ]
}

/// Selects filters of the default bank by name.
pub fn filter_bank_by_names<S: AsRef<str>>(names: &[S]) -> Result<Vec<ResidualFilter>, FeatureError> {
    let bank = default_filter_bank();
    names
        .iter()
        .map(|n| {
            bank.iter()
                .find(|f| f.name == n.as_ref())
                .cloned()
                .ok_or_else(|| FeatureError::Config(format!("unknown filter {:?}", n.as_ref())))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub window: u32,
    pub filters: Vec<ResidualFilter>,
    pub truncation: u32,
    pub cfa_aware: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window: crate::imagecore::DEFAULT_WINDOW,
            filters: default_filter_bank(),
            truncation: 2,
            cfa_aware: false,
        }
    }
}

impl FeatureConfig {
    pub fn bins(&self) -> usize {
        (2 * self.truncation as usize + 1).pow(COOC_ORDER as u32)
    }

    fn phases(&self) -> usize {
        if self.cfa_aware {
            4
        } else {
            1
        }
    }

    pub fn blocks(&self) -> usize {
        self.filters.len() * DIRECTIONS.len() * self.phases()
    }

    pub fn dimension(&self) -> usize {
        self.blocks() * self.bins()
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.filters.is_empty() {
            return Err(FeatureError::Config("at least one filter is required".into()));
        }
        if self.truncation < 1 || self.truncation > 7 {
            return Err(FeatureError::Config(format!(
                "truncation {} outside 1..=7",
                self.truncation
            )));
        }
        // every block needs a 4-tuple in both directions, per phase
        let stretch = if self.cfa_aware { 2 } else { 1 };
        for f in &self.filters {
            let min_side = self.window as usize + 1 - f.rows.max(f.cols);
            if min_side < COOC_ORDER * stretch {
                return Err(FeatureError::Config(format!(
                    "window {} too small for filter {}",
                    self.window, f.name
                )));
            }
        }
        Ok(())
    }
}

/// Feature vector of one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualFeature {
    pub values: Vec<f64>,
    pub image_id: u32,
    pub rect: Rect,
}

/// Valid-region correlation `out[i][j] = Σ k[r][c] · plane[i+r][j+c]`.
pub fn residual_map(plane: &Image, filter: &ResidualFilter) -> Result<Array2<f64>, FeatureError> {
    let (w, h) = (plane.width() as usize, plane.height() as usize);
    if plane.channels() != 1 || w < filter.cols || h < filter.rows {
        return Err(FeatureError::PlaneTooSmall {
            width: plane.width(),
            height: plane.height(),
            kw: filter.cols,
            kh: filter.rows,
        });
    }
    let (oh, ow) = (h - filter.rows + 1, w - filter.cols + 1);
    let px = plane.data();
    let mut out = Array2::<f64>::zeros((oh, ow));
    for r in 0..filter.rows {
        for c in 0..filter.cols {
            let k = filter.coeff(r, c);
            if k == 0.0 {
                continue;
            }
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let src = &px[(i + r) * w + c..(i + r) * w + c + ow];
                for (o, &p) in row.iter_mut().zip(src) {
                    *o += k * p as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Round half away from zero, divide by `q`, clamp to `[-T, T]`.
#[inline]
pub fn quantize_value(r: f64, q: f64, t: i32) -> i32 {
    // f64::round already rounds half away from zero
    ((r / q).round() as i64).clamp(-(t as i64), t as i64) as i32
}

pub fn quantize_truncate(resid: &Array2<f64>, q: f64, t: u32) -> Array2<i32> {
    resid.mapv(|r| quantize_value(r, q, t as i32))
}

/// Normalized histogram of all 4-tuples of consecutive entries along
/// `direction`; the tuple `(v0..v3)` lands in bin `Σ (v_k+T)·(2T+1)^k`.
pub fn cooccurrence(qmap: &Array2<i32>, direction: Direction, t: u32) -> Result<Vec<f64>, FeatureError> {
    let (rows, cols) = qmap.dim();
    let base = 2 * t as usize + 1;
    let enough = match direction {
        Direction::Horizontal => cols >= COOC_ORDER && rows >= 1,
        Direction::Vertical => rows >= COOC_ORDER && cols >= 1,
    };
    if !enough {
        return Err(FeatureError::TooFewSites {
            rows,
            cols,
            direction,
        });
    }
    let mut hist = vec![0u64; base.pow(COOC_ORDER as u32)];
    let code = |v: i32| (v + t as i32) as usize;
    match direction {
        Direction::Horizontal => {
            for row in qmap.rows() {
                for win in row.windows(COOC_ORDER) {
                    let idx = code(win[0])
                        + base * (code(win[1]) + base * (code(win[2]) + base * code(win[3])));
                    hist[idx] += 1;
                }
            }
        }
        Direction::Vertical => {
            for i in 0..=rows - COOC_ORDER {
                for j in 0..cols {
                    let idx = code(qmap[(i, j)])
                        + base
                            * (code(qmap[(i + 1, j)])
                                + base * (code(qmap[(i + 2, j)]) + base * code(qmap[(i + 3, j)])));
                    hist[idx] += 1;
                }
            }
        }
    }
    Ok(normalize(&hist))
}

fn normalize(hist: &[u64]) -> Vec<f64> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return vec![0.0; hist.len()];
    }
    let total = total as f64;
    hist.iter().map(|&c| c as f64 / total).collect()
}

/// Splits a map into its four `(row mod 2, col mod 2)` sub-lattices in the
/// order (0,0), (0,1), (1,0), (1,1).
pub fn cfa_phase_split(qmap: &Array2<i32>) -> [Array2<i32>; 4] {
    let (rows, cols) = qmap.dim();
    let phase = |pr: usize, pc: usize| {
        let r = (rows + 1 - pr) / 2;
        let c = (cols + 1 - pc) / 2;
        Array2::from_shape_fn((r, c), |(i, j)| qmap[(2 * i + pr, 2 * j + pc)])
    };
    [phase(0, 0), phase(0, 1), phase(1, 0), phase(1, 1)]
}

/// Histogram counting pass over precomputed bin codes, writing raw counts for
/// one (direction, phase) block into `out`.
fn count_block(codes: &[u8], cols: usize, rows: usize, step: usize, pr: usize, pc: usize, dir: Direction, base: usize, out: &mut [u64]) {
    let b2 = base * base;
    let b3 = b2 * base;
    match dir {
        Direction::Horizontal => {
            for i in (pr..rows).step_by(step) {
                let row = &codes[i * cols..(i + 1) * cols];
                let mut j = pc;
                while j + 3 * step < cols {
                    let idx = row[j] as usize
                        + base * row[j + step] as usize
                        + b2 * row[j + 2 * step] as usize
                        + b3 * row[j + 3 * step] as usize;
                    out[idx] += 1;
                    j += step;
                }
            }
        }
        Direction::Vertical => {
            let mut i = pr;
            while i + 3 * step < rows {
                let r0 = &codes[i * cols..(i + 1) * cols];
                let r1 = &codes[(i + step) * cols..(i + step + 1) * cols];
                let r2 = &codes[(i + 2 * step) * cols..(i + 2 * step + 1) * cols];
                let r3 = &codes[(i + 3 * step) * cols..(i + 3 * step + 1) * cols];
                for j in (pc..cols).step_by(step) {
                    let idx = r0[j] as usize
                        + base * r1[j] as usize
                        + b2 * r2[j] as usize
                        + b3 * r3[j] as usize;
                    out[idx] += 1;
                }
                i += step;
            }
        }
    }
}

/// Feature vector of one `window`×`window` luma patch.
pub fn extract_feature(patch: &Image, config: &FeatureConfig) -> Result<Vec<f64>, FeatureError> {
    if patch.channels() != 1 || patch.width() != config.window || patch.height() != config.window {
        return Err(FeatureError::PatchShape {
            width: patch.width(),
            height: patch.height(),
            channels: patch.channels(),
            window: config.window,
        });
    }
    let t = config.truncation as i32;
    let base = 2 * config.truncation as usize + 1;
    let bins = config.bins();
    let (phases, step): (&[(usize, usize)], usize) = if config.cfa_aware {
        (&[(0, 0), (0, 1), (1, 0), (1, 1)], 2)
    } else {
        (&[(0, 0)], 1)
    };
    let mut out = Vec::with_capacity(config.dimension());
    let mut counts = vec![0u64; bins];
    for f in &config.filters {
        let resid = residual_map(patch, f)?;
        let (rows, cols) = resid.dim();
        let codes: Vec<u8> = resid
            .iter()
            .map(|&r| (quantize_value(r, f.q, t) + t) as u8)
            .collect();
        for dir in DIRECTIONS {
            for &(pr, pc) in phases {
                counts.iter_mut().for_each(|c| *c = 0);
                count_block(&codes, cols, rows, step, pr, pc, dir, base, &mut counts);
                if counts.iter().all(|&c| c == 0) {
                    return Err(FeatureError::TooFewSites {
                        rows,
                        cols,
                        direction: dir,
                    });
                }
                out.extend(normalize(&counts));
            }
        }
    }
    Ok(out)
}

/// Features for every patch of `grid` over the luma plane, ordered by patch
/// index.
pub fn extract_grid(plane: &Image, grid: &PatchGrid, image_id: u32, config: &FeatureConfig) -> Result<Vec<ResidualFeature>, FeatureError> {
    exec::try_map(&grid.positions, |_, &rect| {
        let patch = plane
            .crop(rect)
            .map_err(|e| FeatureError::Config(e.to_string()))?;
        Ok(ResidualFeature {
            values: extract_feature(&patch, config)?,
            image_id,
            rect,
        })
    })
}

/// Sequential variant of [`extract_grid`].
pub fn extract_grid_seq(plane: &Image, grid: &PatchGrid, image_id: u32, config: &FeatureConfig) -> Result<Vec<ResidualFeature>, FeatureError> {
    exec::map_seq(&grid.positions, |_, &rect| {
        let patch = plane
            .crop(rect)
            .map_err(|e| FeatureError::Config(e.to_string()))?;
        Ok(ResidualFeature {
            values: extract_feature(&patch, config)?,
            image_id,
            rect,
        })
    })
    .into_iter()
    .collect()
}

/// Serializes features in the `TSF1` layout: magic, count, dim, `count` rows
/// of `dim` little-endian f32, then `count` records of
/// `(image_id, x, y, w, h)` as little-endian u32.
pub fn write_features<W: Write>(mut w: W, feats: &[ResidualFeature]) -> io::Result<()> {
    let dim = feats.first().map_or(0, |f| f.values.len());
    if feats.iter().any(|f| f.values.len() != dim) {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "ragged feature rows"));
    }
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(feats.len() as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(feats.len() * dim * 4);
    for f in feats {
        for &v in &f.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    for f in feats {
        for v in [f.image_id, f.rect.x, f.rect.y, f.rect.w, f.rect.h] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_features(path: &Path, feats: &[ResidualFeature]) -> Result<(), FeatureError> {
    let mut buf = Vec::new();
    write_features(&mut buf, feats).map_err(|source| FeatureError::Io {
        path: path.into(),
        source,
    })?;
    fs::write(path, buf).map_err(|source| FeatureError::Io {
        path: path.into(),
        source,
    })
}

pub fn read_features<R: Read>(mut r: R, path: &Path) -> Result<Vec<ResidualFeature>, FeatureError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|source| FeatureError::Io {
        path: path.into(),
        source,
    })?;
    let bad = |reason: String| FeatureError::Format {
        path: path.into(),
        reason,
    };
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("missing TSF1 magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let count = u32_at(4) as usize;
    let dim = u32_at(8) as usize;
    let expected = 12 + count * dim * 4 + count * 20;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for {count}x{dim}, found {}",
            bytes.len()
        )));
    }
    let rec0 = 12 + count * dim * 4;
    Ok((0..count)
        .map(|i| {
            let row = 12 + i * dim * 4;
            let values = (0..dim)
                .map(|k| {
                    let o = row + 4 * k;
                    f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64
                })
                .collect();
            let rec = rec0 + 20 * i;
            ResidualFeature {
                values,
                image_id: u32_at(rec),
                rect: Rect::new(u32_at(rec + 4), u32_at(rec + 8), u32_at(rec + 12), u32_at(rec + 16)),
            }
        })
        .collect())
}

pub fn load_features(path: &Path) -> Result<Vec<ResidualFeature>, FeatureError> {
    let f = fs::File::open(path).map_err(|source| FeatureError::Io {
        path: path.into(),
        source,
    })?;
    read_features(io::BufReader::new(f), path)
}
