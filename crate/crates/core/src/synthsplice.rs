//! Ground-truthed splice generator.
//!
//! Sources come from a simulated camera: a procedural scene is sampled
//! through a Bayer mosaic with signal-dependent noise, demosaiced, white
//! balanced, sharpened and gamma encoded. Each simulated camera has its own
//! parameters, which gives every image a processing fingerprint.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::exec;
use crate::imagecore::{decode_image, Image, ImageError, Label, ManifestEntry, ManifestError, Rect, SpliceManifest};
use crate::rng;

pub const MIN_SIDE: u32 = 256;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(thiserror::Error, Debug)]
pub enum SynthError {
    #[error("empty {0} pool")]
    EmptyPool(&'static str),
    #[error("{pool} image {index} is {width}x{height}, below the {MIN_SIDE}x{MIN_SIDE} minimum")]
    TooSmall {
        pool: &'static str,
        index: usize,
        width: u32,
        height: u32,
    },
    #[error("region {w}x{h} (plus feather margin) does not fit a {width}x{height} {pool} image")]
    RegionTooLarge {
        pool: &'static str,
        w: u32,
        h: u32,
        width: u32,
        height: u32,
    },
    #[error("no donor shares camera {0} with the host")]
    NoDonorForCamera(u32),
    #[error("could not place decoy boxes for output {0}")]
    DecoyPlacement(usize),
    #[error("invalid recipe: {}", .0.join("; "))]
    Recipe(Vec<String>),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Per-camera processing parameters, linear intensities in `[0,1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub read_noise: f64,
    pub shot_gain: f64,
    pub wb: [f64; 3],
    pub gamma: f64,
    pub sharpen: f64,
}

impl CameraParams {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            read_noise: rng.random_range(0.002..0.012),
            shot_gain: rng.random_range(0.0002..0.002),
            wb: [rng.random_range(0.85..1.2), 1.0, rng.random_range(0.85..1.2)],
            gamma: rng.random_range(1.0 / 2.4..1.0 / 1.8),
            sharpen: rng.random_range(0.0..0.8),
        }
    }
}

/// `n` cameras derived from `seed`.
pub fn cameras(n: usize, seed: u64) -> Vec<CameraParams> {
    let mut r = rng::named(seed, "synth-cameras");
    (0..n).map(|_| CameraParams::sample(&mut r)).collect()
}

fn value_noise(width: usize, height: usize, cell: f64, rng: &mut impl Rng) -> Vec<f64> {
    let gw = (width as f64 / cell).ceil() as usize + 2;
    let gh = (height as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        let sy = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..width {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let sx = tx * tx * (3.0 - 2.0 * tx);
            let l = |a: usize, b: usize| lattice[b * gw + a];
            let top = l(ix, iy) * (1.0 - sx) + l(ix + 1, iy) * sx;
            let bot = l(ix, iy + 1) * (1.0 - sx) + l(ix + 1, iy + 1) * sx;
            out.push(top * (1.0 - sy) + bot * sy);
        }
    }
    out
}

/// Linear RGB scene, interleaved, with smooth shading, textured regions and
/// flat shapes. Every scene is drawn from the same distribution.
pub fn render_scene(width: u32, height: u32, rng: &mut impl Rng) -> Vec<f64> {
    let (w, h) = (width as usize, height as usize);
    let mut scene = vec![0.0; w * h * 3];
    let base: [Vec<f64>; 3] = std::array::from_fn(|_| value_noise(w, h, 160.0, rng));
    let mid = value_noise(w, h, 24.0, rng);
    let fine = value_noise(w, h, 3.0, rng);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
    for i in 0..w * h {
        for c in 0..3 {
            let v = 0.08 + 0.55 * base[c][i] * tint[c] + 0.18 * (mid[i] - 0.5) + 0.06 * (fine[i] - 0.5);
            scene[i * 3 + c] = v;
        }
    }
    for _ in 0..rng.random_range(4..10) {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let rx = rng.random_range(12.0..w as f64 / 4.0);
        let ry = rng.random_range(12.0..h as f64 / 4.0);
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.85));
        let ellipse = rng.random_bool(0.5);
        let x0 = (cx - rx).max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(w);
        let y0 = (cy - ry).max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let (u, v) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    let i = y * w + x;
                    for c in 0..3 {
                        scene[i * 3 + c] = color[c] + 0.06 * (fine[i] - 0.5) + 0.1 * (mid[i] - 0.5);
                    }
                }
            }
        }
    }
    for v in &mut scene {
        *v = v.clamp(0.0, 1.0);
    }
    scene
}

fn bayer_channel(x: usize, y: usize) -> usize {
    // RGGB
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Passes a linear scene through the simulated camera.
pub fn capture(scene: &[f64], width: u32, height: u32, cam: &CameraParams, rng: &mut impl Rng) -> Image {
    let (w, h) = (width as usize, height as usize);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut raw = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let c = bayer_channel(x, y);
            let s = scene[(y * w + x) * 3 + c];
            let sigma = (cam.read_noise * cam.read_noise + cam.shot_gain * s).sqrt();
            raw[y * w + x] = s + sigma * std_normal.sample(rng);
        }
    }
    // bilinear demosaic: average the same-channel samples of the 3×3 ring
    let mut rgb = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let own = bayer_channel(x, y);
            let mut sum = [0.0; 3];
            let mut cnt = [0usize; 3];
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let (xx, yy) = (reflect(x as isize + dx, w), reflect(y as isize + dy, h));
                    let c = bayer_channel(xx, yy);
                    sum[c] += raw[yy * w + xx];
                    cnt[c] += 1;
                }
            }
            for c in 0..3 {
                rgb[(y * w + x) * 3 + c] = if c == own {
                    raw[y * w + x]
                } else {
                    sum[c] / cnt[c] as f64
                };
            }
        }
    }
    // unsharp mask against a 3×3 box blur
    let mut out = vec![0u8; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut blur = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (xx, yy) = (reflect(x as isize + dx, w), reflect(y as isize + dy, h));
                        blur += rgb[(yy * w + xx) * 3 + c];
                    }
                }
                let v = rgb[(y * w + x) * 3 + c];
                let sharp = v + cam.sharpen * (v - blur / 9.0);
                let lin = (sharp * cam.wb[c]).clamp(0.0, 1.0);
                out[(y * w + x) * 3 + c] = (255.0 * lin.powf(cam.gamma)).round() as u8;
            }
        }
    }
    Image::new(width, height, 3, out).expect("buffer sized for shape")
}

/// A pool image with the camera that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceImage {
    pub image: Image,
    pub camera: u32,
}

/// `count` captures; image `i` uses camera `i % cams.len()` and a scene
/// seeded by `(seed, tag, i)`.
pub fn camera_pool(count: usize, width: u32, height: u32, cams: &[CameraParams], seed: u64, tag: &str) -> Vec<SourceImage> {
    let base = rng::derive_named(seed, tag);
    let idx: Vec<usize> = (0..count).collect();
    exec::map(&idx, |_, &i| {
        let mut r: ChaCha8Rng = rng::stream(base, i as u64);
        let camera = (i % cams.len()) as u32;
        let scene = render_scene(width, height, &mut r);
        SourceImage {
            image: capture(&scene, width, height, &cams[camera as usize], &mut r),
            camera,
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionShape {
    Rect,
    Ellipse,
}

impl std::str::FromStr for RegionShape {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rect" => Ok(Self::Rect),
            "ellipse" => Ok(Self::Ellipse),
            other => Err(format!("unknown region shape {other:?} (rect|ellipse)")),
        }
    }
}

impl std::fmt::Display for RegionShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rect => "rect",
            Self::Ellipse => "ellipse",
        })
    }
}

/// Donor resampling kernel. Nearest-neighbor keeps the donor's noise
/// samples intact; interpolating kernels smooth them and leave a trace of
/// their own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampler {
    Nearest,
    Bilinear,
    Lanczos3,
}

impl std::str::FromStr for Resampler {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            "lanczos3" => Ok(Self::Lanczos3),
            other => Err(format!("unknown resampler {other:?} (nearest|bilinear|lanczos3)")),
        }
    }
}

impl std::fmt::Display for Resampler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Nearest => "nearest",
            Self::Bilinear => "bilinear",
            Self::Lanczos3 => "lanczos3",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpliceRecipe {
    pub host_quality: u8,
    pub donor_quality: u8,
    pub shape: RegionShape,
    /// Side lengths of the pasted region and of decoy boxes, inclusive.
    pub size_min: u32,
    pub size_max: u32,
    pub feather: f64,
    pub rescale_min: f64,
    pub rescale_max: f64,
    pub noise_sigma: f64,
    pub resampler: Resampler,
    pub tamper_probability: f64,
    /// Restricts donors to the host's camera so that the only planted
    /// signal is the donor's processing history.
    pub same_camera_donor: bool,
    pub seed: u64,
}

impl Default for SpliceRecipe {
    fn default() -> Self {
        Self {
            host_quality: 95,
            donor_quality: 60,
            shape: RegionShape::Ellipse,
            size_min: 160,
            size_max: 224,
            feather: 4.0,
            rescale_min: 0.8,
            rescale_max: 1.2,
            noise_sigma: 0.0,
            resampler: Resampler::Nearest,
            tamper_probability: 0.5,
            same_camera_donor: true,
            seed: 0,
        }
    }
}

impl SpliceRecipe {
    /// Lists every violated constraint.
    pub fn validate(&self) -> Result<(), SynthError> {
        let mut bad = Vec::new();
        for (name, q) in [("host_quality", self.host_quality), ("donor_quality", self.donor_quality)] {
            if !(1..=100).contains(&q) {
                bad.push(format!("{name} {q} outside [1,100]"));
            }
        }
        if self.size_min == 0 || self.size_min > self.size_max {
            bad.push(format!("size range [{}, {}] is empty", self.size_min, self.size_max));
        }
        if !(self.feather >= 0.0 && self.feather.is_finite()) {
            bad.push(format!("feather {} must be >= 0", self.feather));
        }
        if !(self.rescale_min > 0.0 && self.rescale_min <= self.rescale_max && self.rescale_max.is_finite()) {
            bad.push(format!(
                "rescale range [{}, {}] must be positive and ordered",
                self.rescale_min, self.rescale_max
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            bad.push(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.tamper_probability) {
            bad.push(format!("tamper_probability {} outside [0,1]", self.tamper_probability));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(SynthError::Recipe(bad))
        }
    }

    pub fn blend(&self) -> Blend {
        Blend {
            shape: self.shape,
            feather: self.feather,
            noise_sigma: self.noise_sigma,
            resampler: self.resampler,
        }
    }

    fn margin(&self) -> u32 {
        if self.feather > 0.0 {
            (self.feather / 2.0).ceil() as u32 + 1
        } else {
            0
        }
    }
}

/// Alpha at signed distance `d` (positive inside): a linear ramp of width
/// `feather` centered on the boundary, so `alpha > 0.5` exactly inside.
pub fn feather_alpha(d: f64, feather: f64) -> f64 {
    if feather > 0.0 {
        (0.5 + d / feather).clamp(0.0, 1.0)
    } else if d > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Approximate signed distance from `(u,v)` (relative to the region center)
/// to the boundary of a `w × h` region.
pub fn signed_distance(shape: RegionShape, u: f64, v: f64, w: f64, h: f64) -> f64 {
    let (a, b) = (w / 2.0, h / 2.0);
    match shape {
        RegionShape::Rect => (a - u.abs()).min(b - v.abs()),
        RegionShape::Ellipse => {
            let f = (u / a).powi(2) + (v / b).powi(2) - 1.0;
            let g = ((2.0 * u / (a * a)).powi(2) + (2.0 * v / (b * b)).powi(2)).sqrt();
            if g == 0.0 {
                f64::INFINITY
            } else {
                -f / g
            }
        }
    }
}

/// Where a donor region goes: `region` is the nominal shape's box in host
/// coordinates; `canvas` is `region` grown by the feather margin;
/// `source` is the donor rectangle resampled onto `canvas`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub region: Rect,
    pub canvas: Rect,
    pub source: Rect,
}

fn resample(img: &Image, w: u32, h: u32, kernel: Resampler) -> Image {
    if img.width() == w && img.height() == h {
        return img.clone();
    }
    let filter = match kernel {
        Resampler::Nearest => image::imageops::FilterType::Nearest,
        Resampler::Bilinear => image::imageops::FilterType::Triangle,
        Resampler::Lanczos3 => image::imageops::FilterType::Lanczos3,
    };
    let src = img.to_image_crate().to_rgb8();
    let out = image::imageops::resize(&src, w, h, filter);
    Image::new(w, h, 3, out.into_raw()).expect("resize keeps the RGB layout")
}

/// Blend settings for one pasted region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Blend {
    pub shape: RegionShape,
    pub feather: f64,
    pub noise_sigma: f64,
    pub resampler: Resampler,
}

/// Alpha-composites the resampled donor `source` onto `host` and returns
/// the composite with its binary mask (255 where alpha > 0.5).
pub fn paste_region(host: &Image, donor: &Image, place: &Placement, blend: &Blend, rng: &mut impl Rng) -> Result<(Image, Image), SynthError> {
    let Blend {
        shape,
        feather,
        noise_sigma,
        resampler,
    } = *blend;
    let patch = resample(&donor.crop(place.source)?, place.canvas.w, place.canvas.h, resampler);
    let (hw, hh) = (host.width(), host.height());
    if !place.canvas.fits(hw, hh) {
        return Err(SynthError::RegionTooLarge {
            pool: "host",
            w: place.canvas.w,
            h: place.canvas.h,
            width: hw,
            height: hh,
        });
    }
    let mut data = if host.channels() == 3 {
        host.data().to_vec()
    } else {
        host.data().iter().flat_map(|&v| [v; 3]).collect()
    };
    let mut mask = vec![0u8; hw as usize * hh as usize];
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("sigma >= 0");
    let (cx, cy) = (
        place.region.x as f64 + place.region.w as f64 / 2.0,
        place.region.y as f64 + place.region.h as f64 / 2.0,
    );
    for y in 0..place.canvas.h {
        for x in 0..place.canvas.w {
            let (hx, hy) = (place.canvas.x + x, place.canvas.y + y);
            let d = signed_distance(
                shape,
                hx as f64 + 0.5 - cx,
                hy as f64 + 0.5 - cy,
                place.region.w as f64,
                place.region.h as f64,
            );
            let alpha = feather_alpha(d, feather);
            if alpha > 0.5 {
                mask[(hy * hw + hx) as usize] = 255;
            }
            if alpha == 0.0 {
                continue;
            }
            for c in 0..3u8 {
                let i = (hy as usize * hw as usize + hx as usize) * 3 + c as usize;
                let mut v = alpha * patch.get(x, y, c) as f64 + (1.0 - alpha) * data[i] as f64;
                if noise_sigma > 0.0 {
                    v += alpha * noise.sample(rng);
                }
                data[i] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok((Image::new(hw, hh, 3, data)?, Image::new(hw, hh, 1, mask)?))
}

/// Bounding box of the nonzero pixels of a single-channel mask.
pub fn mask_bbox(mask: &Image) -> Option<Rect> {
    let (w, h) = (mask.width(), mask.height());
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y, 0) != 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != u32::MAX).then(|| Rect::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpliceResult {
    pub index: usize,
    /// Final JPEG bytes at the host quality.
    pub jpeg: Vec<u8>,
    pub mask: Option<Image>,
    pub faces: Vec<Rect>,
    pub tampered_face: Option<usize>,
    pub host: usize,
    pub donor_info: String,
}

impl SpliceResult {
    pub fn label(&self) -> Label {
        if self.tampered_face.is_some() {
            Label::Tampered
        } else {
            Label::Authentic
        }
    }

    pub fn decode(&self) -> Result<Image, SynthError> {
        Ok(decode_image(&self.jpeg)?)
    }
}

fn check_pool(pool: &[SourceImage], name: &'static str) -> Result<(), SynthError> {
    if pool.is_empty() {
        return Err(SynthError::EmptyPool(name));
    }
    for (index, s) in pool.iter().enumerate() {
        let (width, height) = (s.image.width(), s.image.height());
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(SynthError::TooSmall {
                pool: name,
                index,
                width,
                height,
            });
        }
    }
    Ok(())
}

fn random_box(rng: &mut impl Rng, recipe: &SpliceRecipe, width: u32, height: u32, margin: u32) -> Option<Rect> {
    let w = rng.random_range(recipe.size_min..=recipe.size_max);
    let h = rng.random_range(recipe.size_min..=recipe.size_max);
    if w + 2 * margin > width || h + 2 * margin > height {
        return None;
    }
    let x = rng.random_range(margin..=width - w - margin);
    let y = rng.random_range(margin..=height - h - margin);
    Some(Rect::new(x, y, w, h))
}

fn place_decoys(rng: &mut impl Rng, recipe: &SpliceRecipe, width: u32, height: u32, boxes: &mut Vec<Rect>, count: usize) -> bool {
    let target = boxes.len() + count;
    for _ in 0..2000 {
        if boxes.len() == target {
            break;
        }
        if let Some(b) = random_box(rng, recipe, width, height, 0) {
            if boxes.iter().all(|o| o.intersection_area(&b) == 0) {
                boxes.push(b);
            }
        }
    }
    boxes.len() == target
}

/// Draws the spliced region (if any) and the decoys jointly, redrawing the
/// whole layout when the decoys do not fit. Decoys avoid the full region,
/// which contains the final tampered box.
fn layout(rng: &mut impl Rng, recipe: &SpliceRecipe, width: u32, height: u32, region_margin: Option<u32>, decoys: usize) -> Option<(Option<Rect>, Vec<Rect>)> {
    for _ in 0..100 {
        let region = match region_margin {
            Some(m) => Some(random_box(rng, recipe, width, height, m)?),
            None => None,
        };
        let mut boxes: Vec<Rect> = region.into_iter().collect();
        if place_decoys(rng, recipe, width, height, &mut boxes, decoys) {
            let decoy_boxes = boxes.split_off(usize::from(region.is_some()));
            return Some((region, decoy_boxes));
        }
    }
    None
}

fn host_order(n: usize, hosts: usize, seed: u64) -> Vec<usize> {
    let base = rng::derive_named(seed, "synth-hosts");
    let mut order = Vec::with_capacity(n);
    let mut cycle = 0;
    while order.len() < n {
        let mut perm: Vec<usize> = (0..hosts).collect();
        perm.shuffle(&mut rng::stream(base, cycle));
        order.extend(perm.into_iter().take(n - order.len()));
        cycle += 1;
    }
    order
}

fn synthesize_one(index: usize, host_idx: usize, hosts: &[SourceImage], donors: &[SourceImage], recipe: &SpliceRecipe) -> Result<SpliceResult, SynthError> {
    let mut r: ChaCha8Rng = rng::stream(rng::derive_named(recipe.seed, "synth-output"), index as u64);
    let host = &hosts[host_idx];
    let (hw, hh) = (host.image.width(), host.image.height());
    let tampered = r.random_bool(recipe.tamper_probability);
    let decoys = if tampered { 1 } else { 2 };
    let margin = tampered.then(|| recipe.margin());
    if let Some(m) = margin {
        let side = recipe.size_max + 2 * m;
        if side > hw || side > hh {
            return Err(SynthError::RegionTooLarge {
                pool: "host",
                w: side,
                h: side,
                width: hw,
                height: hh,
            });
        }
    }
    let planned = layout(&mut r, recipe, hw, hh, margin, decoys).ok_or(SynthError::DecoyPlacement(index))?;
    let mut boxes = Vec::new();
    let mut mask = None;
    let mut composite = host.image.clone();
    let mut donor_info = String::new();
    if tampered {
        let candidates: Vec<usize> = (0..donors.len())
            .filter(|&d| !recipe.same_camera_donor || donors[d].camera == host.camera)
            .collect();
        let d = *candidates.choose(&mut r).ok_or(SynthError::NoDonorForCamera(host.camera))?;
        let donor = &donors[d];
        let m = recipe.margin();
        let region = planned.0.expect("tampered layouts carry a region");
        let canvas = Rect::new(region.x - m, region.y - m, region.w + 2 * m, region.h + 2 * m);
        let scale = if recipe.rescale_min == recipe.rescale_max {
            recipe.rescale_min
        } else {
            r.random_range(recipe.rescale_min..=recipe.rescale_max)
        };
        let sw = ((canvas.w as f64 / scale).round() as u32).max(1);
        let sh = ((canvas.h as f64 / scale).round() as u32).max(1);
        let (dw, dh) = (donor.image.width(), donor.image.height());
        if sw > dw || sh > dh {
            return Err(SynthError::RegionTooLarge {
                pool: "donor",
                w: sw,
                h: sh,
                width: dw,
                height: dh,
            });
        }
        let source = Rect::new(r.random_range(0..=dw - sw), r.random_range(0..=dh - sh), sw, sh);
        let donor_img = decode_image(&donor.image.encode_jpeg(recipe.donor_quality)?)?;
        let place = Placement { region, canvas, source };
        let (img, msk) = paste_region(&host.image, &donor_img, &place, &recipe.blend(), &mut r)?;
        boxes.push(mask_bbox(&msk).ok_or(SynthError::RegionTooLarge {
            pool: "host",
            w: region.w,
            h: region.h,
            width: hw,
            height: hh,
        })?);
        composite = img;
        mask = Some(msk);
        donor_info = format!(
            "donor={d} camera={} source={},{},{},{} scale={scale:.4} quality={}",
            donor.camera, source.x, source.y, source.w, source.h, recipe.donor_quality
        );
    }
    boxes.extend(planned.1);
    let tampered_box = tampered.then(|| boxes[0]);
    boxes.shuffle(&mut r);
    let tampered_face = tampered_box.and_then(|t| boxes.iter().position(|b| *b == t));
    Ok(SpliceResult {
        index,
        jpeg: composite.encode_jpeg(recipe.host_quality)?,
        mask,
        faces: boxes,
        tampered_face,
        host: host_idx,
        donor_info,
    })
}

/// Generates `n` labeled outputs. Output `i` depends only on the pools,
/// the recipe and `i`, so the result is the same with or without threads.
pub fn synthesize(hosts: &[SourceImage], donors: &[SourceImage], recipe: &SpliceRecipe, n: usize) -> Result<Vec<SpliceResult>, SynthError> {
    recipe.validate()?;
    check_pool(hosts, "host")?;
    check_pool(donors, "donor")?;
    let order = host_order(n, hosts.len(), recipe.seed);
    let jobs: Vec<(usize, usize)> = order.into_iter().enumerate().collect();
    exec::try_map(&jobs, |_, &(i, h)| synthesize_one(i, h, hosts, donors, recipe))
}

fn stem(index: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(5);
    format!("{index:0width$}")
}

/// Writes `NNNNN.jpg`, `NNNNN_mask.png` and `manifest.json` into `dir`.
pub fn emit_manifest(results: &[SpliceResult], dir: &Path) -> Result<SpliceManifest, SynthError> {
    std::fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.into(),
        source,
    })?;
    let write = |name: &str, bytes: &[u8]| -> Result<(), SynthError> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| SynthError::Io { path, source })
    };
    let mut entries = Vec::with_capacity(results.len());
    for r in results {
        let s = stem(r.index, results.len());
        let image = format!("{s}.jpg");
        write(&image, &r.jpeg)?;
        let mask = match &r.mask {
            Some(m) => {
                let name = format!("{s}_mask.png");
                write(&name, &m.encode_png()?)?;
                Some(PathBuf::from(name))
            }
            None => None,
        };
        entries.push(ManifestEntry {
            image: image.into(),
            label: r.label(),
            faces: r.faces.clone(),
            tampered_face: r.tampered_face,
            mask,
            donor_info: r.donor_info.clone(),
        });
    }
    let manifest = SpliceManifest::new(dir, entries);
    manifest.validate()?;
    manifest.save(&dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
