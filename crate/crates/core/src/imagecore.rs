//! Images, face geometry, sliding-window patch grids and dataset manifests.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

/// Default sliding-window size in pixels.
pub const DEFAULT_WINDOW: u32 = 128;
/// Default sliding-window stride in pixels.
pub const DEFAULT_STRIDE: u32 = 64;
/// Default fraction of a patch that must lie inside a face for the patch to
/// count as a face patch.
pub const DEFAULT_OVERLAP: f64 = 0.5;

#[derive(thiserror::Error, Debug)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    NotFound(PathBuf),
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode image {what}: {source}")]
    Decode {
        what: String,
        source: image::ImageError,
    },
    #[error("cannot encode image: {0}")]
    Encode(image::ImageError),
    #[error("unsupported channel count {channels} in {what} (only 1 or 3 are accepted)")]
    UnsupportedChannels { what: String, channels: u8 },
    #[error("unsupported sample depth in {0} (only 8-bit images are accepted)")]
    UnsupportedDepth(String),
    #[error("invalid image shape {width}x{height}x{channels} for {len} samples")]
    Shape {
        width: u32,
        height: u32,
        channels: u8,
        len: usize,
    },
    #[error("window {window} does not fit a {width}x{height} image")]
    WindowTooLarge { window: u32, width: u32, height: u32 },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("rectangle {0:?} is empty or outside the {1}x{2} image")]
    RectOutside(Rect, u32, u32),
}

/// An 8-bit image with 1 (luma) or 3 (RGB) interleaved channels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, ImageError> {
        let shape_ok = width >= 1
            && height >= 1
            && data.len() == width as usize * height as usize * channels as usize;
        if channels != 1 && channels != 3 {
            return Err(ImageError::UnsupportedChannels {
                what: "buffer".into(),
                channels,
            });
        }
        if !shape_ok {
            return Err(ImageError::Shape {
                width,
                height,
                channels,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// A single-channel image filled with `value`.
    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self::new(width, height, 1, vec![value; width as usize * height as usize])
            .expect("non-empty luma image")
    }

    /// Builds a luma image from a per-pixel function of `(x, y)`.
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> u8) -> Self {
        let mut data = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data).expect("non-empty luma image")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    /// Sample at `(x, y)` in channel `c`.
    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        self.data[(y as usize * self.width as usize + x as usize) * self.channels as usize
            + c as usize]
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    /// Copies out the pixels under `r`.
    pub fn crop(&self, r: Rect) -> Result<Image, ImageError> {
        if !r.fits(self.width, self.height) {
            return Err(ImageError::RectOutside(r, self.width, self.height));
        }
        let ch = self.channels as usize;
        let mut data = Vec::with_capacity(r.area() as usize * ch);
        for y in r.y..r.y + r.h {
            let start = (y as usize * self.width as usize + r.x as usize) * ch;
            data.extend_from_slice(&self.data[start..start + r.w as usize * ch]);
        }
        Image::new(r.w, r.h, self.channels, data)
    }

    fn to_dynamic(&self) -> DynamicImage {
        match self.channels {
            1 => DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("shape checked at construction"),
            ),
            _ => DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("shape checked at construction"),
            ),
        }
    }

    fn color_type(&self) -> ExtendedColorType {
        if self.channels == 1 {
            ExtendedColorType::L8
        } else {
            ExtendedColorType::Rgb8
        }
    }

    /// Lossless PNG encoding.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.data, self.width, self.height, self.color_type())
            .map_err(ImageError::Encode)?;
        Ok(out)
    }

    /// Baseline JPEG encoding at `quality` (1..=100).
    pub fn encode_jpeg(&self, quality: u8) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality.clamp(1, 100))
            .write_image(&self.data, self.width, self.height, self.color_type())
            .map_err(ImageError::Encode)?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes = self.encode_png()?;
        fs::write(path, bytes).map_err(|source| ImageError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Converts to a `DynamicImage` for interop with the `image` crate.
    pub fn to_image_crate(&self) -> DynamicImage {
        self.to_dynamic()
    }
}

fn from_dynamic(img: DynamicImage, what: &str) -> Result<Image, ImageError> {
    match img {
        DynamicImage::ImageLuma8(b) => {
            let (w, h) = b.dimensions();
            Image::new(w, h, 1, b.into_raw())
        }
        DynamicImage::ImageRgb8(b) => {
            let (w, h) = b.dimensions();
            Image::new(w, h, 3, b.into_raw())
        }
        DynamicImage::ImageLumaA8(_) => Err(ImageError::UnsupportedChannels {
            what: what.into(),
            channels: 2,
        }),
        DynamicImage::ImageRgba8(_) => Err(ImageError::UnsupportedChannels {
            what: what.into(),
            channels: 4,
        }),
        _ => Err(ImageError::UnsupportedDepth(what.into())),
    }
}

/// Decodes PNG or JPEG bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image, ImageError> {
    let what = "in-memory buffer";
    let format = image::guess_format(bytes).map_err(|source| ImageError::Decode {
        what: what.into(),
        source,
    })?;
    let img = image::load(Cursor::new(bytes), format).map_err(|source| ImageError::Decode {
        what: what.into(),
        source,
    })?;
    from_dynamic(img, what)
}

/// Loads a PNG or JPEG file, preserving 1- and 3-channel layouts.
pub fn load_image(path: &Path) -> Result<Image, ImageError> {
    if !path.exists() {
        return Err(ImageError::NotFound(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let what = path.display().to_string();
    let format = match ImageFormat::from_path(path) {
        Ok(f @ (ImageFormat::Png | ImageFormat::Jpeg)) => f,
        _ => image::guess_format(&bytes).map_err(|source| ImageError::Decode {
            what: what.clone(),
            source,
        })?,
    };
    let img = image::load(Cursor::new(&bytes), format).map_err(|source| ImageError::Decode {
        what: what.clone(),
        source,
    })?;
    from_dynamic(img, &what)
}

/// Luma conversion: `round(0.299 R + 0.587 G + 0.114 B)`. One-channel input is
/// returned unchanged.
pub fn to_luma(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| {
            let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Image::new(img.width, img.height, 1, data).expect("same shape")
}

/// Axis-aligned rectangle with top-left corner `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for Rect {
    fn from(v: [u32; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [u32; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// Non-empty and fully inside a `width`×`height` image.
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w >= 1
            && self.h >= 1
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
    }

    pub fn intersection_area(&self, other: &Rect) -> u64 {
        let x0 = self.x.max(other.x) as u64;
        let y0 = self.y.max(other.y) as u64;
        let x1 = (self.x as u64 + self.w as u64).min(other.x as u64 + other.w as u64);
        let y1 = (self.y as u64 + self.h as u64).min(other.y as u64 + other.h as u64);
        x1.saturating_sub(x0) * y1.saturating_sub(y0)
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn contains(&self, px: u32, py: u32) -> bool {
        px >= self.x && py >= self.y && px - self.x < self.w && py - self.y < self.h
    }
}

/// Sliding-window decomposition of an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub window: u32,
    pub stride: u32,
    pub width: u32,
    pub height: u32,
    pub positions: Vec<Rect>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Enumerates every `window`×`window` position at multiples of `stride` that
/// lies fully inside the image, row-major.
pub fn make_grid(width: u32, height: u32, window: u32, stride: u32) -> Result<PatchGrid, ImageError> {
    if stride == 0 {
        return Err(ImageError::ZeroStride);
    }
    if window == 0 || window > width || window > height {
        return Err(ImageError::WindowTooLarge {
            window,
            width,
            height,
        });
    }
    let nx = (width - window) / stride + 1;
    let ny = (height - window) / stride + 1;
    let mut positions = Vec::with_capacity(nx as usize * ny as usize);
    for j in 0..ny {
        for i in 0..nx {
            positions.push(Rect::new(i * stride, j * stride, window, window));
        }
    }
    Ok(PatchGrid {
        window,
        stride,
        width,
        height,
        positions,
    })
}

/// Grid over an image's full extent.
pub fn grid_for(img: &Image, window: u32, stride: u32) -> Result<PatchGrid, ImageError> {
    make_grid(img.width, img.height, window, stride)
}

/// Patch indices split into those belonging to a face and the rest.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FacePartition {
    pub face: Vec<usize>,
    pub background: Vec<usize>,
}

/// A patch is a face patch iff at least `threshold` of its area lies inside
/// `face`.
pub fn patch_face_overlap(grid: &PatchGrid, face: &Rect, threshold: f64) -> FacePartition {
    let mut part = FacePartition::default();
    for (i, p) in grid.positions.iter().enumerate() {
        let frac = p.intersection_area(face) as f64 / p.area() as f64;
        if frac >= threshold {
            part.face.push(i);
        } else {
            part.background.push(i);
        }
    }
    part
}

/// Patches that touch none of `faces` above `threshold`.
pub fn background_patches(grid: &PatchGrid, faces: &[Rect], threshold: f64) -> Vec<usize> {
    grid.positions
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            faces
                .iter()
                .all(|f| (p.intersection_area(f) as f64 / p.area() as f64) < threshold)
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Authentic,
    Tampered,
}

/// One image of a dataset together with its face boxes and ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: Label,
    pub faces: Vec<Rect>,
    pub tampered_face: Option<usize>,
    pub mask: Option<PathBuf>,
    pub donor_info: String,
}

impl ManifestEntry {
    pub fn is_tampered_face(&self, idx: usize) -> bool {
        self.tampered_face == Some(idx)
    }

    /// Stable identifier of one face, `<image>#<index>`.
    pub fn face_id(&self, idx: usize) -> String {
        format!("{}#{}", self.image.display(), idx)
    }
}

#[derive(thiserror::Error, Debug)]
pub enum ManifestError {
    #[error("failed to access manifest {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("manifest entry {index} ({image}): {reason}")]
    Invalid {
        index: usize,
        image: PathBuf,
        reason: String,
    },
    #[error("manifest entry {index} references missing file {path}")]
    MissingFile { index: usize, path: PathBuf },
}

/// Dataset description. Relative paths in entries resolve against `root`,
/// the directory holding the manifest file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpliceManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl SpliceManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            root: root.into(),
            entries,
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn image_path(&self, idx: usize) -> PathBuf {
        self.resolve(&self.entries[idx].image)
    }

    /// Checks label/tampered-face consistency of every entry.
    pub fn validate(&self) -> Result<(), ManifestError> {
        for (index, e) in self.entries.iter().enumerate() {
            let invalid = |reason: String| ManifestError::Invalid {
                index,
                image: e.image.clone(),
                reason,
            };
            match (e.label, e.tampered_face) {
                (Label::Tampered, None) => {
                    return Err(invalid("tampered entry names no tampered face".into()))
                }
                (Label::Authentic, Some(_)) => {
                    return Err(invalid("authentic entry names a tampered face".into()))
                }
                (Label::Tampered, Some(k)) if k >= e.faces.len() => {
                    return Err(invalid(format!(
                        "tampered_face {k} out of range for {} faces",
                        e.faces.len()
                    )))
                }
                _ => {}
            }
            if let Some(r) = e.faces.iter().find(|r| r.w == 0 || r.h == 0) {
                return Err(invalid(format!("empty face box {:?}", <[u32; 4]>::from(*r))));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        fs::write(path, self.to_json()).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Parses and validates a manifest; every referenced file must exist.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|source| ManifestError::Json {
                path: path.to_path_buf(),
                source,
            })?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let m = Self { root, entries };
        m.validate()?;
        for (index, e) in m.entries.iter().enumerate() {
            for p in std::iter::once(&e.image).chain(e.mask.iter()) {
                let full = m.resolve(p);
                if !full.exists() {
                    return Err(ManifestError::MissingFile { index, path: full });
                }
            }
        }
        Ok(m)
    }

    /// Indices of authentic entries.
    pub fn authentic(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == Label::Authentic)
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn luma_of_known_pixels() {
        let img = Image::new(3, 1, 3, vec![255, 255, 255, 100, 150, 200, 0, 0, 0]).unwrap();
        // 0.299*100 + 0.587*150 + 0.114*200 = 140.75
        assert_eq!(to_luma(&img).data(), &[255, 141, 0]);
        let gray = Image::filled(4, 4, 9);
        assert_eq!(to_luma(&gray), gray);
    }

    #[test]
    fn png_roundtrip_and_zero_image() {
        let img = Image::new(2, 2, 1, vec![0; 4]).unwrap();
        let back = decode_image(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back, img);

        let mut rng = 0x1234_5678u32;
        let data: Vec<u8> = (0..16 * 16 * 3)
            .map(|_| {
                rng = rng.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                (rng >> 24) as u8
            })
            .collect();
        let img = Image::new(16, 16, 3, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rand.png");
        img.save_png(&p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(&dir.path().join("nope.png")),
            Err(ImageError::NotFound(_))
        ));

        let img = Image::filled(32, 32, 77);
        let jpeg = img.encode_jpeg(90).unwrap();
        let p = dir.path().join("cut.jpg");
        fs::write(&p, &jpeg[..jpeg.len() / 3]).unwrap();
        assert!(matches!(load_image(&p), Err(ImageError::Decode { .. })));

        let rgba = image::RgbaImage::from_pixel(4, 4, image::Rgba([1, 2, 3, 4]));
        let p = dir.path().join("rgba.png");
        rgba.save(&p).unwrap();
        assert!(matches!(
            load_image(&p),
            Err(ImageError::UnsupportedChannels { channels: 4, .. })
        ));
    }

    #[test]
    fn grid_counts() {
        assert_eq!(make_grid(384, 384, 128, 64).unwrap().len(), 25);
        let g = make_grid(128, 128, 128, 64).unwrap();
        assert_eq!(g.positions, vec![Rect::new(0, 0, 128, 128)]);
        let g = make_grid(200, 136, 128, 64).unwrap();
        assert_eq!(
            g.positions,
            vec![Rect::new(0, 0, 128, 128), Rect::new(64, 0, 128, 128)]
        );
        assert!(matches!(
            make_grid(100, 300, 128, 64),
            Err(ImageError::WindowTooLarge { .. })
        ));
        assert!(matches!(make_grid(300, 300, 128, 0), Err(ImageError::ZeroStride)));
    }

    #[test]
    fn overlap_examples() {
        let g = make_grid(384, 384, 128, 64).unwrap();
        let all = patch_face_overlap(&g, &Rect::new(0, 0, 384, 384), 0.5);
        assert_eq!(all.face.len(), 25);
        let none = patch_face_overlap(&g, &Rect::new(200, 200, 1, 1), 1.0);
        assert!(none.face.is_empty());
        assert_eq!(none.background.len(), 25);

        // brute-force pixel counting oracle
        let face = Rect::new(128, 128, 128, 128);
        let part = patch_face_overlap(&g, &face, 0.5);
        let mut expect = Vec::new();
        for (i, p) in g.positions.iter().enumerate() {
            let mut inside = 0u64;
            for y in p.y..p.y + p.h {
                for x in p.x..p.x + p.w {
                    inside += face.contains(x, y) as u64;
                }
            }
            if inside as f64 / p.area() as f64 >= 0.5 {
                expect.push(i);
            }
        }
        assert_eq!(part.face, expect);
        // the centre patch plus its four half-covered edge neighbours
        assert_eq!(part.face, vec![7, 11, 12, 13, 17]);
    }

    fn entry(label: Label, tampered: Option<usize>) -> ManifestEntry {
        ManifestEntry {
            image: "a.png".into(),
            label,
            faces: vec![Rect::new(0, 0, 4, 4), Rect::new(4, 4, 4, 4)],
            tampered_face: tampered,
            mask: None,
            donor_info: String::new(),
        }
    }

    #[test]
    fn manifest_validation_and_json_shape() {
        let ok = SpliceManifest::new(".", vec![entry(Label::Tampered, Some(1))]);
        ok.validate().unwrap();
        let json = ok.to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v[0]["faces"][1], serde_json::json!([4, 4, 4, 4]));
        assert_eq!(v[0]["label"], "tampered");
        assert_eq!(v[0]["mask"], serde_json::Value::Null);

        for bad in [
            entry(Label::Tampered, None),
            entry(Label::Authentic, Some(0)),
            entry(Label::Tampered, Some(2)),
        ] {
            assert!(SpliceManifest::new(".", vec![bad]).validate().is_err());
        }
    }

    #[test]
    fn manifest_load_checks_files() {
        let dir = tempfile::tempdir().unwrap();
        let m = SpliceManifest::new(dir.path(), vec![entry(Label::Authentic, None)]);
        let p = dir.path().join("manifest.json");
        m.save(&p).unwrap();
        assert!(matches!(
            SpliceManifest::load(&p),
            Err(ManifestError::MissingFile { .. })
        ));
        Image::filled(8, 8, 0).save_png(&dir.path().join("a.png")).unwrap();
        assert_eq!(SpliceManifest::load(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn grid_matches_enumeration(w in 1u32..300, h in 1u32..300, window in 1u32..160, stride in 1u32..90) {
            prop_assume!(window <= w.min(h));
            let g = make_grid(w, h, window, stride).unwrap();
            let mut expect = Vec::new();
            let mut y = 0;
            while y + window <= h {
                let mut x = 0;
                while x + window <= w {
                    expect.push(Rect::new(x, y, window, window));
                    x += stride;
                }
                y += stride;
            }
            prop_assert_eq!(&g.positions, &expect);
            let nx = (w - window) / stride + 1;
            let ny = (h - window) / stride + 1;
            prop_assert_eq!(g.len(), (nx * ny) as usize);
            let mut sorted = g.positions.clone();
            sorted.sort_by_key(|r| (r.y, r.x));
            sorted.dedup();
            prop_assert_eq!(sorted, g.positions.clone());
            prop_assert!(g.positions.iter().all(|r| r.fits(w, h)));
        }

        #[test]
        fn overlap_is_partition(fx in 0u32..380, fy in 0u32..380, fw in 1u32..384, fh in 1u32..384, t in 0.01f64..1.0) {
            let face = Rect::new(fx.min(383), fy.min(383), fw, fh);
            prop_assume!(face.fits(384, 384));
            let g = make_grid(384, 384, 128, 64).unwrap();
            let part = patch_face_overlap(&g, &face, t);
            let mut all: Vec<usize> = part.face.iter().chain(&part.background).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..g.len()).collect::<Vec<_>>());
        }

        #[test]
        fn luma_idempotent(data in proptest::collection::vec(any::<u8>(), 48)) {
            let img = Image::new(4, 4, 3, data).unwrap();
            let once = to_luma(&img);
            prop_assert_eq!(to_luma(&once), once);
        }
    }
}
