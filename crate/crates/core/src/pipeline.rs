//! Manifest-level stages shared by the command line and the test suites.

use std::path::PathBuf;

use crate::appearance::{crop_resize, AppearanceError, FaceCrop};
use crate::exec;
use crate::fusion_eval::{face_key, FaceKey};
use crate::imagecore::{background_patches, grid_for, load_image, patch_face_overlap, to_luma, ImageError, Label, PatchGrid, SpliceManifest};
use crate::residuals::{extract_grid_seq, FeatureConfig, FeatureError, ResidualFeature};
use crate::svmstream::{score_face, PoolEntry, SvmConfig, SvmError};
use crate::tripletnet::{sample_triplets, train, FeatureBank, TrainConfig, TrainLog, TripletError, TripletModel};

#[derive(thiserror::Error, Debug)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Triplet(#[from] TripletError),
    #[error("{face}: {source}")]
    Svm {
        face: String,
        #[source]
        source: SvmError,
    },
    #[error("{face}: {source}")]
    Appearance {
        face: String,
        #[source]
        source: AppearanceError,
    },
    #[error("{0}")]
    Selection(String),
}

/// Residual features of every grid patch of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatches {
    pub grid: PatchGrid,
    pub features: Vec<ResidualFeature>,
}

impl ImagePatches {
    pub fn rows(&self) -> Vec<&[f64]> {
        self.features.iter().map(|f| f.values.as_slice()).collect()
    }
}

pub fn extract_image(manifest: &SpliceManifest, idx: usize, config: &FeatureConfig, stride: u32) -> Result<ImagePatches, PipelineError> {
    let path = manifest.image_path(idx);
    let img = load_image(&path).map_err(|source| PipelineError::Image { path: path.clone(), source })?;
    let plane = to_luma(&img);
    let grid = grid_for(&plane, config.window, stride).map_err(|source| PipelineError::Image { path, source })?;
    let features = extract_grid_seq(&plane, &grid, idx as u32, config)?;
    Ok(ImagePatches { grid, features })
}

/// Extracts every manifest image, one image per worker.
pub fn extract_manifest(manifest: &SpliceManifest, config: &FeatureConfig, stride: u32) -> Result<Vec<ImagePatches>, PipelineError> {
    config.validate()?;
    let idx: Vec<usize> = (0..manifest.entries.len()).collect();
    exec::try_map(&idx, |_, &i| extract_image(manifest, i, config, stride))
}

/// Indices of images with the given label.
pub fn with_label(manifest: &SpliceManifest, label: Label) -> Vec<usize> {
    (0..manifest.entries.len())
        .filter(|&i| manifest.entries[i].label == label)
        .collect()
}

/// Trains the triplet network on patches of the selected images.
pub fn train_triplet_stream(
    patches: &[ImagePatches],
    images: &[usize],
    n_triplets: usize,
    config: &TrainConfig,
) -> Result<(TripletModel, TrainLog), PipelineError> {
    if images.len() < 2 {
        return Err(PipelineError::Selection(format!(
            "triplet training needs at least 2 images, {} selected",
            images.len()
        )));
    }
    let bank = FeatureBank::new(
        images
            .iter()
            .map(|&i| patches[i].features.iter().map(|f| f.values.clone()).collect())
            .collect(),
    );
    let triplets = sample_triplets(&bank.patch_counts(), n_triplets, config.seed)?;
    Ok(train(&bank, &triplets, config)?)
}

/// Embeddings per image, per patch.
pub fn embed_all(model: &TripletModel, patches: &[ImagePatches]) -> Result<Vec<Vec<Vec<f64>>>, PipelineError> {
    exec::try_map(patches, |_, p| {
        let e = model.embed(&p.rows())?;
        Ok(e.outer_iter().map(|r| r.to_vec()).collect())
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchStreamConfig {
    pub svm: SvmConfig,
    /// Face/background membership threshold on patch area.
    pub overlap: f64,
    pub seed: u64,
}

/// Patch-stream result for one face.
#[derive(Clone, Debug, PartialEq)]
pub struct FacePatchScore {
    pub image: usize,
    pub face: usize,
    pub sbar: f64,
    pub n_q: usize,
    /// S for every grid patch of the image under this face's SVM.
    pub patch_scores: Vec<f64>,
}

/// Background patch indices per image: patches below the overlap threshold
/// for every face.
pub fn backgrounds(manifest: &SpliceManifest, patches: &[ImagePatches], overlap: f64) -> Vec<Vec<usize>> {
    manifest
        .entries
        .iter()
        .zip(patches)
        .map(|(e, p)| background_patches(&p.grid, &e.faces, overlap))
        .collect()
}

/// Positive pool: background patches of every image in the set; the
/// per-face assembly drops the image under test.
pub fn background_pool(embeddings: &[Vec<Vec<f64>>], backgrounds: &[Vec<usize>]) -> Vec<PoolEntry> {
    backgrounds
        .iter()
        .enumerate()
        .flat_map(|(i, bg)| {
            bg.iter().map(move |&k| PoolEntry {
                image: i,
                embedding: embeddings[i][k].clone(),
            })
        })
        .collect()
}

/// Per-face SVM protocol over every face of the manifest, in manifest order.
pub fn patch_stream_scores(
    manifest: &SpliceManifest,
    patches: &[ImagePatches],
    embeddings: &[Vec<Vec<f64>>],
    config: &PatchStreamConfig,
) -> Result<Vec<FacePatchScore>, PipelineError> {
    let bgs = backgrounds(manifest, patches, config.overlap);
    let pool = background_pool(embeddings, &bgs);
    let jobs: Vec<(usize, usize)> = manifest
        .entries
        .iter()
        .enumerate()
        .flat_map(|(i, e)| (0..e.faces.len()).map(move |k| (i, k)))
        .collect();
    exec::try_map(&jobs, |_, &(i, k)| {
        let entry = &manifest.entries[i];
        let mut part = patch_face_overlap(&patches[i].grid, &entry.faces[k], config.overlap);
        part.background = bgs[i].clone();
        let out = score_face(i, &embeddings[i], &part, &pool, &config.svm, config.seed).map_err(|source| PipelineError::Svm {
            face: entry.face_id(k),
            source,
        })?;
        Ok(FacePatchScore {
            image: i,
            face: k,
            sbar: out.score,
            n_q: out.n_patches,
            patch_scores: out.patch_scores,
        })
    })
}

/// One appearance crop per face with its key and ground-truth label.
pub struct FaceCrops {
    pub keys: Vec<FaceKey>,
    pub crops: Vec<FaceCrop>,
    pub labels: Vec<bool>,
}

pub fn face_crops(manifest: &SpliceManifest, images: &[usize], size: usize) -> Result<FaceCrops, PipelineError> {
    let per_image = exec::try_map(images, |_, &i| {
        let entry = &manifest.entries[i];
        let path = manifest.image_path(i);
        let img = load_image(&path).map_err(|source| PipelineError::Image { path, source })?;
        entry
            .faces
            .iter()
            .enumerate()
            .map(|(k, &face)| {
                let crop = crop_resize(&img, face, size).map_err(|source| PipelineError::Appearance {
                    face: entry.face_id(k),
                    source,
                })?;
                Ok((
                    face_key(&entry.image, k),
                    crop,
                    entry.label == Label::Tampered && entry.is_tampered_face(k),
                ))
            })
            .collect::<Result<Vec<_>, PipelineError>>()
    })?;
    let mut out = FaceCrops {
        keys: Vec::new(),
        crops: Vec::new(),
        labels: Vec::new(),
    };
    for (key, crop, label) in per_image.into_iter().flatten() {
        out.keys.push(key);
        out.crops.push(crop);
        out.labels.push(label);
    }
    Ok(out)
}
