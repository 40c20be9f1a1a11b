//! Run configuration: one flat table of every tunable, readable from a
//! TOML file and overridable by command-line flags of the same name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::appearance::AppearanceConfig;
use crate::residuals::{filter_bank_by_names, FeatureConfig};
use crate::svmstream::SvmConfig;
use crate::synthsplice::{RegionShape, Resampler, SpliceRecipe, MIN_SIDE};
use crate::tripletnet::TrainConfig;

#[derive(thiserror::Error, Debug)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr; )*) => {
        /// Every tunable of a run. Field names double as config-file keys
        /// and, with `_` spelled `-`, as flag names.
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        /// Flag overrides; unset flags leave the file or default value.
        #[derive(clap::Args, Clone, Debug, Default, PartialEq)]
        pub struct ConfigOverrides {
            $( $(#[doc = $doc])* #[arg(long, global = true, value_name = stringify!($ty))] pub $name: Option<$ty>, )*
        }

        impl RunConfig {
            pub const FIELDS: &'static [&'static str] = &[$( stringify!($name) ),*];

            pub fn apply(&mut self, o: &ConfigOverrides) {
                $( if let Some(v) = &o.$name { self.$name = v.clone(); } )*
            }
        }
    };
}

run_config! {
    /// Top-level seed; every stage derives its own stream from it.
    seed: u64 = 0;
    /// Worker threads (0 = one per core).
    threads: usize = 0;
    /// Directory receiving every output of a command.
    out_dir: PathBuf = PathBuf::from("out");
    /// Dataset manifest (JSON).
    manifest: PathBuf = PathBuf::new();
    /// Directory of per-image feature files (default: <out_dir>/features).
    features_dir: PathBuf = PathBuf::new();
    /// Triplet model file read by detect (written by train-triplet).
    triplet_model: PathBuf = PathBuf::new();
    /// Appearance model file read by detect (written by train-appearance).
    appearance_model: PathBuf = PathBuf::new();
    /// External appearance scores CSV (image,face_index,score).
    external_scores: PathBuf = PathBuf::new();
    /// Face score table read by evaluate (written by detect).
    scores: PathBuf = PathBuf::new();
    /// Validation manifest used to calibrate lambda.
    val_manifest: PathBuf = PathBuf::new();
    /// Validation face score table used to calibrate lambda.
    val_scores: PathBuf = PathBuf::new();

    /// Patch side in pixels.
    window: u32 = 128;
    /// Sliding-window step in pixels.
    stride: u32 = 64;
    /// Residual truncation threshold T.
    truncation: u32 = 2;
    /// Comma-separated residual filters (d1h, d1v, d2h, kb).
    filters: String = "d1h,d1v,d2h,kb".into();
    /// Split co-occurrences by 2x2 lattice phase.
    cfa_aware: bool = false;
    /// Minimum fraction of a patch inside a face box for face membership.
    overlap: f64 = 0.5;

    /// Triplet margin m.
    margin: f64 = 0.04;
    /// Number of sampled triplets.
    triplets: usize = 15000;
    /// Triplet network initial learning rate.
    triplet_lr0: f64 = 0.1;
    /// Epochs between learning-rate halvings (triplet network).
    triplet_halving: usize = 8;
    /// Triplet minibatch size.
    triplet_batch: usize = 128;
    /// Triplet training epochs.
    triplet_epochs: usize = 64;
    /// Hidden width of the embedding network.
    hidden: usize = 1024;
    /// Embedding dimension.
    embed: usize = 512;
    /// Held-out fraction for best-validation checkpointing.
    val_fraction: f64 = 0.2;

    /// SVM regularization C.
    svm_c: f64 = 100.0;
    /// SVM stopping tolerance on the projected gradient.
    svm_tol: f64 = 1e-3;
    /// SVM epoch cap.
    svm_max_epochs: usize = 1000;
    /// Compute the patch-stream score S.
    patch_stream: bool = true;
    /// Write per-face heat maps during detect.
    heatmaps: bool = false;

    /// Appearance crop side.
    crop: usize = 64;
    /// Appearance first-stage convolution maps.
    app_c1: usize = 8;
    /// Appearance second-stage convolution maps.
    app_c2: usize = 16;
    /// Appearance initial learning rate.
    app_lr0: f64 = 0.1;
    /// Epochs between learning-rate halvings (appearance).
    app_halving: usize = 8;
    /// Appearance minibatch size.
    app_batch: usize = 32;
    /// Appearance training epochs.
    app_epochs: usize = 32;

    /// Fusion weight lambda on the patch-stream score.
    lambda: f64 = 1.0;
    /// Calibrate lambda on the validation set instead of using --lambda.
    calibrate: bool = false;
    /// Comma-separated lambda calibration grid.
    lambda_grid: String = "0.25,0.5,1,2,4".into();

    /// Number of synthesized images.
    count: usize = 200;
    /// Side of synthesized host and donor images.
    image_size: u32 = 512;
    /// Number of simulated cameras.
    cameras: usize = 40;
    /// Donor pool size.
    donors: usize = 40;
    /// Final JPEG quality of every output.
    host_quality: u8 = 95;
    /// JPEG quality applied to donors before pasting.
    donor_quality: u8 = 60;
    /// Pasted region shape (rect or ellipse).
    shape: RegionShape = RegionShape::Ellipse;
    /// Smallest region and decoy side.
    size_min: u32 = 160;
    /// Largest region and decoy side.
    size_max: u32 = 224;
    /// Feather ramp width in pixels.
    feather: f64 = 4.0;
    /// Smallest donor rescale factor.
    rescale_min: f64 = 0.8;
    /// Largest donor rescale factor.
    rescale_max: f64 = 1.2;
    /// Donor resampling kernel (nearest, bilinear, lanczos3).
    resampler: Resampler = Resampler::Nearest;
    /// Gaussian noise sigma added inside pasted regions.
    noise_sigma: f64 = 0.0;
    /// Probability that an output is tampered.
    tamper_probability: f64 = 0.5;
    /// Draw donors only from the host's camera.
    same_camera_donor: bool = true;
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad number {t:?}")))
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.into(),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat table of scalars")
    }

    pub fn filter_names(&self) -> Vec<String> {
        self.filters.split(',').map(|s| s.trim().to_string()).collect()
    }

    pub fn lambda_values(&self) -> Result<Vec<f64>, String> {
        parse_list(&self.lambda_grid)
    }

    pub fn features_dir(&self) -> PathBuf {
        if self.features_dir.as_os_str().is_empty() {
            self.out_dir.join("features")
        } else {
            self.features_dir.clone()
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            window: self.window,
            filters: filter_bank_by_names(&self.filter_names()).unwrap_or_default(),
            truncation: self.truncation,
            cfa_aware: self.cfa_aware,
        }
    }

    pub fn triplet_config(&self) -> TrainConfig {
        TrainConfig {
            margin: self.margin,
            lr0: self.triplet_lr0,
            halving_period: self.triplet_halving,
            batch: self.triplet_batch,
            max_epochs: self.triplet_epochs,
            hidden: self.hidden,
            embed: self.embed,
            val_fraction: self.val_fraction,
            seed: crate::rng::derive_named(self.seed, "triplet"),
        }
    }

    pub fn svm_config(&self) -> SvmConfig {
        SvmConfig {
            c: self.svm_c,
            tol: self.svm_tol,
            max_epochs: self.svm_max_epochs,
            seed: crate::rng::derive_named(self.seed, "svm"),
        }
    }

    pub fn appearance_config(&self) -> AppearanceConfig {
        AppearanceConfig {
            size: self.crop,
            c1: self.app_c1,
            c2: self.app_c2,
            lr0: self.app_lr0,
            halving_period: self.app_halving,
            batch: self.app_batch,
            max_epochs: self.app_epochs,
            val_fraction: self.val_fraction,
            seed: crate::rng::derive_named(self.seed, "appearance"),
        }
    }

    pub fn recipe(&self) -> SpliceRecipe {
        SpliceRecipe {
            host_quality: self.host_quality,
            donor_quality: self.donor_quality,
            shape: self.shape,
            size_min: self.size_min,
            size_max: self.size_max,
            feather: self.feather,
            rescale_min: self.rescale_min,
            rescale_max: self.rescale_max,
            noise_sigma: self.noise_sigma,
            resampler: self.resampler,
            tamper_probability: self.tamper_probability,
            same_camera_donor: self.same_camera_donor,
            seed: crate::rng::derive_named(self.seed, "synth"),
        }
    }

    /// Checks every field and reports all violations together.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut bad: Vec<String> = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                bad.push(msg);
            }
        };
        need(self.window > 0, "window must be > 0".into());
        need(self.stride > 0, "stride must be > 0".into());
        need(self.truncation >= 1, "truncation must be >= 1".into());
        if let Err(e) = filter_bank_by_names(&self.filter_names()) {
            need(false, format!("filters: {e}"));
        }
        need(self.overlap > 0.0 && self.overlap <= 1.0, format!("overlap {} outside (0,1]", self.overlap));
        need(self.margin > 0.0 && self.margin.is_finite(), format!("margin {} must be > 0", self.margin));
        need(self.triplets > 0, "triplets must be > 0".into());
        need(self.triplet_lr0 > 0.0 && self.triplet_lr0.is_finite(), format!("triplet_lr0 {} must be > 0", self.triplet_lr0));
        need(self.triplet_halving > 0, "triplet_halving must be > 0".into());
        need(self.triplet_batch > 0, "triplet_batch must be > 0".into());
        need(self.hidden > 0, "hidden must be > 0".into());
        need(self.embed > 0, "embed must be > 0".into());
        need((0.0..1.0).contains(&self.val_fraction), format!("val_fraction {} outside [0,1)", self.val_fraction));
        need(self.svm_c > 0.0 && self.svm_c.is_finite(), format!("svm_c {} must be > 0", self.svm_c));
        need(self.svm_tol > 0.0, format!("svm_tol {} must be > 0", self.svm_tol));
        need(self.svm_max_epochs > 0, "svm_max_epochs must be > 0".into());
        need(self.crop > 0 && self.crop % 4 == 0, format!("crop {} must be a positive multiple of 4", self.crop));
        need(self.app_c1 > 0 && self.app_c2 > 0, "app_c1 and app_c2 must be > 0".into());
        need(self.app_lr0 > 0.0 && self.app_lr0.is_finite(), format!("app_lr0 {} must be > 0", self.app_lr0));
        need(self.app_halving > 0, "app_halving must be > 0".into());
        need(self.app_batch > 0, "app_batch must be > 0".into());
        need(self.lambda >= 0.0 && self.lambda.is_finite(), format!("lambda {} must be >= 0", self.lambda));
        match self.lambda_values() {
            Ok(v) => need(v.iter().all(|&l| l >= 0.0 && l.is_finite()), "lambda_grid values must be >= 0".into()),
            Err(e) => need(false, format!("lambda_grid: {e}")),
        }
        need(self.count > 0, "count must be > 0".into());
        need(self.image_size >= MIN_SIDE, format!("image_size {} below {MIN_SIDE}", self.image_size));
        need(self.image_size >= self.window, format!("image_size {} below window {}", self.image_size, self.window));
        need(self.cameras > 0, "cameras must be > 0".into());
        need(self.donors > 0, "donors must be > 0".into());
        need(
            !self.same_camera_donor || self.donors >= self.cameras,
            format!("donors {} must cover all {} cameras when same_camera_donor is set", self.donors, self.cameras),
        );
        if let Err(crate::synthsplice::SynthError::Recipe(v)) = self.recipe().validate() {
            bad.extend(v);
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(bad))
        }
    }
}
