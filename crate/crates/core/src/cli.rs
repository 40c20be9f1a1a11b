//! Command-line surface: argument model and the six pipeline commands.
//! Every command reads one validated [`RunConfig`] and writes only under
//! `out_dir` unless an explicit output path is configured.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::appearance::{load_appearance, load_external_scores, save_appearance, score_crops, train_appearance, AppearanceError};
use crate::config::{ConfigError, ConfigOverrides, RunConfig};
use crate::exec;
use crate::fusion_eval::{calibrate_lambda, evaluate_run, face_id, face_key, read_score_table, write_score_table, EvalError, ScoreTable, StreamScores};
use crate::imagecore::{make_grid, Label, ManifestError, SpliceManifest};
use crate::pipeline::{embed_all, extract_image, face_crops, patch_stream_scores, train_triplet_stream, with_label, ImagePatches, PatchStreamConfig, PipelineError};
use crate::residuals::{load_features, save_features, FeatureError};
use crate::rng::derive_named;
use crate::svmstream::{write_score_map, SvmError};
use crate::synthsplice::{camera_pool, cameras, emit_manifest, synthesize, SynthError};
use crate::tripletnet::{load_model, save_model, TripletError};

pub const TRIPLET_FILE: &str = "triplet.tsm";
pub const APPEARANCE_FILE: &str = "appearance.tsa";
pub const SCORES_FILE: &str = "scores.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const ROC_FILE: &str = "roc.csv";

#[derive(Parser, Debug)]
#[command(name = "tamperscope", version, about = "Tampered-face detection from noise-residual and appearance evidence")]
pub struct Cli {
    /// TOML file of config fields; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Synthesize a spliced-face dataset into out_dir.
    Synth,
    /// Write one residual feature file per manifest image.
    Extract,
    /// Train the patch embedding network on authentic images.
    TrainTriplet,
    /// Train the appearance classifier on face crops.
    TrainAppearance,
    /// Score every face and write the face score table.
    Detect,
    /// Fuse stream scores and report the face-level ROC.
    Evaluate,
}

#[derive(thiserror::Error, Debug)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Mode(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Triplet(#[from] TripletError),
    #[error(transparent)]
    Svm(#[from] SvmError),
    #[error(transparent)]
    Appearance(#[from] AppearanceError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Stable machine-readable category for the one-line error report.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Mode(_) => "mode",
            CliError::Manifest(_) => "manifest",
            CliError::Synth(_) => "synth",
            CliError::Feature(_) => "features",
            CliError::Triplet(_) => "triplet",
            CliError::Svm(_) => "svm",
            CliError::Appearance(_) => "appearance",
            CliError::Pipeline(_) => "pipeline",
            CliError::Eval(_) => "evaluate",
            CliError::Io { .. } => "io",
        }
    }
}

/// Loads the config file if any, applies flag overrides and validates.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.overrides);
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = resolve_config(cli)?;
    exec::set_threads(cfg.threads);
    run_command(cli.command, &cfg)
}

/// Runs one command; the returned text is the command's stdout summary.
pub fn run_command(command: Command, cfg: &RunConfig) -> Result<String, CliError> {
    mkdir(&cfg.out_dir)?;
    match command {
        Command::Synth => cmd_synth(cfg),
        Command::Extract => cmd_extract(cfg),
        Command::TrainTriplet => cmd_train_triplet(cfg),
        Command::TrainAppearance => cmd_train_appearance(cfg),
        Command::Detect => cmd_detect(cfg),
        Command::Evaluate => cmd_evaluate(cfg),
    }
}

fn mkdir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|source| CliError::Io { path: p.into(), source })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io { path: path.into(), source })
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })
}

fn set(p: &Path) -> Option<&Path> {
    (!p.as_os_str().is_empty()).then_some(p)
}

fn or_default(p: &Path, cfg: &RunConfig, name: &str) -> PathBuf {
    set(p).map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(name))
}

fn require<'a>(p: &'a Path, field: &str) -> Result<&'a Path, CliError> {
    set(p).ok_or_else(|| CliError::Mode(format!("--{} is required", field.replace('_', "-"))))
}

fn load_manifest(cfg: &RunConfig) -> Result<SpliceManifest, CliError> {
    Ok(SpliceManifest::load(require(&cfg.manifest, "manifest")?)?)
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<String, CliError> {
    let cams = cameras(cfg.cameras, derive_named(cfg.seed, "cameras"));
    let pool_seed = derive_named(cfg.seed, "sources");
    let side = cfg.image_size;
    let hosts = camera_pool(cfg.count, side, side, &cams, pool_seed, "hosts");
    let donors = camera_pool(cfg.donors, side, side, &cams, pool_seed, "donors");
    let results = synthesize(&hosts, &donors, &cfg.recipe(), cfg.count)?;
    let m = emit_manifest(&results, &cfg.out_dir)?;
    let tampered = m.entries.iter().filter(|e| e.label == Label::Tampered).count();
    Ok(format!(
        "synthesized {} images ({tampered} tampered) into {}\n",
        m.entries.len(),
        cfg.out_dir.display()
    ))
}

/// Feature file of manifest entry `idx`; path separators are flattened.
pub fn feature_path(cfg: &RunConfig, manifest: &SpliceManifest, idx: usize) -> PathBuf {
    let name = manifest.entries[idx].image.to_string_lossy().replace(['/', '\\'], "_");
    cfg.features_dir().join(format!("{name}.tsf"))
}

pub fn cmd_extract(cfg: &RunConfig) -> Result<String, CliError> {
    let m = load_manifest(cfg)?;
    let fc = cfg.feature_config();
    fc.validate()?;
    mkdir(&cfg.features_dir())?;
    let idx: Vec<usize> = (0..m.entries.len()).collect();
    let counts = exec::try_map(&idx, |_, &i| -> Result<usize, CliError> {
        let p = extract_image(&m, i, &fc, cfg.stride)?;
        save_features(&feature_path(cfg, &m, i), &p.features)?;
        Ok(p.features.len())
    })?;
    Ok(format!(
        "extracted {} patches of dimension {} from {} images into {}\n",
        counts.iter().sum::<usize>(),
        fc.dimension(),
        m.entries.len(),
        cfg.features_dir().display()
    ))
}

/// Patch features of every image: read from the feature directory when a
/// file exists, extracted otherwise. Stored files must match the grid.
pub fn load_patches(cfg: &RunConfig, m: &SpliceManifest) -> Result<Vec<ImagePatches>, CliError> {
    let fc = cfg.feature_config();
    fc.validate()?;
    let idx: Vec<usize> = (0..m.entries.len()).collect();
    exec::try_map(&idx, |_, &i| {
        let path = feature_path(cfg, m, i);
        if !path.exists() {
            return Ok(extract_image(m, i, &fc, cfg.stride)?);
        }
        let features = load_features(&path)?;
        let img = m.image_path(i);
        let (w, h) = image::image_dimensions(&img).map_err(|e| CliError::Mode(format!("{}: {e}", img.display())))?;
        let grid = make_grid(w, h, cfg.window, cfg.stride).map_err(|e| CliError::Mode(format!("{}: {e}", img.display())))?;
        let fits = features.len() == grid.len()
            && features.iter().zip(&grid.positions).all(|(f, r)| f.rect == *r && f.values.len() == fc.dimension());
        if !fits {
            return Err(CliError::Mode(format!(
                "{} does not match the configured window, stride or filters; rerun extract",
                path.display()
            )));
        }
        Ok(ImagePatches { grid, features })
    })
}

pub fn cmd_train_triplet(cfg: &RunConfig) -> Result<String, CliError> {
    let m = load_manifest(cfg)?;
    let patches = load_patches(cfg, &m)?;
    let auth = with_label(&m, Label::Authentic);
    let tc = cfg.triplet_config();
    let (model, log) = train_triplet_stream(&patches, &auth, cfg.triplets, &tc)?;
    let out = or_default(&cfg.triplet_model, cfg, TRIPLET_FILE);
    save_model(&out, &model)?;
    let mut csv = String::from("epoch,lr,train_loss,val_loss\n");
    let _ = writeln!(csv, "init,,{},{}", log.initial_train_loss, log.initial_val_loss);
    for e in &log.epochs {
        let _ = writeln!(csv, "{},{},{},{}", e.epoch, e.lr, e.train_loss, e.val_loss);
    }
    write(&cfg.out_dir.join("triplet_log.csv"), &csv)?;
    Ok(format!(
        "trained on {} authentic images; best val loss {:.6}; model {}\n",
        auth.len(),
        log.best_val_loss(),
        out.display()
    ))
}

pub fn cmd_train_appearance(cfg: &RunConfig) -> Result<String, CliError> {
    let m = load_manifest(cfg)?;
    let all: Vec<usize> = (0..m.entries.len()).collect();
    let fc = face_crops(&m, &all, cfg.crop)?;
    let (model, log) = train_appearance(&fc.crops, &fc.labels, &cfg.appearance_config())?;
    let out = or_default(&cfg.appearance_model, cfg, APPEARANCE_FILE);
    save_appearance(&model, &out)?;
    let mut csv = String::from("epoch,lr,train_loss,val_loss,val_accuracy,val_auc\n");
    for e in &log.epochs {
        let auc = e.val_auc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{},{},{},{},{},{auc}", e.epoch, e.lr, e.train_loss, e.val_loss, e.val_accuracy);
    }
    write(&cfg.out_dir.join("appearance_log.csv"), &csv)?;
    let auc = log.best().and_then(|e| e.val_auc).map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into());
    Ok(format!("trained on {} faces; best val auc {auc}; model {}\n", fc.crops.len(), out.display()))
}

/// Which streams a detect run computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectMode {
    pub patch_stream: bool,
    pub appearance: bool,
}

/// Mode contract: the triplet model is required unless lambda is 0 and the
/// patch stream is off; at most one appearance source; at least one stream.
pub fn detect_mode(cfg: &RunConfig) -> Result<DetectMode, CliError> {
    let has_model = set(&cfg.appearance_model).is_some();
    let has_ext = set(&cfg.external_scores).is_some();
    if has_model && has_ext {
        return Err(CliError::Mode("--appearance-model and --external-scores are mutually exclusive".into()));
    }
    let need_s = cfg.patch_stream || cfg.lambda != 0.0;
    if need_s && set(&cfg.triplet_model).is_none() {
        return Err(CliError::Mode(
            "--triplet-model is required unless lambda is 0 and --patch-stream is false".into(),
        ));
    }
    if need_s && !cfg.patch_stream {
        return Err(CliError::Mode(format!("lambda is {} but --patch-stream is false", cfg.lambda)));
    }
    let appearance = has_model || has_ext;
    if !need_s && !appearance {
        return Err(CliError::Mode("no stream selected: enable the patch stream or supply appearance scores".into()));
    }
    Ok(DetectMode { patch_stream: need_s, appearance })
}

pub fn cmd_detect(cfg: &RunConfig) -> Result<String, CliError> {
    let mode = detect_mode(cfg)?;
    let m = load_manifest(cfg)?;
    let mut table = ScoreTable::new();
    for e in &m.entries {
        for k in 0..e.faces.len() {
            table.insert(face_key(&e.image, k), StreamScores::default());
        }
    }
    if mode.patch_stream {
        let model = load_model(&cfg.triplet_model)?;
        let patches = load_patches(cfg, &m)?;
        let emb = embed_all(&model, &patches)?;
        let ps = PatchStreamConfig {
            svm: cfg.svm_config(),
            overlap: cfg.overlap,
            seed: derive_named(cfg.seed, "patch-stream"),
        };
        let faces = patch_stream_scores(&m, &patches, &emb, &ps)?;
        let heat_dir = cfg.out_dir.join("heatmaps");
        if cfg.heatmaps {
            mkdir(&heat_dir)?;
        }
        for f in &faces {
            let key = face_key(&m.entries[f.image].image, f.face);
            if cfg.heatmaps {
                let stem = face_id(&key).replace(['/', '\\', '#'], "_");
                write_score_map(&heat_dir, &stem, &patches[f.image].grid, &f.patch_scores)?;
            }
            let s = table.get_mut(&key).expect("face listed from manifest");
            s.sbar = Some(f.sbar);
            s.n_q = Some(f.n_q);
        }
    }
    if let Some(p) = set(&cfg.appearance_model) {
        let model = load_appearance(p)?;
        let all: Vec<usize> = (0..m.entries.len()).collect();
        let fc = face_crops(&m, &all, model.size())?;
        for (key, f) in fc.keys.iter().zip(score_crops(&model, &fc.crops)?) {
            table.get_mut(key).expect("face listed from manifest").f = Some(f);
        }
    } else if let Some(p) = set(&cfg.external_scores) {
        let ext = load_external_scores(p)?;
        let mut missing = Vec::new();
        for (key, s) in table.iter_mut() {
            match ext.get(key) {
                Some(&f) => s.f = Some(f),
                None => missing.push(face_id(key)),
            }
        }
        if !missing.is_empty() {
            return Err(EvalError::MissingScores { stream: "external appearance", faces: missing }.into());
        }
    }
    let out = cfg.out_dir.join(SCORES_FILE);
    write(&out, &write_score_table(&table))?;
    Ok(format!("scored {} faces into {}\n", table.len(), out.display()))
}

fn stream_columns(m: &SpliceManifest, table: &ScoreTable) -> Result<(Vec<f64>, Vec<f64>, Vec<bool>), CliError> {
    let rep = evaluate_run(m, table, 1.0)?;
    let missing = |what: &str| CliError::Mode(format!("lambda calibration needs {what} scores for every validation face"));
    let f = rep.rows.iter().map(|r| r.f.ok_or_else(|| missing("appearance"))).collect::<Result<_, _>>()?;
    let s = rep.rows.iter().map(|r| r.sbar.ok_or_else(|| missing("patch-stream"))).collect::<Result<_, _>>()?;
    Ok((f, s, rep.rows.iter().map(|r| r.tampered).collect()))
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<String, CliError> {
    let m = load_manifest(cfg)?;
    let scores_path = or_default(&cfg.scores, cfg, SCORES_FILE);
    let table = read_score_table(&read(&scores_path)?, &scores_path)?;
    let lambda = if cfg.calibrate {
        let vm = SpliceManifest::load(require(&cfg.val_manifest, "val_manifest")?)?;
        let vp = require(&cfg.val_scores, "val_scores")?;
        let vt = read_score_table(&read(vp)?, vp)?;
        let (f, s, labels) = stream_columns(&vm, &vt)?;
        let grid = cfg.lambda_values().map_err(|e| CliError::Mode(format!("lambda_grid: {e}")))?;
        calibrate_lambda(&f, &s, &labels, &grid)?
    } else {
        cfg.lambda
    };
    let report = evaluate_run(&m, &table, lambda)?;
    write(&cfg.out_dir.join(REPORT_FILE), &report.to_csv())?;
    write(&cfg.out_dir.join(ROC_FILE), &report.roc_text())?;
    Ok(format!("faces={} lambda={} auc={:.3}\n", report.rows.len(), report.lambda, report.auc()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig::default()
    }

    #[test]
    fn detect_mode_contract() {
        let mut c = RunConfig { lambda: 0.0, ..cfg() };
        assert!(matches!(detect_mode(&c), Err(CliError::Mode(_))));
        c.patch_stream = false;
        c.appearance_model = "a.tsa".into();
        assert_eq!(detect_mode(&c).unwrap(), DetectMode { patch_stream: false, appearance: true });
        c.external_scores = "e.csv".into();
        assert!(detect_mode(&c).is_err());
        let c = RunConfig { patch_stream: false, triplet_model: "t.tsm".into(), ..cfg() };
        assert!(detect_mode(&c).is_err(), "lambda 1 needs the patch stream");
        let c = RunConfig { triplet_model: "t.tsm".into(), ..cfg() };
        assert_eq!(detect_mode(&c).unwrap(), DetectMode { patch_stream: true, appearance: false });
    }

    #[test]
    fn help_lists_every_field_and_global_flags() {
        use clap::CommandFactory;
        let help = Cli::command().render_long_help().to_string();
        for f in RunConfig::FIELDS {
            assert!(help.contains(&format!("--{}", f.replace('_', "-"))), "{f}");
        }
        assert!(help.contains("--config"));
        for sub in ["synth", "extract", "train-triplet", "train-appearance", "detect", "evaluate"] {
            assert!(help.contains(sub), "{sub}");
        }
    }

    #[test]
    fn global_flags_parse_after_subcommand() {
        let cli = Cli::try_parse_from(["tamperscope", "detect", "--seed", "4", "--threads", "2", "--out-dir", "x", "--window", "64"]).unwrap();
        assert_eq!(cli.command, Command::Detect);
        let c = resolve_config(&cli).unwrap();
        assert_eq!((c.seed, c.threads, c.out_dir.clone(), c.window), (4, 2, PathBuf::from("x"), 64));
    }

    #[test]
    fn errors_carry_categories() {
        let cli = Cli::try_parse_from(["tamperscope", "synth", "--window", "0", "--margin=-1"]).unwrap();
        let e = resolve_config(&cli).unwrap_err();
        assert_eq!(e.category(), "config");
        let msg = e.to_string();
        assert!(msg.contains("window") && msg.contains("margin"), "{msg}");
        let e = run_command(Command::Extract, &RunConfig { out_dir: std::env::temp_dir().join("tsc-no-manifest"), ..cfg() }).unwrap_err();
        assert_eq!(e.category(), "mode");
    }
}
