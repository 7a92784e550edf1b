//! End-to-end experiments: load data, train each regime, audit, write files.
//!
//! An output directory holds
//!
//! - `manifest.txt`: the resolved config (itself a valid config file)
//! - `epochs.csv`, `epochs_smoothed.csv`: per-epoch records of every regime
//! - `<regime>/epochs.csv`, `<regime>/model.bin`
//! - `mia.csv`, `mia_report.txt`
//!
//! Formats are described in `docs/formats.md`.

pub mod checkpoint;
pub mod config;
pub mod report;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::accountant::{self, AccountantError};
use crate::data::{self, DataError, Dataset};
use crate::dp::{self, DpConfig};
use crate::mia::{self, MiaError};
use crate::nn::{self, Model, NnError};
use crate::trainer::{self, EpochRecord, Regime, RegimeKind, TrainError, TrainSettings};

pub use checkpoint::CheckpointError;
pub use config::{ConfigError, DatasetSource, ExperimentConfig};
pub use report::{smooth, MiaResults};

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "DPADV_OUTPUT_DIR";
pub const SMOOTHING_WINDOW: usize = 10;
/// Seed offset of the audit pools, past the trainer's stream offsets.
pub const AUDIT_STREAM: u64 = 4;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("dataset: {0}")]
    Data(#[from] DataError),

    #[error("regime {regime}: {source}")]
    Train {
        regime: &'static str,
        #[source]
        source: TrainError,
    },

    #[error("accountant: {0}")]
    Accountant(#[from] AccountantError),

    #[error("audit: {0}")]
    Mia(#[from] MiaError),

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ExperimentError {
    /// Process exit code: 2 for bad configuration or data, 3 for a diverged
    /// run, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::Data(_) => 2,
            ExperimentError::Train {
                source: TrainError::Divergence { .. },
                ..
            } => 3,
            ExperimentError::Train {
                source: TrainError::InvalidRegime(_),
                ..
            } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone)]
pub struct RegimeResult {
    pub kind: RegimeKind,
    pub records: Vec<EpochRecord>,
    pub model: Model,
    pub iterations: u64,
    pub mia: MiaResults,
}

#[derive(Debug, Clone)]
pub struct ResultsBundle {
    /// The config with sample rate and noise multiplier filled in.
    pub config: ExperimentConfig,
    pub manifest: String,
    pub regimes: Vec<RegimeResult>,
}

impl ResultsBundle {
    pub fn regime(&self, kind: RegimeKind) -> Option<&RegimeResult> {
        self.regimes.iter().find(|r| r.kind == kind)
    }
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &cfg.dataset.source {
        DatasetSource::Blobs(spec) => data::synth_blobs(spec)?,
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            data::load_idx(train_images, train_labels)?,
            data::load_idx(test_images, test_labels)?,
        ),
    };
    let limit = |d: Dataset, n: Option<usize>| match n {
        Some(n) if n < d.len() => d.take(n),
        _ => Ok(d),
    };
    Ok((
        limit(train, cfg.dataset.train_limit)?,
        limit(test, cfg.dataset.test_limit)?,
    ))
}

/// Fills in `dp.sample_rate` (default `batch_size / n_train`) and
/// `dp.noise_multiplier` (calibrated to `dp.target_epsilon` when absent).
pub fn resolve(cfg: &ExperimentConfig, n_train: usize) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    let q = cfg
        .dp
        .sample_rate
        .unwrap_or_else(|| (cfg.train.batch_size as f64 / n_train.max(1) as f64).min(1.0));
    out.dp.sample_rate = Some(q);
    if cfg.dp.noise_multiplier.is_none() && cfg.regimes.iter().any(|r| r.is_private()) {
        let target = cfg
            .dp
            .target_epsilon
            .ok_or_else(|| ConfigError::Missing("dp.target_epsilon or dp.noise_multiplier".into()))?;
        let steps = cfg.epochs as u64 * dp::iterations_per_epoch(q);
        out.dp.noise_multiplier = Some(accountant::calibrate_sigma(target, cfg.dp.delta, q, steps)?);
    }
    Ok(out)
}

/// DP-SGD settings of a resolved config.
pub fn dp_config(cfg: &ExperimentConfig) -> Option<DpConfig> {
    let q = cfg.dp.sample_rate?;
    Some(DpConfig {
        clip_norm: cfg.dp.clip_norm,
        noise_multiplier: cfg.dp.noise_multiplier?,
        sample_rate: q,
        learning_rate: cfg.train.learning_rate,
        iterations: cfg.epochs as u64 * dp::iterations_per_epoch(q),
        delta: cfg.dp.delta,
        weight_decay: cfg.train.weight_decay,
    })
}

pub fn regime_for(kind: RegimeKind, cfg: &ExperimentConfig) -> Result<Regime> {
    let dp = || dp_config(cfg).ok_or_else(|| ConfigError::Missing("dp.noise_multiplier".into()));
    Ok(match kind {
        RegimeKind::None => Regime::none(),
        RegimeKind::Adv => Regime::adv(cfg.attack),
        RegimeKind::Dp => Regime::dp(dp()?),
        RegimeKind::DpAdv => Regime::dp_adv(dp()?, cfg.attack),
    })
}

pub fn model_dims(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Vec<usize> {
    let mut dims = vec![train.dim()];
    dims.extend(&cfg.hidden);
    dims.push(train.class_count.max(test.class_count));
    dims
}

/// Individual and, if enabled, group-level audits of one model.
pub fn audit(
    model: &Model,
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    label: &str,
) -> Result<MiaResults> {
    let n_audit = cfg.audit.n_audit.min(train.len()).min(test.len());
    let seed = cfg.seed.wrapping_add(AUDIT_STREAM);
    let pools = mia::draw_pools(train, test, n_audit, seed)?;
    let kind = cfg.audit.score_kind;
    let classes = model.class_count();
    let individual = mia::attack_pools(model, &pools, kind)?;
    let groups = cfg
        .audit
        .group_level
        .then(|| mia::attack_groups_on_pools(model, &pools, classes, kind, None, seed))
        .transpose()?;
    let perturbed_groups = cfg
        .audit
        .perturbed_groups
        .then(|| mia::attack_groups_on_pools(model, &pools, classes, kind, Some(&cfg.attack), seed))
        .transpose()?;
    Ok(MiaResults {
        label: label.to_string(),
        individual,
        groups,
        perturbed_groups,
    })
}

/// Trains and audits one regime of a resolved config. Every regime starts
/// from the same initialization and uses the same stream seeds.
pub fn run_regime(kind: RegimeKind, cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<RegimeResult> {
    let train_err = |source| ExperimentError::Train {
        regime: kind.name(),
        source,
    };
    let regime = regime_for(kind, cfg)?;
    let model = nn::init_params(cfg.seed, &model_dims(cfg, train, test))?;
    let settings = TrainSettings {
        epochs: cfg.epochs,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        weight_decay: cfg.train.weight_decay,
        eval_attack: Some(cfg.attack),
    };
    let outcome = trainer::train(model, train, test, &regime, &settings, cfg.seed).map_err(train_err)?;
    let mia = audit(&outcome.model, cfg, train, test, kind.name())?;
    Ok(RegimeResult {
        kind,
        records: outcome.records,
        model: outcome.model,
        iterations: outcome.iterations,
        mia,
    })
}

pub fn manifest(cfg: &ExperimentConfig) -> String {
    format!(
        "# dpadv experiment manifest\nversion = {}\n{}",
        env!("CARGO_PKG_VERSION"),
        cfg.to_text()
    )
}

/// Runs every configured regime and writes the results under
/// `cfg.output_dir`. Regimes that finish are written even when another
/// one fails; the first failure is then returned.
pub fn run(cfg: &ExperimentConfig) -> Result<ResultsBundle> {
    cfg.validate()?;
    let (train, test) = load_datasets(cfg)?;
    let resolved = resolve(cfg, train.len())?;
    let manifest = manifest(&resolved);

    let outcomes: Vec<Result<RegimeResult>> = if resolved.parallel {
        resolved
            .regimes
            .par_iter()
            .map(|&k| run_regime(k, &resolved, &train, &test))
            .collect()
    } else {
        let mut out = Vec::new();
        for &k in &resolved.regimes {
            let r = run_regime(k, &resolved, &train, &test);
            let failed = r.is_err();
            out.push(r);
            if failed {
                break;
            }
        }
        out
    };

    let mut regimes = Vec::new();
    let mut first_err = None;
    for o in outcomes {
        match o {
            Ok(r) => regimes.push(r),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    let bundle = ResultsBundle {
        config: resolved,
        manifest,
        regimes,
    };
    write_bundle(&bundle, &bundle.config.output_dir)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(bundle),
    }
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).map_err(|source| ExperimentError::Io { path, source })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_bundle(bundle: &ResultsBundle, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write(dir.join("manifest.txt"), &bundle.manifest)?;

    let mut raw = format!("{}\n", report::EPOCH_HEADER);
    let mut smoothed = raw.clone();
    for r in &bundle.regimes {
        report::epoch_rows(r.kind, &r.records, &mut raw);
        report::epoch_rows(
            r.kind,
            &report::smooth_records(&r.records, SMOOTHING_WINDOW),
            &mut smoothed,
        );

        let sub = dir.join(r.kind.name());
        create_dir(&sub)?;
        write(sub.join("epochs.csv"), report::epoch_csv(r.kind, &r.records))?;
        let mut bytes = Vec::new();
        checkpoint::write_model(&mut bytes, &r.model)?;
        write(sub.join("model.bin"), bytes)?;
    }
    write(dir.join("epochs.csv"), raw)?;
    write(dir.join("epochs_smoothed.csv"), smoothed)?;

    let mia: Vec<MiaResults> = bundle.regimes.iter().map(|r| r.mia.clone()).collect();
    write(dir.join("mia.csv"), report::mia_csv(&mia))?;
    write(dir.join("mia_report.txt"), report::mia_text(&mia))?;
    Ok(())
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ExperimentConfig::parse(&text)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let file = fs::File::open(path).map_err(|source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(checkpoint::read_model(io::BufReader::new(file))?)
}
