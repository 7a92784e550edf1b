//! Experiment configuration: a flat `key = value` file with dotted sections.
//!
//! ```text
//! # comment
//! seed = 7
//! regimes = none, adv, dp, dp_adv
//! dataset.kind = blobs
//! attack.gamma = 8/255
//! ```
//!
//! Blank lines and `#` comments are ignored, keys may appear once, and
//! unknown keys are rejected. Reals accept `a/b` fractions. The full key
//! list with defaults lives in `docs/formats.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::attack::{AttackConfig, AttackKind};
use crate::data::BlobSpec;
use crate::mia::ScoreKind;
use crate::trainer::RegimeKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },

    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },

    #[error("unknown key `{0}`")]
    UnknownKey(String),

    #[error("key `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },

    #[error("missing key `{0}`")]
    Missing(String),

    #[error("invalid configuration: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Per-dataset defaults for the attack and the privacy target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Mnist,
    Fmnist,
    Cifar10,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Mnist => "mnist",
            Preset::Fmnist => "fmnist",
            Preset::Cifar10 => "cifar10",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "mnist" => Some(Preset::Mnist),
            "fmnist" => Some(Preset::Fmnist),
            "cifar10" => Some(Preset::Cifar10),
            _ => None,
        }
    }

    /// `(steps, step_size, gamma, target_epsilon)`.
    pub fn hyperparameters(self) -> (usize, f64, f64, f64) {
        match self {
            Preset::Mnist => (25, 0.02, 0.25, 1.0),
            Preset::Fmnist => (15, 0.02, 0.15, 1.0),
            Preset::Cifar10 => (10, 2.0 / 255.0, 8.0 / 255.0, 3.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Blobs(BlobSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub preset: Preset,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpParams {
    pub clip_norm: f64,
    /// Defaults to `batch_size / n_train`.
    pub sample_rate: Option<f64>,
    pub delta: f64,
    pub target_epsilon: Option<f64>,
    /// Explicit σ; takes precedence over `target_epsilon`.
    pub noise_multiplier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditConfig {
    pub n_audit: usize,
    pub score_kind: ScoreKind,
    pub group_level: bool,
    pub perturbed_groups: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub epochs: usize,
    pub output_dir: PathBuf,
    pub regimes: Vec<RegimeKind>,
    pub parallel: bool,
    pub dataset: DatasetConfig,
    pub hidden: Vec<usize>,
    pub train: TrainParams,
    pub attack: AttackConfig,
    pub dp: DpParams,
    pub audit: AuditConfig,
}

const KEYS: &[&str] = &[
    "version",
    "seed",
    "epochs",
    "output_dir",
    "regimes",
    "parallel",
    "dataset.kind",
    "dataset.preset",
    "dataset.train_limit",
    "dataset.test_limit",
    "dataset.classes",
    "dataset.dim",
    "dataset.n_per_class",
    "dataset.separation",
    "dataset.noise_std",
    "dataset.train_fraction",
    "dataset.seed",
    "dataset.train_images",
    "dataset.train_labels",
    "dataset.test_images",
    "dataset.test_labels",
    "model.hidden",
    "train.lr",
    "train.weight_decay",
    "train.batch_size",
    "attack.kind",
    "attack.gamma",
    "attack.step_size",
    "attack.steps",
    "attack.random_start",
    "dp.clip_norm",
    "dp.sample_rate",
    "dp.delta",
    "dp.target_epsilon",
    "dp.noise_multiplier",
    "audit.n_audit",
    "audit.score_kind",
    "audit.group_level",
    "audit.perturbed_groups",
];

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(ConfigError::Duplicate {
                line: i + 1,
                key: key.to_string(),
            });
        }
    }
    Ok(map)
}

struct Values(BTreeMap<String, String>);

impl Values {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn bad(key: &str, value: &str, expected: &'static str) -> ConfigError {
        ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected,
        }
    }

    fn real(&self, key: &str) -> Result<Option<f64>> {
        self.raw(key)
            .map(|v| parse_real(v).ok_or_else(|| Self::bad(key, v, "a real number")))
            .transpose()
    }

    fn int<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|_| Self::bad(key, v, "a non-negative integer")))
            .transpose()
    }

    fn boolean(&self, key: &str) -> Result<Option<bool>> {
        self.raw(key)
            .map(|v| match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Self::bad(key, v, "true or false")),
            })
            .transpose()
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        self.raw(key)
            .map(PathBuf::from)
            .ok_or_else(|| ConfigError::Missing(key.to_string()))
    }
}

/// Parses `3.5`, `1e-5` or `2/255`.
pub fn parse_real(s: &str) -> Option<f64> {
    let v = match s.split_once('/') {
        Some((a, b)) => a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?,
        None => s.parse::<f64>().ok()?,
    };
    (!v.is_nan()).then_some(v)
}

fn list<T>(key: &str, value: &str, mut item: impl FnMut(&str) -> Option<T>, expected: &'static str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| item(s).ok_or_else(|| Values::bad(key, s, expected)))
        .collect()
}

fn score_kind_name(k: ScoreKind) -> &'static str {
    match k {
        ScoreKind::ConfidenceTrueClass => "confidence",
        ScoreKind::NegativeLoss => "negative_loss",
    }
}

fn attack_kind_name(k: AttackKind) -> &'static str {
    match k {
        AttackKind::Fgsm => "fgsm",
        AttackKind::Pgd => "pgd",
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let v = Values(parse_pairs(text)?);

        let seed = v.int::<u64>("seed")?.unwrap_or(0);
        let preset = match v.raw("dataset.preset") {
            None => Preset::Mnist,
            Some(s) => Preset::parse(s).ok_or_else(|| Values::bad("dataset.preset", s, "mnist, fmnist or cifar10"))?,
        };
        let (p_steps, p_step, p_gamma, p_eps) = preset.hyperparameters();

        let source = match v.raw("dataset.kind").unwrap_or("blobs") {
            "blobs" => DatasetSource::Blobs(BlobSpec {
                classes: v.int("dataset.classes")?.unwrap_or(4),
                dim: v.int("dataset.dim")?.unwrap_or(16),
                n_per_class: v.int("dataset.n_per_class")?.unwrap_or(500),
                separation: v.real("dataset.separation")?.unwrap_or(0.5),
                noise_std: v.real("dataset.noise_std")?.unwrap_or(0.2),
                train_fraction: v.real("dataset.train_fraction")?.unwrap_or(0.8),
                seed: v.int("dataset.seed")?.unwrap_or(seed),
            }),
            "idx" => DatasetSource::Idx {
                train_images: v.path("dataset.train_images")?,
                train_labels: v.path("dataset.train_labels")?,
                test_images: v.path("dataset.test_images")?,
                test_labels: v.path("dataset.test_labels")?,
            },
            other => return Err(Values::bad("dataset.kind", other, "blobs or idx")),
        };

        let regimes = match v.raw("regimes") {
            None => RegimeKind::ALL.to_vec(),
            Some(s) => list("regimes", s, RegimeKind::parse, "none, adv, dp or dp_adv")?,
        };
        let hidden = match v.raw("model.hidden") {
            None => vec![256, 128],
            Some(s) => list(
                "model.hidden",
                s,
                |x| x.parse().ok(),
                "a comma-separated list of widths",
            )?,
        };

        let attack_kind = match v.raw("attack.kind").unwrap_or("pgd") {
            "pgd" => AttackKind::Pgd,
            "fgsm" => AttackKind::Fgsm,
            other => return Err(Values::bad("attack.kind", other, "pgd or fgsm")),
        };
        let gamma = v.real("attack.gamma")?.unwrap_or(p_gamma);
        let attack = AttackConfig {
            kind: attack_kind,
            gamma,
            step_size: v
                .real("attack.step_size")?
                .unwrap_or(if attack_kind == AttackKind::Fgsm { gamma } else { p_step }),
            steps: v
                .int("attack.steps")?
                .unwrap_or(if attack_kind == AttackKind::Fgsm { 1 } else { p_steps }),
            random_start: v.boolean("attack.random_start")?.unwrap_or(false),
        };

        let noise_multiplier = v.real("dp.noise_multiplier")?;
        let target_epsilon = match (v.real("dp.target_epsilon")?, noise_multiplier) {
            (Some(e), _) => Some(e),
            (None, Some(_)) => None,
            (None, None) => Some(p_eps),
        };

        let score_kind = match v.raw("audit.score_kind").unwrap_or("confidence") {
            "confidence" => ScoreKind::ConfidenceTrueClass,
            "negative_loss" => ScoreKind::NegativeLoss,
            other => return Err(Values::bad("audit.score_kind", other, "confidence or negative_loss")),
        };

        let cfg = Self {
            seed,
            epochs: v.int("epochs")?.unwrap_or(200),
            output_dir: v
                .raw("output_dir")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("results")),
            regimes,
            parallel: v.boolean("parallel")?.unwrap_or(false),
            dataset: DatasetConfig {
                source,
                preset,
                train_limit: v.int("dataset.train_limit")?,
                test_limit: v.int("dataset.test_limit")?,
            },
            hidden,
            train: TrainParams {
                learning_rate: v.real("train.lr")?.unwrap_or(0.005),
                weight_decay: v.real("train.weight_decay")?.unwrap_or(5e-4),
                batch_size: v.int("train.batch_size")?.unwrap_or(128),
            },
            attack,
            dp: DpParams {
                clip_norm: v.real("dp.clip_norm")?.unwrap_or(1.0),
                sample_rate: v.real("dp.sample_rate")?,
                delta: v.real("dp.delta")?.unwrap_or(1e-5),
                target_epsilon,
                noise_multiplier,
            },
            audit: AuditConfig {
                n_audit: v.int("audit.n_audit")?.unwrap_or(1000),
                score_kind,
                group_level: v.boolean("audit.group_level")?.unwrap_or(true),
                perturbed_groups: v.boolean("audit.perturbed_groups")?.unwrap_or(true),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.regimes.is_empty() {
            return bad("at least one regime is required");
        }
        let mut seen = self.regimes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.regimes.len() {
            return bad("regimes must not repeat");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be >= 1");
        }
        if !(self.train.learning_rate > 0.0) || !(self.train.weight_decay >= 0.0) {
            return bad("train.lr must be > 0 and train.weight_decay >= 0");
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be >= 1");
        }
        if let Err(e) = self.attack.validate() {
            return Err(ConfigError::Invalid(e.to_string()));
        }
        if !(self.dp.clip_norm > 0.0) {
            return bad("dp.clip_norm must be > 0");
        }
        if let Some(q) = self.dp.sample_rate {
            if !(q > 0.0 && q <= 1.0) {
                return bad("dp.sample_rate must lie in (0, 1]");
            }
        }
        if !(self.dp.delta > 0.0 && self.dp.delta < 1.0) {
            return bad("dp.delta must lie in (0, 1)");
        }
        if let Some(s) = self.dp.noise_multiplier {
            if !(s >= 0.0) || !s.is_finite() {
                return bad("dp.noise_multiplier must be finite and >= 0");
            }
        }
        if let Some(e) = self.dp.target_epsilon {
            if !(e > 0.0) || !e.is_finite() {
                return bad("dp.target_epsilon must be finite and > 0");
            }
        }
        if self.audit.n_audit == 0 {
            return bad("audit.n_audit must be >= 1");
        }
        if let DatasetSource::Blobs(b) = &self.dataset.source {
            if b.classes < 2 || b.dim < b.classes {
                return bad("blobs need 2 <= dataset.classes <= dataset.dim");
            }
            if !(b.train_fraction > 0.0 && b.train_fraction < 1.0) {
                return bad("dataset.train_fraction must lie in (0, 1)");
            }
        }
        Ok(())
    }

    /// Canonical text form: every key written explicitly, parseable by
    /// [`ExperimentConfig::parse`] into an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv(
            "regimes",
            self.regimes.iter().map(|r| r.name()).collect::<Vec<_>>().join(", "),
        );
        kv("parallel", self.parallel.to_string());
        kv("dataset.preset", self.dataset.preset.name().to_string());
        match &self.dataset.source {
            DatasetSource::Blobs(b) => {
                kv("dataset.kind", "blobs".into());
                kv("dataset.classes", b.classes.to_string());
                kv("dataset.dim", b.dim.to_string());
                kv("dataset.n_per_class", b.n_per_class.to_string());
                kv("dataset.separation", format!("{:?}", b.separation));
                kv("dataset.noise_std", format!("{:?}", b.noise_std));
                kv("dataset.train_fraction", format!("{:?}", b.train_fraction));
                kv("dataset.seed", b.seed.to_string());
            }
            DatasetSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                kv("dataset.kind", "idx".into());
                kv("dataset.train_images", train_images.display().to_string());
                kv("dataset.train_labels", train_labels.display().to_string());
                kv("dataset.test_images", test_images.display().to_string());
                kv("dataset.test_labels", test_labels.display().to_string());
            }
        }
        if let Some(n) = self.dataset.train_limit {
            kv("dataset.train_limit", n.to_string());
        }
        if let Some(n) = self.dataset.test_limit {
            kv("dataset.test_limit", n.to_string());
        }
        kv(
            "model.hidden",
            self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(", "),
        );
        kv("train.lr", format!("{:?}", self.train.learning_rate));
        kv("train.weight_decay", format!("{:?}", self.train.weight_decay));
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("attack.kind", attack_kind_name(self.attack.kind).into());
        kv("attack.gamma", format!("{:?}", self.attack.gamma));
        kv("attack.step_size", format!("{:?}", self.attack.step_size));
        kv("attack.steps", self.attack.steps.to_string());
        kv("attack.random_start", self.attack.random_start.to_string());
        kv("dp.clip_norm", format!("{:?}", self.dp.clip_norm));
        if let Some(q) = self.dp.sample_rate {
            kv("dp.sample_rate", format!("{q:?}"));
        }
        kv("dp.delta", format!("{:?}", self.dp.delta));
        if let Some(e) = self.dp.target_epsilon {
            kv("dp.target_epsilon", format!("{e:?}"));
        }
        if let Some(sg) = self.dp.noise_multiplier {
            kv("dp.noise_multiplier", format!("{sg:?}"));
        }
        kv("audit.n_audit", self.audit.n_audit.to_string());
        kv("audit.score_kind", score_kind_name(self.audit.score_kind).into());
        kv("audit.group_level", self.audit.group_level.to_string());
        kv("audit.perturbed_groups", self.audit.perturbed_groups.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_the_reference_setup() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c.epochs, 200);
        assert_eq!(c.train.learning_rate, 0.005);
        assert_eq!(c.train.weight_decay, 5e-4);
        assert_eq!((c.attack.steps, c.attack.step_size, c.attack.gamma), (25, 0.02, 0.25));
        assert_eq!(c.dp.target_epsilon, Some(1.0));
        assert_eq!(c.regimes, RegimeKind::ALL.to_vec());
        assert_eq!(c.hidden, vec![256, 128]);
    }

    #[test]
    fn presets() {
        let c = ExperimentConfig::parse("dataset.preset = cifar10").unwrap();
        assert_eq!(c.attack.steps, 10);
        assert_eq!(c.attack.gamma, 8.0 / 255.0);
        assert_eq!(c.attack.step_size, 2.0 / 255.0);
        assert_eq!(c.dp.target_epsilon, Some(3.0));
        let f = ExperimentConfig::parse("dataset.preset = fmnist").unwrap();
        assert_eq!((f.attack.steps, f.attack.gamma), (15, 0.15));
    }

    #[test]
    fn explicit_keys_and_fractions() {
        let text = "\
# a comment
seed = 9
regimes = none, dp_adv   # trailing comment
attack.gamma = 8/255
attack.step_size = 2/255
attack.steps = 4
model.hidden = 32
dp.noise_multiplier = 1.5
";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.regimes, vec![RegimeKind::None, RegimeKind::DpAdv]);
        assert_eq!(c.attack.gamma, 8.0 / 255.0);
        assert_eq!(c.hidden, vec![32]);
        assert_eq!(c.dp.noise_multiplier, Some(1.5));
        assert_eq!(c.dp.target_epsilon, None);
    }

    #[test]
    fn errors() {
        assert_eq!(
            ExperimentConfig::parse("bogus = 1"),
            Err(ConfigError::UnknownKey("bogus".into()))
        );
        assert_eq!(ExperimentConfig::parse("seed 1"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(
            ExperimentConfig::parse("seed = 1\nseed = 2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("epochs = x"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("epochs = 0"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("regimes = none, none"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("dataset.kind = idx"),
            Err(ConfigError::Missing(_))
        ));
        assert!(matches!(
            ExperimentConfig::parse("attack.step_size = 0.5\nattack.gamma = 0.1"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "seed = 3\nattack.gamma = 2/255\nattack.step_size = 1/255\ndp.noise_multiplier = 1.2345678901234567\ndataset.train_limit = 100\n";
        let c = ExperimentConfig::parse(text).unwrap();
        let again = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_text(), again.to_text());
    }
}
