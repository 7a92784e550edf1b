//! The four training regimes: no defense, adversarial training, DP-SGD and
//! DP-SGD on adversarial examples (DP-Adv).
//!
//! Non-private regimes use shuffled epochs and [`sgd_step`]; private ones
//! use Poisson batches, per-sample clipping, the Gaussian mechanism and
//! [`dp_step`]. The adversarial regimes replace every example of a batch by
//! its perturbed counterpart, generated against the current parameters,
//! before any gradient is taken.
//!
//! Streams: batching and DP noise share one [`NoiseSource`]; random-start
//! attacks draw from a second one so enabling them never shifts DP noise.

use rayon::prelude::*;
use thiserror::Error;

use crate::accountant::{self, AccountantError, RdpCurve};
use crate::attack::{self, AttackConfig, AttackError};
use crate::data::{BatchMode, BatchSampler, DataError, Dataset};
use crate::dp::{self, clip_in_place, dp_step, sgd_step, DpConfig, DpError, NoiseSource};
use crate::nn::{argmax, cross_entropy_row, Batch, Model, NnError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid regime: {0}")]
    InvalidRegime(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error(transparent)]
    Attack(#[from] AttackError),

    #[error(transparent)]
    Dp(#[from] DpError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Accountant(#[from] AccountantError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegimeKind {
    None,
    Adv,
    Dp,
    DpAdv,
}

impl RegimeKind {
    pub const ALL: [RegimeKind; 4] = [RegimeKind::None, RegimeKind::Adv, RegimeKind::Dp, RegimeKind::DpAdv];

    pub fn name(self) -> &'static str {
        match self {
            RegimeKind::None => "none",
            RegimeKind::Adv => "adv",
            RegimeKind::Dp => "dp",
            RegimeKind::DpAdv => "dp_adv",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_private(self) -> bool {
        matches!(self, RegimeKind::Dp | RegimeKind::DpAdv)
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, RegimeKind::Adv | RegimeKind::DpAdv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regime {
    pub kind: RegimeKind,
    pub attack: Option<AttackConfig>,
    pub dp: Option<DpConfig>,
}

impl Regime {
    pub fn none() -> Self {
        Self {
            kind: RegimeKind::None,
            attack: None,
            dp: None,
        }
    }

    pub fn adv(attack: AttackConfig) -> Self {
        Self {
            kind: RegimeKind::Adv,
            attack: Some(attack),
            dp: None,
        }
    }

    pub fn dp(dp: DpConfig) -> Self {
        Self {
            kind: RegimeKind::Dp,
            attack: None,
            dp: Some(dp),
        }
    }

    pub fn dp_adv(dp: DpConfig, attack: AttackConfig) -> Self {
        Self {
            kind: RegimeKind::DpAdv,
            attack: Some(attack),
            dp: Some(dp),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidRegime(m));
        match (self.kind.is_adversarial(), &self.attack) {
            (true, None) => return bad(format!("{} requires an attack config", self.kind.name())),
            (_, Some(a)) => a.validate()?,
            _ => {}
        }
        match (self.kind.is_private(), &self.dp) {
            (true, None) => return bad(format!("{} requires a DP config", self.kind.name())),
            (_, Some(d)) => d.validate()?,
            _ => {}
        }
        Ok(())
    }
}

/// Settings shared by all regimes. Private regimes take their learning
/// rate and weight decay from their [`DpConfig`] instead.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Attack used for the per-epoch adversarial accuracy, if any.
    pub eval_attack: Option<AttackConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub adv_acc: Option<f64>,
    pub mean_train_loss: f64,
    pub mean_test_loss: f64,
    pub epsilon_so_far: Option<f64>,
}

impl EpochRecord {
    pub fn accuracy_gap(&self) -> f64 {
        self.train_acc - self.test_acc
    }

    pub fn loss_gap(&self) -> f64 {
        self.mean_test_loss - self.mean_train_loss
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<EpochRecord>,
    /// Total optimizer iterations, including skipped empty Poisson batches.
    pub iterations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Seed offsets of the independent streams derived from a run seed.
pub mod streams {
    pub const BATCHES: u64 = 1;
    pub const ATTACK: u64 = 2;
    pub const EVAL: u64 = 3;
}

/// Argmax accuracy and mean cross-entropy, optionally on perturbed inputs.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    attack: Option<&AttackConfig>,
    rng: &mut NoiseSource,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(DataError::Empty.into());
    }
    let batch = dataset.as_batch();
    let inputs = match attack {
        Some(cfg) => attack::perturb(model, &batch, cfg, rng)?,
        None => batch.inputs,
    };
    let per: Vec<(bool, f64)> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let z = model.logits_one(inputs.row(i))?;
            let y = dataset.labels[i];
            Ok((argmax(&z) == y, cross_entropy_row(&z, y)))
        })
        .collect::<std::result::Result<_, NnError>>()?;
    let n = per.len() as f64;
    let correct = per.iter().filter(|(c, _)| *c).count();
    let loss = per.iter().map(|(_, l)| l).sum::<f64>() / n;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        mean_loss: loss,
    })
}

/// Sum over the batch of per-example gradients, each clipped to `clip` when
/// given. Rows are computed in parallel and added in batch order.
fn gradient_sum(model: &Model, batch: &Batch, clip: Option<f64>) -> Result<(Vec<f64>, f64)> {
    let p = model.param_count();
    let mut sum = vec![0.0; p];
    let mut loss_sum = 0.0;
    let chunk = (rayon::current_num_threads() * 4).max(1);
    let mut rows = vec![0.0; chunk.min(batch.len()) * p];
    for start in (0..batch.len()).step_by(chunk) {
        let end = (start + chunk).min(batch.len());
        let rows = &mut rows[..(end - start) * p];
        let losses: Vec<f64> = rows
            .par_chunks_mut(p)
            .enumerate()
            .map(|(k, row)| {
                let i = start + k;
                let loss = model.example_gradient(batch.inputs.row(i), batch.labels[i], row)?;
                if let Some(c) = clip {
                    clip_in_place(row, c);
                }
                Ok(loss)
            })
            .collect::<std::result::Result<_, NnError>>()?;
        for (k, row) in rows.chunks(p).enumerate() {
            for (s, g) in sum.iter_mut().zip(row) {
                *s += g;
            }
            loss_sum += losses[k];
        }
    }
    Ok((sum, loss_sum))
}

fn adversarial_batch(model: &Model, batch: Batch, cfg: &AttackConfig, rng: &mut NoiseSource) -> Result<Batch> {
    let inputs = attack::perturb(model, &batch, cfg, rng)?;
    Ok(Batch::new(inputs, batch.labels)?)
}

/// Runs `settings.epochs` epochs of `regime` starting from `model`.
///
/// For private regimes one epoch is `round(1/q)` Poisson iterations and
/// `dp.iterations` must equal `epochs · round(1/q)`; the accountant is
/// charged once per iteration, empty batches included.
pub fn train(
    mut model: Model,
    train_set: &Dataset,
    test_set: &Dataset,
    regime: &Regime,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainOutcome> {
    regime.validate()?;
    if settings.epochs == 0 {
        return Err(TrainError::InvalidRegime("epochs must be >= 1".into()));
    }
    if let Some(a) = &settings.eval_attack {
        a.validate()?;
    }
    if train_set.dim() != model.input_dim() || train_set.class_count > model.class_count() {
        return Err(TrainError::InvalidRegime(format!(
            "model {:?} does not fit data with dim {} and {} classes",
            model.dims(),
            train_set.dim(),
            train_set.class_count
        )));
    }

    let mut attack_rng = NoiseSource::new(seed.wrapping_add(streams::ATTACK));
    let mut eval_rng = NoiseSource::new(seed.wrapping_add(streams::EVAL));
    let batch_seed = seed.wrapping_add(streams::BATCHES);

    let (mode, accounting) = match &regime.dp {
        Some(dp_cfg) if regime.kind.is_private() => {
            let ipe = dp_cfg.iterations_per_epoch();
            let planned = ipe * settings.epochs as u64;
            if dp_cfg.iterations != planned {
                return Err(TrainError::InvalidRegime(format!(
                    "dp.iterations = {} but {} epochs of {} iterations make {planned}",
                    dp_cfg.iterations, settings.epochs, ipe
                )));
            }
            let curve = if dp_cfg.noise_multiplier > 0.0 {
                Some(RdpCurve::single_step(
                    dp_cfg.sample_rate,
                    dp_cfg.noise_multiplier,
                    &accountant::default_orders(),
                )?)
            } else {
                None
            };
            (
                BatchMode::Poisson {
                    sample_rate: dp_cfg.sample_rate,
                },
                Some((*dp_cfg, curve)),
            )
        }
        _ => {
            if settings.batch_size == 0 {
                return Err(TrainError::InvalidRegime("batch_size must be >= 1".into()));
            }
            (
                BatchMode::ShuffledEpoch {
                    batch_size: settings.batch_size,
                },
                None,
            )
        }
    };
    let mut sampler = BatchSampler::new(train_set.len(), mode, batch_seed)?;
    let mut theta = model.flat_params();
    let mut iterations = 0u64;
    let mut records = Vec::with_capacity(settings.epochs);

    for epoch in 1..=settings.epochs {
        for indices in sampler.epoch() {
            iterations += 1;
            if indices.is_empty() {
                continue;
            }
            let mut batch = train_set.batch(&indices)?;
            if regime.kind.is_adversarial() {
                let cfg = regime.attack.as_ref().expect("validated");
                batch = adversarial_batch(&model, batch, cfg, &mut attack_rng)?;
            }
            let n = batch.len();
            let divergence = |e: NnError| TrainError::Divergence {
                epoch,
                detail: e.to_string(),
            };
            match &accounting {
                Some((dp_cfg, _)) => {
                    let (mut g, loss) = gradient_sum(&model, &batch, Some(dp_cfg.clip_norm)).map_err(|e| match e {
                        TrainError::Nn(nn) => divergence(nn),
                        other => other,
                    })?;
                    check_loss(loss, epoch)?;
                    dp::add_gaussian_noise(&mut g, dp_cfg.clip_norm, dp_cfg.noise_multiplier, sampler.source_mut());
                    dp_step(&mut theta, &g, dp_cfg.learning_rate, n, dp_cfg.weight_decay)?;
                }
                None => {
                    let (g, loss) = gradient_sum(&model, &batch, None).map_err(|e| match e {
                        TrainError::Nn(nn) => divergence(nn),
                        other => other,
                    })?;
                    check_loss(loss, epoch)?;
                    sgd_step(&mut theta, &g, settings.learning_rate, n, settings.weight_decay)?;
                }
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Divergence {
                    epoch,
                    detail: "non-finite parameters".into(),
                });
            }
            model.load_flat_params(&theta)?;
        }

        let tr = evaluate(&model, train_set, None, &mut eval_rng)?;
        let te = evaluate(&model, test_set, None, &mut eval_rng)?;
        let adv_acc = match &settings.eval_attack {
            Some(cfg) => Some(evaluate(&model, test_set, Some(cfg), &mut eval_rng)?.accuracy),
            None => None,
        };
        if !tr.mean_loss.is_finite() || !te.mean_loss.is_finite() {
            return Err(TrainError::Divergence {
                epoch,
                detail: "non-finite evaluation loss".into(),
            });
        }
        let epsilon_so_far = match &accounting {
            Some((dp_cfg, Some(curve))) => {
                Some(accountant::to_epsilon(&curve.compose(iterations), dp_cfg.delta)?.epsilon)
            }
            Some((_, None)) => Some(f64::INFINITY),
            None => None,
        };
        records.push(EpochRecord {
            epoch,
            train_acc: tr.accuracy,
            test_acc: te.accuracy,
            adv_acc,
            mean_train_loss: tr.mean_loss,
            mean_test_loss: te.mean_loss,
            epsilon_so_far,
        });
    }
    Ok(TrainOutcome {
        model,
        records,
        iterations,
    })
}

fn check_loss(loss_sum: f64, epoch: usize) -> Result<()> {
    if loss_sum.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Divergence {
            epoch,
            detail: "non-finite training loss".into(),
        })
    }
}
