//! Threshold membership-inference audits.
//!
//! Members are the positive class. An example is predicted to be a member
//! iff its score is at least the threshold `τ`. Thresholds are chosen on
//! the audited populations themselves, which makes every reported number the
//! strongest attack of the family. Accuracy is always balanced accuracy,
//! `(TPR + TNR) / 2`, which coincides with plain accuracy when both
//! populations have the same size.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::attack::{self, AttackConfig, AttackError};
use crate::data::Dataset;
use crate::dp::NoiseSource;
use crate::nn::{log_sum_exp, Batch, Model, NnError, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiaError {
    #[error("member and non-member populations must both be non-empty")]
    EmptyPopulation,

    #[error("non-finite score at position {0}")]
    NonFiniteScore(usize),

    #[error("audit size {requested} exceeds available examples {available}")]
    AuditTooLarge { requested: usize, available: usize },

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error(transparent)]
    Attack(#[from] AttackError),
}

pub type Result<T> = std::result::Result<T, MiaError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// Softmax probability of the true label.
    ConfidenceTrueClass,
    /// Negated cross-entropy, `ln p_y`.
    NegativeLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
    pub kind: ScoreKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiaReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub per_class: Option<BTreeMap<usize, f64>>,
}

/// Per-class audit; classes without enough examples are listed in `absent`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub per_class: BTreeMap<usize, MiaReport>,
    pub absent: Vec<usize>,
}

impl GroupReport {
    pub fn accuracies(&self) -> BTreeMap<usize, f64> {
        self.per_class.iter().map(|(&c, r)| (c, r.accuracy)).collect()
    }

    /// Class accuracies weighted by each class's audited example count.
    pub fn weighted_accuracy(&self) -> f64 {
        let (num, den) = self.per_class.values().fold((0.0, 0.0), |(n, d), r| {
            let w = (r.n_members + r.n_nonmembers) as f64;
            (n + w * r.accuracy, d + w)
        });
        if den == 0.0 {
            f64::NAN
        } else {
            num / den
        }
    }
}

/// Membership score of every row of `inputs`.
pub fn score(model: &Model, inputs: &Tensor, labels: &[usize], kind: ScoreKind) -> Result<Vec<f64>> {
    if inputs.rows() != labels.len() {
        return Err(NnError::DimensionMismatch {
            expected: inputs.rows(),
            actual: labels.len(),
        }
        .into());
    }
    let k = model.class_count();
    (0..labels.len())
        .into_par_iter()
        .map(|i| {
            let y = labels[i];
            if y >= k {
                return Err(NnError::LabelOutOfRange { label: y, classes: k }.into());
            }
            let z = model.logits_one(inputs.row(i))?;
            let log_p = z[y] - log_sum_exp(&z);
            let s = match kind {
                ScoreKind::ConfidenceTrueClass => log_p.exp(),
                ScoreKind::NegativeLoss => log_p,
            };
            if s.is_finite() {
                Ok(s)
            } else {
                Err(MiaError::NonFiniteScore(i))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion(scores: &ScoreSet, threshold: f64) -> Confusion {
    let tp = scores.member_scores.iter().filter(|&&s| s >= threshold).count();
    let fp = scores.nonmember_scores.iter().filter(|&&s| s >= threshold).count();
    Confusion {
        tp,
        fp,
        tn: scores.nonmember_scores.len() - fp,
        fn_: scores.member_scores.len() - tp,
    }
}

fn balanced_accuracy(tp: usize, fp: usize, members: usize, nonmembers: usize) -> f64 {
    let tpr = tp as f64 / members as f64;
    let tnr = (nonmembers - fp) as f64 / nonmembers as f64;
    (tpr + tnr) / 2.0
}

fn validate(scores: &ScoreSet) -> Result<()> {
    if scores.member_scores.is_empty() || scores.nonmember_scores.is_empty() {
        return Err(MiaError::EmptyPopulation);
    }
    let all = scores.member_scores.iter().chain(&scores.nonmember_scores);
    if let Some(i) = all.clone().position(|s| !s.is_finite()) {
        return Err(MiaError::NonFiniteScore(i));
    }
    Ok(())
}

/// Threshold strictly between `a < b` that rounds to neither endpoint's
/// side incorrectly: the result `t` satisfies `a < t ≤ b`.
fn midpoint(a: f64, b: f64) -> f64 {
    let m = a / 2.0 + b / 2.0;
    if m > a {
        m
    } else {
        b
    }
}

/// Candidate thresholds: `−∞`, midpoints between consecutive distinct
/// scores, and `+∞`.
pub fn candidate_thresholds(scores: &ScoreSet) -> Vec<f64> {
    let mut all: Vec<f64> = scores
        .member_scores
        .iter()
        .chain(&scores.nonmember_scores)
        .copied()
        .collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut out = Vec::with_capacity(all.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(all.windows(2).map(|w| midpoint(w[0], w[1])));
    out.push(f64::INFINITY);
    out
}

/// Threshold with the highest balanced accuracy; ties go to the smallest.
/// Single sweep over the sorted pooled scores.
pub fn choose_threshold(scores: &ScoreSet) -> Result<f64> {
    validate(scores)?;
    let (m, n) = (scores.member_scores.len(), scores.nonmember_scores.len());
    let mut pooled: Vec<(f64, bool)> = scores
        .member_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.nonmember_scores.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // τ = −∞ predicts everyone a member
    let (mut tp, mut fp) = (m, n);
    let mut best_tau = f64::NEG_INFINITY;
    let mut best_acc = balanced_accuracy(tp, fp, m, n);
    let mut i = 0;
    while i < pooled.len() {
        let v = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == v {
            if pooled[i].1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        let tau = if i < pooled.len() {
            midpoint(v, pooled[i].0)
        } else {
            f64::INFINITY
        };
        let acc = balanced_accuracy(tp, fp, m, n);
        if acc > best_acc {
            best_acc = acc;
            best_tau = tau;
        }
    }
    Ok(best_tau)
}

pub fn evaluate(scores: &ScoreSet, threshold: f64) -> Result<MiaReport> {
    validate(scores)?;
    let (m, n) = (scores.member_scores.len(), scores.nonmember_scores.len());
    let c = confusion(scores, threshold);
    let precision = if c.tp + c.fp > 0 {
        c.tp as f64 / (c.tp + c.fp) as f64
    } else {
        0.0
    };
    let recall = c.tp as f64 / m as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(MiaReport {
        accuracy: balanced_accuracy(c.tp, c.fp, m, n),
        precision,
        recall,
        f1,
        threshold,
        n_members: m,
        n_nonmembers: n,
        per_class: None,
    })
}

/// Chooses the optimal threshold and evaluates at it.
pub fn audit_scores(scores: &ScoreSet) -> Result<MiaReport> {
    let tau = choose_threshold(scores)?;
    evaluate(scores, tau)
}

/// Seeded sample of `n` distinct indices out of `0..len` (partial
/// Fisher–Yates), in draw order.
fn sample_indices(len: usize, n: usize, rng: &mut NoiseSource) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..n {
        let j = i + rng.index(len - i);
        idx.swap(i, j);
    }
    idx.truncate(n);
    idx
}

/// Audit pools: `n_audit` sampled members and non-members.
#[derive(Debug, Clone)]
pub struct AuditPools {
    pub members: Batch,
    pub nonmembers: Batch,
}

pub fn draw_pools(train: &Dataset, test: &Dataset, n_audit: usize, seed: u64) -> Result<AuditPools> {
    let available = train.len().min(test.len());
    if n_audit == 0 {
        return Err(MiaError::EmptyPopulation);
    }
    if n_audit > available {
        return Err(MiaError::AuditTooLarge {
            requested: n_audit,
            available,
        });
    }
    let mut rng = NoiseSource::new(seed);
    let mi = sample_indices(train.len(), n_audit, &mut rng);
    let ni = sample_indices(test.len(), n_audit, &mut rng);
    let to_mia = |e: crate::data::DataError| match e {
        crate::data::DataError::Tensor(t) => MiaError::Nn(t),
        _ => MiaError::EmptyPopulation,
    };
    Ok(AuditPools {
        members: train.batch(&mi).map_err(to_mia)?,
        nonmembers: test.batch(&ni).map_err(to_mia)?,
    })
}

/// Global attack over `n_audit` members from `train` and as many
/// non-members from `test`.
pub fn attack_individual(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    n_audit: usize,
    kind: ScoreKind,
    seed: u64,
) -> Result<MiaReport> {
    let pools = draw_pools(train, test, n_audit, seed)?;
    attack_pools(model, &pools, kind)
}

pub fn attack_pools(model: &Model, pools: &AuditPools, kind: ScoreKind) -> Result<MiaReport> {
    let scores = ScoreSet {
        member_scores: score(model, &pools.members.inputs, &pools.members.labels, kind)?,
        nonmember_scores: score(model, &pools.nonmembers.inputs, &pools.nonmembers.labels, kind)?,
        kind,
    };
    audit_scores(&scores)
}

/// Per-class attack on the same pools as [`attack_individual`]. When
/// `perturb` is given, members and non-members are both replaced by their
/// adversarial counterparts before scoring. Each class keeps an equal
/// number of members and non-members (the smaller of the two counts, in
/// draw order) and gets its own threshold.
pub fn attack_groups(
    model: &Model,
    train: &Dataset,
    test: &Dataset,
    n_audit: usize,
    kind: ScoreKind,
    perturb: Option<&AttackConfig>,
    seed: u64,
) -> Result<GroupReport> {
    let pools = draw_pools(train, test, n_audit, seed)?;
    let classes = train.class_count.max(test.class_count);
    attack_groups_on_pools(model, &pools, classes, kind, perturb, seed)
}

pub fn attack_groups_on_pools(
    model: &Model,
    pools: &AuditPools,
    classes: usize,
    kind: ScoreKind,
    perturb: Option<&AttackConfig>,
    seed: u64,
) -> Result<GroupReport> {
    let (members, nonmembers) = match perturb {
        Some(cfg) => {
            let mut rng = NoiseSource::new(seed.wrapping_add(1));
            let m = attack::perturb(model, &pools.members, cfg, &mut rng)?;
            let n = attack::perturb(model, &pools.nonmembers, cfg, &mut rng)?;
            (m, n)
        }
        None => (pools.members.inputs.clone(), pools.nonmembers.inputs.clone()),
    };
    let ms = score(model, &members, &pools.members.labels, kind)?;
    let ns = score(model, &nonmembers, &pools.nonmembers.labels, kind)?;

    let mut per_class = BTreeMap::new();
    let mut absent = Vec::new();
    for c in 0..classes {
        let pick = |scores: &[f64], labels: &[usize]| -> Vec<f64> {
            scores
                .iter()
                .zip(labels)
                .filter(|(_, &y)| y == c)
                .map(|(&s, _)| s)
                .collect()
        };
        let mut m = pick(&ms, &pools.members.labels);
        let mut n = pick(&ns, &pools.nonmembers.labels);
        let k = m.len().min(n.len());
        if k < 2 {
            absent.push(c);
            continue;
        }
        m.truncate(k);
        n.truncate(k);
        let set = ScoreSet {
            member_scores: m,
            nonmember_scores: n,
            kind,
        };
        per_class.insert(c, audit_scores(&set)?);
    }
    Ok(GroupReport { per_class, absent })
}
