//! Synthetic membership-inference harness.
//!
//! Members are drawn with a sharper peak than non-members, mimicking an
//! overfit model. Two attackers are provided: a best-threshold rule on the
//! top score and a logistic regression on the sorted score profile.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::calibration::{defend_with_policy, distortion, DefensePolicy};
use crate::error::{Error, Result};
use crate::mechanism::{defend_with_rng, MechanismConfig};
use crate::vector::ConfidenceVector;

/// Precision `alpha + beta` of the Beta law for the peak score.
pub const PEAK_PRECISION: f64 = 20.0;
pub const DEFAULT_EPOCHS: usize = 500;
pub const DEFAULT_LEARNING_RATE: f64 = 0.5;
/// Stop once an epoch lowers the loss by less than this.
pub const CONVERGENCE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub k: usize,
    pub n_members: usize,
    pub n_nonmembers: usize,
    /// Mean peak score of a member.
    pub member_concentration: f64,
    /// Mean peak score of a non-member.
    pub nonmember_concentration: f64,
    pub rng_seed: u64,
}

impl CohortSpec {
    pub fn new(k: usize, n_members: usize, n_nonmembers: usize) -> Self {
        Self {
            k,
            n_members,
            n_nonmembers,
            member_concentration: 0.99,
            nonmember_concentration: 0.6,
            rng_seed: 0,
        }
    }

    pub fn with_concentrations(mut self, member: f64, nonmember: f64) -> Self {
        self.member_concentration = member;
        self.nonmember_concentration = nonmember;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidSpec("k must be at least 2"));
        }
        if self.n_members == 0 || self.n_nonmembers == 0 {
            return Err(Error::InvalidSpec("cohort sizes must be positive"));
        }
        let inside = |c: f64| c > 0.0 && c < 1.0;
        if !inside(self.member_concentration) || !inside(self.nonmember_concentration) {
            return Err(Error::InvalidSpec("concentrations must lie in (0, 1)"));
        }
        if self.nonmember_concentration > self.member_concentration {
            return Err(Error::InvalidSpec(
                "non-members cannot be more concentrated than members",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub members: Vec<ConfidenceVector>,
    pub nonmembers: Vec<ConfidenceVector>,
}

fn draw_vector<R: Rng>(k: usize, peak: &Beta<f64>, rng: &mut R) -> Result<ConfidenceVector> {
    let top = peak.sample(rng);
    let label = rng.random_range(0..k);
    let rest: Vec<f64> = (0..k - 1).map(|_| Exp1.sample(rng)).collect();
    let rest_total: f64 = rest.iter().sum();
    let mut scores = Vec::with_capacity(k);
    let mut others = rest.into_iter();
    for class in 0..k {
        if class == label {
            scores.push(top);
        } else {
            scores.push((1.0 - top) * others.next().unwrap_or(0.0) / rest_total);
        }
    }
    ConfidenceVector::new(scores)
}

fn draw_group(
    k: usize,
    n: usize,
    concentration: f64,
    seed: u64,
    stream: u64,
) -> Result<Vec<ConfidenceVector>> {
    let peak = Beta::new(
        concentration * PEAK_PRECISION,
        (1.0 - concentration) * PEAK_PRECISION,
    )
    .map_err(|_| Error::InvalidSpec("concentration yields an invalid Beta law"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n).map(|_| draw_vector(k, &peak, &mut rng)).collect()
}

/// Seeded member and non-member cohorts.
///
/// The peak score of each vector is Beta distributed with the cohort's mean
/// and precision [`PEAK_PRECISION`]; the remaining mass is split uniformly
/// at random over the other classes.
pub fn gen_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    Ok(Cohort {
        members: draw_group(
            spec.k,
            spec.n_members,
            spec.member_concentration,
            spec.rng_seed,
            0,
        )?,
        nonmembers: draw_group(
            spec.k,
            spec.n_nonmembers,
            spec.nonmember_concentration,
            spec.rng_seed,
            1,
        )?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAttack {
    /// Predict "member" when the top score exceeds this.
    pub threshold: f64,
    /// Balanced accuracy `(TPR + TNR) / 2` at the best threshold.
    pub accuracy: f64,
}

/// Best single threshold on the top score.
pub fn threshold_attack(
    members: &[ConfidenceVector],
    nonmembers: &[ConfidenceVector],
) -> Result<ThresholdAttack> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let mut points: Vec<(f64, bool)> = members
        .iter()
        .map(|v| (v.max(), true))
        .chain(nonmembers.iter().map(|v| (v.max(), false)))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n_pos = members.len() as f64;
    let n_neg = nonmembers.len() as f64;
    let mut best = ThresholdAttack {
        threshold: points[points.len() - 1].0,
        accuracy: 0.5,
    };
    // members strictly above the threshold, non-members at or below it
    let mut above_pos = n_pos;
    let mut below_neg = 0.0;
    let mut i = 0;
    while i < points.len() {
        let value = points[i].0;
        while i < points.len() && points[i].0 == value {
            if points[i].1 {
                above_pos -= 1.0;
            } else {
                below_neg += 1.0;
            }
            i += 1;
        }
        let accuracy = 0.5 * (above_pos / n_pos + below_neg / n_neg);
        if accuracy > best.accuracy {
            best = ThresholdAttack {
                threshold: value,
                accuracy,
            };
        }
    }
    Ok(best)
}

/// Feature matrix and labels for the logistic attacker.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

impl LabeledSet {
    /// Scores sorted in descending order, so the features do not depend on
    /// which class the model favoured.
    pub fn from_cohort(members: &[ConfidenceVector], nonmembers: &[ConfidenceVector]) -> Self {
        let profile = |v: &ConfidenceVector| {
            let mut s = v.scores().to_vec();
            s.sort_by(|a, b| b.total_cmp(a));
            s
        };
        Self {
            features: members.iter().chain(nonmembers).map(profile).collect(),
            labels: members
                .iter()
                .map(|_| true)
                .chain(nonmembers.iter().map(|_| false))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self) -> Result<usize> {
        if self.is_empty() {
            return Err(Error::EmptyCohort);
        }
        if self.features.len() != self.labels.len() {
            return Err(Error::InvalidAttackData(
                "features and labels differ in length",
            ));
        }
        let dim = self.features[0].len();
        if self.features.iter().any(|f| f.len() != dim) {
            return Err(Error::InvalidAttackData("ragged feature rows"));
        }
        let pos = self.labels.iter().filter(|&&l| l).count() as f64;
        let neg = self.len() as f64 - pos;
        if (pos - neg).abs() > 0.1 * self.len() as f64 {
            return Err(Error::InvalidAttackData(
                "labels must be balanced within 10%",
            ));
        }
        Ok(dim)
    }
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn score(params: &[f64], x: &[f64]) -> f64 {
    let (w, b) = params.split_at(params.len() - 1);
    w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[0]
}

/// Mean binary cross-entropy; `params` holds the weights then the bias.
pub fn logistic_loss(params: &[f64], xs: &[Vec<f64>], ys: &[bool]) -> f64 {
    let total: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let s = score(params, x);
            softplus(s) - if y { s } else { 0.0 }
        })
        .sum();
    total / xs.len() as f64
}

/// Gradient of [`logistic_loss`] with respect to `params`.
pub fn logistic_gradient(params: &[f64], xs: &[Vec<f64>], ys: &[bool]) -> Vec<f64> {
    let d = params.len() - 1;
    let mut grad = vec![0.0; d + 1];
    for (x, &y) in xs.iter().zip(ys) {
        let r = sigmoid(score(params, x)) - if y { 1.0 } else { 0.0 };
        for j in 0..d {
            grad[j] += r * x[j];
        }
        grad[d] += r;
    }
    let n = xs.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    grad
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    /// Weights followed by the bias, on standardized features.
    pub params: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub epochs_run: usize,
    pub final_loss: f64,
}

impl LogisticModel {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        score(&self.params, &self.standardize(x)) > 0.0
    }

    pub fn accuracy(&self, set: &LabeledSet) -> f64 {
        let hits = set
            .features
            .iter()
            .zip(&set.labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / set.len() as f64
    }
}

/// Full-batch gradient descent on standardized features.
pub fn fit_logistic(
    train: &LabeledSet,
    epochs: usize,
    learning_rate: f64,
) -> Result<LogisticModel> {
    let d = train.validate()?;
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::InvalidConfig("learning rate must be positive"));
    }
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for x in &train.features {
        for j in 0..d {
            mean[j] += x[j] / n;
        }
    }
    let mut scale = vec![0.0; d];
    for x in &train.features {
        for j in 0..d {
            scale[j] += (x[j] - mean[j]).powi(2) / n;
        }
    }
    for s in &mut scale {
        *s = if s.sqrt() > 1e-12 { s.sqrt() } else { 1.0 };
    }
    let mut model = LogisticModel {
        params: vec![0.0; d + 1],
        mean,
        scale,
        epochs_run: 0,
        final_loss: 0.0,
    };
    let xs: Vec<Vec<f64>> = train
        .features
        .iter()
        .map(|x| model.standardize(x))
        .collect();
    let ys = &train.labels;

    let initial = logistic_loss(&model.params, &xs, ys);
    let mut loss = initial;
    let mut rising = 0;
    for epoch in 1..=epochs {
        let grad = logistic_gradient(&model.params, &xs, ys);
        for (p, g) in model.params.iter_mut().zip(&grad) {
            *p -= learning_rate * g;
        }
        let next = logistic_loss(&model.params, &xs, ys);
        model.epochs_run = epoch;
        if !next.is_finite() || next > 10.0 * initial {
            return Err(Error::Diverged { epoch });
        }
        let drop = loss - next;
        loss = next;
        if drop < 0.0 {
            rising += 1;
            if rising >= 10 {
                return Err(Error::Diverged { epoch });
            }
            continue;
        }
        rising = 0;
        if drop < CONVERGENCE_TOLERANCE {
            break;
        }
    }
    model.final_loss = loss;
    Ok(model)
}

/// Trains on `train` and reports accuracy on the disjoint `test` set.
pub fn logistic_attack(
    train: &LabeledSet,
    test: &LabeledSet,
    epochs: usize,
    learning_rate: f64,
) -> Result<f64> {
    let model = fit_logistic(train, epochs, learning_rate)?;
    let d = test.validate()?;
    if d != model.mean.len() {
        return Err(Error::InvalidAttackData("train and test dimensions differ"));
    }
    Ok(model.accuracy(test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epsilon: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
    /// Threshold attack on the raw scores.
    pub attack_accuracy_before: f64,
    /// Threshold attack re-fit on the released scores.
    pub attack_accuracy_after: f64,
    pub logistic_accuracy_before: f64,
    pub logistic_accuracy_after: f64,
    pub mean_l1_distortion: f64,
    pub mean_l2_distortion: f64,
    pub argmax_preservation_rate: f64,
    /// Share of releases whose policy budget was moved across `eps*`.
    pub clamped_fraction: f64,
}

impl EvalReport {
    /// One `key=value` pair per line.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("epsilon", self.epsilon.to_string());
        put("n_members", self.n_members.to_string());
        put("n_nonmembers", self.n_nonmembers.to_string());
        put(
            "attack_accuracy_before",
            self.attack_accuracy_before.to_string(),
        );
        put(
            "attack_accuracy_after",
            self.attack_accuracy_after.to_string(),
        );
        put(
            "logistic_accuracy_before",
            self.logistic_accuracy_before.to_string(),
        );
        put(
            "logistic_accuracy_after",
            self.logistic_accuracy_after.to_string(),
        );
        put("mean_l1_distortion", self.mean_l1_distortion.to_string());
        put("mean_l2_distortion", self.mean_l2_distortion.to_string());
        put(
            "argmax_preservation_rate",
            self.argmax_preservation_rate.to_string(),
        );
        put("clamped_fraction", self.clamped_fraction.to_string());
        out
    }
}

fn halves(v: &[ConfidenceVector]) -> (&[ConfidenceVector], &[ConfidenceVector]) {
    v.split_at(v.len() / 2)
}

fn logistic_split(members: &[ConfidenceVector], nonmembers: &[ConfidenceVector]) -> Result<f64> {
    let (m_train, m_test) = halves(members);
    let (n_train, n_test) = halves(nonmembers);
    logistic_attack(
        &LabeledSet::from_cohort(m_train, n_train),
        &LabeledSet::from_cohort(m_test, n_test),
        DEFAULT_EPOCHS,
        DEFAULT_LEARNING_RATE,
    )
}

struct Released {
    z: ConfidenceVector,
    clamped: bool,
}

fn release(
    y: &ConfidenceVector,
    cfg: &MechanismConfig,
    policy: Option<&DefensePolicy>,
    nonce: u64,
) -> Result<Released> {
    let mut rng = cfg.rng(nonce);
    match policy {
        Some(p) => defend_with_policy(y, cfg, p, &mut rng).map(|r| Released {
            z: r.z,
            clamped: r.choice.clamped,
        }),
        None => defend_with_rng(y, cfg, &mut rng).map(|z| Released { z, clamped: false }),
    }
}

fn release_all(
    ys: &[ConfidenceVector],
    cfg: &MechanismConfig,
    policy: Option<&DefensePolicy>,
    first_nonce: u64,
) -> Result<Vec<Released>> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(16);
    let chunk = ys.len().div_ceil(workers).max(1);
    std::thread::scope(|scope| {
        let handles: Vec<_> = ys
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, y)| release(y, cfg, policy, first_nonce + (c * chunk + i) as u64))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(ys.len());
        for h in handles {
            out.extend(h.join().expect("release worker panicked")?);
        }
        Ok(out)
    })
}

/// Runs both attackers on a fresh cohort before and after the defense.
///
/// With a policy each vector's normalization budget is chosen relative to
/// its own fixed point; without one `cfg.epsilon` is used for both phases.
/// Vector `i` of the members draws from RNG stream `i`, non-member `j` from
/// stream `n_members + j`.
pub fn evaluate_defense(
    spec: &CohortSpec,
    cfg: &MechanismConfig,
    policy: Option<&DefensePolicy>,
) -> Result<EvalReport> {
    cfg.validate()?;
    if let Some(p) = policy {
        p.validate()?;
    }
    let cohort = gen_cohort(spec)?;
    let before = threshold_attack(&cohort.members, &cohort.nonmembers)?;
    let logistic_before = logistic_split(&cohort.members, &cohort.nonmembers)?;

    let rel_members = release_all(&cohort.members, cfg, policy, 0)?;
    let rel_nonmembers = release_all(&cohort.nonmembers, cfg, policy, spec.n_members as u64)?;

    let originals = cohort.members.iter().chain(&cohort.nonmembers);
    let released = rel_members.iter().chain(&rel_nonmembers);
    let total = (spec.n_members + spec.n_nonmembers) as f64;
    let (mut l1, mut l2, mut kept, mut clamped) = (0.0, 0.0, 0usize, 0usize);
    for (y, r) in originals.zip(released) {
        let d = distortion(y, &r.z)?;
        l1 += d.l1;
        l2 += d.l2;
        kept += usize::from(y.argmax_set() == r.z.argmax_set());
        clamped += usize::from(r.clamped);
    }

    let z_members: Vec<ConfidenceVector> = rel_members.into_iter().map(|r| r.z).collect();
    let z_nonmembers: Vec<ConfidenceVector> = rel_nonmembers.into_iter().map(|r| r.z).collect();
    let after = threshold_attack(&z_members, &z_nonmembers)?;
    let logistic_after = logistic_split(&z_members, &z_nonmembers)?;

    Ok(EvalReport {
        epsilon: cfg.epsilon,
        n_members: spec.n_members,
        n_nonmembers: spec.n_nonmembers,
        attack_accuracy_before: before.accuracy,
        attack_accuracy_after: after.accuracy,
        logistic_accuracy_before: logistic_before,
        logistic_accuracy_after: logistic_after,
        mean_l1_distortion: l1 / total,
        mean_l2_distortion: l2 / total,
        argmax_preservation_rate: kept as f64 / total,
        clamped_fraction: clamped as f64 / total,
    })
}
