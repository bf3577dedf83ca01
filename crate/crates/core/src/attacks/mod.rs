//! White-box L-infinity attacks (PGD, MI-FGSM, BIM) and epsilon sweeps.
//!
//! Every sample is attacked on its own (batch of one) with a random stream
//! derived from `(seed, sample index)`, so adversarial examples do not
//! depend on batching. Gradients flow through the recorded solver steps of
//! Neural ODE models.

mod report;

pub use report::{AttackEntry, AttackReport, ATTACK_CSV_COLUMNS, ATTACK_CSV_SCHEMA};

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::data::Dataset;
use crate::distill::cross_entropy;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::rng;

/// Default sweep, in units of 1/255.
pub const DEFAULT_EPS_GRID_255: [f64; 7] = [0.0, 2.0, 4.0, 8.0, 12.0, 16.0, 20.0];

/// `floor(min(255 eps + 4, 1.25 * 255 eps))`.
pub fn num_steps(epsilon: f64) -> usize {
    let e = epsilon * 255.0;
    // absorb rounding in eps * 255 so that k/255 lands on k
    let s = (e + 4.0).min(e * 1.25) + 1e-9;
    s.floor().max(0.0) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Pgd,
    MiFgsm,
    Bim,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Pgd => "pgd",
            AttackKind::MiFgsm => "mifgsm",
            AttackKind::Bim => "bim",
        })
    }
}

impl FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgd" => Ok(AttackKind::Pgd),
            "mifgsm" | "mi-fgsm" => Ok(AttackKind::MiFgsm),
            "bim" => Ok(AttackKind::Bim),
            _ => Err(Error::Config(format!("unknown attack {s:?} (pgd|mifgsm|bim)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    /// `None` derives the count from epsilon with [`num_steps`].
    pub steps: Option<usize>,
    /// MI-FGSM only.
    pub momentum: f64,
    pub pixel_range: (f64, f64),
    /// PGD only.
    pub random_start: bool,
    pub seed: u64,
    /// Inputs whose natural scale differs from 8-bit pixels express epsilon
    /// and step size multiplied by this factor; the step count is still
    /// derived from `epsilon / feature_scale`.
    pub feature_scale: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 1.0 / 255.0,
            steps: None,
            momentum: 1.0,
            pixel_range: (0.0, 1.0),
            random_start: true,
            seed: 0,
            feature_scale: 1.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.pixel_range;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(lo < hi) {
            return Err(Error::Config(format!("empty pixel range ({lo}, {hi})")));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return Err(Error::Config(format!("feature scale must be positive, got {}", self.feature_scale)));
        }
        if !self.momentum.is_finite() {
            return Err(Error::Config("momentum must be finite".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.steps.unwrap_or_else(|| num_steps(self.epsilon / self.feature_scale))
    }
}

/// Cross-entropy of one sample and its gradient with respect to the input.
fn loss_and_grad(model: &dyn Classifier, x: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let p = model.params().on_tape(&mut tape, false);
    let xv = tape.leaf(x.clone());
    let out = model.forward(&mut tape, &p, xv)?;
    let loss = cross_entropy(&mut tape, out.logits, &[label])?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let g = grads.wrt(xv);
    if !g.is_finite() {
        return Err(Error::NumericFault { op: "input gradient" });
    }
    Ok((value, g))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `adv` onto the epsilon ball around `x` and the pixel range.
/// `o ± eps` can round outward, so the computed distance `|a - o|` is
/// pulled back within `eps` an ulp at a time.
fn project(adv: &mut [f64], x: &[f64], eps: f64, (lo, hi): (f64, f64)) {
    for (a, &o) in adv.iter_mut().zip(x) {
        let mut v = a.clamp(o - eps, o + eps);
        while (v - o).abs() > eps {
            v = if v > o { v.next_down() } else { v.next_up() };
        }
        *a = v.clamp(lo, hi);
    }
}

/// Attacks one sample `x` of shape `(1, c, h, w)`; `index` selects its
/// random stream.
pub fn attack_sample(
    model: &dyn Classifier,
    kind: AttackKind,
    x: &Tensor,
    label: usize,
    cfg: &AttackConfig,
    index: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let steps = cfg.steps();
    let orig = x.data();
    let mut adv = x.clone();
    if eps == 0.0 {
        return Ok(adv);
    }
    if kind == AttackKind::Pgd && cfg.random_start {
        let mut r = rng::stream(cfg.seed, "attack", index);
        for a in adv.data_mut() {
            *a += r.gen_range(-eps..=eps);
        }
        project(adv.data_mut(), orig, eps, cfg.pixel_range);
    }
    let mut velocity = vec![0.0; x.numel()];
    for _ in 0..steps {
        let (_, g) = loss_and_grad(model, &adv, label)?;
        let g = g.data();
        let dir: Vec<f64> = match kind {
            AttackKind::Pgd | AttackKind::Bim => g.iter().map(|&v| sign(v)).collect(),
            AttackKind::MiFgsm => {
                let l1: f64 = g.iter().map(|v| v.abs()).sum();
                for (m, &gi) in velocity.iter_mut().zip(g) {
                    *m = if l1 > 0.0 { cfg.momentum * *m + gi / l1 } else { cfg.momentum * *m };
                }
                velocity.iter().map(|&v| sign(v)).collect()
            }
        };
        for (a, d) in adv.data_mut().iter_mut().zip(dir) {
            *a += cfg.step_size * d;
        }
        project(adv.data_mut(), orig, eps, cfg.pixel_range);
    }
    Ok(adv)
}

/// Result of attacking a batch: adversarial images plus the samples whose
/// attack failed numerically (those rows hold the clean input).
pub struct AttackOutput {
    pub images: Tensor,
    pub failed: Vec<bool>,
}

fn attack_batch(
    model: &dyn Classifier,
    kind: AttackKind,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutput> {
    cfg.validate()?;
    if x.batch() != labels.len() {
        return Err(Error::shape("attack", &[x.shape(), &[labels.len()]]));
    }
    let rows: Vec<Result<Option<Tensor>>> = (0..labels.len())
        .into_par_iter()
        .map(|i| {
            let xi = x.select_rows(&[i]);
            match attack_sample(model, kind, &xi, labels[i], cfg, i as u64) {
                Ok(a) => Ok(Some(a)),
                Err(e) if e.is_numeric() => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut data = Vec::with_capacity(x.numel());
    let mut failed = Vec::with_capacity(labels.len());
    for (i, r) in rows.into_iter().enumerate() {
        match r? {
            Some(a) => {
                data.extend_from_slice(a.data());
                failed.push(false);
            }
            None => {
                data.extend_from_slice(x.row(i));
                failed.push(true);
            }
        }
    }
    Ok(AttackOutput {
        images: Tensor::from_vec(x.shape(), data),
        failed,
    })
}

/// Projected gradient descent with uniform random start.
pub fn pgd(model: &dyn Classifier, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AttackOutput> {
    attack_batch(model, AttackKind::Pgd, x, labels, cfg)
}

/// Momentum iterative FGSM on L1-normalized gradients.
pub fn mifgsm(model: &dyn Classifier, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AttackOutput> {
    attack_batch(model, AttackKind::MiFgsm, x, labels, cfg)
}

/// Basic iterative method: signed steps clipped to the epsilon ball.
pub fn bim(model: &dyn Classifier, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<AttackOutput> {
    attack_batch(model, AttackKind::Bim, x, labels, cfg)
}

/// Per-sample forward statistics used by the sweep.
struct Probe {
    pred: usize,
    loss: f64,
    nfe: usize,
}

fn probe(model: &dyn Classifier, x: &Tensor, label: usize) -> Result<Probe> {
    let mut tape = Tape::no_grad();
    let p = model.params().on_tape(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, &p, xv)?;
    let loss = cross_entropy(&mut tape, out.logits, &[label])?;
    Ok(Probe {
        pred: tape.value(out.logits).argmax_rows()[0],
        loss: tape.value(loss).item(),
        nfe: out.nfe,
    })
}

/// Attacks every sample of `ds` at each epsilon of `eps_grid` (ascending).
/// Accuracies are over the samples whose clean and attacked passes
/// succeeded; the rest are counted in `failed`.
pub fn evaluate_under_attack(
    model: &dyn Classifier,
    ds: &Dataset,
    kind: AttackKind,
    eps_grid: &[f64],
    cfg: &AttackConfig,
) -> Result<AttackReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if eps_grid.is_empty() {
        return Err(Error::Config("empty epsilon grid".into()));
    }
    if eps_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("epsilon grid must be sorted ascending".into()));
    }
    cfg.validate()?;
    let n = ds.len();
    let clean: Vec<Option<Probe>> = (0..n)
        .into_par_iter()
        .map(|i| probe(model, &ds.images.select_rows(&[i]), ds.labels[i]).ok())
        .collect();
    let mut entries = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let ecfg = AttackConfig {
            epsilon: eps,
            ..cfg.clone()
        };
        ecfg.validate()?;
        let rows: Vec<Option<(Probe, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                clean[i].as_ref()?;
                let xi = ds.images.select_rows(&[i]);
                let adv = attack_sample(model, kind, &xi, ds.labels[i], &ecfg, i as u64).ok()?;
                let norm = adv
                    .data()
                    .iter()
                    .zip(xi.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                Some((probe(model, &adv, ds.labels[i]).ok()?, norm))
            })
            .collect();
        entries.push(AttackEntry::collect(eps, ecfg.steps(), &ds.labels, &clean_view(&clean), &rows));
    }
    Ok(AttackReport {
        attack: kind.to_string(),
        entries,
    })
}

fn clean_view(clean: &[Option<Probe>]) -> Vec<Option<(usize, f64)>> {
    clean.iter().map(|c| c.as_ref().map(|p| (p.pred, p.loss))).collect()
}

impl AttackEntry {
    fn collect(
        epsilon: f64,
        steps: usize,
        labels: &[usize],
        clean: &[Option<(usize, f64)>],
        rows: &[Option<(Probe, f64)>],
    ) -> Self {
        let mut e = AttackEntry {
            epsilon,
            steps,
            ..Default::default()
        };
        let (mut ok, mut clean_hits, mut adv_hits, mut nfe) = (0usize, 0usize, 0usize, 0usize);
        let (mut norm_sum, mut loss_c, mut loss_a) = (0.0, 0.0, 0.0);
        for (i, row) in rows.iter().enumerate() {
            match (row, clean[i]) {
                (Some((p, norm)), Some((cp, cl))) => {
                    ok += 1;
                    clean_hits += (cp == labels[i]) as usize;
                    adv_hits += (p.pred == labels[i]) as usize;
                    norm_sum += norm;
                    e.max_norm = e.max_norm.max(*norm);
                    loss_c += cl;
                    loss_a += p.loss;
                    nfe += p.nfe;
                    e.success.push(p.pred != labels[i]);
                }
                _ => {
                    e.failed += 1;
                    e.success.push(false);
                }
            }
        }
        let d = ok.max(1) as f64;
        e.clean_acc = clean_hits as f64 / d;
        e.attacked_acc = adv_hits as f64 / d;
        e.mean_norm = norm_sum / d;
        e.mean_loss_clean = loss_c / d;
        e.mean_loss_adv = loss_a / d;
        e.mean_nfe = nfe as f64 / d;
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_count_table() {
        assert_eq!(num_steps(0.0), 0);
        assert_eq!(num_steps(4.0 / 255.0), 5);
        assert_eq!(num_steps(8.0 / 255.0), 10);
        assert_eq!(num_steps(20.0 / 255.0), 24);
        let mut prev = 0;
        for k in 0..=400 {
            let s = num_steps(k as f64 / 2550.0);
            assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(-3.0), -1.0);
    }
}
