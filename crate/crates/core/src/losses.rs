//! Training objectives.
//!
//! Every loss exists twice: a plain `f64` form used for reporting and tests,
//! and a tape form used for training. The physics losses are split into a
//! data-dependent table built once per batch and a cheap evaluation in the
//! physics parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::physics::{omori_integral, softplus, Derived, DerivedVars};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub noise_std: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub label_smoothing: f64,
    pub foreshock_pos_weight: f64,
    pub lambda_physics_stage1: f64,
    pub lambda_physics_stage2: f64,
    pub lambda_contrastive: f64,
    pub lambda_energy: f64,
    pub gr_bin_width: f64,
    pub gr_m_max: f64,
    pub omori_bins: usize,
    pub omori_t_min: f64,
    pub omori_t_max: f64,
    pub omori_min_delays: usize,
    pub prob_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 1.0,
            noise_std: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            label_smoothing: 0.05,
            foreshock_pos_weight: 3.0,
            lambda_physics_stage1: 0.0,
            lambda_physics_stage2: 0.1,
            lambda_contrastive: 0.1,
            lambda_energy: 0.01,
            gr_bin_width: 0.1,
            gr_m_max: 9.0,
            omori_bins: 20,
            omori_t_min: 0.01,
            omori_t_max: 90.0,
            omori_min_delays: 50,
            prob_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("margin", self.margin),
            ("noise_std", self.noise_std),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
            ("foreshock_pos_weight", self.foreshock_pos_weight),
            ("lambda_physics_stage1", self.lambda_physics_stage1),
            ("lambda_physics_stage2", self.lambda_physics_stage2),
            ("lambda_contrastive", self.lambda_contrastive),
            ("lambda_energy", self.lambda_energy),
        ];
        for (name, v) in weights {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("losses.{name} = {v} must be >= 0")));
            }
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "losses.label_smoothing = {} must lie in [0, 0.5)",
                self.label_smoothing
            )));
        }
        if !(self.gr_bin_width > 0.0) || self.omori_bins == 0 {
            return Err(Error::Config(
                "losses: bin widths and counts must be positive".into(),
            ));
        }
        if !(self.omori_t_min > 0.0 && self.omori_t_min < self.omori_t_max) {
            return Err(Error::Config(
                "losses: need 0 < omori_t_min < omori_t_max".into(),
            ));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::Config(
                "losses.prob_clamp must lie in (0, 0.5)".into(),
            ));
        }
        Ok(())
    }

    pub fn lambda_physics(&self, stage: Stage) -> f64 {
        match stage {
            Stage::One => self.lambda_physics_stage1,
            Stage::Two => self.lambda_physics_stage2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

fn clamp_prob(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

const PROB_EPS: f64 = 1e-7;

/// `-α(1-p)^γ y ln p - (1-y) ln(1-p)`; the focal factor and α touch the
/// positive term only.
pub fn focal_loss(p: f64, y: bool, alpha: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p, PROB_EPS);
    if y {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn bce(p: f64, y: f64) -> f64 {
    let p = clamp_prob(p, PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// BCE against `y(1-ε) + (1-y)ε`.
pub fn smoothed_bce(p: f64, y: bool, eps: f64) -> f64 {
    bce(p, smoothed_target(y, eps))
}

fn smoothed_target(y: bool, eps: f64) -> f64 {
    if y {
        1.0 - eps
    } else {
        eps
    }
}

/// BCE with the positive term scaled by `w_pos`.
pub fn weighted_bce(p: f64, y: bool, w_pos: f64) -> f64 {
    let p = clamp_prob(p, PROB_EPS);
    if y {
        -w_pos * p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean of `softplus(E(z) - E(z + ε) + m)` with `ε ~ N(0, σ² I)`.
pub fn contrastive_loss<R: Rng>(
    z: &[Vec<f64>],
    energy_fn: impl Fn(&[f64]) -> f64,
    margin: f64,
    noise_std: f64,
    rng: &mut R,
) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::InvalidInput(
            "contrastive loss needs a non-empty batch".into(),
        ));
    }
    let normal = Normal::new(0.0, noise_std)
        .map_err(|e| Error::InvalidInput(format!("noise_std {noise_std}: {e}")))?;
    let total: f64 = z
        .iter()
        .map(|zi| {
            let perturbed: Vec<f64> = zi.iter().map(|v| v + normal.sample(rng)).collect();
            softplus(energy_fn(zi) - energy_fn(&perturbed) + margin)
        })
        .sum();
    Ok(total / z.len() as f64)
}

/// A physics loss value; `insufficient` marks a batch without enough signal,
/// in which case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsTerm {
    pub value: f64,
    pub insufficient: bool,
}

impl PhysicsTerm {
    const EMPTY: PhysicsTerm = PhysicsTerm {
        value: 0.0,
        insufficient: true,
    };
}

/// Cumulative magnitude-frequency table with the intercept profiled out.
#[derive(Debug, Clone, PartialEq)]
pub struct GrTable {
    /// `M - M̄_w` over occupied thresholds.
    centered_m: Vec<f64>,
    /// `log10(N + 1) - ȳ_w`.
    centered_y: Vec<f64>,
    /// `√N`, normalised to sum 1.
    weights: Vec<f64>,
}

impl GrTable {
    /// `None` when fewer than two thresholds in `m_c, m_c + Δ, ..., m_max`
    /// have a non-zero count.
    pub fn new(magnitudes: &[f64], m_c: f64, bin_width: f64, m_max: f64) -> Option<Self> {
        let mut sorted: Vec<f64> = magnitudes
            .iter()
            .copied()
            .filter(|m| m.is_finite())
            .collect();
        sorted.sort_by(f64::total_cmp);
        let mut m = Vec::new();
        let mut y = Vec::new();
        let mut w = Vec::new();
        let steps = ((m_max - m_c) / bin_width + 1e-9).floor().max(-1.0) as i64;
        for k in 0..=steps {
            let threshold = m_c + k as f64 * bin_width;
            // tolerance absorbs magnitudes stored one ulp under a bin edge
            let below = sorted.partition_point(|v| *v < threshold - 1e-9);
            let n = (sorted.len() - below) as f64;
            if n > 0.0 {
                m.push(threshold);
                y.push((n + 1.0).log10());
                w.push(n.sqrt());
            }
        }
        if m.len() < 2 {
            return None;
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        let mean = |xs: &[f64]| xs.iter().zip(&w).map(|(x, w)| x * w).sum::<f64>();
        let (mm, my) = (mean(&m), mean(&y));
        Some(GrTable {
            centered_m: m.iter().map(|v| v - mm).collect(),
            centered_y: y.iter().map(|v| v - my).collect(),
            weights: w,
        })
    }

    pub fn occupied(&self) -> usize {
        self.weights.len()
    }

    /// `Σ w (log10(N+1) - (a - bM))²` at the weighted least-squares `a`.
    pub fn loss(&self, b: f64) -> f64 {
        self.centered_m
            .iter()
            .zip(&self.centered_y)
            .zip(&self.weights)
            .map(|((m, y), w)| w * (y + b * m).powi(2))
            .sum()
    }

    pub fn loss_on_tape(&self, tape: &Tape, b: Var) -> Result<Var> {
        let k = self.weights.len();
        let m = tape.constant(Tensor::vector(self.centered_m.clone()));
        let y = tape.constant(Tensor::vector(self.centered_y.clone()));
        let w = tape.constant(Tensor::vector(self.weights.clone()));
        let r = tape.add(tape.mul(tape.broadcast(b, &[k])?, m)?, y)?;
        Ok(tape.sum(tape.mul(tape.square(r), w)?))
    }
}

pub fn gr_loss(magnitudes: &[f64], b: f64, m_c: f64, cfg: &LossConfig) -> PhysicsTerm {
    match GrTable::new(magnitudes, m_c, cfg.gr_bin_width, cfg.gr_m_max) {
        Some(t) => PhysicsTerm {
            value: t.loss(b),
            insufficient: false,
        },
        None => PhysicsTerm::EMPTY,
    }
}

/// `Σ q ln(q / π)`.
pub fn kl_divergence(q: &[f64], pi: &[f64]) -> f64 {
    q.iter()
        .zip(pi)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, p)| q * (q / p).ln())
        .sum()
}

/// Log-spaced delay histogram for the Omori KL loss.
#[derive(Debug, Clone, PartialEq)]
pub struct OmoriTable {
    /// `bins + 1` edges, days.
    edges: Vec<f64>,
    /// Smoothed, normalised observed frequencies.
    q: Vec<f64>,
    /// `Σ q ln q`.
    neg_entropy: f64,
}

pub const OMORI_SMOOTHING: f64 = 1e-8;

pub fn log_edges(t_min: f64, t_max: f64, bins: usize) -> Vec<f64> {
    let (lo, hi) = (t_min.ln(), t_max.ln());
    (0..=bins)
        .map(|i| {
            if i == bins {
                t_max
            } else {
                (lo + (hi - lo) * i as f64 / bins as f64).exp()
            }
        })
        .collect()
}

impl OmoriTable {
    /// `None` with fewer than `cfg.omori_min_delays` delays in the binned
    /// range.
    pub fn new(delays: &[f64], cfg: &LossConfig) -> Option<Self> {
        let edges = log_edges(cfg.omori_t_min, cfg.omori_t_max, cfg.omori_bins);
        let mut counts = vec![0usize; cfg.omori_bins];
        let mut n = 0usize;
        for &d in delays {
            if !(d >= edges[0] && d <= edges[cfg.omori_bins]) {
                continue;
            }
            // last bin is closed on the right
            let k = edges
                .partition_point(|e| *e <= d)
                .saturating_sub(1)
                .min(cfg.omori_bins - 1);
            counts[k] += 1;
            n += 1;
        }
        if n < cfg.omori_min_delays.max(1) {
            return None;
        }
        let raw: Vec<f64> = counts
            .iter()
            .map(|c| *c as f64 / n as f64 + OMORI_SMOOTHING)
            .collect();
        let total: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let neg_entropy = q.iter().map(|v| v * v.ln()).sum();
        Some(OmoriTable {
            edges,
            q,
            neg_entropy,
        })
    }

    pub fn observed(&self) -> &[f64] {
        &self.q
    }

    /// Bin probabilities of the truncated `(t + c)^(-p)` law.
    pub fn predicted(&self, p: f64, c: f64) -> Vec<f64> {
        let mass: Vec<f64> = self
            .edges
            .windows(2)
            .map(|w| omori_integral(w[0], w[1], p, c))
            .collect();
        let total: f64 = mass.iter().sum();
        mass.iter().map(|m| m / total).collect()
    }

    pub fn loss(&self, p: f64, c: f64) -> f64 {
        kl_divergence(&self.q, &self.predicted(p, c))
    }

    /// `Σ q ln q - Σ q ln I_k + ln Σ I_k` with
    /// `I_k = e^{(1-p) a_k} L_k exprel((1-p) L_k)`, `a_k = ln(t_k + c)`.
    pub fn loss_on_tape(&self, tape: &Tape, p: Var, c: Var) -> Result<Var> {
        let bins = self.q.len();
        let edges = tape.constant(Tensor::vector(self.edges.clone()));
        let a = tape.log(tape.add(edges, tape.broadcast(c, &[bins + 1])?)?);
        let lower = tape.slice(a, 0, 0, bins)?;
        let width = tape.sub(tape.slice(a, 0, 1, bins)?, lower)?;
        let q1 = tape.broadcast(tape.affine(p, -1.0, 1.0), &[bins])?;
        let mass = tape.mul(
            tape.mul(tape.exp(tape.mul(q1, lower)?), width)?,
            tape.exprel(tape.mul(q1, width)?),
        )?;
        let q = tape.constant(Tensor::vector(self.q.clone()));
        let cross = tape.sum(tape.mul(q, tape.log(mass))?);
        let log_total = tape.log(tape.sum(mass));
        Ok(tape.add_scalar(tape.sub(log_total, cross)?, self.neg_entropy))
    }
}

pub fn omori_loss(delays: &[f64], p: f64, c: f64, cfg: &LossConfig) -> PhysicsTerm {
    match OmoriTable::new(delays, cfg) {
        Some(t) => PhysicsTerm {
            value: t.loss(p, c),
            insufficient: false,
        },
        None => PhysicsTerm::EMPTY,
    }
}

/// Observed `M_main - M_max_after` gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct BathTable {
    gaps: Vec<f64>,
}

impl BathTable {
    pub fn new(pairs: &[(f64, f64)]) -> Option<Self> {
        if pairs.is_empty() {
            return None;
        }
        Some(BathTable {
            gaps: pairs.iter().map(|(m, a)| m - a).collect(),
        })
    }

    pub fn loss(&self, delta_m: f64) -> f64 {
        self.gaps.iter().map(|g| (g - delta_m).powi(2)).sum::<f64>() / self.gaps.len() as f64
    }

    pub fn loss_on_tape(&self, tape: &Tape, delta_m: Var) -> Result<Var> {
        let g = tape.constant(Tensor::vector(self.gaps.clone()));
        let r = tape.sub(g, tape.broadcast(delta_m, &[self.gaps.len()])?)?;
        Ok(tape.mean(tape.square(r)))
    }
}

/// Mean squared Bath residual; an empty pair list is flagged.
pub fn bath_loss(pairs: &[(f64, f64)], delta_m: f64) -> PhysicsTerm {
    match BathTable::new(pairs) {
        Some(t) => PhysicsTerm {
            value: t.loss(delta_m),
            insufficient: false,
        },
        None => PhysicsTerm::EMPTY,
    }
}

/// Aggregates the physics losses see for one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhysicsBatch {
    pub magnitudes: Vec<f64>,
    pub m_c: f64,
    pub delays: Vec<f64>,
    pub bath_pairs: Vec<(f64, f64)>,
}

/// Batch tables for the three physics losses.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPhysics {
    pub gr: Option<GrTable>,
    pub omori: Option<OmoriTable>,
    pub bath: Option<BathTable>,
}

#[derive(Debug, Clone, Copy)]
pub struct PhysicsVars {
    pub gr: Var,
    pub omori: Var,
    pub bath: Var,
}

impl PreparedPhysics {
    pub fn new(batch: &PhysicsBatch, cfg: &LossConfig) -> Self {
        PreparedPhysics {
            gr: GrTable::new(&batch.magnitudes, batch.m_c, cfg.gr_bin_width, cfg.gr_m_max),
            omori: OmoriTable::new(&batch.delays, cfg),
            bath: BathTable::new(&batch.bath_pairs),
        }
    }

    pub fn values(&self, d: &Derived) -> [PhysicsTerm; 3] {
        let term = |v: Option<f64>| match v {
            Some(value) => PhysicsTerm {
                value,
                insufficient: false,
            },
            None => PhysicsTerm::EMPTY,
        };
        [
            term(self.gr.as_ref().map(|t| t.loss(d.b))),
            term(self.omori.as_ref().map(|t| t.loss(d.p, d.c))),
            term(self.bath.as_ref().map(|t| t.loss(d.delta_m))),
        ]
    }

    /// Insufficient terms become constant zeros.
    pub fn on_tape(&self, tape: &Tape, d: &DerivedVars) -> Result<PhysicsVars> {
        let zero = || tape.constant(Tensor::scalar(0.0));
        Ok(PhysicsVars {
            gr: match &self.gr {
                Some(t) => t.loss_on_tape(tape, d.b)?,
                None => zero(),
            },
            omori: match &self.omori {
                Some(t) => t.loss_on_tape(tape, d.p, d.c)?,
                None => zero(),
            },
            bath: match &self.bath {
                Some(t) => t.loss_on_tape(tape, d.delta_m)?,
                None => zero(),
            },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskLabels {
    pub aftershock: bool,
    pub tsunami: bool,
    pub foreshock: bool,
}

/// Per-sample network outputs the losses consume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOutput {
    pub p_aftershock: f64,
    pub p_tsunami: f64,
    pub p_foreshock: f64,
    pub energy: f64,
    /// `E(z + ε)`.
    pub energy_perturbed: f64,
}

/// Per-objective values; `total` follows the stage weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_aftershock: f64,
    pub task_tsunami: f64,
    pub task_foreshock: f64,
    pub gr: f64,
    pub omori: f64,
    pub bath: f64,
    pub contrastive: f64,
    pub energy_reg: f64,
    pub total: f64,
}

pub const BREAKDOWN_COLUMNS: [&str; 9] = [
    "task_aftershock",
    "task_tsunami",
    "task_foreshock",
    "gr",
    "omori",
    "bath",
    "contrastive",
    "energy_reg",
    "total",
];

impl LossBreakdown {
    pub fn task(&self) -> f64 {
        (self.task_aftershock + self.task_tsunami + self.task_foreshock) / 3.0
    }

    pub fn physics(&self) -> f64 {
        (self.gr + self.omori + self.bath) / 3.0
    }

    /// Recomputes `total` from the components.
    pub fn with_total(mut self, cfg: &LossConfig, stage: Stage) -> Self {
        self.total = self.task()
            + cfg.lambda_physics(stage) * self.physics()
            + cfg.lambda_contrastive * self.contrastive
            + cfg.lambda_energy * self.energy_reg;
        self
    }

    pub fn values(&self) -> [f64; 9] {
        [
            self.task_aftershock,
            self.task_tsunami,
            self.task_foreshock,
            self.gr,
            self.omori,
            self.bath,
            self.contrastive,
            self.energy_reg,
            self.total,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

/// Full objective for one batch from plain outputs.
pub fn total_loss(
    outputs: &[SampleOutput],
    labels: &[TaskLabels],
    physics: &PhysicsBatch,
    derived: &Derived,
    cfg: &LossConfig,
    stage: Stage,
) -> Result<LossBreakdown> {
    if outputs.is_empty() || outputs.len() != labels.len() {
        return Err(Error::shape(
            "total_loss",
            format!("{} outputs for {} labels", outputs.len(), labels.len()),
        ));
    }
    let n = outputs.len() as f64;
    let mut b = LossBreakdown::default();
    for (o, y) in outputs.iter().zip(labels) {
        b.task_aftershock += smoothed_bce(o.p_aftershock, y.aftershock, cfg.label_smoothing);
        b.task_tsunami += focal_loss(o.p_tsunami, y.tsunami, cfg.focal_alpha, cfg.focal_gamma);
        b.task_foreshock += weighted_bce(o.p_foreshock, y.foreshock, cfg.foreshock_pos_weight);
        b.contrastive += softplus(o.energy - o.energy_perturbed + cfg.margin);
        b.energy_reg += o.energy * o.energy;
    }
    for v in [
        &mut b.task_aftershock,
        &mut b.task_tsunami,
        &mut b.task_foreshock,
        &mut b.contrastive,
        &mut b.energy_reg,
    ] {
        *v /= n;
    }
    let [gr, omori, bath] = PreparedPhysics::new(physics, cfg).values(derived);
    b.gr = gr.value;
    b.omori = omori.value;
    b.bath = bath.value;
    Ok(b.with_total(cfg, stage))
}

/// Tape nodes of the per-sample objectives.
#[derive(Debug, Clone, Copy)]
pub struct SampleLossVars {
    pub task_aftershock: Var,
    pub task_tsunami: Var,
    pub task_foreshock: Var,
    pub contrastive: Var,
    pub energy_reg: Var,
}

fn clamp_on_tape(tape: &Tape, p: Var, eps: f64) -> Var {
    tape.clamp(p, eps, 1.0 - eps)
}

/// `-(w_pos y ln p + w_neg (1-y) ln(1-p))` with soft target `y`.
fn bce_on_tape(tape: &Tape, p: Var, y: f64, w_pos: f64, eps: f64) -> Result<Var> {
    let p = clamp_on_tape(tape, p, eps);
    let pos = tape.scale(tape.log(p), -w_pos * y);
    let neg = tape.scale(tape.log(tape.affine(p, -1.0, 1.0)), -(1.0 - y));
    tape.add(pos, neg)
}

pub fn focal_on_tape(tape: &Tape, p: Var, y: bool, cfg: &LossConfig) -> Result<Var> {
    let p = clamp_on_tape(tape, p, cfg.prob_clamp);
    if y {
        let factor = tape.pow(tape.affine(p, -1.0, 1.0), cfg.focal_gamma);
        Ok(tape.scale(tape.mul(factor, tape.log(p))?, -cfg.focal_alpha))
    } else {
        Ok(tape.neg(tape.log(tape.affine(p, -1.0, 1.0))))
    }
}

/// Per-sample objectives from head probabilities and the two energies.
pub fn sample_losses_on_tape(
    tape: &Tape,
    probs: [Var; 3],
    energy: Var,
    energy_perturbed: Var,
    labels: &TaskLabels,
    cfg: &LossConfig,
) -> Result<SampleLossVars> {
    let [pa, pt, pf] = probs;
    let ya = smoothed_target(labels.aftershock, cfg.label_smoothing);
    Ok(SampleLossVars {
        task_aftershock: tape.sum(bce_on_tape(tape, pa, ya, 1.0, cfg.prob_clamp)?),
        task_tsunami: tape.sum(focal_on_tape(tape, pt, labels.tsunami, cfg)?),
        task_foreshock: tape.sum(bce_on_tape(
            tape,
            pf,
            if labels.foreshock { 1.0 } else { 0.0 },
            cfg.foreshock_pos_weight,
            cfg.prob_clamp,
        )?),
        contrastive: tape
            .sum(tape.softplus(tape.add_scalar(tape.sub(energy, energy_perturbed)?, cfg.margin))),
        energy_reg: tape.sum(tape.square(energy)),
    })
}
