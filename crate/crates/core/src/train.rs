//! Two-stage optimisation: weighted sampling, AdamW, one-cycle then cosine
//! learning rates.
//!
//! A step draws `batch_size` indices with probability proportional to the
//! sample weights, splits them into fixed chunks evaluated on separate tapes
//! (in parallel) and sums the chunk gradients in chunk order, so results do
//! not depend on the thread count. Physics losses see the aggregates of the
//! whole batch and ride on the first chunk's tape.

use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PreparedSample};
use crate::diff::{Tape, Tensor, Var};
use crate::eval::{task_metrics, TaskMetrics};
use crate::losses::{
    sample_losses_on_tape, LossBreakdown, LossConfig, PreparedPhysics, SampleOutput, Stage,
    TaskLabels,
};
use crate::model::{
    bind_flat, energy, forward, Bound, ModelParams, ShapeTable, FUSION_DIM, PHYSICS_BLOCK,
};
use crate::physics::{derive_on_tape, Derived, PhysicsParams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Peak of the one-cycle schedule.
    pub lr_stage1: f64,
    /// Start of the stage-2 cosine.
    pub lr_stage2: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_fraction: f64,
    /// One-cycle start and end are `peak / one_cycle_div`.
    pub one_cycle_div: f64,
    /// Stage-2 cosine ends at `lr_stage2 / cosine_div`.
    pub cosine_div: f64,
    pub validation_fraction: f64,
    /// Samples per tape; fixes the gradient summation order.
    pub chunk_size: usize,
    /// Decision threshold for validation precision/recall/F1.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            stage1_epochs: 15,
            stage2_epochs: 30,
            lr_stage1: 1e-4,
            lr_stage2: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_fraction: 0.3,
            one_cycle_div: 25.0,
            cosine_div: 100.0,
            validation_fraction: 0.2,
            chunk_size: 8,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 || self.chunk_size == 0 {
            return bad("batch_size and chunk_size must be positive".into());
        }
        if self.stage1_epochs + self.stage2_epochs == 0 {
            return bad("at least one epoch is required".into());
        }
        for (name, v) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_stage2", self.lr_stage2),
            ("eps", self.eps),
            ("one_cycle_div", self.one_cycle_div),
            ("cosine_div", self.cosine_div),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// `n_draws` i.i.d. indices with `P(i) = w_i / Σw`.
pub fn weighted_sampler<R: rand::Rng>(
    weights: &[f64],
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::InvalidInput(
            "cannot sample from an empty dataset".into(),
        ));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 1.0) || !w.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "sample weight {w} must be a finite value >= 1"
        )));
    }
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::InvalidInput(format!("sample weights: {e}")))?;
    Ok((0..n_draws).map(|_| dist.sample(rng)).collect())
}

/// Stage 1: linear warmup from `peak / div` to `peak` over the first
/// `warmup_fraction` of steps, then cosine down to `peak / div`. Stage 2:
/// cosine from `lr_stage2` to `lr_stage2 / cosine_div` at the last step.
pub fn lr_schedule(step: usize, total_steps: usize, stage: Stage, cfg: &TrainConfig) -> f64 {
    let last = total_steps.saturating_sub(1).max(1) as f64;
    let step = step.min(total_steps.saturating_sub(1)) as f64;
    let cosine = |from: f64, to: f64, x: f64| {
        to + (from - to) * (1.0 + (std::f64::consts::PI * x).cos()) / 2.0
    };
    match stage {
        Stage::One => {
            let peak = cfg.lr_stage1;
            let floor = peak / cfg.one_cycle_div;
            let warm = (cfg.warmup_fraction * total_steps as f64).round();
            if step < warm {
                floor + (peak - floor) * step / warm
            } else if last > warm {
                cosine(peak, floor, (step - warm) / (last - warm))
            } else {
                peak
            }
        }
        Stage::Two => cosine(cfg.lr_stage2, cfg.lr_stage2 / cfg.cosine_div, step / last),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// AdamW moments with per-coordinate step counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: vec![0; n],
        }
    }

    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    /// One update. Decay `lr * weight_decay * θ` applies to blocks flagged
    /// `decay`; coordinates with a zero gradient and no decay keep both
    /// their value and their state.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        cfg: &AdamConfig,
        table: &ShapeTable,
    ) -> Result<()> {
        if params.len() != grads.len()
            || params.len() != self.m.len()
            || table.total_len() != params.len()
        {
            return Err(Error::shape(
                "optimizer_step",
                format!(
                    "{} params, {} grads, {} state",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for b in &table.blocks {
            if let Some(bad) = grads[b.range()].iter().position(|g| !g.is_finite()) {
                return Err(Error::Numerical {
                    layer: format!("{} (gradient coordinate {bad})", b.name),
                });
            }
        }
        for b in &table.blocks {
            let decay = if b.decay { cfg.weight_decay } else { 0.0 };
            for i in b.range() {
                let g = grads[i];
                if g == 0.0 && decay == 0.0 {
                    continue;
                }
                self.steps[i] += 1;
                let t = self.steps[i] as i32;
                self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
                self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = self.m[i] / (1.0 - cfg.beta1.powi(t));
                let v_hat = self.v[i] / (1.0 - cfg.beta2.powi(t));
                params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + decay * params[i]);
            }
        }
        Ok(())
    }
}

/// Tape nodes of the batch objective, each already divided by the batch
/// size (task, contrastive, energy) or weighted as in the total (none of the
/// physics terms are scaled).
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub task_aftershock: Var,
    pub task_tsunami: Var,
    pub task_foreshock: Var,
    pub contrastive: Var,
    pub energy_reg: Var,
    pub gr: Option<Var>,
    pub omori: Option<Var>,
    pub bath: Option<Var>,
    pub total: Var,
}

/// Per-sample terms of one forward pass with contrastive noise `noise`.
pub fn sample_terms(
    tape: &Tape,
    bound: &Bound,
    sample: &PreparedSample,
    noise: &[f64],
    lcfg: &LossConfig,
) -> Result<crate::losses::SampleLossVars> {
    let g = tape.constant(sample.grid.clone());
    let f = tape.constant(Tensor::new(
        vec![1, sample.features.len()],
        sample.features.to_vec(),
    )?);
    let out = forward(tape, bound, g, f)?;
    let eps = tape.constant(Tensor::new(vec![1, noise.len()], noise.to_vec())?);
    let e_pert = energy(tape, bound, tape.add(out.z, eps)?)?;
    sample_losses_on_tape(
        tape,
        [out.p_aftershock, out.p_tsunami, out.p_foreshock],
        out.energy,
        e_pert,
        &sample.labels(),
        lcfg,
    )
}

/// Contribution of `samples` to the mean-over-`batch_len` objective, plus
/// the physics terms when `physics` is given.
#[allow(clippy::too_many_arguments)]
pub fn objective_on_tape(
    tape: &Tape,
    bound: &Bound,
    samples: &[&PreparedSample],
    noise: &[&[f64]],
    batch_len: usize,
    physics: Option<&PreparedPhysics>,
    lcfg: &LossConfig,
    stage: Stage,
) -> Result<ObjectiveVars> {
    if samples.len() != noise.len() || samples.is_empty() {
        return Err(Error::shape(
            "objective",
            format!(
                "{} samples with {} noise vectors",
                samples.len(),
                noise.len()
            ),
        ));
    }
    let inv = 1.0 / batch_len as f64;
    let mut parts: Option<[Var; 5]> = None;
    for (s, eps) in samples.iter().zip(noise) {
        let t = sample_terms(tape, bound, s, eps, lcfg)?;
        let new = [
            t.task_aftershock,
            t.task_tsunami,
            t.task_foreshock,
            t.contrastive,
            t.energy_reg,
        ];
        parts = Some(match parts {
            None => new,
            Some(acc) => {
                let mut out = acc;
                for (o, n) in out.iter_mut().zip(new) {
                    *o = tape.add(*o, n)?;
                }
                out
            }
        });
    }
    let [a, ts, fs, c, e] = parts.expect("non-empty").map(|v| tape.scale(v, inv));
    let task = tape.scale(tape.add(tape.add(a, ts)?, fs)?, 1.0 / 3.0);
    let mut total = tape.add(
        task,
        tape.add(
            tape.scale(c, lcfg.lambda_contrastive),
            tape.scale(e, lcfg.lambda_energy),
        )?,
    )?;
    let (mut gr, mut omori, mut bath) = (None, None, None);
    if let Some(phys) = physics {
        let raw = bound.get(PHYSICS_BLOCK)?;
        let pv = phys.on_tape(tape, &derive_on_tape(tape, raw)?)?;
        let mean = tape.scale(tape.add(tape.add(pv.gr, pv.omori)?, pv.bath)?, 1.0 / 3.0);
        total = tape.add(total, tape.scale(mean, lcfg.lambda_physics(stage)))?;
        (gr, omori, bath) = (Some(pv.gr), Some(pv.omori), Some(pv.bath));
    }
    Ok(ObjectiveVars {
        task_aftershock: a,
        task_tsunami: ts,
        task_foreshock: fs,
        contrastive: c,
        energy_reg: e,
        gr,
        omori,
        bath,
        total,
    })
}

/// Gradient and value breakdown of the batch objective.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradient(
    params: &ModelParams,
    dataset: &Dataset,
    batch: &[usize],
    noise: &[Vec<f64>],
    physics: &PreparedPhysics,
    lcfg: &LossConfig,
    stage: Stage,
    chunk_size: usize,
) -> Result<(Vec<f64>, LossBreakdown)> {
    let chunks: Vec<(usize, &[usize])> = batch.chunks(chunk_size.max(1)).enumerate().collect();
    let results = chunks
        .par_iter()
        .map(|&(k, idx)| -> Result<(Vec<f64>, LossBreakdown)> {
            let tape = Tape::new();
            let flat = tape.param(Tensor::vector(params.values.clone()));
            let bound = bind_flat(&tape, flat, &params.table, &params.config)?;
            let samples: Vec<&PreparedSample> = idx.iter().map(|&i| &dataset.samples[i]).collect();
            let start = k * chunk_size;
            let eps: Vec<&[f64]> = noise[start..start + idx.len()]
                .iter()
                .map(Vec::as_slice)
                .collect();
            let phys = (k == 0).then_some(physics);
            let o = objective_on_tape(
                &tape,
                &bound,
                &samples,
                &eps,
                batch.len(),
                phys,
                lcfg,
                stage,
            )?;
            let val = |v: Option<Var>| v.map(|v| tape.item(v)).unwrap_or(0.0);
            let parts = LossBreakdown {
                task_aftershock: tape.item(o.task_aftershock),
                task_tsunami: tape.item(o.task_tsunami),
                task_foreshock: tape.item(o.task_foreshock),
                gr: val(o.gr),
                omori: val(o.omori),
                bath: val(o.bath),
                contrastive: tape.item(o.contrastive),
                energy_reg: tape.item(o.energy_reg),
                total: tape.item(o.total),
            };
            if !parts.total.is_finite() {
                return Err(Error::Numerical {
                    layer: "total loss".into(),
                });
            }
            let mut grads = tape.backward(o.total)?;
            let g = grads.take(flat).unwrap_or_else(|| vec![0.0; params.len()]);
            Ok((g, parts))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; params.len()];
    let mut sum = LossBreakdown::default();
    for (g, p) in results {
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        sum = add_breakdowns(&sum, &p);
    }
    Ok((grad, sum))
}

fn add_breakdowns(a: &LossBreakdown, b: &LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        task_aftershock: a.task_aftershock + b.task_aftershock,
        task_tsunami: a.task_tsunami + b.task_tsunami,
        task_foreshock: a.task_foreshock + b.task_foreshock,
        gr: a.gr + b.gr,
        omori: a.omori + b.omori,
        bath: a.bath + b.bath,
        contrastive: a.contrastive + b.contrastive,
        energy_reg: a.energy_reg + b.energy_reg,
        total: a.total + b.total,
    }
}

/// Forward passes for `indices`; `energy_perturbed` uses `noise[k]` when
/// given and is NaN otherwise.
pub fn predict_outputs(
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    noise: Option<&[Vec<f64>]>,
) -> Result<Vec<SampleOutput>> {
    indices
        .par_iter()
        .enumerate()
        .map(|(k, &i)| {
            let s = &dataset.samples[i];
            let tape = Tape::new();
            let bound = params.bind(&tape, false)?;
            let g = tape.constant(s.grid.clone());
            let f = tape.constant(Tensor::new(vec![1, s.features.len()], s.features.to_vec())?);
            let out = forward(&tape, &bound, g, f)?;
            let energy_perturbed = match noise {
                Some(n) => {
                    let eps = tape.constant(Tensor::new(vec![1, n[k].len()], n[k].clone())?);
                    tape.item(energy(&tape, &bound, tape.add(out.z, eps)?)?)
                }
                None => f64::NAN,
            };
            Ok(SampleOutput {
                p_aftershock: tape.item(out.p_aftershock),
                p_tsunami: tape.item(out.p_tsunami),
                p_foreshock: tape.item(out.p_foreshock),
                energy: tape.item(out.energy),
                energy_perturbed,
            })
        })
        .collect()
}

/// Sample-weighted objective over `indices` (the expectation the weighted
/// sampler optimises) with physics on `physics`.
pub fn weighted_objective(
    outputs: &[SampleOutput],
    labels: &[TaskLabels],
    weights: &[f64],
    physics: &PreparedPhysics,
    derived: &Derived,
    lcfg: &LossConfig,
    stage: Stage,
) -> LossBreakdown {
    use crate::losses::{focal_loss, smoothed_bce, weighted_bce};
    use crate::physics::softplus;
    let wsum: f64 = weights.iter().sum();
    let mut b = LossBreakdown::default();
    for ((o, y), w) in outputs.iter().zip(labels).zip(weights) {
        let w = w / wsum;
        b.task_aftershock += w * smoothed_bce(o.p_aftershock, y.aftershock, lcfg.label_smoothing);
        b.task_tsunami +=
            w * focal_loss(o.p_tsunami, y.tsunami, lcfg.focal_alpha, lcfg.focal_gamma);
        b.task_foreshock += w * weighted_bce(o.p_foreshock, y.foreshock, lcfg.foreshock_pos_weight);
        b.contrastive += w * softplus(o.energy - o.energy_perturbed + lcfg.margin);
        b.energy_reg += w * o.energy * o.energy;
    }
    let [gr, omori, bath] = physics.values(derived);
    b.gr = gr.value;
    b.omori = omori.value;
    b.bath = bath.value;
    b.with_total(lcfg, stage)
}

/// Validation metrics for the three heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaskReport {
    pub aftershock: TaskMetrics,
    pub tsunami: TaskMetrics,
    pub foreshock: TaskMetrics,
}

pub fn task_report(
    outputs: &[SampleOutput],
    labels: &[TaskLabels],
    threshold: f64,
) -> Result<TaskReport> {
    let col = |f: fn(&SampleOutput) -> f64| outputs.iter().map(f).collect::<Vec<_>>();
    let lab = |f: fn(&TaskLabels) -> bool| labels.iter().map(f).collect::<Vec<_>>();
    Ok(TaskReport {
        aftershock: task_metrics(&col(|o| o.p_aftershock), &lab(|l| l.aftershock), threshold)?,
        tsunami: task_metrics(&col(|o| o.p_tsunami), &lab(|l| l.tsunami), threshold)?,
        foreshock: task_metrics(&col(|o| o.p_foreshock), &lab(|l| l.foreshock), threshold)?,
    })
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based across both stages.
    pub epoch: usize,
    pub stage: Stage,
    /// 1-based within the stage.
    pub stage_epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Sample-weighted objective over the training split after the epoch.
    pub train: LossBreakdown,
    /// Mean of the per-step batch totals during the epoch.
    pub batch_loss: f64,
    pub physics: Derived,
    pub validation: Option<TaskReport>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_COLUMNS: [&str; 27] = [
    "epoch",
    "stage",
    "stage_epoch",
    "lr",
    "task_aftershock",
    "task_tsunami",
    "task_foreshock",
    "gr",
    "omori",
    "bath",
    "contrastive",
    "energy_reg",
    "total",
    "batch_loss",
    "b",
    "p",
    "c",
    "delta_m",
    "val_auc_aftershock",
    "val_auc_tsunami",
    "val_auc_foreshock",
    "val_f1_aftershock",
    "val_f1_tsunami",
    "val_f1_foreshock",
    "val_precision_tsunami",
    "val_recall_tsunami",
    "threshold",
];

impl History {
    pub fn totals(&self, stage: Stage) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.train.total)
            .collect()
    }

    /// Comma-separated table with [`HISTORY_COLUMNS`]; missing AUCs are
    /// empty cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| Error::Parse(format!("writing history: {e}"));
        w.write_record(HISTORY_COLUMNS).map_err(err)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.stage.number().to_string(),
                r.stage_epoch.to_string(),
                r.lr.to_string(),
            ];
            row.extend(r.train.values().iter().map(f64::to_string));
            row.push(r.batch_loss.to_string());
            row.extend(
                [r.physics.b, r.physics.p, r.physics.c, r.physics.delta_m].map(|v| v.to_string()),
            );
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            match &r.validation {
                Some(v) => {
                    row.extend([v.aftershock.auc, v.tsunami.auc, v.foreshock.auc].map(opt));
                    row.extend(
                        [v.aftershock.f1, v.tsunami.f1, v.foreshock.f1].map(|v| v.to_string()),
                    );
                    row.push(v.tsunami.precision.to_string());
                    row.push(v.tsunami.recall.to_string());
                    row.push(v.tsunami.threshold.to_string());
                }
                None => row.extend(std::iter::repeat_n(String::new(), 9)),
            }
            w.write_record(&row).map_err(err)?;
        }
        w.flush()
            .map_err(|e| Error::Parse(format!("writing history: {e}")))
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: History,
}

fn noise_vectors(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Result<Vec<Vec<f64>>> {
    let normal =
        Normal::new(0.0, std).map_err(|e| Error::Config(format!("noise_std {std}: {e}")))?;
    Ok((0..n)
        .map(|_| (0..FUSION_DIM).map(|_| normal.sample(rng)).collect())
        .collect())
}

/// Runs stage 1 (`λ_p` of stage 1) then stage 2 from the stage-1
/// parameters. `on_epoch` sees every history row as it is produced.
pub fn train_two_stage(
    dataset: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    init: ModelParams,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    lcfg.validate()?;
    if train_idx.len() < tcfg.batch_size {
        return Err(Error::InvalidInput(format!(
            "{} training samples for a batch size of {}",
            train_idx.len(),
            tcfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let weights: Vec<f64> = train_idx
        .iter()
        .map(|&i| dataset.samples[i].weight())
        .collect();
    let train_labels: Vec<TaskLabels> = train_idx
        .iter()
        .map(|&i| dataset.samples[i].labels())
        .collect();
    let val_labels: Vec<TaskLabels> = val_idx
        .iter()
        .map(|&i| dataset.samples[i].labels())
        .collect();
    let eval_noise = noise_vectors(&mut rng, train_idx.len(), lcfg.noise_std)?;
    let full_physics = PreparedPhysics::new(&dataset.physics_batch(train_idx), lcfg);
    let adam = AdamConfig::from(tcfg);
    let steps_per_epoch = train_idx.len().div_ceil(tcfg.batch_size);

    let mut params = init;
    let mut opt = AdamW::new(params.len());
    let mut history = History::default();
    let mut epoch = 0;
    for (stage, epochs) in [
        (Stage::One, tcfg.stage1_epochs),
        (Stage::Two, tcfg.stage2_epochs),
    ] {
        let total_steps = epochs * steps_per_epoch;
        for stage_epoch in 1..=epochs {
            epoch += 1;
            let mut lr = 0.0;
            let mut batch_total = 0.0;
            for s in 0..steps_per_epoch {
                let step = (stage_epoch - 1) * steps_per_epoch + s;
                lr = lr_schedule(step, total_steps, stage, tcfg);
                let draws = weighted_sampler(&weights, tcfg.batch_size, &mut rng)?;
                let batch: Vec<usize> = draws.iter().map(|&k| train_idx[k]).collect();
                let noise = noise_vectors(&mut rng, batch.len(), lcfg.noise_std)?;
                let physics = PreparedPhysics::new(&dataset.physics_batch(&batch), lcfg);
                let (grad, parts) = batch_gradient(
                    &params,
                    dataset,
                    &batch,
                    &noise,
                    &physics,
                    lcfg,
                    stage,
                    tcfg.chunk_size,
                )?;
                batch_total += parts.total;
                opt.step(&mut params.values, &grad, lr, &adam, &params.table)?;
            }
            let outputs = predict_outputs(&params, dataset, train_idx, Some(&eval_noise))?;
            let derived = params.physics().derive();
            let train = weighted_objective(
                &outputs,
                &train_labels,
                &weights,
                &full_physics,
                &derived,
                lcfg,
                stage,
            );
            if !train.is_finite() {
                return Err(Error::Numerical {
                    layer: format!("total loss at epoch {epoch}"),
                });
            }
            let validation = if val_idx.is_empty() {
                None
            } else {
                let out = predict_outputs(&params, dataset, val_idx, None)?;
                Some(task_report(&out, &val_labels, tcfg.threshold)?)
            };
            let record = EpochRecord {
                epoch,
                stage,
                stage_epoch,
                lr,
                train,
                batch_loss: batch_total / steps_per_epoch as f64,
                physics: derived,
                validation,
            };
            log::info!(
                "epoch {epoch} (stage {}) loss {:.5} lr {lr:.3e}",
                stage.number(),
                record.train.total
            );
            on_epoch(&record);
            history.records.push(record);
        }
    }
    Ok(TrainOutcome { params, history })
}

/// Which physics losses drive a [`fit_physics_params`] run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsFitConfig {
    pub steps: usize,
    /// Start of a cosine decay to `lr / 100`.
    pub lr: f64,
    pub use_gr: bool,
    pub use_omori: bool,
    pub use_bath: bool,
}

impl Default for PhysicsFitConfig {
    fn default() -> Self {
        PhysicsFitConfig {
            steps: 1500,
            lr: 0.05,
            use_gr: true,
            use_omori: true,
            use_bath: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsFit {
    pub params: PhysicsParams,
    /// Derived values after every step.
    pub trajectory: Vec<Derived>,
    pub final_loss: f64,
}

/// Optimises the four physics raws alone against the selected losses with
/// the stage-2 machinery (AdamW without decay, cosine schedule).
pub fn fit_physics_params(
    physics: &PreparedPhysics,
    init: PhysicsParams,
    cfg: &PhysicsFitConfig,
) -> Result<PhysicsFit> {
    if cfg.steps == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(
            "physics fit needs positive steps and lr".into(),
        ));
    }
    let table = ShapeTable {
        blocks: vec![crate::model::Block {
            name: PHYSICS_BLOCK.into(),
            shape: vec![4],
            offset: 0,
            decay: false,
        }],
    };
    let schedule = TrainConfig {
        lr_stage2: cfg.lr,
        ..TrainConfig::default()
    };
    let adam = AdamConfig::from(&schedule);
    let mut raw = init.to_array().to_vec();
    let mut opt = AdamW::new(4);
    let mut trajectory = Vec::with_capacity(cfg.steps);
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(raw.clone()));
        let pv = physics.on_tape(&tape, &derive_on_tape(&tape, x)?)?;
        let zero = tape.constant(Tensor::scalar(0.0));
        let pick = |on: bool, v: Var| if on { v } else { zero };
        let loss = tape.add(
            tape.add(pick(cfg.use_gr, pv.gr), pick(cfg.use_omori, pv.omori))?,
            pick(cfg.use_bath, pv.bath),
        )?;
        final_loss = tape.item(loss);
        if !final_loss.is_finite() {
            return Err(Error::Numerical {
                layer: "physics loss".into(),
            });
        }
        let mut g = tape.backward(loss)?;
        let grad = g.take(x).unwrap_or_else(|| vec![0.0; 4]);
        let lr = lr_schedule(step, cfg.steps, Stage::Two, &schedule);
        opt.step(&mut raw, &grad, lr, &adam, &table)?;
        trajectory.push(PhysicsParams::from_slice(&raw)?.derive());
    }
    Ok(PhysicsFit {
        params: PhysicsParams::from_slice(&raw)?,
        trajectory,
        final_loss,
    })
}
