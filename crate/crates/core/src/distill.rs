//! Watermark distillation: trains a student to match the watermark-biased
//! next-token distribution of a frozen teacher on target-domain data, while a
//! one-sided total-variation penalty pins the student to the unbiased teacher
//! on regularization data. Also hosts plain finetuning for persistence runs.

use serde::{Deserialize, Serialize};

use crate::corpus::{padded_window, DomainDataset, TokenSequence};
use crate::lm::{
    self, adam_step, Gradients, LrSchedule, ModelParams, OptimizerState, TrainConfig, BOS_ID,
};
use crate::par;
use crate::rng::splitmix64;
use crate::watermark::{biased_logits, WatermarkConfig};
use crate::{Error, Result};

/// Distillation hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lr: f64,
    pub steps: usize,
    /// Weight of the regularization loss.
    pub lambda: f64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Joint full-watermark baseline: target becomes the union of target and
    /// regularization data and lambda is forced to 0.
    #[serde(default)]
    pub kgwd_mode: bool,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lr: 1e-3,
            steps: 500,
            lambda: 1.0,
            batch_size: 16,
            seq_len: 64,
            seed: 0,
            kgwd_mode: false,
            schedule: LrSchedule::Constant,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("lambda must be >= 0".into()));
        }
        if self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be >= 1 and seq_len >= 2".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        Ok(())
    }
}

/// One training-log line (serialized as CSV: step,l_target,l_reg,combined).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DistillLogRow {
    pub step: usize,
    pub l_target: f64,
    pub l_reg: f64,
    pub combined: f64,
}

pub fn log_to_csv(rows: &[DistillLogRow]) -> String {
    let mut out = String::from("step,l_target,l_reg,combined\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step, r.l_target, r.l_reg, r.combined
        ));
    }
    out
}

fn check_pair(student: &ModelParams, teacher: &ModelParams) -> Result<()> {
    if student.config != teacher.config {
        return Err(Error::ShapeMismatch(
            "student and teacher must share one model config".into(),
        ));
    }
    Ok(())
}

/// Mean KL(watermarked-teacher || student) over all positions t >= 1, with
/// gradients w.r.t. the student only. KL terms are computed in log space.
pub fn watermark_loss_and_grads(
    student: &ModelParams,
    teacher: &ModelParams,
    wcfg: &WatermarkConfig,
    batch: &[TokenSequence],
) -> Result<(f64, Gradients)> {
    check_pair(student, teacher)?;
    wcfg.validate()?;
    per_position_loss(student, batch, |context, acts| {
        let tz = biased_logits(teacher, context, wcfg)?;
        let ln_q = lm::ln_softmax(&tz);
        let ln_p = lm::ln_softmax(&acts.logits);
        let mut loss = 0.0;
        let mut dlogits = Vec::with_capacity(ln_p.len());
        for v in 0..ln_p.len() {
            let q = ln_q[v].exp();
            let p = ln_p[v].exp();
            loss += q * (ln_q[v] - ln_p[v]);
            dlogits.push(p - q);
        }
        Ok((loss, dlogits))
    })
}

/// Mean one-sided total-variation penalty: sum over the vocabulary of
/// max(p_student - p_teacher, 0) per position, with subgradient 0 at
/// equality. Zero iff the two next-token distributions coincide on the batch.
pub fn reg_loss_and_grads(
    student: &ModelParams,
    teacher: &ModelParams,
    batch: &[TokenSequence],
) -> Result<(f64, Gradients)> {
    check_pair(student, teacher)?;
    per_position_loss(student, batch, |context, acts| {
        let p0 = lm::softmax(&lm::logits(teacher, context)?);
        let p = lm::softmax(&acts.logits);
        let mut loss = 0.0;
        let mut positive_mass = 0.0;
        for v in 0..p.len() {
            if p[v] > p0[v] {
                loss += p[v] - p0[v];
                positive_mass += p[v];
            }
        }
        let dlogits: Vec<f64> = (0..p.len())
            .map(|v| {
                let m = if p[v] > p0[v] { 1.0 } else { 0.0 };
                p[v] * (m - positive_mass)
            })
            .collect();
        Ok((loss, dlogits))
    })
}

/// Shared loss plumbing: walks every position t >= 1 of every sequence,
/// calls `position_fn` for (loss, dlogits) at the BOS-padded context, and
/// backpropagates through the student. Batch elements run in parallel and
/// reduce in a fixed order; the mean is over all positions.
fn per_position_loss<F>(
    student: &ModelParams,
    batch: &[TokenSequence],
    position_fn: F,
) -> Result<(f64, Gradients)>
where
    F: Fn(&[usize], &lm::Activations) -> Result<(f64, Vec<f64>)> + Sync,
{
    if batch.is_empty() || batch.iter().any(|s| s.len() < 2) {
        return Err(Error::DegenerateBatch(
            "need non-empty batch of sequences longer than 1".into(),
        ));
    }
    let cfg = student.config;
    let per_seq: Vec<Result<(f64, usize, Gradients)>> = par::map_slice(batch, |seq| {
        let mut grads = Gradients::zeros(&cfg);
        let mut loss = 0.0;
        for t in 1..seq.len() {
            let context = padded_window(seq, t, cfg.context, BOS_ID);
            let acts = lm::forward(student, &context)?;
            let (l, dlogits) = position_fn(&context, &acts)?;
            loss += l;
            lm::backward(student, &context, &acts, &dlogits, &mut grads);
        }
        Ok((loss, seq.len() - 1, grads))
    });

    let mut total = Gradients::zeros(&cfg);
    let mut loss_sum = 0.0;
    let mut positions = 0usize;
    for r in per_seq {
        let (l, n, g) = r?;
        loss_sum += l;
        positions += n;
        total.add_scaled(&g, 1.0);
    }
    let scale = 1.0 / positions as f64;
    total.scale(scale);
    let loss = loss_sum * scale;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            what: format!("loss = {loss}"),
        });
    }
    Ok((loss, total))
}

/// Distills the watermark into a copy of the teacher. Each step samples a
/// target batch and a regularization batch with decorrelated sub-seeds,
/// then applies one Adam update on grad(l_target) + lambda * grad(l_reg).
/// Returns the student and the per-step loss log.
pub fn distill(
    teacher: &ModelParams,
    d_target: &DomainDataset,
    d_reg: &DomainDataset,
    dcfg: &DistillConfig,
    wcfg: &WatermarkConfig,
) -> Result<(ModelParams, Vec<DistillLogRow>)> {
    distill_multi(teacher, &[(d_target.clone(), *wcfg)], d_reg, dcfg)
}

/// Multi-key variant: target batches rotate round-robin over
/// (dataset, watermark config) pairs, so each batch's loss uses the key
/// matching its data. With a single pair this is ordinary distillation.
pub fn distill_multi(
    teacher: &ModelParams,
    targets: &[(DomainDataset, WatermarkConfig)],
    d_reg: &DomainDataset,
    dcfg: &DistillConfig,
) -> Result<(ModelParams, Vec<DistillLogRow>)> {
    dcfg.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidConfig("need at least one target".into()));
    }
    for (_, w) in targets {
        w.validate()?;
        if w.h > teacher.config.context {
            return Err(Error::InvalidConfig(format!(
                "watermark width h={} exceeds model context {}",
                w.h, teacher.config.context
            )));
        }
    }

    // Joint baseline: fold the regularization data into the target pool and
    // drop the penalty.
    let joint_pool;
    let (effective_targets, lambda): (Vec<(&DomainDataset, &WatermarkConfig)>, f64) =
        if dcfg.kgwd_mode {
            joint_pool = targets
                .iter()
                .map(|(ds, w)| (ds.union(d_reg, format!("{}+{}", ds.name, d_reg.name)), *w))
                .collect::<Vec<_>>();
            (joint_pool.iter().map(|(ds, w)| (ds, w)).collect(), 0.0)
        } else {
            (targets.iter().map(|(ds, w)| (ds, w)).collect(), dcfg.lambda)
        };

    let mut student = teacher.clone();
    let mut opt = OptimizerState::new(&teacher.config);
    let mut log = Vec::with_capacity(dcfg.steps);
    for step in 0..dcfg.steps {
        let (target_ds, wcfg) = effective_targets[step % effective_targets.len()];
        let target_batch = target_ds.sample_batch(
            dcfg.batch_size,
            dcfg.seq_len,
            BOS_ID,
            splitmix64(dcfg.seed ^ (2 * step) as u64),
        )?;
        let (l_target, mut grads) =
            watermark_loss_and_grads(&student, teacher, wcfg, &target_batch)
                .map_err(|e| at_step(e, step))?;
        let l_reg = if lambda > 0.0 {
            let reg_batch = d_reg.sample_batch(
                dcfg.batch_size,
                dcfg.seq_len,
                BOS_ID,
                splitmix64(dcfg.seed ^ (2 * step + 1) as u64),
            )?;
            let (l_reg, reg_grads) = reg_loss_and_grads(&student, teacher, &reg_batch)
                .map_err(|e| at_step(e, step))?;
            grads.add_scaled(&reg_grads, lambda);
            l_reg
        } else {
            0.0
        };
        let lr = dcfg.schedule.lr_at(step, dcfg.steps, dcfg.lr);
        adam_step(&mut student, &grads, &mut opt, lr).map_err(|e| at_step(e, step))?;
        log.push(DistillLogRow {
            step,
            l_target,
            l_reg,
            combined: l_target + lambda * l_reg,
        });
    }
    Ok((student, log))
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Diverged { what, .. } => Error::Diverged { step, what },
        other => other,
    }
}

/// Plain NLL finetuning continuation of `model` on `dataset`; used by the
/// persistence experiments. Deterministic given the seed.
pub fn finetune(
    model: &ModelParams,
    dataset: &DomainDataset,
    tcfg: &TrainConfig,
) -> Result<ModelParams> {
    tcfg.validate()?;
    let mut params = model.clone();
    let mut opt = OptimizerState::new(&params.config);
    for step in 0..tcfg.steps {
        let batch = dataset.sample_batch(
            tcfg.batch_size,
            tcfg.seq_len,
            BOS_ID,
            splitmix64(tcfg.seed ^ step as u64),
        )?;
        let (loss, grads) = lm::nll_loss_and_grads(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!("loss = {loss}"),
            });
        }
        let lr = tcfg.schedule.lr_at(step, tcfg.steps, tcfg.lr);
        adam_step(&mut params, &grads, &mut opt, lr)?;
    }
    Ok(params)
}
