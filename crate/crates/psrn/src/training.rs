//! Losses, learning-rate schedules, and the three-stage training loop.
//!
//! Stage 1 trains the pose stream under the position and velocity losses;
//! stage 2 freezes every pose-stream parameter and trains the object stream
//! and relational network under the relational loss; stage 3 trains the
//! whole network under the summed loss. Freezing is structural: frozen
//! groups have no optimizer moments, so an update is impossible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use numcore::{adam_step, AdamState, Graph, ParameterSet};

use crate::error::{PsrnError, Result};
use crate::model::{ObjectsSource, PreparedVideo, PsrnModel};
use crate::posedata::{sample_frames, Pose};

/// Which cross-entropy heads contribute to the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub pos: bool,
    pub vel: bool,
    pub rel: bool,
}

impl LossFlags {
    pub const POSE_ONLY: LossFlags = LossFlags {
        pos: true,
        vel: true,
        rel: false,
    };
    pub const RELATION_ONLY: LossFlags = LossFlags {
        pos: false,
        vel: false,
        rel: true,
    };
    pub const ALL: LossFlags = LossFlags {
        pos: true,
        vel: true,
        rel: true,
    };
}

/// Per-step loss values; `total` is the exact sum of the parts. Inactive
/// heads report zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub pos: f64,
    pub vel: f64,
    pub rel: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn from_parts(pos: f64, vel: f64, rel: f64, reg: f64) -> Self {
        LossBreakdown {
            pos,
            vel,
            rel,
            reg,
            total: pos + vel + rel + reg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Constant rate, halved once past the halving step.
    ConstantWithHalving,
    /// Exponential ramp from `initial` to `peak` over the warmup steps, then
    /// constant, halved once past the halving step.
    WarmupThenHalving,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub initial: f64,
    /// Post-warmup rate; ignored (equal to `initial`) for the constant kind.
    pub peak: f64,
    pub warmup_steps: u64,
    pub halve_at: u64,
    pub floor: f64,
}

impl LrSchedule {
    pub fn constant(rate: f64, halve_at: u64) -> Self {
        LrSchedule {
            kind: ScheduleKind::ConstantWithHalving,
            initial: rate,
            peak: rate,
            warmup_steps: 0,
            halve_at,
            floor: 0.0,
        }
    }

    pub fn warmup(initial: f64, peak: f64, warmup_steps: u64, halve_at: u64) -> Self {
        LrSchedule {
            kind: ScheduleKind::WarmupThenHalving,
            initial,
            peak,
            warmup_steps,
            halve_at,
            floor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial <= 0.0 || self.peak <= 0.0 || self.floor < 0.0 {
            return Err(PsrnError::Config(format!(
                "learning rates must be positive: initial {}, peak {}, floor {}",
                self.initial, self.peak, self.floor
            )));
        }
        if self.kind == ScheduleKind::WarmupThenHalving && self.halve_at < self.warmup_steps {
            return Err(PsrnError::Config(
                "halving boundary must not precede the warmup end".to_string(),
            ));
        }
        Ok(())
    }
}

/// Rate at a given step. The warmup ramp is geometric, the step-`warmup`
/// value equals the post-warmup constant exactly, and the rate halves once
/// strictly past the halving step.
pub fn lr_at_step(schedule: &LrSchedule, step: u64) -> f64 {
    let mut rate = match schedule.kind {
        ScheduleKind::ConstantWithHalving => schedule.initial,
        ScheduleKind::WarmupThenHalving => {
            if step >= schedule.warmup_steps || schedule.warmup_steps == 0 {
                schedule.peak
            } else {
                let frac = step as f64 / schedule.warmup_steps as f64;
                schedule.initial * (schedule.peak / schedule.initial).powf(frac)
            }
        }
    };
    if step > schedule.halve_at {
        rate *= 0.5;
    }
    rate.max(schedule.floor)
}

/// One training stage: active losses, frozen prefixes, schedule, budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSpec {
    pub number: u32,
    pub losses: LossFlags,
    pub freeze_prefixes: Vec<String>,
    pub schedule: LrSchedule,
    pub iterations: u64,
}

/// The ordered three-stage plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<StageSpec>,
}

/// Iteration budget and schedule for one stage, as configured.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub iterations: u64,
    pub schedule: LrSchedule,
}

/// Training-wide settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Videos per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    /// lambda_theta.
    pub weight_decay: f64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Default for TrainingConfig {
    /// Paper-scale schedule constants; desk presets scale them down.
    fn default() -> Self {
        TrainingConfig {
            batch_size: 1,
            weight_decay: 0.00004,
            stage1: StageConfig {
                iterations: 100_000,
                schedule: LrSchedule::constant(1e-4, 78_000),
            },
            stage2: StageConfig {
                iterations: 40_000,
                schedule: LrSchedule::warmup(1e-6, 1e-4, 2_000, 28_000),
            },
            stage3: StageConfig {
                iterations: 20_000,
                schedule: LrSchedule::constant(5e-5, 10_000),
            },
        }
    }
}

impl StagePlan {
    /// The canonical plan: stage 1 trains the pose stream (relational and
    /// object parameters frozen), stage 2 freezes every pose-stream
    /// parameter, stage 3 freezes nothing.
    pub fn standard(cfg: &TrainingConfig) -> Result<StagePlan> {
        for stage in [&cfg.stage1, &cfg.stage2, &cfg.stage3] {
            stage.schedule.validate()?;
        }
        Ok(StagePlan {
            stages: vec![
                StageSpec {
                    number: 1,
                    losses: LossFlags::POSE_ONLY,
                    freeze_prefixes: vec!["rel.".to_string(), "obj.".to_string()],
                    schedule: cfg.stage1.schedule.clone(),
                    iterations: cfg.stage1.iterations,
                },
                StageSpec {
                    number: 2,
                    losses: LossFlags::RELATION_ONLY,
                    freeze_prefixes: vec!["pose.".to_string(), "head.".to_string()],
                    schedule: cfg.stage2.schedule.clone(),
                    iterations: cfg.stage2.iterations,
                },
                StageSpec {
                    number: 3,
                    losses: LossFlags::ALL,
                    freeze_prefixes: vec![],
                    schedule: cfg.stage3.schedule.clone(),
                    iterations: cfg.stage3.iterations,
                },
            ],
        })
    }

    pub fn stage(&self, number: u32) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.number == number)
    }
}

/// One sampled video presented to the loss.
pub struct StepSample<'a> {
    pub frames: &'a [Vec<Pose>],
    pub objects: Option<&'a ObjectsSource>,
    pub label: usize,
}

/// Forward + backward over a batch: cross-entropy per active head, averaged
/// over the batch, gradients accumulated into `params`. The regularization
/// term is reported here and enters the update analytically in `adam_step`.
pub fn total_loss(
    model: &PsrnModel,
    params: &mut ParameterSet<f64>,
    batch: &[StepSample<'_>],
    flags: LossFlags,
    weight_decay: f64,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(PsrnError::Data("empty training batch".to_string()));
    }
    let scale = 1.0 / batch.len() as f64;
    let (mut pos_sum, mut vel_sum, mut rel_sum) = (0.0, 0.0, 0.0);
    for sample in batch {
        if flags.rel && sample.objects.is_none() {
            return Err(PsrnError::Data(
                "relational loss active but sample has no feature map".to_string(),
            ));
        }
        let mut g = Graph::new();
        let pass = model.forward(&mut g, params, sample.frames, sample.objects, flags.rel)?;
        let mut active = Vec::new();
        if flags.pos {
            let ce = g.cross_entropy(pass.pos_logits, sample.label)?;
            pos_sum += g.value_scalar(ce);
            active.push(ce);
        }
        if flags.vel {
            let ce = g.cross_entropy(pass.vel_logits, sample.label)?;
            vel_sum += g.value_scalar(ce);
            active.push(ce);
        }
        if flags.rel {
            let logits = pass.rel_logits.expect("relation ran");
            let ce = g.cross_entropy(logits, sample.label)?;
            rel_sum += g.value_scalar(ce);
            active.push(ce);
        }
        if active.is_empty() {
            return Err(PsrnError::Config("no active losses".to_string()));
        }
        let summed = g.sum_vecs(&active)?;
        let scaled = g.scale(summed, scale)?;
        g.backward(scaled)?;
        g.grads_into(params)?;
    }
    let reg = weight_decay * params.trainable_squared_norm();
    Ok(LossBreakdown::from_parts(
        pos_sum * scale,
        vel_sum * scale,
        rel_sum * scale,
        reg,
    ))
}

/// One row of the training trace.
#[derive(Debug, Clone, Serialize)]
pub struct TraceRow {
    pub step: u64,
    pub stage: u32,
    pub lr: f64,
    pub pos: f64,
    pub vel: f64,
    pub rel: f64,
    pub reg: f64,
    pub total: f64,
}

pub const TRACE_HEADER: &str = "step,stage,lr,L_pos,L_vel,L_rel,reg,total";

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.stage, r.lr, r.pos, r.vel, r.rel, r.reg, r.total
        ));
    }
    out
}

fn non_finite_tensors(params: &ParameterSet<f64>) -> Vec<String> {
    params
        .iter()
        .filter(|(_, t)| {
            !t.values().iter().all(|v| v.is_finite()) || !t.grad().iter().all(|v| v.is_finite())
        })
        .map(|(n, _)| n.to_string())
        .collect()
}

/// Runs one stage: applies its freeze set, builds fresh optimizer state, and
/// iterates sample -> forward -> losses -> backward -> adam over the train
/// split. Fully deterministic given the sampling rng state.
pub fn run_stage(
    model: &PsrnModel,
    params: &mut ParameterSet<f64>,
    stage: &StageSpec,
    train: &[PreparedVideo],
    batch_size: usize,
    weight_decay: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TraceRow>> {
    if train.is_empty() {
        return Err(PsrnError::Data("empty training split".to_string()));
    }
    let prefixes: Vec<&str> = stage.freeze_prefixes.iter().map(String::as_str).collect();
    params.freeze_by_prefix(&prefixes);
    params.zero_grads();
    let mut adam = AdamState::new(params);
    let batch = batch_size.max(1);
    let t_frames = model.cfg.frames;
    let mut trace = Vec::with_capacity(stage.iterations as usize);

    for step in 0..stage.iterations {
        let lr = lr_at_step(&stage.schedule, step);
        let mut sampled = Vec::with_capacity(batch);
        for _ in 0..batch {
            let idx = rng.random_range(0..train.len());
            let video = &train[idx];
            let (frames, _object_frame) = sample_frames(&video.seq, t_frames, rng)?;
            sampled.push((frames, &video.objects, video.label));
        }
        let batch_samples: Vec<StepSample> = sampled
            .iter()
            .map(|(seq, objects, label)| StepSample {
                frames: &seq.frames,
                objects: Some(*objects),
                label: *label,
            })
            .collect();
        let breakdown = total_loss(model, params, &batch_samples, stage.losses, weight_decay)?;
        if !breakdown.total.is_finite() {
            let offenders = non_finite_tensors(params);
            return Err(PsrnError::Diverged {
                step,
                details: if offenders.is_empty() {
                    format!("loss became {}", breakdown.total)
                } else {
                    format!("non-finite parameter tensors: {}", offenders.join(", "))
                },
            });
        }
        adam_step(params, &mut adam, lr, weight_decay)?;
        trace.push(TraceRow {
            step,
            stage: stage.number,
            lr,
            pos: breakdown.pos,
            vel: breakdown.vel,
            rel: breakdown.rel,
            reg: breakdown.reg,
            total: breakdown.total,
        });
    }
    params.unfreeze_all();
    Ok(trace)
}

/// Deterministic per-stage sampling stream: stage k re-seeds from the
/// sampling seed, so running stages separately or together gives identical
/// results.
pub fn stage_rng(sampling_seed: u64, stage_number: u32) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(sampling_seed.wrapping_add(u64::from(stage_number) << 32))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_warmup() -> LrSchedule {
        LrSchedule::warmup(1e-6, 1e-4, 2_000, 28_000)
    }

    #[test]
    fn warmup_schedule_reproduces_paper_values() {
        let s = paper_warmup();
        assert_eq!(lr_at_step(&s, 0), 1e-6);
        assert!((lr_at_step(&s, 1_000) - 1e-5).abs() / 1e-5 < 1e-12);
        assert_eq!(lr_at_step(&s, 2_000), 1e-4);
    }

    #[test]
    fn warmup_is_continuous_at_the_boundary() {
        let s = paper_warmup();
        assert_eq!(lr_at_step(&s, s.warmup_steps), lr_at_step(&s, s.warmup_steps + 1));
    }

    #[test]
    fn both_kinds_halve_exactly_once() {
        let w = paper_warmup();
        assert_eq!(lr_at_step(&w, 28_000), 1e-4);
        assert_eq!(lr_at_step(&w, 28_001), 5e-5);
        assert_eq!(lr_at_step(&w, 1_000_000), 5e-5);

        let c = LrSchedule::constant(1e-4, 78_000);
        assert_eq!(lr_at_step(&c, 0), 1e-4);
        assert_eq!(lr_at_step(&c, 78_000), 1e-4);
        assert_eq!(lr_at_step(&c, 78_001), 5e-5);
        assert_eq!(lr_at_step(&c, 999_999), 5e-5);
    }

    #[test]
    fn rate_is_non_increasing_after_warmup() {
        let s = paper_warmup();
        let mut prev = lr_at_step(&s, s.warmup_steps);
        for step in (s.warmup_steps..40_000).step_by(500) {
            let r = lr_at_step(&s, step);
            assert!(r <= prev && r > 0.0);
            prev = r;
        }
    }

    #[test]
    fn floor_clamps_the_rate() {
        let mut s = LrSchedule::constant(1e-4, 10);
        s.floor = 8e-5;
        assert_eq!(lr_at_step(&s, 11), 8e-5);
    }

    #[test]
    fn standard_plan_satisfies_the_freeze_invariant() {
        let plan = StagePlan::standard(&TrainingConfig::default()).unwrap();
        assert_eq!(plan.stages.len(), 3);
        let s2 = plan.stage(2).unwrap();
        assert!(s2.freeze_prefixes.iter().any(|p| p == "pose."));
        assert!(s2.freeze_prefixes.iter().any(|p| p == "head."));
        let s3 = plan.stage(3).unwrap();
        assert!(s3.freeze_prefixes.is_empty());
        assert_eq!(s2.losses, LossFlags::RELATION_ONLY);
    }

    #[test]
    fn breakdown_total_is_the_exact_sum() {
        let b = LossBreakdown::from_parts(0.1, 0.2, 0.3, 0.05);
        assert_eq!(b.total, 0.1 + 0.2 + 0.3 + 0.05);
    }

    #[test]
    fn trace_csv_has_the_declared_header() {
        let rows = vec![TraceRow {
            step: 0,
            stage: 1,
            lr: 1e-4,
            pos: 1.0,
            vel: 2.0,
            rel: 0.0,
            reg: 0.5,
            total: 3.5,
        }];
        let csv = trace_to_csv(&rows);
        assert!(csv.starts_with("step,stage,lr,L_pos,L_vel,L_rel,reg,total\n"));
        assert!(csv.contains("0,1,0.0001,1,2,0,0.5,3.5"));
    }
}
