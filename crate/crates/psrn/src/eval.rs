//! Evaluation metrics (per-branch accuracies, confusion matrix) and the
//! ablation harness over the attention / recurrence-direction grid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use numcore::Graph;

use crate::error::{PsrnError, Result};
use crate::model::{ModelConfig, PreparedVideo, PsrnModel};
use crate::posedata::sample_frames;
use crate::training::{run_stage, stage_rng, StagePlan, TraceRow, TrainingConfig};

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BranchAccuracy {
    pub position: f64,
    pub velocity: f64,
    pub pose_fusion: f64,
    pub relation: f64,
}

/// Evaluation summary. The confusion matrix counts the final (relational)
/// predictions; `accuracy.relation` equals its trace over the total.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub total: usize,
    pub accuracy: BranchAccuracy,
    pub confusion: Vec<Vec<u64>>,
    pub misclassified: Vec<String>,
}

pub fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-video posteriors of all branches under seeded frame sampling,
/// averaged over `repeats` samplings.
fn video_posteriors(
    model: &PsrnModel,
    params: &numcore::ParameterSet<f64>,
    video: &PreparedVideo,
    rng: &mut ChaCha8Rng,
    repeats: usize,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let c = model.cfg.classes;
    let (mut pos, mut vel, mut rel) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
    let runs = repeats.max(1);
    for _ in 0..runs {
        let (frames, _) = sample_frames(&video.seq, model.cfg.frames, rng)?;
        let mut g = Graph::new();
        let pass = model.forward(&mut g, params, &frames.frames, Some(&video.objects), true)?;
        for (acc, p) in pos.iter_mut().zip(softmax_vec(g.values(pass.pos_logits))) {
            *acc += p;
        }
        for (acc, p) in vel.iter_mut().zip(softmax_vec(g.values(pass.vel_logits))) {
            *acc += p;
        }
        let logits = pass.rel_logits.expect("relation ran");
        for (acc, p) in rel.iter_mut().zip(softmax_vec(g.values(logits))) {
            *acc += p;
        }
    }
    let norm = 1.0 / runs as f64;
    for v in pos.iter_mut().chain(vel.iter_mut()).chain(rel.iter_mut()) {
        *v *= norm;
    }
    Ok((pos, vel, rel))
}

/// Evaluates a split: the final prediction is the argmax of the relational
/// posterior; the pose-fusion branch averages the position and velocity
/// posteriors. Deterministic given the evaluation seed.
pub fn evaluate(
    model: &PsrnModel,
    params: &numcore::ParameterSet<f64>,
    videos: &[PreparedVideo],
    eval_seed: u64,
    repeats: usize,
) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(PsrnError::Data("empty evaluation split".to_string()));
    }
    let c = model.cfg.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let mut confusion = vec![vec![0u64; c]; c];
    let mut correct = [0usize; 4]; // position, velocity, fusion, relation
    let mut misclassified = Vec::new();

    for video in videos {
        if video.label >= c {
            return Err(PsrnError::Data(format!(
                "video {:?} has label {} outside {c} classes",
                video.video_id, video.label
            )));
        }
        let (pos, vel, rel) = video_posteriors(model, params, video, &mut rng, repeats)?;
        let fusion: Vec<f64> = pos.iter().zip(&vel).map(|(a, b)| 0.5 * (a + b)).collect();
        let preds = [argmax(&pos), argmax(&vel), argmax(&fusion), argmax(&rel)];
        for (hit, pred) in correct.iter_mut().zip(preds) {
            if pred == video.label {
                *hit += 1;
            }
        }
        confusion[video.label][preds[3]] += 1;
        if preds[3] != video.label {
            misclassified.push(video.video_id.clone());
        }
    }
    let total = videos.len();
    let frac = |n: usize| n as f64 / total as f64;
    Ok(EvalReport {
        total,
        accuracy: BranchAccuracy {
            position: frac(correct[0]),
            velocity: frac(correct[1]),
            pose_fusion: frac(correct[2]),
            relation: frac(correct[3]),
        },
        confusion,
        misclassified,
    })
}

/// Attention inspection: per video, the T x N attention rows under seeded
/// sampling. Rows are (video_id, t, person_index, alpha).
pub fn attention_rows(
    model: &PsrnModel,
    params: &numcore::ParameterSet<f64>,
    videos: &[PreparedVideo],
    eval_seed: u64,
) -> Result<Vec<(String, usize, usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let mut rows = Vec::new();
    for video in videos {
        let (frames, _) = sample_frames(&video.seq, model.cfg.frames, &mut rng)?;
        let mut g = Graph::new();
        let pass = model.forward(&mut g, params, &frames.frames, Some(&video.objects), false)?;
        for (t, &alpha) in pass.stream.alphas.iter().enumerate() {
            for (person, &a) in g.values(alpha).iter().enumerate() {
                rows.push((video.video_id.clone(), t, person, a));
            }
        }
    }
    Ok(rows)
}

pub fn attention_csv(rows: &[(String, usize, usize, f64)]) -> String {
    let mut out = String::from("video_id,t,person_index,alpha\n");
    for (id, t, person, alpha) in rows {
        out.push_str(&format!("{id},{t},{person},{alpha}\n"));
    }
    out
}

/// Per-run seeds; ablation derives one bundle per (config, repeat).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RunSeeds {
    pub init: u64,
    pub sampling: u64,
    pub eval: u64,
}

/// Trains the standard three stages from scratch and returns the final
/// parameters plus the concatenated trace.
pub fn train_three_stages(
    model: &PsrnModel,
    training: &TrainingConfig,
    train: &[PreparedVideo],
    seeds: RunSeeds,
) -> Result<(numcore::ParameterSet<f64>, Vec<TraceRow>)> {
    let plan = StagePlan::standard(training)?;
    let mut params = model.init_params(seeds.init)?;
    let mut trace = Vec::new();
    for stage in &plan.stages {
        let mut rng = stage_rng(seeds.sampling, stage.number);
        trace.extend(run_stage(
            model,
            &mut params,
            stage,
            train,
            training.batch_size,
            training.weight_decay,
            &mut rng,
        )?);
    }
    Ok((params, trace))
}

/// One ablation result row (averages over the seeds it was run with).
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub bidirectional: bool,
    pub attention: bool,
    pub position: f64,
    pub velocity: f64,
    pub pose_fusion: f64,
    pub relation: f64,
}

/// Trains and evaluates every (bidirectional, attention) configuration over
/// the given seeds, averaging the per-branch test accuracies. The runs are
/// independent, so they execute on parallel threads; each run's randomness
/// is self-contained, keeping the table deterministic.
pub fn ablation_harness(
    base_cfg: &ModelConfig,
    training: &TrainingConfig,
    train: &[PreparedVideo],
    test: &[PreparedVideo],
    grid: &[(bool, bool)],
    seeds: &[RunSeeds],
    repeats: usize,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(PsrnError::Config("empty ablation grid or seed list".to_string()));
    }
    let mut results: Vec<Vec<Option<Result<BranchAccuracy>>>> =
        grid.iter().map(|_| seeds.iter().map(|_| None).collect()).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (gi, &(bidirectional, attention)) in grid.iter().enumerate() {
            for (si, seed) in seeds.iter().enumerate() {
                let mut cfg = base_cfg.clone();
                cfg.bidirectional = bidirectional;
                cfg.attention = attention;
                let seed = *seed;
                handles.push((
                    gi,
                    si,
                    scope.spawn(move || -> Result<BranchAccuracy> {
                        let model = PsrnModel::new(cfg)?;
                        let (params, _) = train_three_stages(&model, training, train, seed)?;
                        let report = evaluate(&model, &params, test, seed.eval, repeats)?;
                        Ok(report.accuracy)
                    }),
                ));
            }
        }
        for (gi, si, handle) in handles {
            results[gi][si] = Some(handle.join().expect("ablation worker panicked"));
        }
    });
    let mut rows = Vec::with_capacity(grid.len());
    for (gi, &(bidirectional, attention)) in grid.iter().enumerate() {
        let mut acc = [0.0f64; 4];
        for cell in results[gi].iter_mut() {
            let branch = cell.take().expect("worker ran")?;
            acc[0] += branch.position;
            acc[1] += branch.velocity;
            acc[2] += branch.pose_fusion;
            acc[3] += branch.relation;
        }
        let n = seeds.len() as f64;
        rows.push(AblationRow {
            bidirectional,
            attention,
            position: acc[0] / n,
            velocity: acc[1] / n,
            pose_fusion: acc[2] / n,
            relation: acc[3] / n,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "configuration        position  velocity  pose_fusion  two_stream\n",
    );
    for r in rows {
        let name = match (r.bidirectional, r.attention) {
            (false, true) => "uni-LSTM+attention",
            (true, true) => "bi-LSTM+attention",
            (false, false) => "uni-LSTM",
            (true, false) => "bi-LSTM",
        };
        out.push_str(&format!(
            "{name:<20} {:>8.3} {:>9.3} {:>12.3} {:>11.3}\n",
            r.position, r.velocity, r.pose_fusion, r.relation
        ));
    }
    out
}

/// Convenience used by tests and the attention-targeting check: the mean
/// attention on each person over all steps of each test video.
pub fn mean_attention_per_person(
    model: &PsrnModel,
    params: &numcore::ParameterSet<f64>,
    videos: &[PreparedVideo],
    eval_seed: u64,
) -> Result<Vec<(String, Vec<f64>)>> {
    let rows = attention_rows(model, params, videos, eval_seed)?;
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    let mut counts: Vec<Vec<usize>> = Vec::new();
    for (id, _t, person, alpha) in rows {
        if out.last().map(|(last, _)| last != &id).unwrap_or(true) {
            out.push((id.clone(), Vec::new()));
            counts.push(Vec::new());
        }
        let (_, sums) = out.last_mut().expect("pushed above");
        let cnts = counts.last_mut().expect("pushed above");
        if person >= sums.len() {
            sums.resize(person + 1, 0.0);
            cnts.resize(person + 1, 0);
        }
        sums[person] += alpha;
        cnts[person] += 1;
    }
    for ((_, sums), cnts) in out.iter_mut().zip(&counts) {
        for (s, &c) in sums.iter_mut().zip(cnts) {
            if c > 0 {
                *s /= c as f64;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_and_argmax_behave() {
        let p = softmax_vec(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[1.0, 1.0]), 0); // first maximum wins
    }

    #[test]
    fn attention_csv_header_matches_interface() {
        let rows = vec![("v0".to_string(), 0usize, 1usize, 0.25f64)];
        let csv = attention_csv(&rows);
        assert!(csv.starts_with("video_id,t,person_index,alpha\n"));
        assert!(csv.contains("v0,0,1,0.25"));
    }
}
