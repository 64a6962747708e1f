//! Finite-difference verification of every differentiable module, from the
//! part encoders through the full three-loss network.
//!
//! Each check builds a deterministic toy instance, evaluates its loss via a
//! fresh graph, and compares analytic gradients against central differences
//! with the shared tolerance [`GRADCHECK_TOLERANCE`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use numcore::{grad_check, Graph, GradCheckConfig, NodeId, ParameterSet};

use crate::error::Result;
use crate::model::{ModelConfig, ObjectStreamKind, ObjectsSource, PsrnModel};
use crate::objectstream::{ConvStubSpec, FeatureMap, ObjectSet};
use crate::posedata::{Keypoint, Pose};
use crate::posestream::{compute_velocities, lstm_step, LstmCell, PoseStream, PoseStreamConfig};
use crate::relnet::RelationNet;
use crate::training::{total_loss, LossFlags, StepSample};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct ModuleCheck {
    pub module: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSuiteReport {
    pub checks: Vec<ModuleCheck>,
    pub max_rel_error: f64,
    pub pass: bool,
}

fn tiny_stream_cfg(bidirectional: bool) -> PoseStreamConfig {
    PoseStreamConfig {
        part_hidden: 6,
        lstm_hidden: 8,
        attention_hidden: 6,
        lookback: 3,
        bidirectional,
        attention: true,
    }
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    let mut pose = Pose::virtual_pose();
    for k in &mut pose.keypoints {
        *k = Keypoint::at(rng.random_range(0.05..0.95), rng.random_range(0.05..0.95));
    }
    pose
}

fn random_frames(t: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Pose>> {
    (0..t)
        .map(|_| (0..n).map(|_| random_pose(rng)).collect())
        .collect()
}

fn projection(g: &mut Graph<f64>, node: NodeId, seed: u64) -> numcore::Result<NodeId> {
    let len = g.values(node).len();
    let flat = g.slice(node, 0, len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = g.leaf(&[len], proj)?;
    g.dot(flat, p)
}

fn run_check<F>(
    name: &str,
    params: &mut ParameterSet<f64>,
    seed: u64,
    loss_fn: F,
) -> Result<ModuleCheck>
where
    F: FnMut(&mut ParameterSet<f64>) -> numcore::Result<f64>,
{
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let report = grad_check(params, &cfg, loss_fn)?;
    Ok(ModuleCheck {
        module: name.to_string(),
        max_rel_error: report.max_rel_error,
        coords_checked: report.coords_checked,
    })
}

fn check_part_encoders(seed: u64) -> Result<ModuleCheck> {
    let stream = PoseStream::new(tiny_stream_cfg(false))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    stream.init_params(&mut params, &mut rng)?;
    let pose = random_pose(&mut rng);
    run_check("part_encoders", &mut params, seed, move |p| {
        let mut g = Graph::new();
        let encoded = stream.encode_pose(&mut g, p, &pose).map_err(to_num)?;
        let loss = projection(&mut g, encoded, 1)?;
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    })
}

fn check_attention(seed: u64) -> Result<ModuleCheck> {
    let stream = PoseStream::new(tiny_stream_cfg(false))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    stream.init_params(&mut params, &mut rng)?;
    let frame: Vec<Pose> = (0..3).map(|_| random_pose(&mut rng)).collect();
    let h_prev: Vec<f64> = (0..8).map(|_| rng.random_range(-0.5..0.5)).collect();
    run_check("attention", &mut params, seed, move |p| {
        let mut g = Graph::new();
        let l_nodes = stream.encode_frame(&mut g, p, &frame).map_err(to_num)?;
        let h = g.leaf(&[8], h_prev.clone())?;
        let alpha = stream.attention_weights(&mut g, p, &l_nodes, h).map_err(to_num)?;
        let l = g.weighted_sum(&l_nodes, alpha)?;
        let loss = projection(&mut g, l, 2)?;
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    })
}

fn check_lstm_step(seed: u64) -> Result<ModuleCheck> {
    let d = 6usize;
    let input_dim = 5usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    params.add_weight("cell.w", 4 * d, d + input_dim, &mut rng)?;
    params.add_bias("cell.b", 4 * d)?;
    let x: Vec<f64> = (0..input_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h0: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let c0: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    run_check("lstm_step", &mut params, seed, move |p| {
        let mut g = Graph::new();
        let cell = LstmCell::from_params(&mut g, p, "cell", d).map_err(to_num)?;
        let xn = g.leaf(&[input_dim], x.clone())?;
        let hn = g.leaf(&[d], h0.clone())?;
        let cn = g.leaf(&[d], c0.clone())?;
        let (h, c) = lstm_step(&mut g, &cell, xn, hn, cn).map_err(to_num)?;
        let joined = g.concat(&[h, c])?;
        let loss = projection(&mut g, joined, 3)?;
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    })
}

// grad_check closures return numcore results; stream helpers return crate
// results. Collapse the crate error into a config error for the few places
// a stream helper runs inside a closure.
fn to_num(e: crate::error::PsrnError) -> numcore::NumError {
    match e {
        crate::error::PsrnError::Num(n) => n,
        other => numcore::NumError::Config(other.to_string()),
    }
}

fn check_lookback(seed: u64) -> Result<ModuleCheck> {
    let stream = PoseStream::new(tiny_stream_cfg(false))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    stream.init_params(&mut params, &mut rng)?;
    let frames = random_frames(4, 2, &mut rng);
    run_check("lookback", &mut params, seed, move |p| {
        let mut g = Graph::new();
        let out = stream.run_position_stream(&mut g, p, &frames).map_err(to_num)?;
        // the readout is the lookback mean, so its gradient exercises it
        let loss = projection(&mut g, out.final_state, 4)?;
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    })
}

fn check_position_stream(seed: u64, bidirectional: bool) -> Result<ModuleCheck> {
    let stream = PoseStream::new(tiny_stream_cfg(bidirectional))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    stream.init_params(&mut params, &mut rng)?;
    let frames = random_frames(3, 2, &mut rng);
    let name = if bidirectional {
        "position_stream_bi"
    } else {
        "position_stream_uni"
    };
    run_check(name, &mut params, seed, move |p| {
        let mut g = Graph::new();
        let out = stream.run_position_stream(&mut g, p, &frames).map_err(to_num)?;
        let loss = projection(&mut g, out.final_state, 5)?;
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    })
}

fn check_velocity_stream(seed: u64) -> Result<ModuleCheck> {
    let stream = PoseStream::new(tiny_stream_cfg(true))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    stream.init_params(&mut params, &mut rng)?;
    let frames = random_frames(4, 2, &mut rng);
    run_check("velocity_stream", &mut params, seed, move |p| {
        let mut g = Graph::new();
        let out = stream.run_position_stream(&mut g, p, &frames).map_err(to_num)?;
        let h_vel = stream.run_velocity_stream(&mut g, p, &out.selected).map_err(to_num)?;
        let loss = projection(&mut g, h_vel, 6)?;
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    })
}

fn check_velocities_op(seed: u64) -> Result<ModuleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    for i in 0..4 {
        let values: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        params.insert(
            &format!("l{i}"),
            numcore::TensorBuffer::from_values(&[5], values)?,
        )?;
    }
    run_check("velocity_differencing", &mut params, seed, move |p| {
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = (0..4)
            .map(|i| g.param(p, &format!("l{i}")))
            .collect::<numcore::Result<_>>()?;
        let vs = compute_velocities(&mut g, &nodes).map_err(to_num)?;
        let joined = g.concat(&vs)?;
        let loss = projection(&mut g, joined, 7)?;
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    })
}

fn check_conv_stub(seed: u64) -> Result<ModuleCheck> {
    let spec = ConvStubSpec {
        in_channels: 2,
        mid_channels: 3,
        out_channels: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    spec.init(&mut params, &mut rng)?;
    let values: Vec<f32> = (0..8 * 8 * 2).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let raster = FeatureMap::new(8, 8, 2, values)?;
    run_check("conv_stub", &mut params, seed, move |p| {
        let mut g = Graph::new();
        let grid = spec.forward(&mut g, p, &raster).map_err(to_num)?;
        let loss = projection(&mut g, grid, 8)?;
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    })
}

fn check_relation(seed: u64) -> Result<ModuleCheck> {
    let net = RelationNet::new(12, 8, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParameterSet::new();
    net.init_params(&mut params, &mut rng)?;
    let h_pos: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let h_vel: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objects: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    run_check("relation", &mut params, seed, move |p| {
        let mut g = Graph::new();
        let hp = g.leaf(&[5], h_pos.clone())?;
        let hv = g.leaf(&[5], h_vel.clone())?;
        let object_nodes: Vec<NodeId> = objects
            .iter()
            .map(|o| g.leaf(&[2], o.clone()))
            .collect::<numcore::Result<_>>()?;
        let (_, logits) = net.forward(&mut g, p, hp, hv, &object_nodes).map_err(to_num)?;
        let loss = g.cross_entropy(logits, 1)?;
        g.backward(loss)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(loss))
    })
}

fn tiny_model(object_stream: ObjectStreamKind) -> Result<PsrnModel> {
    let cfg = ModelConfig {
        classes: 3,
        persons: 2,
        frames: 2,
        part_hidden: 5,
        lstm_hidden: 6,
        attention_hidden: 5,
        lookback: 2,
        bidirectional: true,
        attention: true,
        rel_hidden: 7,
        object_dim: 4,
        object_stream,
    };
    PsrnModel::new(cfg)
}

fn check_loss_heads(seed: u64) -> Result<ModuleCheck> {
    let model = tiny_model(ObjectStreamKind::Precomputed)?;
    let mut params = model.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let frames = random_frames(2, 2, &mut rng);
    run_check("loss_heads", &mut params, seed, move |p| {
        let mut g = Graph::new();
        let pass = model.forward(&mut g, p, &frames, None, false).map_err(to_num)?;
        let pos = g.cross_entropy(pass.pos_logits, 1)?;
        let vel = g.cross_entropy(pass.vel_logits, 2)?;
        let both = g.add(pos, vel)?;
        g.backward(both)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(both))
    })
}

/// The full three-loss network on a 2-frame, 2-person toy input.
fn check_end_to_end(seed: u64) -> Result<ModuleCheck> {
    let model = tiny_model(ObjectStreamKind::ConvStub(ConvStubSpec {
        in_channels: 2,
        mid_channels: 3,
        out_channels: 4,
    }))?;
    let mut params = model.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let frames = random_frames(2, 2, &mut rng);
    let raster_values: Vec<f32> = (0..8 * 8 * 2).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let objects = ObjectsSource::Raster(FeatureMap::new(8, 8, 2, raster_values)?);
    run_check("end_to_end", &mut params, seed, move |p| {
        let mut g = Graph::new();
        let pass = model
            .forward(&mut g, p, &frames, Some(&objects), true)
            .map_err(to_num)?;
        let pos = g.cross_entropy(pass.pos_logits, 0)?;
        let vel = g.cross_entropy(pass.vel_logits, 0)?;
        let rel = g.cross_entropy(pass.rel_logits.expect("relation ran"), 0)?;
        let total = g.sum_vecs(&[pos, vel, rel])?;
        g.backward(total)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(total))
    })
}

/// Precomputed-objects end-to-end variant through `total_loss`.
fn check_total_loss(seed: u64) -> Result<ModuleCheck> {
    let model = tiny_model(ObjectStreamKind::Precomputed)?;
    let mut params = model.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
    let frames = random_frames(2, 2, &mut rng);
    let objects = ObjectsSource::Precomputed(ObjectSet {
        object_dim: 4,
        vectors: (0..4)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    });
    run_check("total_loss", &mut params, seed, move |p| {
        let sample = StepSample {
            frames: &frames,
            objects: Some(&objects),
            label: 1,
        };
        // weight decay enters the optimizer analytically, not this loss
        let breakdown =
            total_loss(&model, p, std::slice::from_ref(&sample), LossFlags::ALL, 0.0)
                .map_err(to_num)?;
        Ok(breakdown.total)
    })
}

/// Runs every module check. Deterministic for a given seed.
pub fn gradcheck_suite(seed: u64) -> Result<GradCheckSuiteReport> {
    let checks = vec![
        check_part_encoders(seed)?,
        check_attention(seed)?,
        check_lstm_step(seed)?,
        check_lookback(seed)?,
        check_position_stream(seed, false)?,
        check_position_stream(seed, true)?,
        check_velocities_op(seed)?,
        check_velocity_stream(seed)?,
        check_conv_stub(seed)?,
        check_relation(seed)?,
        check_loss_heads(seed)?,
        check_end_to_end(seed)?,
        check_total_loss(seed)?,
    ];
    let max_rel_error = checks
        .iter()
        .map(|c| c.max_rel_error)
        .fold(0.0f64, f64::max);
    Ok(GradCheckSuiteReport {
        pass: max_rel_error < GRADCHECK_TOLERANCE,
        checks,
        max_rel_error,
    })
}
