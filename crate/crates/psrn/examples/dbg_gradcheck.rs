// debug: per-tensor gradcheck report for the failing modules
use numcore::{grad_check, GradCheckConfig, Graph, ParameterSet};
use psrn::model::{ModelConfig, ObjectStreamKind, PsrnModel};
use psrn::posedata::{Keypoint, Pose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig {
        classes: 3, persons: 2, frames: 2,
        part_hidden: 5, lstm_hidden: 6, attention_hidden: 5,
        lookback: 2, bidirectional: true, attention: true,
        rel_hidden: 7, object_dim: 4,
        object_stream: ObjectStreamKind::Precomputed,
    };
    let model = PsrnModel::new(cfg).unwrap();
    let mut params = model.init_params(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let frames: Vec<Vec<Pose>> = (0..2).map(|_| (0..2).map(|_| {
        let mut p = Pose::virtual_pose();
        for k in &mut p.keypoints { *k = Keypoint::at(rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)); }
        p
    }).collect()).collect();
    let report = grad_check(&mut params, &GradCheckConfig { seed: 0, ..Default::default() }, |p| {
        let mut g = Graph::new();
        let pass = model.forward(&mut g, p, &frames, None, false).map_err(|e| numcore::NumError::Config(e.to_string()))?;
        let pos = g.cross_entropy(pass.pos_logits, 1)?;
        let vel = g.cross_entropy(pass.vel_logits, 2)?;
        let both = g.add(pos, vel)?;
        g.backward(both)?;
        g.grads_into(p)?;
        Ok(g.value_scalar(both))
    }).unwrap();
    let mut worst: Vec<(&String, &f64)> = report.per_tensor.iter().collect();
    worst.sort_by(|a, b| b.1.partial_cmp(a.1).unwrap());
    for (name, err) in worst.iter().take(12) {
        println!("{name:<26} {err:.3e}");
    }
}
