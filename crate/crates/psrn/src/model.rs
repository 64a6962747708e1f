//! Full network assembly: pose stream + classifier heads + object stream +
//! relational fusion, plus dataset preparation into model inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use numcore::{Graph, NodeId, ParameterSet};

use crate::error::{PsrnError, Result};
use crate::objectstream::{
    extract_objects, grid_object_nodes, ConvStubSpec, FeatureMap, ObjectSet,
};
use crate::posedata::{fill_poses, normalize_positions, scan_max_persons, Dataset, Pose, PoseSequence, Split};
use crate::posestream::{PoseStream, PoseStreamConfig, StreamOutputs};
use crate::relnet::RelationNet;

/// Object representations are either fixed (precomputed feature maps) or
/// produced by the trainable convolution stub from a raster file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectStreamKind {
    Precomputed,
    ConvStub(ConvStubSpec),
}

/// Every dimension and switch of the network. `persons` and `classes` may be
/// 0 in a config file, meaning "derive from the dataset".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub classes: usize,
    pub persons: usize,
    /// Frames sampled per video (T).
    pub frames: usize,
    pub part_hidden: usize,
    pub lstm_hidden: usize,
    pub attention_hidden: usize,
    pub lookback: usize,
    pub bidirectional: bool,
    pub attention: bool,
    /// Width of the relational MLPs.
    pub rel_hidden: usize,
    /// Object vector dimension D (0 = derive from the data).
    pub object_dim: usize,
    pub object_stream: ObjectStreamKind,
}

impl Default for ModelConfig {
    /// Paper-scale dimensions; desk presets shrink these.
    fn default() -> Self {
        ModelConfig {
            classes: 0,
            persons: 0,
            frames: 10,
            part_hidden: 100,
            lstm_hidden: 512,
            attention_hidden: 128,
            lookback: 5,
            bidirectional: true,
            attention: true,
            rel_hidden: 512,
            object_dim: 512,
            object_stream: ObjectStreamKind::Precomputed,
        }
    }
}

impl ModelConfig {
    /// Small dimensions for desk-scale runs and tests.
    pub fn toy() -> Self {
        ModelConfig {
            classes: 0,
            persons: 0,
            frames: 10,
            part_hidden: 12,
            lstm_hidden: 24,
            attention_hidden: 16,
            lookback: 5,
            bidirectional: true,
            attention: true,
            rel_hidden: 48,
            object_dim: 8,
            object_stream: ObjectStreamKind::Precomputed,
        }
    }

    pub fn stream_config(&self) -> PoseStreamConfig {
        PoseStreamConfig {
            part_hidden: self.part_hidden,
            lstm_hidden: self.lstm_hidden,
            attention_hidden: self.attention_hidden,
            lookback: self.lookback,
            bidirectional: self.bidirectional,
            attention: self.attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(PsrnError::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.persons == 0 {
            return Err(PsrnError::Config("person count unresolved".to_string()));
        }
        if self.frames < 2 {
            return Err(PsrnError::Config(
                "need at least 2 sampled frames for the velocity stream".to_string(),
            ));
        }
        if self.object_dim == 0 || self.rel_hidden == 0 {
            return Err(PsrnError::Config(
                "object and relational dimensions must be positive".to_string(),
            ));
        }
        self.stream_config().validate()
    }

    /// Fills `classes`, `persons`, and `object_dim` from a prepared dataset.
    pub fn resolved_with(&self, data: &PreparedDataset) -> Self {
        let mut cfg = self.clone();
        if cfg.classes == 0 {
            cfg.classes = data.classes;
        }
        if cfg.persons == 0 {
            cfg.persons = data.persons;
        }
        if cfg.object_dim == 0 {
            cfg.object_dim = data.object_dim;
        }
        cfg
    }
}

/// Object input for one video.
#[derive(Debug, Clone)]
pub enum ObjectsSource {
    Precomputed(ObjectSet),
    Raster(FeatureMap),
}

/// One video, preprocessed: poses filled to exactly N per frame and
/// normalized into the unit square, plus its object source and label.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub video_id: String,
    pub label: usize,
    pub seq: PoseSequence,
    pub objects: ObjectsSource,
}

#[derive(Debug, Clone, Default)]
pub struct PreparedDataset {
    pub train: Vec<PreparedVideo>,
    pub test: Vec<PreparedVideo>,
    pub persons: usize,
    pub classes: usize,
    pub object_dim: usize,
}

impl PreparedDataset {
    pub fn split(&self, split: Split) -> &[PreparedVideo] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Scans the common person count, fills and normalizes every sequence, and
/// wires each video's feature map per the object-stream mode.
pub fn prepare_dataset(
    dataset: &Dataset,
    requested_persons: usize,
    object_stream: &ObjectStreamKind,
) -> Result<PreparedDataset> {
    if dataset.videos.is_empty() {
        return Err(PsrnError::EmptyDataset);
    }
    let sequences: Vec<PoseSequence> = dataset.videos.iter().map(|v| v.seq.clone()).collect();
    let scanned = scan_max_persons(&sequences)?;
    let persons = if requested_persons > 0 {
        requested_persons
    } else {
        scanned
    };

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut classes = 0usize;
    let mut object_dim = None;
    for video in &dataset.videos {
        let label = video.seq.label.ok_or_else(|| {
            PsrnError::Data(format!("video {:?} has no label", video.seq.video_id))
        })?;
        classes = classes.max(label + 1);
        let seq = normalize_positions(&fill_poses(&video.seq, persons)?)?;
        let objects = match object_stream {
            ObjectStreamKind::Precomputed => {
                let set = extract_objects(&video.featmap);
                let dim = set.object_dim;
                if *object_dim.get_or_insert(dim) != dim {
                    return Err(PsrnError::Data(format!(
                        "video {:?} has object dim {dim}, expected {:?}",
                        video.seq.video_id, object_dim
                    )));
                }
                ObjectsSource::Precomputed(set)
            }
            ObjectStreamKind::ConvStub(spec) => {
                object_dim.get_or_insert(spec.out_channels);
                ObjectsSource::Raster(video.featmap.clone())
            }
        };
        let prepared = PreparedVideo {
            video_id: video.seq.video_id.clone(),
            label,
            seq,
            objects,
        };
        match video.split {
            Split::Train => train.push(prepared),
            Split::Test => test.push(prepared),
        }
    }
    Ok(PreparedDataset {
        train,
        test,
        persons,
        classes,
        object_dim: object_dim.unwrap_or(0),
    })
}

/// Everything produced by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    pub pos_logits: NodeId,
    pub vel_logits: NodeId,
    /// Present when the relational branch ran.
    pub rel_logits: Option<NodeId>,
    pub relation: Option<NodeId>,
    pub h_vel: NodeId,
    pub stream: StreamOutputs,
}

pub struct PsrnModel {
    pub cfg: ModelConfig,
    pub stream: PoseStream,
    pub relation: RelationNet,
}

impl PsrnModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let stream = PoseStream::new(cfg.stream_config())?;
        let rel_input = 2 * cfg.stream_config().output_dim() + cfg.object_dim;
        let relation = RelationNet::new(rel_input, cfg.rel_hidden, cfg.classes)?;
        Ok(PsrnModel {
            cfg,
            stream,
            relation,
        })
    }

    /// Initializes every parameter group from the init seed.
    pub fn init_params(&self, seed: u64) -> Result<ParameterSet<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        self.stream.init_params(&mut params, &mut rng)?;
        let out_dim = self.cfg.stream_config().output_dim();
        params.add_weight("head.pos.w", self.cfg.classes, out_dim, &mut rng)?;
        params.add_bias("head.pos.b", self.cfg.classes)?;
        params.add_weight("head.vel.w", self.cfg.classes, out_dim, &mut rng)?;
        params.add_bias("head.vel.b", self.cfg.classes)?;
        self.relation.init_params(&mut params, &mut rng)?;
        if let ObjectStreamKind::ConvStub(spec) = &self.cfg.object_stream {
            spec.init(&mut params, &mut rng)?;
        }
        Ok(params)
    }

    /// Builds the object nodes for one video: leaf constants for precomputed
    /// maps, the differentiable stub pipeline for rasters.
    pub fn object_nodes(
        &self,
        g: &mut Graph<f64>,
        params: &ParameterSet<f64>,
        objects: &ObjectsSource,
    ) -> Result<Vec<NodeId>> {
        match (objects, &self.cfg.object_stream) {
            (ObjectsSource::Precomputed(set), _) => set
                .vectors
                .iter()
                .map(|v| g.leaf(&[v.len()], v.clone()).map_err(PsrnError::from))
                .collect(),
            (ObjectsSource::Raster(raster), ObjectStreamKind::ConvStub(spec)) => {
                let grid = spec.forward(g, params, raster)?;
                grid_object_nodes(g, grid)
            }
            (ObjectsSource::Raster(_), ObjectStreamKind::Precomputed) => Err(PsrnError::Config(
                "raster input without a conv stub configured".to_string(),
            )),
        }
    }

    /// Full forward pass over sampled frames. The relational branch runs
    /// only when requested and requires an object source.
    pub fn forward(
        &self,
        g: &mut Graph<f64>,
        params: &ParameterSet<f64>,
        frames: &[Vec<Pose>],
        objects: Option<&ObjectsSource>,
        with_relation: bool,
    ) -> Result<ForwardPass> {
        let stream = self.stream.run_position_stream(g, params, frames)?;
        let h_vel = self.stream.run_velocity_stream(g, params, &stream.selected)?;

        let wp = g.param(params, "head.pos.w")?;
        let bp = g.param(params, "head.pos.b")?;
        let pos_logits = g.affine(stream.final_state, wp, bp)?;
        let wv = g.param(params, "head.vel.w")?;
        let bv = g.param(params, "head.vel.b")?;
        let vel_logits = g.affine(h_vel, wv, bv)?;

        let (relation, rel_logits) = if with_relation {
            let source = objects.ok_or_else(|| {
                PsrnError::Data("relational loss active but no feature map given".to_string())
            })?;
            let object_nodes = self.object_nodes(g, params, source)?;
            let (r, logits) =
                self.relation
                    .forward(g, params, stream.final_state, h_vel, &object_nodes)?;
            (Some(r), Some(logits))
        } else {
            (None, None)
        };

        Ok(ForwardPass {
            pos_logits,
            vel_logits,
            rel_logits,
            relation,
            h_vel,
            stream,
        })
    }
}

/// Compares a loaded checkpoint against the shapes the model expects,
/// listing every mismatched tensor.
pub fn validate_checkpoint(model: &PsrnModel, params: &ParameterSet<f64>) -> Result<()> {
    let reference = model.init_params(0)?;
    let mut problems = Vec::new();
    for (name, tensor) in reference.iter() {
        match params.get(name) {
            None => problems.push(format!("missing {name:?}")),
            Some(t) if t.shape() != tensor.shape() => problems.push(format!(
                "{name:?} has shape {:?}, expected {:?}",
                t.shape(),
                tensor.shape()
            )),
            _ => {}
        }
    }
    for (name, _) in params.iter() {
        if reference.get(name).is_none() {
            problems.push(format!("unexpected {name:?}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(PsrnError::Config(format!(
            "checkpoint does not match the model configuration: {}",
            problems.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posedata::Keypoint;
    use rand::Rng;

    fn toy_model() -> PsrnModel {
        let mut cfg = ModelConfig::toy();
        cfg.classes = 3;
        cfg.persons = 2;
        cfg.object_dim = 4;
        PsrnModel::new(cfg).unwrap()
    }

    fn random_frames(t: usize, n: usize, seed: u64) -> Vec<Vec<Pose>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let mut p = Pose::virtual_pose();
                        for k in &mut p.keypoints {
                            *k = Keypoint::at(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
                        }
                        p
                    })
                    .collect()
            })
            .collect()
    }

    fn toy_objects(count: usize, dim: usize, seed: u64) -> ObjectsSource {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ObjectsSource::Precomputed(ObjectSet {
            object_dim: dim,
            vectors: (0..count)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        })
    }

    #[test]
    fn forward_produces_consistent_shapes() {
        let model = toy_model();
        let params = model.init_params(42).unwrap();
        let frames = random_frames(4, 2, 1);
        let objects = toy_objects(6, 4, 2);
        let mut g = Graph::new();
        let pass = model
            .forward(&mut g, &params, &frames, Some(&objects), true)
            .unwrap();
        assert_eq!(g.shape(pass.pos_logits), &[3]);
        assert_eq!(g.shape(pass.vel_logits), &[3]);
        assert_eq!(g.shape(pass.rel_logits.unwrap()), &[3]);
        assert_eq!(g.shape(pass.stream.final_state), &[48]); // 2d, d = 24
        assert_eq!(pass.stream.alphas.len(), 4);
        for &alpha in &pass.stream.alphas {
            let sum: f64 = g.values(alpha).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn relation_branch_requires_objects() {
        let model = toy_model();
        let params = model.init_params(0).unwrap();
        let frames = random_frames(3, 2, 3);
        let mut g = Graph::new();
        let err = model.forward(&mut g, &params, &frames, None, true).unwrap_err();
        assert!(matches!(err, PsrnError::Data(_)));
    }

    #[test]
    fn checkpoint_validation_reports_mismatches() {
        let model = toy_model();
        let mut params = model.init_params(7).unwrap();
        validate_checkpoint(&model, &params).unwrap();

        // perturb one shape and drop one tensor
        let shape_victim = "head.pos.w";
        *params.get_mut(shape_victim).unwrap() = numcore::TensorBuffer::zeros(&[1, 1]);
        let err = validate_checkpoint(&model, &params).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("head.pos.w"));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let model = toy_model();
        let a = model.init_params(5).unwrap();
        let b = model.init_params(5).unwrap();
        for (name, t) in a.iter() {
            assert!(t.values_bits_eq(b.get(name).unwrap()), "{name} differs");
        }
    }
}
