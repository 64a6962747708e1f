//! Temporal pose stream: per-part encoders, soft attention over person
//! detections, and the position/velocity recurrences producing the final
//! pose representations.
//!
//! Attention is conditioned on the forward direction's previous hidden
//! state; the selected pose sequence is shared by the forward cell, the
//! backward cell (bidirectional mode), and the velocity stream.

use numcore::{Activation, Graph, MlpSpec, NodeId, ParameterSet};
use rand::Rng;

use crate::error::{PsrnError, Result};
use crate::posedata::{partition_parts, PartPartition, Pose, PART_DIMS};

/// Dimensions and switches of the pose stream.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PoseStreamConfig {
    /// Part-encoder output width K; the pose representation is 5K.
    pub part_hidden: usize,
    /// LSTM state width d.
    pub lstm_hidden: usize,
    /// Attention scorer width A.
    pub attention_hidden: usize,
    /// Readout averages the last n hidden states per direction.
    pub lookback: usize,
    pub bidirectional: bool,
    /// Off means mean-pooling over persons instead of learned attention.
    pub attention: bool,
}

impl PoseStreamConfig {
    pub fn pose_dim(&self) -> usize {
        5 * self.part_hidden
    }

    /// d in unidirectional mode, 2d in bidirectional mode.
    pub fn output_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.lstm_hidden
        } else {
            self.lstm_hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.part_hidden == 0
            || self.lstm_hidden == 0
            || self.attention_hidden == 0
            || self.lookback == 0
        {
            return Err(PsrnError::Config(
                "pose stream dimensions and lookback must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Gate parameters of one LSTM direction, resolved into graph nodes.
pub struct LstmCell {
    pub weights: NodeId,
    pub bias: NodeId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn from_params(
        g: &mut Graph<f64>,
        params: &ParameterSet<f64>,
        prefix: &str,
        hidden: usize,
    ) -> Result<Self> {
        Ok(LstmCell {
            weights: g.param(params, &format!("{prefix}.w"))?,
            bias: g.param(params, &format!("{prefix}.b"))?,
            hidden,
        })
    }
}

/// One LSTM step: a single affine map of the concatenated (h_prev, x) split
/// into input/forget/output/candidate gates.
pub fn lstm_step(
    g: &mut Graph<f64>,
    cell: &LstmCell,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let d = cell.hidden;
    let hx = g.concat(&[h_prev, x])?;
    let z = g.affine(hx, cell.weights, cell.bias)?;
    let i_pre = g.slice(z, 0, d)?;
    let f_pre = g.slice(z, d, d)?;
    let o_pre = g.slice(z, 2 * d, d)?;
    let g_pre = g.slice(z, 3 * d, d)?;
    let i = g.sigmoid(i_pre)?;
    let f = g.sigmoid(f_pre)?;
    let o = g.sigmoid(o_pre)?;
    let cand = g.tanh(g_pre)?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let c_act = g.tanh(c)?;
    let h = g.mul(o, c_act)?;
    Ok((h, c))
}

/// Weighted sum of person representations under the attention weights.
pub fn select_pose(g: &mut Graph<f64>, l_nodes: &[NodeId], alpha: NodeId) -> Result<NodeId> {
    g.weighted_sum(l_nodes, alpha).map_err(PsrnError::from)
}

/// Mean of the last `min(n, T)` hidden states of one direction.
pub fn lookback_output(g: &mut Graph<f64>, hidden: &[NodeId], n: usize) -> Result<NodeId> {
    if hidden.is_empty() {
        return Err(PsrnError::EmptySequence("lookback input".to_string()));
    }
    let take = n.min(hidden.len()).max(1);
    g.mean_vecs(&hidden[hidden.len() - take..])
        .map_err(PsrnError::from)
}

/// First differences of the selected pose representations; needs T >= 2.
pub fn compute_velocities(g: &mut Graph<f64>, selected: &[NodeId]) -> Result<Vec<NodeId>> {
    if selected.len() < 2 {
        return Err(PsrnError::Data(format!(
            "velocity undefined for {} frame(s); need at least 2",
            selected.len()
        )));
    }
    selected
        .windows(2)
        .map(|w| g.sub(w[1], w[0]).map_err(PsrnError::from))
        .collect()
}

/// Uniform pooling weights (attention disabled).
pub fn uniform_weights(g: &mut Graph<f64>, n: usize) -> Result<NodeId> {
    g.leaf(&[n], vec![1.0 / n as f64; n]).map_err(PsrnError::from)
}

/// Final states and per-step attention of one position-stream run.
#[derive(Debug)]
pub struct StreamOutputs {
    /// h_T^L: lookback readout, both directions concatenated when
    /// bidirectional (dimension d or 2d).
    pub final_state: NodeId,
    /// One `[N]` weight row per step, each summing to 1.
    pub alphas: Vec<NodeId>,
    /// Selected pose representations l_1..l_T.
    pub selected: Vec<NodeId>,
}

pub struct PoseStream {
    pub cfg: PoseStreamConfig,
    partition: PartPartition,
    part_encoders: Vec<MlpSpec>,
}

impl PoseStream {
    pub fn new(cfg: PoseStreamConfig) -> Result<Self> {
        cfg.validate()?;
        let part_encoders = PART_DIMS
            .iter()
            .enumerate()
            .map(|(p, &dim)| {
                MlpSpec::new(
                    &format!("pose.part{p}"),
                    &[dim, cfg.part_hidden, cfg.part_hidden],
                    Activation::Relu,
                    true,
                )
            })
            .collect();
        Ok(PoseStream {
            cfg,
            partition: PartPartition::canonical(),
            part_encoders,
        })
    }

    pub fn init_params(&self, params: &mut ParameterSet<f64>, rng: &mut impl Rng) -> Result<()> {
        for spec in &self.part_encoders {
            spec.init(params, rng)?;
        }
        let (a, d, pose_dim) = (
            self.cfg.attention_hidden,
            self.cfg.lstm_hidden,
            self.cfg.pose_dim(),
        );
        params.add_weight("pose.att.w_pose", a, pose_dim, rng)?;
        params.add_weight("pose.att.w_hidden", a, d, rng)?;
        params.add_bias("pose.att.bias", a)?;
        params.add_weight("pose.att.score", 1, a, rng)?;
        for stream in ["pos", "vel"] {
            let directions: &[&str] = if self.cfg.bidirectional {
                &["fwd", "bwd"]
            } else {
                &["fwd"]
            };
            for dir in directions {
                params.add_weight(
                    &format!("pose.lstm.{stream}.{dir}.w"),
                    4 * d,
                    d + pose_dim,
                    rng,
                )?;
                params.add_bias(&format!("pose.lstm.{stream}.{dir}.b"), 4 * d)?;
            }
        }
        Ok(())
    }

    /// Encodes one person's pose into its 5K-dim representation.
    pub fn encode_pose(
        &self,
        g: &mut Graph<f64>,
        params: &ParameterSet<f64>,
        pose: &Pose,
    ) -> Result<NodeId> {
        let parts = partition_parts(pose, &self.partition);
        let mut encoded = Vec::with_capacity(5);
        for (spec, part) in self.part_encoders.iter().zip(parts) {
            let dim = part.len();
            let input = g.leaf(&[dim], part)?;
            encoded.push(spec.forward(g, params, input)?);
        }
        g.concat(&encoded).map_err(PsrnError::from)
    }

    /// Encodes a frame's N persons: the L_t matrix as N nodes of dim 5K.
    pub fn encode_frame(
        &self,
        g: &mut Graph<f64>,
        params: &ParameterSet<f64>,
        frame: &[Pose],
    ) -> Result<Vec<NodeId>> {
        frame.iter().map(|p| self.encode_pose(g, params, p)).collect()
    }

    /// Per-person scores `score . tanh(W_L l_i + W_h h_prev + b)` through a
    /// softmax.
    pub fn attention_weights(
        &self,
        g: &mut Graph<f64>,
        params: &ParameterSet<f64>,
        l_nodes: &[NodeId],
        h_prev: NodeId,
    ) -> Result<NodeId> {
        let w_pose = g.param(params, "pose.att.w_pose")?;
        let w_hidden = g.param(params, "pose.att.w_hidden")?;
        let bias = g.param(params, "pose.att.bias")?;
        let score = g.param(params, "pose.att.score")?;
        let a = self.cfg.attention_hidden;
        let score_vec = g.slice(score, 0, a)?;
        let hidden_proj = g.matvec(w_hidden, h_prev)?;
        let mut scores = Vec::with_capacity(l_nodes.len());
        for &l in l_nodes {
            let pose_proj = g.affine(l, w_pose, bias)?;
            let pre = g.add(pose_proj, hidden_proj)?;
            let act = g.tanh(pre)?;
            scores.push(g.dot(score_vec, act)?);
        }
        let stacked = g.concat(&scores)?;
        g.softmax(stacked).map_err(PsrnError::from)
    }

    fn weights_for_step(
        &self,
        g: &mut Graph<f64>,
        params: &ParameterSet<f64>,
        l_nodes: &[NodeId],
        h_prev: NodeId,
    ) -> Result<NodeId> {
        if self.cfg.attention {
            self.attention_weights(g, params, l_nodes, h_prev)
        } else {
            uniform_weights(g, l_nodes.len())
        }
    }

    /// Runs attention + the position recurrence over T frames.
    pub fn run_position_stream(
        &self,
        g: &mut Graph<f64>,
        params: &ParameterSet<f64>,
        frames: &[Vec<Pose>],
    ) -> Result<StreamOutputs> {
        if frames.is_empty() {
            return Err(PsrnError::EmptySequence("position stream input".to_string()));
        }
        let d = self.cfg.lstm_hidden;
        let fwd = LstmCell::from_params(g, params, "pose.lstm.pos.fwd", d)?;
        let mut h = g.zeros(&[d]);
        let mut c = g.zeros(&[d]);
        let mut alphas = Vec::with_capacity(frames.len());
        let mut selected = Vec::with_capacity(frames.len());
        let mut hidden_fwd = Vec::with_capacity(frames.len());
        for frame in frames {
            let l_nodes = self.encode_frame(g, params, frame)?;
            let alpha = self.weights_for_step(g, params, &l_nodes, h)?;
            let l = select_pose(g, &l_nodes, alpha)?;
            let (h_next, c_next) = lstm_step(g, &fwd, l, h, c)?;
            h = h_next;
            c = c_next;
            alphas.push(alpha);
            selected.push(l);
            hidden_fwd.push(h_next);
        }
        let fwd_out = lookback_output(g, &hidden_fwd, self.cfg.lookback)?;
        let final_state = if self.cfg.bidirectional {
            let bwd_out = self.run_direction(g, params, "pose.lstm.pos.bwd", &selected, true)?;
            g.concat(&[fwd_out, bwd_out])?
        } else {
            fwd_out
        };
        Ok(StreamOutputs {
            final_state,
            alphas,
            selected,
        })
    }

    /// Plain recurrence over a fixed input sequence (no attention), with the
    /// lookback readout.
    fn run_direction(
        &self,
        g: &mut Graph<f64>,
        params: &ParameterSet<f64>,
        prefix: &str,
        inputs: &[NodeId],
        reversed: bool,
    ) -> Result<NodeId> {
        let d = self.cfg.lstm_hidden;
        let cell = LstmCell::from_params(g, params, prefix, d)?;
        let mut h = g.zeros(&[d]);
        let mut c = g.zeros(&[d]);
        let mut hidden = Vec::with_capacity(inputs.len());
        let iter: Box<dyn Iterator<Item = &NodeId>> = if reversed {
            Box::new(inputs.iter().rev())
        } else {
            Box::new(inputs.iter())
        };
        for &x in iter {
            let (h_next, c_next) = lstm_step(g, &cell, x, h, c)?;
            h = h_next;
            c = c_next;
            hidden.push(h_next);
        }
        lookback_output(g, &hidden, self.cfg.lookback)
    }

    /// Velocity recurrence over V_t = l_{t+1} - l_t; same machinery as the
    /// position stream but without attention and with its own parameters.
    pub fn run_velocity_stream(
        &self,
        g: &mut Graph<f64>,
        params: &ParameterSet<f64>,
        selected: &[NodeId],
    ) -> Result<NodeId> {
        let velocities = compute_velocities(g, selected)?;
        let fwd_out = self.run_direction(g, params, "pose.lstm.vel.fwd", &velocities, false)?;
        if self.cfg.bidirectional {
            let bwd_out = self.run_direction(g, params, "pose.lstm.vel.bwd", &velocities, true)?;
            g.concat(&[fwd_out, bwd_out]).map_err(PsrnError::from)
        } else {
            Ok(fwd_out)
        }
    }
}
