//! Multi-layer perceptron over the tape: a named stack of affine layers with
//! a shared activation, optionally linear at the output.

use rand::Rng;

use crate::error::{NumError, Result};
use crate::graph::{Activation, Graph, NodeId};
use crate::params::ParameterSet;
use crate::scalar::Scalar;

/// Declarative description of an MLP; parameters live in a [`ParameterSet`]
/// under `{name}.l{i}.w` / `{name}.l{i}.b`.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub name: String,
    /// Layer widths, input first: `[in, h1, ..., out]`.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Whether the last layer is followed by the activation. Classifier
    /// heads end linear; relational heads end activated.
    pub final_activation: bool,
}

impl MlpSpec {
    pub fn new(name: &str, widths: &[usize], activation: Activation, final_activation: bool) -> Self {
        MlpSpec {
            name: name.to_string(),
            widths: widths.to_vec(),
            activation,
            final_activation,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    fn weight_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.w", self.name)
    }

    fn bias_name(&self, layer: usize) -> String {
        format!("{}.l{layer}.b", self.name)
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layer_count())
            .flat_map(|l| [self.weight_name(l), self.bias_name(l)])
            .collect()
    }

    /// Adds one weight/bias pair per layer to the set.
    pub fn init<T: Scalar>(&self, params: &mut ParameterSet<T>, rng: &mut impl Rng) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(NumError::Config(format!(
                "mlp {:?} needs at least an input and an output width, got {:?}",
                self.name, self.widths
            )));
        }
        for l in 0..self.layer_count() {
            params.add_weight(&self.weight_name(l), self.widths[l + 1], self.widths[l], rng)?;
            params.add_bias(&self.bias_name(l), self.widths[l + 1])?;
        }
        Ok(())
    }

    /// Sequential affine + activation per layer. Parameter shapes are
    /// validated against the declared widths.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParameterSet<T>,
        input: NodeId,
    ) -> Result<NodeId> {
        if self.widths.len() < 2 {
            return Err(NumError::Config(format!(
                "mlp {:?} needs at least an input and an output width",
                self.name
            )));
        }
        if g.shape(input) != [self.widths[0]] {
            return Err(NumError::Config(format!(
                "mlp {:?} expects input [{}], got {:?}",
                self.name,
                self.widths[0],
                g.shape(input)
            )));
        }
        let mut cur = input;
        for l in 0..self.layer_count() {
            let (n_out, n_in) = (self.widths[l + 1], self.widths[l]);
            let wname = self.weight_name(l);
            let bname = self.bias_name(l);
            let wt = params.require(&wname)?;
            if wt.shape() != [n_out, n_in] {
                return Err(NumError::Config(format!(
                    "mlp {:?} layer {l}: parameter {wname:?} has shape {:?}, expected [{n_out}, {n_in}]",
                    self.name,
                    wt.shape()
                )));
            }
            let w = g.param(params, &wname)?;
            let b = g.param(params, &bname)?;
            cur = g.affine(cur, w, b)?;
            if l + 1 < self.layer_count() || self.final_activation {
                cur = g.activation(cur, self.activation)?;
            }
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_parameters_annihilate() {
        let spec = MlpSpec::new("m", &[3, 4, 2], Activation::Relu, true);
        let mut params = ParameterSet::<f64>::new();
        // zero weights instead of random ones
        for l in 0..2 {
            let dims = if l == 0 { (4, 3) } else { (2, 4) };
            params
                .insert(
                    &format!("m.l{l}.w"),
                    crate::tensor::TensorBuffer::zeros(&[dims.0, dims.1]),
                )
                .unwrap();
            params
                .insert(&format!("m.l{l}.b"), crate::tensor::TensorBuffer::zeros(&[dims.0]))
                .unwrap();
        }
        let mut g = Graph::new();
        let x = g.leaf(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let y = spec.forward(&mut g, &params, x).unwrap();
        assert_eq!(g.values(y), &[0.0, 0.0]);
    }

    #[test]
    fn single_identity_layer_equals_affine() {
        let spec = MlpSpec::new("m", &[2, 2], Activation::Relu, false);
        let mut params = ParameterSet::<f64>::new();
        params
            .insert(
                "m.l0.w",
                crate::tensor::TensorBuffer::from_values(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap();
        params
            .insert("m.l0.b", crate::tensor::TensorBuffer::zeros(&[2]))
            .unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![0.25, -4.0]).unwrap();
        let y = spec.forward(&mut g, &params, x).unwrap();
        assert_eq!(g.values(y), &[0.25, -4.0]);
    }

    #[test]
    fn two_layer_matches_composed_oracle() {
        let spec = MlpSpec::new("m", &[2, 3, 2], Activation::Tanh, false);
        let mut params = ParameterSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        spec.init(&mut params, &mut rng).unwrap();
        let input = [0.4, -0.9];

        let mut g = Graph::new();
        let x = g.leaf(&[2], input.to_vec()).unwrap();
        let y = spec.forward(&mut g, &params, x).unwrap();

        // layer-by-layer oracle with plain loops
        let w0 = params.get("m.l0.w").unwrap().values();
        let b0 = params.get("m.l0.b").unwrap().values();
        let mut h = [0.0f64; 3];
        for i in 0..3 {
            let mut acc = b0[i];
            for j in 0..2 {
                acc += w0[i * 2 + j] * input[j];
            }
            h[i] = acc.tanh();
        }
        let w1 = params.get("m.l1.w").unwrap().values();
        let b1 = params.get("m.l1.b").unwrap().values();
        for i in 0..2 {
            let mut acc = b1[i];
            for j in 0..3 {
                acc += w1[i * 3 + j] * h[j];
            }
            assert!((g.values(y)[i] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn width_param_mismatch_is_config_error() {
        let spec = MlpSpec::new("m", &[2, 3], Activation::Relu, true);
        let mut params = ParameterSet::<f64>::new();
        params
            .insert("m.l0.w", crate::tensor::TensorBuffer::zeros(&[4, 2]))
            .unwrap();
        params
            .insert("m.l0.b", crate::tensor::TensorBuffer::zeros(&[4]))
            .unwrap();
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![0.0, 0.0]).unwrap();
        let err = spec.forward(&mut g, &params, x).unwrap_err();
        assert!(matches!(err, NumError::Config(_)));
    }
}
