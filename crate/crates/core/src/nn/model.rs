use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::linalg::{dot, softmax, Matrix};

const MODEL_MAGIC: &[u8; 4] = b"ZMLP";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Relu => 1,
            Activation::Identity => 0,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

/// Dense layer `a = act(W x + b)` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::Shape {
                context: "layer bias length",
                expected: weights.rows(),
                actual: bias.len(),
            });
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Domain("layer bias is not finite".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Parameter gradients, one `(dW, db)` pair per layer, same layout as the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ParamGradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.data().len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }
}

/// Feed-forward classifier. The layer stack produces logits; probabilities come from a
/// separate softmax so that both stay accessible.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    model_id: String,
    input_dim: usize,
    class_count: usize,
    layers: Vec<Layer>,
    train_accuracy: Option<f64>,
}

impl MlpModel {
    /// Validates that layer dimensions chain and that the last layer is a linear logit layer.
    pub fn new(model_id: impl Into<String>, layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Config("model needs at least one layer".into()))?;
        let input_dim = first.input_dim();
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape {
                    context: "adjacent layer dimensions",
                    expected: pair[0].output_dim(),
                    actual: pair[1].input_dim(),
                });
            }
        }
        let last = layers.last().unwrap();
        if last.activation != Activation::Identity {
            return Err(Error::Config(
                "final layer must use the identity activation".into(),
            ));
        }
        if input_dim == 0 || last.output_dim() < 2 {
            return Err(Error::Config(
                "model needs input_dim >= 1 and at least 2 classes".into(),
            ));
        }
        Ok(Self {
            model_id: model_id.into(),
            input_dim,
            class_count: last.output_dim(),
            layers,
            train_accuracy: None,
        })
    }

    /// He-initialised ReLU network with the given hidden widths and zero biases.
    pub fn init<R: Rng>(
        model_id: impl Into<String>,
        input_dim: usize,
        hidden: &[usize],
        class_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(class_count);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            if fan_in == 0 || fan_out == 0 {
                return Err(Error::Config("layer widths must be positive".into()));
            }
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            let activation = if i + 2 == widths.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Layer::new(
                Matrix::new(fan_out, fan_in, data)?,
                vec![0.0; fan_out],
                activation,
            )?);
        }
        Self::new(model_id, layers)
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn set_model_id(&mut self, id: impl Into<String>) {
        self.model_id = id.into();
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Hidden layer widths, e.g. `[32, 16]`.
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::output_dim)
            .collect()
    }

    /// Training-set accuracy recorded by [`crate::nn::train`], if any.
    pub fn train_accuracy(&self) -> Option<f64> {
        self.train_accuracy
    }

    pub(crate) fn set_train_accuracy(&mut self, acc: f64) {
        self.train_accuracy = Some(acc);
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::Shape {
                context: "model input",
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.class_count {
            return Err(Error::Domain(format!(
                "label {label} out of range for {} classes",
                self.class_count
            )));
        }
        Ok(())
    }

    /// Pre-activations of every layer; the last entry holds the logits.
    fn pre_activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for layer in &self.layers {
            let z: Vec<f64> = layer
                .weights
                .iter_rows()
                .zip(&layer.bias)
                .map(|(w, b)| dot(w, &a) + b)
                .collect();
            a = z.iter().map(|&v| layer.activation.apply(v)).collect();
            zs.push(z);
        }
        zs
    }

    /// Raw logits for one input. Panics if `x.len() != input_dim`.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim, "model input length");
        self.pre_activations(x).pop().unwrap()
    }

    /// Class probabilities for one input. Panics if `x.len() != input_dim`.
    pub fn predict_proba_row(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::linalg::argmax(&self.logits(x))
    }

    /// Softmax probabilities for every row of `batch`.
    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        if batch.cols() != self.input_dim {
            return Err(Error::Shape {
                context: "batch columns",
                expected: self.input_dim,
                actual: batch.cols(),
            });
        }
        let mut data = Vec::with_capacity(batch.rows() * self.class_count);
        for row in batch.iter_rows() {
            data.extend(self.predict_proba_row(row));
        }
        Matrix::new(batch.rows(), self.class_count, data)
    }

    /// Cross-entropy of the softmax output against `label`.
    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        self.check_input(x)?;
        self.check_label(label)?;
        Ok(cross_entropy(&self.logits(x), label))
    }

    /// Exact gradient of the cross-entropy loss with respect to the input.
    pub fn input_gradient(&self, x: &[f64], label: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_label(label)?;
        Ok(self.backward(x, label, None).1)
    }

    /// Loss and its gradient with respect to all weights and biases.
    pub fn param_gradients(&self, x: &[f64], label: usize) -> Result<(f64, ParamGradients)> {
        self.check_input(x)?;
        self.check_label(label)?;
        let mut g = ParamGradients::zeros_like(self);
        let (loss, _) = self.backward(x, label, Some(&mut g));
        Ok((loss, g))
    }

    /// Backpropagation. Returns `(loss, dL/dx)` and accumulates parameter gradients into
    /// `acc` when given.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        label: usize,
        mut acc: Option<&mut ParamGradients>,
    ) -> (f64, Vec<f64>) {
        let zs = self.pre_activations(x);
        let logits = zs.last().unwrap();
        let loss = cross_entropy(logits, label);
        let mut delta = softmax(logits);
        delta[label] -= 1.0;

        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if let Some(g) = acc.as_deref_mut() {
                let (dw, db) = &mut g.layers[l];
                let cols = layer.input_dim();
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    db[o] += d;
                    let row = &mut dw[o * cols..(o + 1) * cols];
                    if l == 0 {
                        for (w, &a) in row.iter_mut().zip(x) {
                            *w += d * a;
                        }
                    } else {
                        let prev = &self.layers[l - 1];
                        for (w, &z) in row.iter_mut().zip(&zs[l - 1]) {
                            *w += d * prev.activation.apply(z);
                        }
                    }
                }
            }
            let mut back = layer.weights.t_matvec(&delta);
            if l > 0 {
                let prev = &self.layers[l - 1];
                for (b, &z) in back.iter_mut().zip(&zs[l - 1]) {
                    *b *= prev.activation.derivative(z);
                }
            }
            delta = back;
        }
        (loss, delta)
    }

    /// Serializes to the versioned binary model format (all floats little-endian f64).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::with_header(MODEL_MAGIC, MODEL_VERSION);
        e.str(&self.model_id);
        e.usize(self.input_dim);
        e.usize(self.class_count);
        match self.train_accuracy {
            Some(a) => {
                e.u8(1);
                e.f64(a);
            }
            None => e.u8(0),
        }
        e.usize(self.layers.len());
        for layer in &self.layers {
            e.usize(layer.input_dim());
            e.usize(layer.output_dim());
            e.u8(layer.activation.code());
            e.f64s(layer.weights.data());
            e.f64s(&layer.bias);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::with_header(bytes, MODEL_MAGIC, MODEL_VERSION)?;
        let model_id = d.str()?;
        let input_dim = d.usize()?;
        let class_count = d.usize()?;
        let train_accuracy = match d.u8()? {
            0 => None,
            1 => Some(d.f64()?),
            t => return Err(Error::Format(format!("bad accuracy tag {t}"))),
        };
        let n_layers = d.len(17)?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let fan_in = d.usize()?;
            let fan_out = d.usize()?;
            let act = Activation::from_code(d.u8()?)?;
            let w = d.f64s(fan_in.saturating_mul(fan_out))?;
            let b = d.f64s(fan_out)?;
            layers.push(Layer::new(Matrix::new(fan_out, fan_in, w)?, b, act)?);
        }
        d.finish()?;
        let mut model = Self::new(model_id, layers)?;
        if model.input_dim != input_dim || model.class_count != class_count {
            return Err(Error::Format(
                "header dimensions disagree with layer stack".into(),
            ));
        }
        model.train_accuracy = train_accuracy;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = codec::read_file(path)?;
        codec::in_file(path, Self::from_bytes(&bytes))
    }
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    fn linear(w: Vec<f64>, rows: usize, cols: usize, b: Vec<f64>) -> MlpModel {
        MlpModel::new(
            "lin",
            vec![Layer::new(Matrix::new(rows, cols, w).unwrap(), b, Activation::Identity).unwrap()],
        )
        .unwrap()
    }

    #[test]
    fn zero_model_gives_uniform_probabilities() {
        let m = linear(vec![0.0; 6], 2, 3, vec![0.0, 0.0]);
        let out = m
            .forward(&Matrix::new(2, 3, vec![0.3, 0.1, 0.9, 1.0, 0.0, 0.5]).unwrap())
            .unwrap();
        for r in out.iter_rows() {
            assert_eq!(r, &[0.5, 0.5]);
        }
    }

    #[test]
    fn identity_layer_softmax_hand_value() {
        let m = linear(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0, 0.0]);
        let p = m.forward(&Matrix::new(1, 2, vec![2.0, 0.0]).unwrap()).unwrap();
        // e^2 / (e^2 + 1)
        assert!((p.get(0, 0) - 0.8808).abs() < 1e-3);
        assert!((p.get(0, 1) - 0.1192).abs() < 1e-3);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = linear(vec![0.0; 6], 2, 3, vec![0.0, 0.0]);
        assert!(matches!(
            m.forward(&Matrix::zeros(1, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn linear_gradient_closed_form() {
        let w = vec![0.5, -1.0, 2.0, 0.3, 0.7, -0.2];
        let m = linear(w.clone(), 2, 3, vec![0.1, -0.1]);
        let x = [0.2, 0.9, 0.4];
        let p = m.predict_proba_row(&x);
        let y = 1;
        let g = m.input_gradient(&x, y).unwrap();
        for j in 0..3 {
            let expect: f64 = (0..2)
                .map(|k| w[k * 3 + j] * (p[k] - if k == y { 1.0 } else { 0.0 }))
                .sum();
            assert!((g[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn dead_input_has_zero_gradient() {
        let mut r = rng(3);
        let mut m = MlpModel::init("m", 4, &[5], 3, &mut r).unwrap();
        let w = &mut m.layers_mut()[0].weights;
        for o in 0..5 {
            w.set(o, 2, 0.0);
        }
        let g = m.input_gradient(&[0.1, 0.5, 0.7, 0.2], 0).unwrap();
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn label_out_of_range_is_domain_error() {
        let m = linear(vec![0.0; 6], 2, 3, vec![0.0, 0.0]);
        assert!(matches!(
            m.input_gradient(&[0.0; 3], 2),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let mut r = rng(11);
        let m = MlpModel::init("m", 3, &[4], 3, &mut r).unwrap();
        let x = [0.3, 0.8, 0.1];
        let (_, g) = m.param_gradients(&x, 2).unwrap();
        let h = 1e-6;
        for l in 0..m.layers().len() {
            for i in 0..m.layers()[l].weights.data().len() {
                let (r0, c0) = (i / m.layers()[l].input_dim(), i % m.layers()[l].input_dim());
                let mut plus = m.clone();
                let v = plus.layers()[l].weights.get(r0, c0);
                plus.layers_mut()[l].weights.set(r0, c0, v + h);
                let mut minus = m.clone();
                minus.layers_mut()[l].weights.set(r0, c0, v - h);
                let fd = (plus.loss(&x, 2).unwrap() - minus.loss(&x, 2).unwrap()) / (2.0 * h);
                assert!((fd - g.layers[l].0[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn final_layer_must_be_identity() {
        let l = Layer::new(Matrix::zeros(2, 2), vec![0.0; 2], Activation::Relu).unwrap();
        assert!(matches!(MlpModel::new("x", vec![l]), Err(Error::Config(_))));
    }

    #[test]
    fn serialization_round_trip_is_bit_exact() {
        let mut r = rng(5);
        let mut m = MlpModel::init("round-trip", 6, &[5, 4], 3, &mut r).unwrap();
        m.set_train_accuracy(0.75);
        let bytes = m.to_bytes();
        let back = MlpModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), bytes);
        assert!(MlpModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
