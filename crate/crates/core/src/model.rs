//! MLP with an explicit backbone / linear-head split.
//!
//! The network is a stack of fully connected layers described by
//! `layer_sizes = [input, hidden…, d, C]`. Every layer except the final head
//! is followed by ReLU; the post-ReLU activation of the width-`d` layer is
//! the feature representation `z`, and the head maps `z` to logits with no
//! activation. Parameters live in one flat vector so cloning, averaging and
//! SGD act on plain slices; a layout maps (layer, weight/bias) to offset
//! ranges.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{matmul_2d, Tape, TensorId};
use rand::Rng;

/// Architecture plus initialization seed.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        let spec = Self { layer_sizes, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::Config(format!(
                "layer_sizes needs at least [input, feature, classes], got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer extents must be at least 1, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Width d of the feature representation z.
    pub fn feature_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 2]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Offsets of one linear layer inside the flat parameter vector.
/// Weights are stored row-major as `in_dim × out_dim`, then the bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

/// Partition of `[0, total)` into per-layer weight and bias ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub layers: Vec<LayerLayout>,
    pub total: usize,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ParamLayout {
    pub fn from_spec(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layer_sizes.len() - 1);
        let mut offset = 0;
        for w in spec.layer_sizes.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            layers.push(LayerLayout {
                in_dim,
                out_dim,
                weight_offset: offset,
                bias_offset: offset + in_dim * out_dim,
            });
            offset += in_dim * out_dim + out_dim;
        }
        Ok(Self {
            layers,
            total: offset,
            input_dim: spec.input_dim(),
            feature_dim: spec.feature_dim(),
            num_classes: spec.num_classes(),
        })
    }
}

/// Exact number of scalars in a model with the given architecture.
pub fn param_count(spec: &MlpSpec) -> Result<usize> {
    Ok(ParamLayout::from_spec(spec)?.total)
}

/// Flat parameter vector plus its layout.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

/// Glorot-uniform weights, zero biases, deterministic in the seed.
pub fn init(spec: &MlpSpec) -> Result<ModelParams> {
    let layout = ParamLayout::from_spec(spec)?;
    let mut values = vec![0.0; layout.total];
    let mut rng = rng::rng_from(spec.seed, &[rng::TAG_MODEL_INIT]);
    for layer in &layout.layers {
        let bound = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
        for w in &mut values[layer.weight_offset..layer.weight_offset + layer.in_dim * layer.out_dim] {
            *w = rng.gen_range(-bound..=bound);
        }
        // biases stay zero
    }
    Ok(ModelParams { layout, values })
}

/// Differentiable forward pass on a tape.
///
/// `params` must be a flat leaf of length `layout.total`; `batch` is an
/// `n × input_dim` matrix. Returns `(z, logits)`.
pub fn forward(
    tape: &mut Tape,
    layout: &ParamLayout,
    params: TensorId,
    batch: TensorId,
) -> Result<(TensorId, TensorId)> {
    let shape = tape.shape(batch).to_vec();
    if shape.len() != 2 || shape[1] != layout.input_dim {
        return Err(Error::Dimension(format!(
            "batch shape {:?} does not match input width {}",
            shape, layout.input_dim
        )));
    }
    if tape.shape(params) != [layout.total] {
        return Err(Error::Dimension(format!(
            "params shape {:?} does not match layout length {}",
            tape.shape(params),
            layout.total
        )));
    }
    let n = shape[0];
    let mut activation = batch;
    let mut z = None;
    let last = layout.layers.len() - 1;
    for (l, layer) in layout.layers.iter().enumerate() {
        let w = tape.view(params, layer.weight_offset, vec![layer.in_dim, layer.out_dim])?;
        let b = tape.view(params, layer.bias_offset, vec![layer.out_dim])?;
        let xw = tape.matmul(activation, w)?;
        let b_rows = tape.repeat_rows(b, n)?;
        let pre = tape.add(xw, b_rows)?;
        activation = if l < last { tape.relu(pre)? } else { pre };
        if l == last - 1 {
            z = Some(activation);
        }
    }
    Ok((z.expect("layout has at least two layers"), activation))
}

/// Tape-free forward pass for evaluation, prototype computation and dumps.
/// Follows the same kernel and operation order as [`forward`], so the two
/// paths agree bit for bit.
pub fn infer(params: &ModelParams, features: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let layout = &params.layout;
    if features.len() != n * layout.input_dim {
        return Err(Error::Dimension(format!(
            "feature buffer of length {} is not {} rows of width {}",
            features.len(),
            n,
            layout.input_dim
        )));
    }
    let mut activation = features.to_vec();
    let mut width = layout.input_dim;
    let mut z = Vec::new();
    let last = layout.layers.len() - 1;
    for (l, layer) in layout.layers.iter().enumerate() {
        let w = &params.values[layer.weight_offset..layer.weight_offset + layer.in_dim * layer.out_dim];
        let b = &params.values[layer.bias_offset..layer.bias_offset + layer.out_dim];
        let mut out = matmul_2d(&activation, w, n, width, layer.out_dim);
        for row in 0..n {
            for j in 0..layer.out_dim {
                out[row * layer.out_dim + j] += b[j];
            }
        }
        if l < last {
            for v in &mut out {
                *v = v.max(0.0);
            }
        }
        if l == last - 1 {
            z = out.clone();
        }
        activation = out;
        width = layer.out_dim;
    }
    Ok((z, activation))
}

/// Fraction of rows whose argmax logit equals the label. Ties resolve to the
/// lowest class index.
pub fn accuracy(params: &ModelParams, features: &[f64], labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Contract("accuracy of an empty dataset".into()));
    }
    let (_, logits) = infer(params, features, n)?;
    let classes = params.layout.num_classes;
    let mut hits = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let mut best = 0;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sizes: &[usize], seed: u64) -> MlpSpec {
        MlpSpec::new(sizes.to_vec(), seed).unwrap()
    }

    #[test]
    fn param_count_matches_layer_sums() {
        assert_eq!(param_count(&spec(&[2, 128, 3, 4], 0)).unwrap(), 787);
        assert_eq!(param_count(&spec(&[1, 1, 1, 1], 0)).unwrap(), 6);
    }

    #[test]
    fn param_count_monotone_in_hidden_width() {
        let base = param_count(&spec(&[4, 8, 3, 5], 0)).unwrap();
        let wider = param_count(&spec(&[4, 9, 3, 5], 0)).unwrap();
        assert!(wider > base);
    }

    #[test]
    fn layout_partitions_range_exactly() {
        let layout = ParamLayout::from_spec(&spec(&[2, 128, 3, 4], 0)).unwrap();
        let mut covered = vec![false; layout.total];
        for l in &layout.layers {
            // weights then bias are one contiguous block
            assert_eq!(l.bias_offset, l.weight_offset + l.in_dim * l.out_dim);
            for slot in &mut covered[l.weight_offset..l.bias_offset + l.out_dim] {
                assert!(!*slot);
                *slot = true;
            }
        }
        assert!(covered.into_iter().all(|c| c));
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let s = spec(&[2, 16, 3, 4], 42);
        let a = init(&s).unwrap();
        let b = init(&s).unwrap();
        assert_eq!(a.values, b.values);
        for layer in &a.layout.layers {
            for i in layer.bias_offset..layer.bias_offset + layer.out_dim {
                assert_eq!(a.values[i], 0.0);
            }
        }
        let bound = (6.0f64 / (2.0 + 16.0)).sqrt();
        for &w in &a.values[..2 * 16] {
            assert!(w.abs() <= bound);
        }
    }

    #[test]
    fn zero_weights_give_zero_outputs() {
        let s = spec(&[2, 4, 3, 2], 0);
        let layout = ParamLayout::from_spec(&s).unwrap();
        let params = ModelParams { layout, values: vec![0.0; param_count(&s).unwrap()] };
        let (z, logits) = infer(&params, &[1.0, -2.0], 1).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_batch_produces_empty_outputs() {
        let s = spec(&[2, 4, 3, 2], 1);
        let params = init(&s).unwrap();
        let (z, logits) = infer(&params, &[], 0).unwrap();
        assert!(z.is_empty() && logits.is_empty());

        let mut tape = Tape::new();
        let p = tape.leaf(params.values.clone(), vec![params.layout.total], true).unwrap();
        let batch = tape.constant(vec![], vec![0, 2]).unwrap();
        let (zt, lt) = forward(&mut tape, &params.layout, p, batch).unwrap();
        assert_eq!(tape.shape(zt), &[0, 3]);
        assert_eq!(tape.shape(lt), &[0, 2]);
    }

    #[test]
    fn hand_set_network_reproduces_hand_computed_activations() {
        // 2 -> 2 -> 2 with fixed weights, input (1, 1).
        // Hidden: relu(x·W1 + b1), W1 = [[1, -1], [2, 0.5]], b1 = (0.5, -0.25)
        //   pre = (1+2, -1+0.5) + b1 = (3.5, -0.75) -> z = (3.5, 0)
        // Head: z·W2 + b2, W2 = [[1, 0], [0, 1]], b2 = (0.1, 0.2)
        //   logits = (3.6, 0.2)
        let s = spec(&[2, 2, 2], 0);
        let layout = ParamLayout::from_spec(&s).unwrap();
        let values = vec![
            1.0, -1.0, 2.0, 0.5, // W1 row-major
            0.5, -0.25, // b1
            1.0, 0.0, 0.0, 1.0, // W2
            0.1, 0.2, // b2
        ];
        let params = ModelParams { layout: layout.clone(), values };
        let (z, logits) = infer(&params, &[1.0, 1.0], 1).unwrap();
        assert_eq!(z, vec![3.5, 0.0]);
        assert_eq!(logits, vec![3.6, 0.2]);
    }

    #[test]
    fn tape_forward_matches_infer_bitwise() {
        let s = spec(&[3, 8, 4, 3], 7);
        let params = init(&s).unwrap();
        let feats: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let (zi, li) = infer(&params, &feats, 5).unwrap();

        let mut tape = Tape::new();
        let p = tape.leaf(params.values.clone(), vec![params.layout.total], true).unwrap();
        let batch = tape.constant(feats, vec![5, 3]).unwrap();
        let (zt, lt) = forward(&mut tape, &params.layout, p, batch).unwrap();
        assert_eq!(tape.value(zt), &zi[..]);
        assert_eq!(tape.value(lt), &li[..]);
    }

    #[test]
    fn forward_rejects_wrong_batch_width() {
        let s = spec(&[3, 4, 3, 2], 0);
        let params = init(&s).unwrap();
        let mut tape = Tape::new();
        let p = tape.leaf(params.values.clone(), vec![params.layout.total], true).unwrap();
        let batch = tape.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let err = forward(&mut tape, &params.layout, p, batch).unwrap_err();
        assert_eq!(err.category(), "dimension");
    }
}
