//! Bias-free ReLU multilayer perceptron: the plain reference path.
//!
//! The network is `y(0) = x`, `y(l) = relu(W(l) y(l-1))` for the hidden
//! layers, and a linear last layer `y(L) = W(L) y(L-1)`. There are no bias
//! terms; the masking protocol relies on every layer being a pure matrix
//! product followed by a positively-homogeneous activation. The loss is
//! squared error `L = 0.5 * ||y(L) - target||^2`.
//!
//! Everything in this module is the unmasked ground truth that the masked
//! path is later checked against, so it is written as directly as possible:
//! explicit forward pass, explicit backpropagation, explicit weighted
//! averaging. ReLU uses sub-gradient 0 at exactly 0, which lets the backward
//! pass read activation signs (`y > 0`) instead of storing pre-activations.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Vector};

/// Standard deviation of the seeded normal weight initialization.
pub const INIT_STD: f64 = 0.01;

/// Layer widths `n_0..n_L`, so a value of `(4, 8, 3)` means a 4-feature
/// input, one hidden layer of 8 units, and 3 outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LayerDims {
    sizes: Vec<usize>,
}

impl LayerDims {
    /// Validates at least one hidden layer (three or more widths) and no
    /// zero-width layer.
    pub fn new(sizes: Vec<usize>) -> Result<LayerDims> {
        if sizes.len() < 3 {
            return Err(Error::Usage(format!(
                "network needs at least one hidden layer, got widths {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Usage(format!("zero-width layer in {sizes:?}")));
        }
        Ok(LayerDims { sizes })
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Width of layer `l` for `l` in `0..=L`; layer 0 is the input.
    pub fn width(&self, l: usize) -> usize {
        self.sizes[l]
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.sizes
    }
}

impl TryFrom<Vec<usize>> for LayerDims {
    type Error = String;

    fn try_from(sizes: Vec<usize>) -> std::result::Result<Self, String> {
        LayerDims::new(sizes).map_err(|e| e.to_string())
    }
}

impl From<LayerDims> for Vec<usize> {
    fn from(d: LayerDims) -> Vec<usize> {
        d.sizes
    }
}

/// Full parameter set: `weights[l-1]` is `W(l)` with shape `n_l x n_{l-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct MlpParams {
    dims: LayerDims,
    weights: Vec<Matrix>,
}

/// Wire shadow of [`MlpParams`]; deserialization re-runs the shape checks of
/// [`MlpParams::from_weights`] so malformed payloads are rejected at the
/// boundary.
#[derive(Deserialize)]
struct RawParams {
    dims: LayerDims,
    weights: Vec<Matrix>,
}

impl TryFrom<RawParams> for MlpParams {
    type Error = String;

    fn try_from(raw: RawParams) -> std::result::Result<Self, String> {
        MlpParams::from_weights(raw.dims, raw.weights).map_err(|e| e.to_string())
    }
}

impl MlpParams {
    /// Seeded initialization with i.i.d. normal(0, [`INIT_STD`]) entries,
    /// filled layer by layer in row-major order so a given RNG stream always
    /// produces the same parameters.
    pub fn init_normal(dims: LayerDims, rng: &mut impl Rng) -> MlpParams {
        let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
        let weights = (1..=dims.depth())
            .map(|l| Matrix::from_fn(dims.width(l), dims.width(l - 1), |_, _| dist.sample(rng)))
            .collect();
        MlpParams { dims, weights }
    }

    /// Build from explicit per-layer matrices; shapes must match `dims`.
    pub fn from_weights(dims: LayerDims, weights: Vec<Matrix>) -> Result<MlpParams> {
        if weights.len() != dims.depth() {
            return Err(Error::shape(
                "params",
                format!("{} layers of weights for depth {}", weights.len(), dims.depth()),
            ));
        }
        for (idx, w) in weights.iter().enumerate() {
            let l = idx + 1;
            if w.rows() != dims.width(l) || w.cols() != dims.width(l - 1) {
                return Err(Error::shape(
                    "params",
                    format!(
                        "layer {l} is {}x{}, expected {}x{}",
                        w.rows(),
                        w.cols(),
                        dims.width(l),
                        dims.width(l - 1)
                    ),
                ));
            }
        }
        Ok(MlpParams { dims, weights })
    }

    pub fn dims(&self) -> &LayerDims {
        &self.dims
    }

    /// `W(l)` for `l` in `1..=L`.
    pub fn weight(&self, l: usize) -> &Matrix {
        &self.weights[l - 1]
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    /// Gradient-descent step `W(l) -= lr * g(l)` on every layer.
    pub fn apply_gradient(&self, grad: &GradientSet, lr: f64) -> Result<MlpParams> {
        let mut weights = Vec::with_capacity(self.weights.len());
        for (w, g) in self.weights.iter().zip(&grad.layers) {
            let mut next = w.clone();
            next.axpy(-lr, g)?;
            weights.push(next);
        }
        Ok(MlpParams { dims: self.dims.clone(), weights })
    }
}

/// One training example; `target` has the output width (one-hot for
/// classification, plain values for regression).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vector,
    pub target: Vector,
}

/// Per-layer loss gradients, same shapes as the weights they refer to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    layers: Vec<Matrix>,
}

impl GradientSet {
    pub fn zeros_like(params: &MlpParams) -> GradientSet {
        GradientSet {
            layers: params
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<Matrix>) -> GradientSet {
        GradientSet { layers }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Gradient for `W(l)`, `l` in `1..=L`.
    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l - 1]
    }

    pub fn layers(&self) -> &[Matrix] {
        &self.layers
    }

    /// In-place `self += c * other`, layer by layer.
    pub fn axpy(&mut self, c: f64, other: &GradientSet) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "gradient axpy",
                format!("{} vs {} layers", self.layers.len(), other.layers.len()),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(c, b)?;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> GradientSet {
        GradientSet { layers: self.layers.iter().map(|m| m.scale(c)).collect() }
    }

    /// Frobenius norm of each layer, in layer order.
    pub fn layer_norms(&self) -> Vec<f64> {
        self.layers.iter().map(|m| m.frob_norm()).collect()
    }
}

/// Hidden and output activations `y(1)..y(L)` of one forward pass. The input
/// `y(0) = x` is not stored; backward passes take it as an argument.
#[derive(Debug, Clone)]
pub struct Activations {
    layers: Vec<Vector>,
}

impl Activations {
    /// `y(l)` for `l` in `1..=L`.
    pub fn layer(&self, l: usize) -> &Vector {
        &self.layers[l - 1]
    }

    /// Network output `y(L)`.
    pub fn output(&self) -> &Vector {
        self.layers.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
}

/// Forward pass through the unmasked network.
pub fn forward_plain(params: &MlpParams, x: &Vector) -> Result<Activations> {
    let depth = params.dims.depth();
    let mut layers = Vec::with_capacity(depth);
    let mut current = x.clone();
    for l in 1..=depth {
        let pre = params.weight(l).matvec(&current)?;
        current = if l < depth { pre.relu() } else { pre };
        layers.push(current.clone());
    }
    Ok(Activations { layers })
}

/// Squared-error loss `0.5 * ||prediction - target||^2`.
pub fn loss_mse(prediction: &Vector, target: &Vector) -> Result<f64> {
    let diff = prediction.sub(target)?;
    Ok(0.5 * diff.dot(&diff)?)
}

/// Backpropagation through the unmasked network for one sample.
///
/// Uses the convention that ReLU contributes zero gradient at exactly zero,
/// so the active mask is `y(l) > 0`.
pub fn backward_plain(
    params: &MlpParams,
    acts: &Activations,
    x: &Vector,
    target: &Vector,
) -> Result<GradientSet> {
    backward_from_output_seed(params, acts, x, &acts.output().sub(target)?)
}

/// Backpropagate an arbitrary cotangent `seed = d(scalar)/d(y(L))` down the
/// network. With `seed = y(L) - target` this is exactly the loss gradient;
/// with a unit vector it yields the Jacobian slice of one output coordinate.
pub(crate) fn backward_from_output_seed(
    params: &MlpParams,
    acts: &Activations,
    x: &Vector,
    seed: &Vector,
) -> Result<GradientSet> {
    let depth = params.dims.depth();
    if seed.len() != params.dims.output_width() {
        return Err(Error::shape(
            "backward",
            format!("seed length {} vs output width {}", seed.len(), params.dims.output_width()),
        ));
    }
    let mut layers = vec![Matrix::zeros(0, 0); depth];
    // delta holds d(scalar)/dz for the layer currently being processed; the
    // last layer is linear, so its post- and pre-activation cotangents agree.
    let mut delta = seed.clone();
    for l in (1..=depth).rev() {
        let below: &Vector = if l == 1 { x } else { acts.layer(l - 1) };
        layers[l - 1] = Matrix::outer(&delta, below);
        if l > 1 {
            delta = gate_by_activity(&params.weight(l).matvec_t(&delta)?, acts.layer(l - 1));
        }
    }
    Ok(GradientSet { layers })
}

/// Backpropagate a cotangent seeded at *hidden* layer `h` (with respect to
/// that layer's post-activation). Layers above `h` get zero gradients; this
/// is how the gradient of the activation-sum scalar is computed.
pub(crate) fn backward_from_hidden_seed(
    params: &MlpParams,
    acts: &Activations,
    x: &Vector,
    h: usize,
    seed: &Vector,
) -> Result<GradientSet> {
    let depth = params.dims.depth();
    if h == 0 || h >= depth {
        return Err(Error::shape("backward", format!("hidden layer {h} of depth {depth}")));
    }
    if seed.len() != params.dims.width(h) {
        return Err(Error::shape(
            "backward",
            format!("seed length {} vs layer {h} width {}", seed.len(), params.dims.width(h)),
        ));
    }
    let mut layers: Vec<Matrix> = params
        .weights
        .iter()
        .map(|w| Matrix::zeros(w.rows(), w.cols()))
        .collect();
    let mut delta = gate_by_activity(seed, acts.layer(h));
    for l in (1..=h).rev() {
        let below: &Vector = if l == 1 { x } else { acts.layer(l - 1) };
        layers[l - 1] = Matrix::outer(&delta, below);
        if l > 1 {
            delta = gate_by_activity(&params.weight(l).matvec_t(&delta)?, acts.layer(l - 1));
        }
    }
    Ok(GradientSet { layers })
}

/// Zero every component whose ReLU unit is inactive (`y <= 0`).
fn gate_by_activity(v: &Vector, activations: &Vector) -> Vector {
    Vector::from_fn(v.len(), |i| {
        if activations.get(i) > 0.0 {
            v.get(i)
        } else {
            0.0
        }
    })
}

/// Average gradient and average loss over a shard of samples.
pub fn local_gradient_plain(
    params: &MlpParams,
    shard: &[Sample],
) -> Result<(GradientSet, f64)> {
    if shard.is_empty() {
        return Err(Error::Usage("cannot take a gradient over an empty shard".into()));
    }
    let mut grad = GradientSet::zeros_like(params);
    let mut loss_sum = 0.0;
    let weight = 1.0 / shard.len() as f64;
    for sample in shard {
        let acts = forward_plain(params, &sample.features)?;
        loss_sum += loss_mse(acts.output(), &sample.target)?;
        let g = backward_plain(params, &acts, &sample.features, &sample.target)?;
        grad.axpy(weight, &g)?;
    }
    Ok((grad, loss_sum * weight))
}

/// Fraction of samples whose predicted argmax matches the target argmax.
/// Meaningful for one-hot classification targets.
pub fn classification_accuracy(params: &MlpParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Usage("accuracy over an empty sample set".into()));
    }
    let argmax = |v: &Vector| {
        let mut best = 0;
        for i in 1..v.len() {
            if v.get(i) > v.get(best) {
                best = i;
            }
        }
        best
    };
    let mut hits = 0usize;
    for s in samples {
        let acts = forward_plain(params, &s.features)?;
        if argmax(acts.output()) == argmax(&s.target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Sample-count-weighted federated averaging update.
///
/// Aggregates `sum_k (n_k / n) g_k` over the submitted `(gradient, n_k)`
/// pairs in the order given, then applies one descent step with `lr`.
/// Returns the updated parameters together with the aggregated gradient so
/// callers can log or audit the update direction.
pub fn fedavg_step(
    params: &MlpParams,
    updates: &[(GradientSet, usize)],
    lr: f64,
) -> Result<(MlpParams, GradientSet)> {
    if updates.is_empty() {
        return Err(Error::Usage("fedavg_step needs at least one client update".into()));
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Usage("fedavg_step: all sample counts are zero".into()));
    }
    let mut agg = GradientSet::zeros_like(params);
    for (g, n) in updates {
        agg.axpy(*n as f64 / total as f64, g)?;
    }
    let next = params.apply_gradient(&agg, lr)?;
    Ok((next, agg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::central_diff_check;
    use crate::numeric::{rel_err_matrices, rel_err_scalar};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn const_params(dims: &[usize], value: f64) -> MlpParams {
        let dims = LayerDims::new(dims.to_vec()).unwrap();
        let weights = (1..=dims.depth())
            .map(|l| Matrix::from_fn(dims.width(l), dims.width(l - 1), |_, _| value))
            .collect();
        MlpParams::from_weights(dims, weights).unwrap()
    }

    fn vec2(data: &[f64]) -> Vector {
        Vector::from_data(data.to_vec()).unwrap()
    }

    #[test]
    fn forward_known_tiny_network() {
        // Dims (2,3,1), all weights 0.5, x = (1,2): each hidden unit sees
        // 0.5*1 + 0.5*2 = 1.5, and the output sums them scaled by 0.5.
        let params = const_params(&[2, 3, 1], 0.5);
        let acts = forward_plain(&params, &vec2(&[1.0, 2.0])).unwrap();
        assert_eq!(acts.layer(1).as_slice(), &[1.5, 1.5, 1.5]);
        assert_eq!(acts.output().as_slice(), &[2.25]);
        let loss = loss_mse(acts.output(), &vec2(&[0.0])).unwrap();
        assert!((loss - 2.53125).abs() < 1e-15);
    }

    #[test]
    fn backward_known_tiny_network() {
        // Hand-derived for the network above with target 0:
        //   output delta = 2.25
        //   g(2) = 2.25 * y(1)^T = [3.375, 3.375, 3.375]
        //   hidden delta = 0.5 * 2.25 = 1.125 per unit (all active)
        //   g(1) rows = 1.125 * (1, 2)
        let params = const_params(&[2, 3, 1], 0.5);
        let x = vec2(&[1.0, 2.0]);
        let target = vec2(&[0.0]);
        let acts = forward_plain(&params, &x).unwrap();
        let grad = backward_plain(&params, &acts, &x, &target).unwrap();
        let want_g2 = Matrix::from_rows(&[vec![3.375, 3.375, 3.375]]).unwrap();
        let want_g1 = Matrix::from_rows(&[
            vec![1.125, 2.25],
            vec![1.125, 2.25],
            vec![1.125, 2.25],
        ])
        .unwrap();
        assert!(rel_err_matrices(grad.layer(2), &want_g2) < 1e-15);
        assert!(rel_err_matrices(grad.layer(1), &want_g1) < 1e-15);
    }

    #[test]
    fn backward_matches_finite_differences_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7001);
        for round in 0..20 {
            let dims = LayerDims::new(vec![3, 5, 4, 2]).unwrap();
            let params = MlpParams::init_normal(dims, &mut rng);
            let x = Vector::from_fn(3, |_| rng.gen_range(-1.0..1.0));
            let target = Vector::from_fn(2, |_| rng.gen_range(-1.0..1.0));
            let acts = forward_plain(&params, &x).unwrap();
            let analytic = backward_plain(&params, &acts, &x, &target).unwrap();
            let report = central_diff_check(
                |p| {
                    let a = forward_plain(p, &x)?;
                    loss_mse(a.output(), &target)
                },
                |p| {
                    let a = forward_plain(p, &x)?;
                    Ok((1..p.dims().depth())
                        .flat_map(|l| a.layer(l).as_slice().iter().map(|&v| v > 0.0).collect::<Vec<_>>())
                        .collect())
                },
                &params,
                &analytic,
                // Probe step balances truncation against rounding noise: the
                // loss is O(1) while first-layer gradients are O(1e-4), so a
                // step much smaller than 1e-3 drowns them in f64 noise.
                1e-3,
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-6,
                "round {round}: fd mismatch {}",
                report.max_rel_err
            );
            assert!(report.checked > 0);
        }
    }

    #[test]
    fn exact_zero_preactivation_uses_zero_subgradient() {
        // W(1) = [[1, -1]] with x = (1, 1) puts the single hidden unit at
        // exactly 0. The sub-gradient convention zeroes the whole first
        // layer's gradient.
        let dims = LayerDims::new(vec![2, 1, 1]).unwrap();
        let params = MlpParams::from_weights(
            dims,
            vec![
                Matrix::from_rows(&[vec![1.0, -1.0]]).unwrap(),
                Matrix::from_rows(&[vec![3.0]]).unwrap(),
            ],
        )
        .unwrap();
        let x = vec2(&[1.0, 1.0]);
        let target = vec2(&[1.0]);
        let acts = forward_plain(&params, &x).unwrap();
        assert_eq!(acts.layer(1).as_slice(), &[0.0]);
        let grad = backward_plain(&params, &acts, &x, &target).unwrap();
        assert_eq!(grad.layer(1).data(), &[0.0, 0.0]);
    }

    #[test]
    fn local_gradient_is_mean_over_shard() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = LayerDims::new(vec![2, 4, 1]).unwrap();
        let params = MlpParams::init_normal(dims, &mut rng);
        let a = Sample { features: vec2(&[1.0, 0.5]), target: vec2(&[1.0]) };
        let b = Sample { features: vec2(&[-0.5, 2.0]), target: vec2(&[0.0]) };
        let (got, _) = local_gradient_plain(&params, &[a.clone(), b.clone()]).unwrap();

        let acts_a = forward_plain(&params, &a.features).unwrap();
        let g_a = backward_plain(&params, &acts_a, &a.features, &a.target).unwrap();
        let acts_b = forward_plain(&params, &b.features).unwrap();
        let g_b = backward_plain(&params, &acts_b, &b.features, &b.target).unwrap();
        let mut want = GradientSet::zeros_like(&params);
        want.axpy(0.5, &g_a).unwrap();
        want.axpy(0.5, &g_b).unwrap();
        for l in 1..=2 {
            assert!(rel_err_matrices(got.layer(l), want.layer(l)) < 1e-15);
        }
    }

    #[test]
    fn fedavg_weights_by_sample_count() {
        // Counts (1, 3) with gradients G and 3G average to 2.5 G.
        let params = const_params(&[2, 3, 1], 0.5);
        let base = {
            let x = vec2(&[1.0, 2.0]);
            let acts = forward_plain(&params, &x).unwrap();
            backward_plain(&params, &acts, &x, &vec2(&[0.0])).unwrap()
        };
        let tripled = base.scale(3.0);
        let (_, agg) =
            fedavg_step(&params, &[(base.clone(), 1), (tripled, 3)], 0.1).unwrap();
        let want = base.scale(2.5);
        for l in 1..=2 {
            assert!(rel_err_matrices(agg.layer(l), want.layer(l)) < 1e-15);
        }
    }

    #[test]
    fn single_client_fedavg_is_one_sgd_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = LayerDims::new(vec![3, 6, 2]).unwrap();
        let params = MlpParams::init_normal(dims, &mut rng);
        let shard: Vec<Sample> = (0..4)
            .map(|_| Sample {
                features: Vector::from_fn(3, |_| rng.gen_range(-1.0..1.0)),
                target: Vector::from_fn(2, |_| rng.gen_range(-1.0..1.0)),
            })
            .collect();
        let (grad, _) = local_gradient_plain(&params, &shard).unwrap();
        let (federated, _) = fedavg_step(&params, &[(grad.clone(), shard.len())], 0.2).unwrap();
        let central = params.apply_gradient(&grad, 0.2).unwrap();
        assert_eq!(federated, central);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let dims = LayerDims::new(vec![4, 8, 2]).unwrap();
        let a = MlpParams::init_normal(dims.clone(), &mut ChaCha8Rng::seed_from_u64(99));
        let b = MlpParams::init_normal(dims.clone(), &mut ChaCha8Rng::seed_from_u64(99));
        let c = MlpParams::init_normal(dims, &mut ChaCha8Rng::seed_from_u64(100));
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Spot-check the scale: all entries should be small.
        assert!(a.weight(1).max_abs() < 0.1);
    }

    #[test]
    fn loss_is_half_squared_distance() {
        let l = loss_mse(&vec2(&[2.0, -1.0]), &vec2(&[0.0, 1.0])).unwrap();
        assert!(rel_err_scalar(l, 4.0) < 1e-15);
    }

    #[test]
    fn dims_validation() {
        assert!(LayerDims::new(vec![3, 2]).is_err());
        assert!(LayerDims::new(vec![3, 0, 2]).is_err());
        let d = LayerDims::new(vec![3, 4, 2]).unwrap();
        assert_eq!(d.depth(), 2);
        assert_eq!((d.input_width(), d.output_width()), (3, 2));
    }

    #[test]
    fn empty_shard_is_rejected() {
        let params = const_params(&[2, 3, 1], 0.5);
        assert!(local_gradient_plain(&params, &[]).is_err());
    }
}
