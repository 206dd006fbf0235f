//! Client-side computation on masked weights.
//!
//! A client receives a [`MaskedModel`] and runs the *same* forward and
//! backward passes it would run on plain weights; the masking is invisible
//! to the numerics. On top of the masked loss gradient it derives the
//! correction terms the server needs to undo the additive mask's influence:
//!
//! - For every output coordinate `i` there is a correction slice
//!   `sigma_i(l) = act_sum * J_i(l) + (ym_i - t_i) * A(l)`, where `J_i(l)`
//!   is the Jacobian of masked output `i` with respect to masked layer `l`,
//!   `A(l)` is the gradient of the activation sum `act_sum` (the sum of the
//!   last hidden layer's masked activations), and `ym` is the masked
//!   prediction. The client cannot use these slices itself — combining them
//!   requires the secret group coefficients — so it uploads them folded per
//!   public group: `corr(l)_s = sum_{i in group s} base_i * sigma_i(l)`.
//! - The quadratic correction `quad(l) = act_sum * A(l)` cancels the
//!   offset's self-interaction during recovery.
//!
//! The same folding trick recovers the true training loss: the client
//! reports its masked loss, the mean squared activation sum, and per-group
//! residual terms, from which the server reconstructs the plain loss
//! exactly. Every uploaded quantity is computable from broadcast data alone.
//!
//! Cost per sample: one forward pass and `n_out + 2` backward passes (loss,
//! one per output coordinate, one for the activation sum).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    backward_from_hidden_seed, backward_from_output_seed, forward_plain, local_gradient_plain,
    loss_mse, Activations, GradientSet, MlpParams, Sample,
};
use crate::perturb::MaskedModel;
use crate::tensor::{Matrix, Vector};

/// Activations of a masked forward pass plus the activation sum the
/// correction terms are built around.
#[derive(Debug, Clone)]
pub struct MaskedActivations {
    acts: Activations,
    act_sum: f64,
}

impl MaskedActivations {
    /// Masked activation vector of layer `l`, `l` in `1..=L`.
    pub fn layer(&self, l: usize) -> &Vector {
        self.acts.layer(l)
    }

    /// Masked prediction.
    pub fn output(&self) -> &Vector {
        self.acts.output()
    }

    /// Sum of the last hidden layer's masked activations.
    pub fn act_sum(&self) -> f64 {
        self.act_sum
    }
}

/// Loss bookkeeping a client uploads so the server can reconstruct the true
/// training loss without seeing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean masked loss over the shard.
    pub masked_loss: f64,
    /// Mean squared activation sum over the shard.
    pub act_sum_sq: f64,
    /// Per-group mean of `act_sum * sum_{i in group} base_i * (ym_i - t_i)`.
    pub group_terms: Vec<f64>,
}

/// Everything one client sends back for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: u64,
    pub round_id: u64,
    /// Number of local samples behind this update; the server's aggregation
    /// weight.
    pub sample_count: u64,
    /// Mean masked gradient per layer.
    pub grad: Vec<Matrix>,
    /// Mean folded correction matrices, indexed `[layer][group]`.
    pub group_corrections: Vec<Vec<Matrix>>,
    /// Mean quadratic correction per layer.
    pub sum_corrections: Vec<Matrix>,
    pub loss: LossReport,
}

impl ClientUpdate {
    /// Shape consistency against the round's masked model.
    pub fn validate(&self, model: &MaskedModel) -> Result<()> {
        let depth = model.dims.depth();
        let m = model.group_count();
        if self.grad.len() != depth
            || self.group_corrections.len() != depth
            || self.sum_corrections.len() != depth
        {
            return Err(Error::Protocol(format!(
                "client {} update does not cover all {depth} layers",
                self.client_id
            )));
        }
        for l in 1..=depth {
            let want = model.layer(l);
            let idx = l - 1;
            let shapes_ok = |mat: &Matrix| mat.rows() == want.rows() && mat.cols() == want.cols();
            if !shapes_ok(&self.grad[idx])
                || !shapes_ok(&self.sum_corrections[idx])
                || self.group_corrections[idx].len() != m
                || !self.group_corrections[idx].iter().all(shapes_ok)
            {
                return Err(Error::Protocol(format!(
                    "client {} update has wrong shapes at layer {l}",
                    self.client_id
                )));
            }
        }
        if self.loss.group_terms.len() != m {
            return Err(Error::Protocol(format!(
                "client {} loss report has {} group terms, expected {m}",
                self.client_id,
                self.loss.group_terms.len()
            )));
        }
        if self.sample_count == 0 {
            return Err(Error::Protocol(format!(
                "client {} reported zero samples",
                self.client_id
            )));
        }
        Ok(())
    }
}

/// Internal view of the masked model as an ordinary parameter set, so the
/// plain forward/backward machinery runs on it unchanged.
fn as_params(model: &MaskedModel) -> Result<MlpParams> {
    MlpParams::from_weights(model.dims.clone(), model.layers.clone())
}

/// Forward pass through the masked network.
pub fn forward_masked(model: &MaskedModel, x: &Vector) -> Result<MaskedActivations> {
    let params = as_params(model)?;
    let acts = forward_plain(&params, x)?;
    let act_sum = acts.layer(model.dims.depth() - 1).sum();
    Ok(MaskedActivations { acts, act_sum })
}

/// Squared-error loss of the masked prediction.
pub fn masked_loss(acts: &MaskedActivations, target: &Vector) -> Result<f64> {
    loss_mse(acts.output(), target)
}

/// Gradient of the masked loss with respect to the masked weights.
pub fn backward_masked(
    model: &MaskedModel,
    acts: &MaskedActivations,
    x: &Vector,
    target: &Vector,
) -> Result<GradientSet> {
    let params = as_params(model)?;
    backward_from_output_seed(&params, &acts.acts, x, &acts.output().sub(target)?)
}

/// The full per-output correction slices for one sample, indexed
/// `[output][layer]`. Production clients upload only the group-folded form;
/// this stack exists for the verification battery, which checks the folded
/// uploads against it.
pub struct CorrectionStack {
    pub per_output: Vec<GradientSet>,
}

/// Per-sample correction terms in upload form.
pub struct SampleCorrections {
    /// Folded correction matrices, indexed `[layer][group]`.
    pub group: Vec<Vec<Matrix>>,
    /// Quadratic correction per layer.
    pub quad: Vec<Matrix>,
    /// Per-group residual terms for the loss report (before averaging).
    pub loss_terms: Vec<f64>,
}

/// Jacobian machinery shared by the stack and fold entry points.
struct CorrectionBasis {
    /// `J_i` per output coordinate.
    per_output_jac: Vec<GradientSet>,
    /// Gradient of the activation sum.
    act_sum_grad: GradientSet,
}

fn correction_basis(
    model: &MaskedModel,
    acts: &MaskedActivations,
    x: &Vector,
) -> Result<CorrectionBasis> {
    let params = as_params(model)?;
    let n_out = model.dims.output_width();
    let last_hidden = model.dims.depth() - 1;
    let per_output_jac = (0..n_out)
        .map(|i| {
            let seed = Vector::from_fn(n_out, |j| if i == j { 1.0 } else { 0.0 });
            backward_from_output_seed(&params, &acts.acts, x, &seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let ones = Vector::from_fn(model.dims.width(last_hidden), |_| 1.0);
    let act_sum_grad = backward_from_hidden_seed(&params, &acts.acts, x, last_hidden, &ones)?;
    Ok(CorrectionBasis { per_output_jac, act_sum_grad })
}

/// Materialize every per-output correction slice for one sample.
pub fn correction_stack(
    model: &MaskedModel,
    acts: &MaskedActivations,
    x: &Vector,
    target: &Vector,
) -> Result<CorrectionStack> {
    let basis = correction_basis(model, acts, x)?;
    let residual = acts.output().sub(target)?;
    let per_output = (0..model.dims.output_width())
        .map(|i| {
            let mut slice = basis.per_output_jac[i].scale(acts.act_sum());
            slice.axpy(residual.get(i), &basis.act_sum_grad)?;
            Ok(slice)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CorrectionStack { per_output })
}

/// Correction terms for one sample, folded per public group.
pub fn sample_corrections(
    model: &MaskedModel,
    acts: &MaskedActivations,
    x: &Vector,
    target: &Vector,
) -> Result<SampleCorrections> {
    let basis = correction_basis(model, acts, x)?;
    let residual = acts.output().sub(target)?;
    let depth = model.dims.depth();
    let m = model.group_count();

    let mut group: Vec<Vec<Matrix>> = (1..=depth)
        .map(|l| {
            let w = model.layer(l);
            vec![Matrix::zeros(w.rows(), w.cols()); m]
        })
        .collect();
    let mut loss_terms = vec![0.0; m];
    for s in 0..m {
        // Folded residual sum_{i in group} base_i * (ym_i - t_i); reused by
        // the loss report.
        let mut folded_residual = 0.0;
        for &i in model.partition.group(s) {
            let base = model.offset_base.get(i);
            folded_residual += base * residual.get(i);
            for l in 1..=depth {
                group[l - 1][s].axpy(acts.act_sum() * base, basis.per_output_jac[i].layer(l))?;
            }
        }
        for l in 1..=depth {
            group[l - 1][s].axpy(folded_residual, basis.act_sum_grad.layer(l))?;
        }
        loss_terms[s] = acts.act_sum() * folded_residual;
    }
    let quad = (1..=depth)
        .map(|l| basis.act_sum_grad.layer(l).scale(acts.act_sum()))
        .collect();
    Ok(SampleCorrections { group, quad, loss_terms })
}

/// What one client sends back when the round runs without masking: just the
/// mean local gradient, its loss, and the aggregation weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainUpdate {
    pub client_id: u64,
    pub round_id: u64,
    pub sample_count: u64,
    pub grad: Vec<Matrix>,
    pub loss: f64,
}

impl PlainUpdate {
    /// Shape consistency against the broadcast parameters.
    pub fn validate(&self, params: &MlpParams) -> Result<()> {
        let depth = params.dims().depth();
        if self.grad.len() != depth {
            return Err(Error::Protocol(format!(
                "client {} update does not cover all {depth} layers",
                self.client_id
            )));
        }
        for l in 1..=depth {
            let want = params.weight(l);
            let got = &self.grad[l - 1];
            if got.rows() != want.rows() || got.cols() != want.cols() {
                return Err(Error::Protocol(format!(
                    "client {} update has wrong shapes at layer {l}",
                    self.client_id
                )));
            }
        }
        if !self.loss.is_finite() {
            return Err(Error::Protocol(format!(
                "client {} reported a non-finite loss",
                self.client_id
            )));
        }
        if self.sample_count == 0 {
            return Err(Error::Protocol(format!(
                "client {} reported zero samples",
                self.client_id
            )));
        }
        Ok(())
    }
}

/// Run the client computation for one unmasked round over a shard.
pub fn local_update_plain(
    params: &MlpParams,
    client_id: u64,
    round_id: u64,
    shard: &[Sample],
) -> Result<PlainUpdate> {
    if shard.is_empty() {
        return Err(Error::Usage(format!("client {client_id} has an empty shard")));
    }
    let (grad, loss) = local_gradient_plain(params, shard)?;
    Ok(PlainUpdate {
        client_id,
        round_id,
        sample_count: shard.len() as u64,
        grad: grad.layers().to_vec(),
        loss,
    })
}

/// Run the complete client computation for one round over a shard.
pub fn local_update(
    model: &MaskedModel,
    client_id: u64,
    round_id: u64,
    shard: &[Sample],
) -> Result<ClientUpdate> {
    local_update_inner(model, client_id, round_id, shard, false)
}

/// Same as [`local_update`] but with the per-group correction matrices
/// deliberately reported in reversed group order. This is a planted bug for
/// the test suite: it proves the recovery equality genuinely depends on
/// correct group alignment (with two or more groups the reversed order must
/// break the plain-vs-recovered match). Never called by production paths.
#[doc(hidden)]
pub fn local_update_with_swapped_groups(
    model: &MaskedModel,
    client_id: u64,
    round_id: u64,
    shard: &[Sample],
) -> Result<ClientUpdate> {
    local_update_inner(model, client_id, round_id, shard, true)
}

fn local_update_inner(
    model: &MaskedModel,
    client_id: u64,
    round_id: u64,
    shard: &[Sample],
    swap_groups: bool,
) -> Result<ClientUpdate> {
    model.validate()?;
    if shard.is_empty() {
        return Err(Error::Usage(format!("client {client_id} has an empty shard")));
    }
    let depth = model.dims.depth();
    let m = model.group_count();
    let weight = 1.0 / shard.len() as f64;

    let zeros_like = |l: usize| {
        let w = model.layer(l);
        Matrix::zeros(w.rows(), w.cols())
    };
    let mut grad: Vec<Matrix> = (1..=depth).map(zeros_like).collect();
    let mut group_corrections: Vec<Vec<Matrix>> =
        (1..=depth).map(|l| vec![zeros_like(l); m]).collect();
    let mut sum_corrections: Vec<Matrix> = (1..=depth).map(zeros_like).collect();
    let mut loss = LossReport { masked_loss: 0.0, act_sum_sq: 0.0, group_terms: vec![0.0; m] };

    for sample in shard {
        let acts = forward_masked(model, &sample.features)?;
        loss.masked_loss += weight * masked_loss(&acts, &sample.target)?;
        loss.act_sum_sq += weight * acts.act_sum() * acts.act_sum();
        let g = backward_masked(model, &acts, &sample.features, &sample.target)?;
        let corrections = sample_corrections(model, &acts, &sample.features, &sample.target)?;
        for l in 0..depth {
            grad[l].axpy(weight, g.layer(l + 1))?;
            sum_corrections[l].axpy(weight, &corrections.quad[l])?;
            for (acc, corr) in group_corrections[l].iter_mut().zip(&corrections.group[l]) {
                acc.axpy(weight, corr)?;
            }
        }
        for s in 0..m {
            loss.group_terms[s] += weight * corrections.loss_terms[s];
        }
    }
    if swap_groups {
        for per_layer in &mut group_corrections {
            per_layer.reverse();
        }
    }
    Ok(ClientUpdate {
        client_id,
        round_id,
        sample_count: shard.len() as u64,
        grad,
        group_corrections,
        sum_corrections,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{backward_plain, LayerDims};
    use crate::numeric::{rel_err_matrices, rel_err_scalar, rel_err_vectors};
    use crate::perturb::{mask_model, sample_secret, NoiseConfig, Partition, RoundSecret};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar chain fixture: dims (1,1,1), W = ([[2]], [[3]]), hidden scale
    /// 4, coefficient 2, base 0.5, input 1, target 0. Every downstream value
    /// is hand-derived in the assertions.
    fn scalar_fixture() -> (MlpParams, RoundSecret) {
        let dims = LayerDims::new(vec![1, 1, 1]).unwrap();
        let params = MlpParams::from_weights(
            dims.clone(),
            vec![
                Matrix::from_rows(&[vec![2.0]]).unwrap(),
                Matrix::from_rows(&[vec![3.0]]).unwrap(),
            ],
        )
        .unwrap();
        let secret = RoundSecret::from_parts(
            dims,
            vec![Vector::from_data(vec![4.0]).unwrap()],
            Vector::from_data(vec![0.5]).unwrap(),
            Partition::from_groups(vec![vec![0]]).unwrap(),
            vec![2.0],
        )
        .unwrap();
        (params, secret)
    }

    fn random_instance(
        dims: &[usize],
        m: usize,
        rng: &mut ChaCha8Rng,
    ) -> (MlpParams, RoundSecret, MaskedModel, Vector, Vector) {
        let dims = LayerDims::new(dims.to_vec()).unwrap();
        let params = MlpParams::init_normal(dims.clone(), rng);
        let secret = sample_secret(&dims, m, &NoiseConfig::default(), rng).unwrap();
        let masked = mask_model(&params, &secret).unwrap();
        let x = Vector::from_fn(dims.input_width(), |_| rng.gen_range(-1.0..1.0));
        let target = Vector::from_fn(dims.output_width(), |_| rng.gen_range(-1.0..1.0));
        (params, secret, masked, x, target)
    }

    #[test]
    fn masked_forward_hand_values() {
        // Masked weights: 4*2 = 8 and 3/4 + 2*0.5 = 1.75. Forward from
        // x = 1: hidden 8 (four times the plain 2), act_sum 8, output
        // 1.75 * 8 = 14 = plain 6 + 8 * (2 * 0.5).
        let (params, secret) = scalar_fixture();
        let masked = mask_model(&params, &secret).unwrap();
        assert_eq!(masked.layer(1).data(), &[8.0]);
        assert_eq!(masked.layer(2).data(), &[1.75]);
        let x = Vector::from_data(vec![1.0]).unwrap();
        let acts = forward_masked(&masked, &x).unwrap();
        assert_eq!(acts.layer(1).as_slice(), &[8.0]);
        assert_eq!(acts.act_sum(), 8.0);
        assert_eq!(acts.output().as_slice(), &[14.0]);
        let target = Vector::from_data(vec![0.0]).unwrap();
        assert_eq!(masked_loss(&acts, &target).unwrap(), 98.0);
    }

    #[test]
    fn masked_backward_and_corrections_hand_values() {
        // Hand-derived for the scalar fixture (target 0):
        //   masked grad:      layer 2: 14 * 8 = 112
        //                     layer 1: (1.75 * 14) * 1 = 24.5
        //   output Jacobian:  layer 2: 8, layer 1: 1.75
        //   act-sum gradient: layer 2: 0, layer 1: 1
        //   correction slice: layer 2: 8*8 + 14*0 = 64 -> folded 0.5*64 = 32
        //                     layer 1: 8*1.75 + 14*1 = 28 -> folded 14
        //   quadratic:        layer 2: 0, layer 1: 8
        //   loss group term:  8 * (0.5 * 14) = 56
        let (params, secret) = scalar_fixture();
        let masked = mask_model(&params, &secret).unwrap();
        let x = Vector::from_data(vec![1.0]).unwrap();
        let target = Vector::from_data(vec![0.0]).unwrap();
        let acts = forward_masked(&masked, &x).unwrap();

        let g = backward_masked(&masked, &acts, &x, &target).unwrap();
        assert_eq!(g.layer(2).data(), &[112.0]);
        assert_eq!(g.layer(1).data(), &[24.5]);

        let corr = sample_corrections(&masked, &acts, &x, &target).unwrap();
        assert_eq!(corr.group[1][0].data(), &[32.0]);
        assert_eq!(corr.group[0][0].data(), &[14.0]);
        assert_eq!(corr.quad[1].data(), &[0.0]);
        assert_eq!(corr.quad[0].data(), &[8.0]);
        assert_eq!(corr.loss_terms, vec![56.0]);

        let stack = correction_stack(&masked, &acts, &x, &target).unwrap();
        assert_eq!(stack.per_output[0].layer(2).data(), &[64.0]);
        assert_eq!(stack.per_output[0].layer(1).data(), &[28.0]);
    }

    #[test]
    fn hidden_activations_are_scaled_plain_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (params, secret, masked, x, _) = random_instance(&[4, 7, 5, 3], 3, &mut rng);
            let plain = forward_plain(&params, &x).unwrap();
            let m = forward_masked(&masked, &x).unwrap();
            for l in 1..=2 {
                let scaled = plain.layer(l).hadamard(secret.hidden_scale(l)).unwrap();
                let err = rel_err_vectors(m.layer(l), &scaled);
                assert!(err < 1e-10, "layer {l}: {err}");
                // Identical ReLU branch decisions.
                for i in 0..scaled.len() {
                    assert_eq!(m.layer(l).get(i) > 0.0, plain.layer(l).get(i) > 0.0);
                }
            }
        }
    }

    #[test]
    fn masked_output_is_plain_output_plus_offset_times_act_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let (params, secret, masked, x, _) = random_instance(&[4, 7, 5, 3], 3, &mut rng);
            let plain = forward_plain(&params, &x).unwrap();
            let m = forward_masked(&masked, &x).unwrap();
            let want = plain.output().add(&secret.offset().scale(m.act_sum())).unwrap();
            let err = rel_err_vectors(m.output(), &want);
            assert!(err < 1e-9, "{err}");
        }
    }

    #[test]
    fn masked_gradient_identity_against_plain_gradient() {
        // The masked gradient must equal
        //   recip(scale_mask) ∘ plain_grad
        //   + sum_i offset_i * sigma_i  -  energy * quad
        // with every piece assembled from independently computed parts.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let (params, secret, masked, x, target) =
                random_instance(&[3, 6, 4, 2], 2, &mut rng);
            let plain_acts = forward_plain(&params, &x).unwrap();
            let plain_grad = backward_plain(&params, &plain_acts, &x, &target).unwrap();
            let macts = forward_masked(&masked, &x).unwrap();
            let mgrad = backward_masked(&masked, &macts, &x, &target).unwrap();
            let stack = correction_stack(&masked, &macts, &x, &target).unwrap();
            let corr = sample_corrections(&masked, &macts, &x, &target).unwrap();
            for l in 1..=3 {
                let mut rhs = secret
                    .scale_mask(l)
                    .hadamard_reciprocal()
                    .unwrap()
                    .hadamard(plain_grad.layer(l))
                    .unwrap();
                for i in 0..secret.dims().output_width() {
                    rhs.axpy(secret.offset().get(i), stack.per_output[i].layer(l)).unwrap();
                }
                rhs.axpy(-secret.offset_energy(), &corr.quad[l - 1]).unwrap();
                let err = rel_err_matrices(mgrad.layer(l), &rhs);
                assert!(err < 1e-9, "layer {l}: {err}");
            }
        }
    }

    #[test]
    fn folded_corrections_match_stack_folding() {
        // Folding the full stack with base coefficients per group must give
        // the uploaded matrices: same math, two computation orders.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let (_, _, masked, x, target) = random_instance(&[3, 5, 4], 2, &mut rng);
        let acts = forward_masked(&masked, &x).unwrap();
        let stack = correction_stack(&masked, &acts, &x, &target).unwrap();
        let corr = sample_corrections(&masked, &acts, &x, &target).unwrap();
        for l in 1..=2 {
            for s in 0..2 {
                let mut want = Matrix::zeros(masked.layer(l).rows(), masked.layer(l).cols());
                for &i in masked.partition.group(s) {
                    want.axpy(masked.offset_base.get(i), stack.per_output[i].layer(l)).unwrap();
                }
                let err = rel_err_matrices(&corr.group[l - 1][s], &want);
                assert!(err < 1e-12, "layer {l} group {s}: {err}");
            }
        }
    }

    #[test]
    fn masked_gradient_matches_finite_differences() {
        use crate::gradcheck::central_diff_check;
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let (_, _, masked, x, target) = random_instance(&[3, 5, 2], 2, &mut rng);
        let params = as_params(&masked).unwrap();
        let acts = forward_masked(&masked, &x).unwrap();
        let analytic = backward_masked(&masked, &acts, &x, &target).unwrap();
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
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn local_update_averages_per_sample_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let (_, _, masked, _, _) = random_instance(&[3, 5, 2], 2, &mut rng);
        let shard: Vec<Sample> = (0..3)
            .map(|_| Sample {
                features: Vector::from_fn(3, |_| rng.gen_range(-1.0..1.0)),
                target: Vector::from_fn(2, |_| rng.gen_range(-1.0..1.0)),
            })
            .collect();
        let update = local_update(&masked, 4, 9, &shard).unwrap();
        assert_eq!((update.client_id, update.round_id, update.sample_count), (4, 9, 3));

        // Mean of the three single-sample updates.
        let singles: Vec<ClientUpdate> = shard
            .iter()
            .map(|s| local_update(&masked, 4, 9, std::slice::from_ref(s)).unwrap())
            .collect();
        for l in 0..2 {
            let mut want = Matrix::zeros(masked.layer(l + 1).rows(), masked.layer(l + 1).cols());
            for single in &singles {
                want.axpy(1.0 / 3.0, &single.grad[l]).unwrap();
            }
            assert!(rel_err_matrices(&update.grad[l], &want) < 1e-14);
        }
        let want_loss: f64 = singles.iter().map(|u| u.loss.masked_loss / 3.0).sum();
        assert!(rel_err_scalar(update.loss.masked_loss, want_loss) < 1e-14);
    }

    #[test]
    fn swapped_groups_reverse_correction_order_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let (_, _, masked, x, target) = random_instance(&[3, 5, 4], 4, &mut rng);
        let shard = vec![Sample { features: x, target }];
        let honest = local_update(&masked, 0, 0, &shard).unwrap();
        let bugged = local_update_with_swapped_groups(&masked, 0, 0, &shard).unwrap();
        assert_eq!(honest.grad, bugged.grad);
        assert_eq!(honest.sum_corrections, bugged.sum_corrections);
        for l in 0..2 {
            for s in 0..4 {
                assert_eq!(honest.group_corrections[l][s], bugged.group_corrections[l][4 - 1 - s]);
            }
        }
    }

    #[test]
    fn update_serialization_carries_no_secret_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let (_, _, masked, x, target) = random_instance(&[2, 4, 2], 2, &mut rng);
        let shard = vec![Sample { features: x, target }];
        let update = local_update(&masked, 0, 0, &shard).unwrap();
        let json = serde_json::to_string(&update).unwrap();
        for forbidden in ["coeff", "energy", "scale", "secret"] {
            assert!(!json.contains(forbidden), "update mentions {forbidden}");
        }
    }

    #[test]
    fn empty_shard_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (_, _, masked, _, _) = random_instance(&[2, 4, 2], 2, &mut rng);
        assert!(local_update(&masked, 0, 0, &[]).is_err());
    }
}
