//! Mask generation, model masking, and exact gradient recovery.
//!
//! This is the server-private half of the protocol. Each round the server
//! draws a fresh [`RoundSecret`] consisting of
//!
//! - one strictly positive *hidden scale* vector per hidden layer,
//! - a public *offset base* vector over the outputs with pairwise-distinct
//!   entries,
//! - a public partition of the outputs into `m` groups, and
//! - one secret signed *group coefficient* per group.
//!
//! The masked weights are `Wm(l) = S(l) ∘ W(l)` where the scale mask `S(l)`
//! has entries `s(l)_i / s(l-1)_j` (with all-ones vectors standing in for the
//! input and output layers), and the last layer additionally receives a
//! rank-1 additive mask whose row `i` is the constant `coeff(i) * base(i)`.
//! Because the scale masks telescope and ReLU is positively homogeneous, a
//! masked forward pass reproduces the plain activations up to the per-layer
//! scales, and the additive part shifts the output along a direction the
//! clients can describe but not decode.
//!
//! Recovery inverts the client-side gradient bias in closed form:
//!
//! `g(l) = S(l) ∘ (gm(l) - sum_s coeff_s * corr(l)_s + energy * sumcorr(l))`
//!
//! where `gm` is the aggregated masked gradient, `corr(l)_s` the aggregated
//! per-group correction matrices, `sumcorr(l)` the aggregated quadratic
//! correction, and `energy = ||offset||^2`. The identity is exact in real
//! arithmetic, so plain and masked training coincide up to f64 rounding.
//!
//! Nothing in this module ever serializes secret state: [`RoundSecret`]
//! deliberately implements neither `Serialize` nor `Clone`, redacts its
//! `Debug` output, and zeroes its buffers on drop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, LayerDims, MlpParams};
use crate::tensor::{Matrix, Vector};

/// Sampling ranges for [`sample_secret`]. All ranges are inclusive at the
/// resolution of `f64` sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Hidden scales are log-uniform in `[scale_min, scale_max]`, both > 0.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Group coefficient magnitudes are uniform in `[coeff_min, coeff_max]`
    /// with a fair random sign. Recovery subtracts coefficient-squared
    /// intermediates that cancel almost exactly, so the achievable recovery
    /// precision degrades with `coeff_max^2 * eps` — further amplified by
    /// depth and layer width, which grow the activation sums those
    /// intermediates carry. The default holds the worst per-round recovery
    /// error near 1e-10 on nets with 64-wide hidden layers and unit-scale
    /// inputs, while the additive offsets still swamp the true outputs by
    /// orders of magnitude.
    pub coeff_min: f64,
    pub coeff_max: f64,
    /// Offset base entries are uniform in `[offset_min, offset_max]`...
    pub offset_min: f64,
    pub offset_max: f64,
    /// ...rejection-resampled until every pair differs by at least this gap.
    pub offset_min_gap: f64,
}

impl Default for NoiseConfig {
    fn default() -> NoiseConfig {
        NoiseConfig {
            scale_min: 0.1,
            scale_max: 10.0,
            coeff_min: 1.0,
            coeff_max: 30.0,
            offset_min: -1.0,
            offset_max: 1.0,
            offset_min_gap: 1e-3,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.scale_min,
            self.scale_max,
            self.coeff_min,
            self.coeff_max,
            self.offset_min,
            self.offset_max,
            self.offset_min_gap,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::Usage("noise parameters must be finite".into()));
        }
        if self.scale_min <= 0.0 || self.scale_max < self.scale_min {
            return Err(Error::Usage(format!(
                "hidden scale range [{}, {}] must be positive and ordered",
                self.scale_min, self.scale_max
            )));
        }
        if self.coeff_min <= 0.0 || self.coeff_max < self.coeff_min {
            return Err(Error::Usage(format!(
                "coefficient magnitude range [{}, {}] must be positive and ordered",
                self.coeff_min, self.coeff_max
            )));
        }
        if self.offset_min >= self.offset_max {
            return Err(Error::Usage(format!(
                "offset range [{}, {}] must be a proper interval",
                self.offset_min, self.offset_max
            )));
        }
        if self.offset_min_gap <= 0.0 {
            return Err(Error::Usage("offset_min_gap must be positive".into()));
        }
        Ok(())
    }
}

/// Disjoint groups covering the output indices `0..n_out`. The grouping is
/// public: clients need it to fold their per-output corrections.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct Partition {
    groups: Vec<Vec<usize>>,
    n_out: usize,
}

impl Partition {
    /// Seeded random permutation of `0..n_out` chopped into `m` groups whose
    /// sizes differ by at most one.
    pub fn sample(n_out: usize, m: usize, rng: &mut impl Rng) -> Result<Partition> {
        if m == 0 || m > n_out {
            return Err(Error::Usage(format!(
                "group count {m} must be between 1 and the output width {n_out}"
            )));
        }
        let mut order: Vec<usize> = (0..n_out).collect();
        // Fisher-Yates so the draw count is fixed by n_out alone.
        for i in (1..n_out).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let base = n_out / m;
        let extra = n_out % m;
        let mut groups = Vec::with_capacity(m);
        let mut cursor = 0;
        for s in 0..m {
            let len = base + usize::from(s < extra);
            groups.push(order[cursor..cursor + len].to_vec());
            cursor += len;
        }
        Ok(Partition { groups, n_out })
    }

    /// Build from explicit groups; they must disjointly cover `0..n_out`.
    pub fn from_groups(groups: Vec<Vec<usize>>) -> Result<Partition> {
        let n_out: usize = groups.iter().map(|g| g.len()).sum();
        let mut seen = vec![false; n_out];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::Usage("empty group in output partition".into()));
            }
            for &i in g {
                if i >= n_out || seen[i] {
                    return Err(Error::Usage(format!(
                        "output partition is not a disjoint cover (index {i})"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(Partition { groups, n_out })
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn output_width(&self) -> usize {
        self.n_out
    }

    /// Members of group `s`.
    pub fn group(&self, s: usize) -> &[usize] {
        &self.groups[s]
    }

    /// Which group an output index belongs to.
    pub fn group_of(&self, i: usize) -> usize {
        self.groups
            .iter()
            .position(|g| g.contains(&i))
            .expect("index inside 0..n_out")
    }
}

impl TryFrom<Vec<Vec<usize>>> for Partition {
    type Error = String;

    fn try_from(groups: Vec<Vec<usize>>) -> std::result::Result<Self, String> {
        Partition::from_groups(groups).map_err(|e| e.to_string())
    }
}

impl From<Partition> for Vec<Vec<usize>> {
    fn from(p: Partition) -> Vec<Vec<usize>> {
        p.groups
    }
}

/// One round's complete mask state. Never serialized, never cloned, zeroed
/// on drop; the server holds it only between masking and recovery.
pub struct RoundSecret {
    dims: LayerDims,
    hidden_scales: Vec<Vector>,
    offset_base: Vector,
    partition: Partition,
    group_coeffs: Vec<f64>,
    // Cached derivations of the fields above.
    offset: Vector,
    offset_energy: f64,
}

impl std::fmt::Debug for RoundSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RoundSecret")
            .field("dims", &self.dims)
            .field("groups", &self.partition.group_count())
            .field("secret", &"<redacted>")
            .finish()
    }
}

impl Drop for RoundSecret {
    fn drop(&mut self) {
        // Best-effort scrub of the secret material.
        for s in &mut self.hidden_scales {
            for i in 0..s.len() {
                s.set(i, 0.0);
            }
        }
        for c in &mut self.group_coeffs {
            *c = 0.0;
        }
        for i in 0..self.offset.len() {
            self.offset.set(i, 0.0);
        }
        self.offset_energy = 0.0;
    }
}

impl RoundSecret {
    /// Assemble a secret from explicit parts. [`sample_secret`] is the
    /// normal entry point; this exists for deterministic fixtures and for
    /// constructing alternative preimage witnesses.
    pub fn from_parts(
        dims: LayerDims,
        hidden_scales: Vec<Vector>,
        offset_base: Vector,
        partition: Partition,
        group_coeffs: Vec<f64>,
    ) -> Result<RoundSecret> {
        let n_out = dims.output_width();
        if partition.output_width() != n_out || offset_base.len() != n_out {
            return Err(Error::shape(
                "secret",
                format!("offset/partition width vs output width {n_out}"),
            ));
        }
        if hidden_scales.len() != dims.depth() - 1 {
            return Err(Error::shape(
                "secret",
                format!("{} scale vectors for {} hidden layers", hidden_scales.len(), dims.depth() - 1),
            ));
        }
        for (idx, s) in hidden_scales.iter().enumerate() {
            let l = idx + 1;
            if s.len() != dims.width(l) {
                return Err(Error::shape(
                    "secret",
                    format!("scale vector for layer {l} has length {}", s.len()),
                ));
            }
            if s.as_slice().iter().any(|&v| v <= 0.0) {
                return Err(Error::domain(
                    "secret",
                    format!("hidden scales must be strictly positive (layer {l})"),
                ));
            }
        }
        if group_coeffs.len() != partition.group_count() {
            return Err(Error::shape(
                "secret",
                format!(
                    "{} coefficients for {} groups",
                    group_coeffs.len(),
                    partition.group_count()
                ),
            ));
        }
        let mut offset = Vector::zeros(n_out);
        for (s, group) in partition.groups.iter().enumerate() {
            for &i in group {
                offset.set(i, group_coeffs[s] * offset_base.get(i));
            }
        }
        let offset_energy = offset.dot(&offset)?;
        Ok(RoundSecret {
            dims,
            hidden_scales,
            offset_base,
            partition,
            group_coeffs,
            offset,
            offset_energy,
        })
    }

    /// The do-nothing mask: unit scales and zero coefficients. Masking with
    /// it reproduces the plain weights exactly; useful as a reference point
    /// and in tests.
    pub fn identity(dims: LayerDims, m: usize) -> Result<RoundSecret> {
        let n_out = dims.output_width();
        if m == 0 || m > n_out {
            return Err(Error::Usage(format!(
                "group count {m} must be between 1 and the output width {n_out}"
            )));
        }
        let hidden_scales = (1..dims.depth())
            .map(|l| Vector::from_fn(dims.width(l), |_| 1.0))
            .collect();
        // Evenly spaced base entries are trivially pairwise distinct.
        let offset_base = Vector::from_fn(n_out, |i| {
            -1.0 + 2.0 * (i as f64 + 1.0) / (n_out as f64 + 1.0)
        });
        let groups = (0..m)
            .map(|s| (s..n_out).step_by(m).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        RoundSecret::from_parts(
            dims,
            hidden_scales,
            offset_base,
            Partition::from_groups(groups)?,
            vec![0.0; m],
        )
    }

    pub fn dims(&self) -> &LayerDims {
        &self.dims
    }

    /// Hidden scale vector for layer `l`, `l` in `1..=L-1`.
    pub fn hidden_scale(&self, l: usize) -> &Vector {
        &self.hidden_scales[l - 1]
    }

    pub fn offset_base(&self) -> &Vector {
        &self.offset_base
    }

    pub fn partition(&self) -> &Partition {
        &self.partition
    }

    pub fn group_coeffs(&self) -> &[f64] {
        &self.group_coeffs
    }

    /// The combined additive direction `coeff(i) * base(i)` per output.
    pub fn offset(&self) -> &Vector {
        &self.offset
    }

    /// Squared norm of the combined offset.
    pub fn offset_energy(&self) -> f64 {
        self.offset_energy
    }

    /// Scale vector of layer `l` with the convention that layer 0 (input)
    /// and layer `L` (output) carry all-ones.
    fn scale_vector(&self, l: usize) -> Vector {
        if l == 0 || l == self.dims.depth() {
            Vector::from_fn(self.dims.width(l), |_| 1.0)
        } else {
            self.hidden_scales[l - 1].clone()
        }
    }

    /// Multiplicative mask for layer `l`: entries `s(l)_i / s(l-1)_j`.
    pub fn scale_mask(&self, l: usize) -> Matrix {
        let above = self.scale_vector(l);
        let below = self.scale_vector(l - 1);
        Matrix::from_fn(above.len(), below.len(), |i, j| above.get(i) / below.get(j))
    }

    /// Additive mask for the last layer: row `i` holds the constant
    /// `offset(i)`.
    pub fn offset_mask(&self) -> Matrix {
        let n_out = self.dims.output_width();
        let n_below = self.dims.width(self.dims.depth() - 1);
        Matrix::from_fn(n_out, n_below, |i, _| self.offset.get(i))
    }
}

/// Masked weights plus the public side-channel clients need: the offset base
/// and the output grouping. This is exactly what goes on the wire; the type
/// carries no secret fields by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedModel {
    pub dims: LayerDims,
    pub layers: Vec<Matrix>,
    pub offset_base: Vector,
    pub partition: Partition,
}

impl MaskedModel {
    /// Masked weights of layer `l`, `l` in `1..=L`.
    pub fn layer(&self, l: usize) -> &Matrix {
        &self.layers[l - 1]
    }

    pub fn group_count(&self) -> usize {
        self.partition.group_count()
    }

    /// Shape and width consistency check; run on every deserialized model.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.dims.depth() {
            return Err(Error::shape(
                "masked model",
                format!("{} layers for depth {}", self.layers.len(), self.dims.depth()),
            ));
        }
        for (idx, m) in self.layers.iter().enumerate() {
            let l = idx + 1;
            if m.rows() != self.dims.width(l) || m.cols() != self.dims.width(l - 1) {
                return Err(Error::shape(
                    "masked model",
                    format!("layer {l} is {}x{}", m.rows(), m.cols()),
                ));
            }
        }
        if self.offset_base.len() != self.dims.output_width()
            || self.partition.output_width() != self.dims.output_width()
        {
            return Err(Error::shape(
                "masked model",
                "offset base or partition width vs output width".to_string(),
            ));
        }
        Ok(())
    }
}

/// Draw a fresh secret for one round. The draw order (scales by layer, then
/// offset base, then partition, then coefficients) is fixed, so one seeded
/// RNG stream always yields the same secret.
pub fn sample_secret(
    dims: &LayerDims,
    m: usize,
    cfg: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<RoundSecret> {
    cfg.validate()?;
    let hidden_scales = sample_scales(dims, cfg, rng);
    let offset_base = sample_offset_base(dims.output_width(), cfg, rng)?;
    let partition = Partition::sample(dims.output_width(), m, rng)?;
    let group_coeffs = sample_coeffs(m, cfg, rng);
    RoundSecret::from_parts(dims.clone(), hidden_scales, offset_base, partition, group_coeffs)
}

/// Log-uniform positive hidden scales for every hidden layer.
pub(crate) fn sample_scales(
    dims: &LayerDims,
    cfg: &NoiseConfig,
    rng: &mut impl Rng,
) -> Vec<Vector> {
    let ln_lo = cfg.scale_min.ln();
    let ln_hi = cfg.scale_max.ln();
    (1..dims.depth())
        .map(|l| {
            Vector::from_fn(dims.width(l), |_| {
                if ln_lo == ln_hi {
                    cfg.scale_min
                } else {
                    rng.gen_range(ln_lo..ln_hi).exp()
                }
            })
        })
        .collect()
}

/// Signed group coefficients: uniform magnitude in the configured range with
/// a fair coin for the sign.
pub(crate) fn sample_coeffs(m: usize, cfg: &NoiseConfig, rng: &mut impl Rng) -> Vec<f64> {
    (0..m)
        .map(|_| {
            let magnitude = if cfg.coeff_min == cfg.coeff_max {
                cfg.coeff_min
            } else {
                rng.gen_range(cfg.coeff_min..cfg.coeff_max)
            };
            if rng.gen_bool(0.5) {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect()
}

/// Uniform offset base entries, rejection-resampled as a whole vector until
/// all pairwise gaps reach the configured floor.
pub(crate) fn sample_offset_base(
    n_out: usize,
    cfg: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<Vector> {
    let span = cfg.offset_max - cfg.offset_min;
    if cfg.offset_min_gap * (n_out as f64 - 1.0) >= span {
        return Err(Error::Usage(format!(
            "{n_out} offset entries with pairwise gap {} cannot fit in a span of {span}",
            cfg.offset_min_gap
        )));
    }
    const MAX_ATTEMPTS: usize = 1000;
    for _ in 0..MAX_ATTEMPTS {
        let candidate =
            Vector::from_fn(n_out, |_| rng.gen_range(cfg.offset_min..cfg.offset_max));
        let mut sorted = candidate.as_slice().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ok = sorted.windows(2).all(|w| w[1] - w[0] >= cfg.offset_min_gap);
        if ok {
            return Ok(candidate);
        }
    }
    Err(Error::Usage(format!(
        "could not draw {n_out} pairwise-distinct offsets after {MAX_ATTEMPTS} attempts; \
         lower offset_min_gap or widen the range"
    )))
}

/// Apply the round's masks to the plain weights.
pub fn mask_model(params: &MlpParams, secret: &RoundSecret) -> Result<MaskedModel> {
    if params.dims() != secret.dims() {
        return Err(Error::shape(
            "mask_model",
            format!("params {:?} vs secret {:?}", params.dims(), secret.dims()),
        ));
    }
    let depth = params.dims().depth();
    let mut layers = Vec::with_capacity(depth);
    for l in 1..=depth {
        let mut masked = secret.scale_mask(l).hadamard(params.weight(l))?;
        if l == depth {
            masked = masked.add(&secret.offset_mask())?;
        }
        layers.push(masked);
    }
    Ok(MaskedModel {
        dims: params.dims().clone(),
        layers,
        offset_base: secret.offset_base.clone(),
        partition: secret.partition.clone(),
    })
}

/// Invert [`mask_model`] under a given secret.
///
/// For the secret that produced the masked model this returns the original
/// weights up to f64 rounding. For *any other* secret of the same shape it
/// returns a different, equally valid preimage: masking the result with that
/// secret reproduces the masked model exactly, which is what makes the
/// broadcast non-invertible for clients.
pub fn unmask_model(masked: &MaskedModel, secret: &RoundSecret) -> Result<MlpParams> {
    if &masked.dims != secret.dims() {
        return Err(Error::shape(
            "unmask_model",
            format!("masked {:?} vs secret {:?}", masked.dims, secret.dims()),
        ));
    }
    let depth = masked.dims.depth();
    let mut weights = Vec::with_capacity(depth);
    for l in 1..=depth {
        let inverse = secret.scale_mask(l).hadamard_reciprocal()?;
        let layer = if l == depth {
            inverse.hadamard(&masked.layer(l).sub(&secret.offset_mask())?)?
        } else {
            inverse.hadamard(masked.layer(l))?
        };
        weights.push(layer);
    }
    MlpParams::from_weights(masked.dims.clone(), weights)
}

/// Aggregated client-update components in the shape recovery wants:
/// per-layer masked gradients, per-layer-per-group correction matrices, and
/// per-layer quadratic corrections.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedAggregate {
    pub grad: Vec<Matrix>,
    pub group_corrections: Vec<Vec<Matrix>>,
    pub sum_corrections: Vec<Matrix>,
}

/// Recover the true aggregated gradient from aggregated masked uploads.
pub fn recover_gradient(secret: &RoundSecret, agg: &MaskedAggregate) -> Result<GradientSet> {
    let depth = secret.dims().depth();
    if agg.grad.len() != depth
        || agg.group_corrections.len() != depth
        || agg.sum_corrections.len() != depth
    {
        return Err(Error::shape(
            "recover_gradient",
            format!("aggregate does not cover all {depth} layers"),
        ));
    }
    let m = secret.partition.group_count();
    let mut layers = Vec::with_capacity(depth);
    for l in 1..=depth {
        let idx = l - 1;
        if agg.group_corrections[idx].len() != m {
            return Err(Error::shape(
                "recover_gradient",
                format!("layer {l} has {} correction groups, expected {m}", agg.group_corrections[idx].len()),
            ));
        }
        let mut combined = agg.grad[idx].clone();
        for (s, corr) in agg.group_corrections[idx].iter().enumerate() {
            combined.axpy(-secret.group_coeffs[s], corr)?;
        }
        combined.axpy(secret.offset_energy, &agg.sum_corrections[idx])?;
        layers.push(secret.scale_mask(l).hadamard(&combined)?);
    }
    Ok(GradientSet::from_layers(layers))
}
