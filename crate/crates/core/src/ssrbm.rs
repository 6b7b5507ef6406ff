//! First layer: a spike-and-slab RBM over real-valued images with
//! tiled-convolutional weight sharing.
//!
//! Each hidden unit i pairs a binary spike h_i with a real slab s_i. The
//! energy couples v to the product s_i h_i through the unit's shared kernel,
//! carries a diagonal visible precision `lambda` plus an h-gated per-filter
//! contribution `phi` on the unit's receptive field, and a Gaussian slab with
//! mean `mu` and precision `alpha`:
//!
//! E(v,s,h) = -sum_i (v^T W_i) s_i h_i
//!          + 1/2 v^T (lambda I + sum_i phi_i h_i) v
//!          + 1/2 sum_i alpha_i s_i^2 - sum_i alpha_i mu_i s_i h_i
//!          - sum_i b_i h_i + 1/2 sum_i alpha_i mu_i^2 h_i
//!
//! All parameters are tied per feature map (tiling, filter); positions share.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tiling::{
    field_sq_sums, scatter_field_scale, tiled_adjoint, tiled_forward, TiledGeometry,
};

/// Smallest admissible slab / visible precision after a parameter update.
pub const ALPHA_MIN: f64 = 1e-2;
pub const LAMBDA_MIN: f64 = 1e-2;
/// Spike activation arguments are clamped to this band before the sigmoid.
pub const ACTIVATION_CLAMP: f64 = 30.0;

/// Per-map parameters; gradients and FPCD fast weights reuse this container
/// since they are exactly parameter-shaped.
#[derive(Debug, Clone, PartialEq)]
pub struct SsRbmParams<S: Real = f64> {
    /// Shared kernels, one `k x k` plane per feature map.
    pub weights: Array3<S>,
    /// Spike bias b per map.
    pub spike_bias: Array1<S>,
    /// Slab mean mu per map.
    pub slab_mean: Array1<S>,
    /// Slab precision alpha per map (positive).
    pub slab_precision: Array1<S>,
    /// Scalar visible precision lambda (positive).
    pub vis_precision: S,
    /// h-gated precision phi per map (non-negative), diagonal on the field.
    pub gated_precision: Array1<S>,
}

impl<S: Real> SsRbmParams<S> {
    pub fn zeros(maps: usize, kernel: usize) -> Self {
        Self {
            weights: Array3::zeros((maps, kernel, kernel)),
            spike_bias: Array1::zeros(maps),
            slab_mean: Array1::zeros(maps),
            slab_precision: Array1::zeros(maps),
            vis_precision: S::zero(),
            gated_precision: Array1::zeros(maps),
        }
    }

    /// Training initialization: small Gaussian kernels, sparse spikes.
    pub fn init<R: Rng + ?Sized>(maps: usize, kernel: usize, rng: &mut R) -> Self {
        Self {
            weights: Array3::from_shape_fn((maps, kernel, kernel), |_| {
                S::standard_normal(rng) * S::of(0.01)
            }),
            spike_bias: Array1::from_elem(maps, S::of(-1.0)),
            slab_mean: Array1::zeros(maps),
            slab_precision: Array1::from_elem(maps, S::one()),
            vis_precision: S::one(),
            gated_precision: Array1::zeros(maps),
        }
    }

    pub fn num_maps(&self) -> usize {
        self.spike_bias.len()
    }

    pub fn scale(&mut self, factor: S) {
        self.weights.mapv_inplace(|x| x * factor);
        self.spike_bias.mapv_inplace(|x| x * factor);
        self.slab_mean.mapv_inplace(|x| x * factor);
        self.slab_precision.mapv_inplace(|x| x * factor);
        self.vis_precision = self.vis_precision * factor;
        self.gated_precision.mapv_inplace(|x| x * factor);
    }

    pub fn add_scaled(&mut self, other: &Self, factor: S) {
        self.weights.zip_mut_with(&other.weights, |a, &b| *a += b * factor);
        self.spike_bias
            .zip_mut_with(&other.spike_bias, |a, &b| *a += b * factor);
        self.slab_mean
            .zip_mut_with(&other.slab_mean, |a, &b| *a += b * factor);
        self.slab_precision
            .zip_mut_with(&other.slab_precision, |a, &b| *a += b * factor);
        self.vis_precision = self.vis_precision + other.vis_precision * factor;
        self.gated_precision
            .zip_mut_with(&other.gated_precision, |a, &b| *a += b * factor);
    }

    /// Stability constraints: alpha and lambda bounded away from zero, phi
    /// non-negative. Keeps every reachable conditional precision positive.
    pub fn clamp_constraints(&mut self) {
        let amin = S::of(ALPHA_MIN);
        let lmin = S::of(LAMBDA_MIN);
        self.slab_precision.mapv_inplace(|a| a.max(amin));
        self.vis_precision = self.vis_precision.max(lmin);
        self.gated_precision.mapv_inplace(|p| p.max(S::zero()));
    }

    pub fn satisfies_constraints(&self) -> bool {
        self.slab_precision.iter().all(|&a| a >= S::of(ALPHA_MIN))
            && self.vis_precision >= S::of(LAMBDA_MIN)
            && self.gated_precision.iter().all(|&p| p >= S::zero())
    }

    pub fn max_abs(&self) -> S {
        let mut m = self.vis_precision.abs();
        for x in self
            .weights
            .iter()
            .chain(self.spike_bias.iter())
            .chain(self.slab_mean.iter())
            .chain(self.slab_precision.iter())
            .chain(self.gated_precision.iter())
        {
            m = m.max(x.abs());
        }
        m
    }
}

/// Latent state of one image: binary spikes and real slabs, map-shaped.
/// Spikes are stored as reals so that probability-valued inputs (used when a
/// deeper layer consumes them) share the same code paths.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeSlabState<S: Real = f64> {
    pub spikes: Array3<S>,
    pub slabs: Array3<S>,
}

/// Parameters bound to a geometry. Parameters are position-independent, so
/// the same set serves any valid image side via [`SsRbm::resized`].
#[derive(Debug, Clone)]
pub struct SsRbm<S: Real = f64> {
    pub params: SsRbmParams<S>,
    pub geom: TiledGeometry,
}

impl<S: Real> SsRbm<S> {
    pub fn new(params: SsRbmParams<S>, geom: TiledGeometry) -> Result<Self> {
        if params.num_maps() != geom.num_maps()
            || params.weights.dim() != (geom.num_maps(), geom.kernel(), geom.kernel())
        {
            return Err(Error::dimension(
                "parameter shapes do not match tiled geometry",
            ));
        }
        Ok(Self { params, geom })
    }

    pub fn init<R: Rng + ?Sized>(geom: TiledGeometry, rng: &mut R) -> Self {
        let params = SsRbmParams::init(geom.num_maps(), geom.kernel(), rng);
        Self { params, geom }
    }

    /// Same parameters on another valid image side (synthesis, inpainting).
    pub fn resized(&self, side: usize) -> Result<Self> {
        Ok(Self {
            params: self.params.clone(),
            geom: self.geom.resized(side)?,
        })
    }

    fn unit_shape(&self) -> (usize, usize, usize) {
        (
            self.geom.num_maps(),
            self.geom.positions(),
            self.geom.positions(),
        )
    }

    /// `v^T W_i` for every unit.
    pub fn projections(&self, v: &Array2<S>) -> Result<Array3<S>> {
        tiled_forward(v, &self.params.weights, &self.geom)
    }

    /// Energy of a full configuration.
    pub fn energy(&self, v: &Array2<S>, state: &SpikeSlabState<S>) -> Result<S> {
        self.geom.check_image(v)?;
        self.geom.check_units(&state.spikes)?;
        self.geom.check_units(&state.slabs)?;
        let proj = self.projections(v)?;
        let sq = field_sq_sums(v, &self.geom)?;
        let p = &self.params;
        let half = S::of(0.5);

        let mut e = half * p.vis_precision * v.iter().map(|&x| x * x).sum::<S>();
        for map in 0..self.geom.num_maps() {
            let t = self.geom.tiling_of_map(map);
            let (alpha, mu, b) = (p.slab_precision[map], p.slab_mean[map], p.spike_bias[map]);
            let phi = p.gated_precision[map];
            for r in 0..self.geom.positions() {
                for c in 0..self.geom.positions() {
                    let h = state.spikes[(map, r, c)];
                    let s = state.slabs[(map, r, c)];
                    e = e - proj[(map, r, c)] * s * h
                        + half * phi * h * sq[(t, r, c)]
                        + half * alpha * s * s
                        - alpha * mu * s * h
                        - b * h
                        + half * alpha * mu * mu * h;
                }
            }
        }
        Ok(e)
    }

    /// Raw spike activation arguments (pre-sigmoid, unclamped):
    /// `1/(2 alpha) (v^T W_i)^2 + (v^T W_i) mu - phi/2 |v_field|^2 + b`.
    pub fn spike_logits(&self, v: &Array2<S>) -> Result<Array3<S>> {
        let proj = self.projections(v)?;
        let sq = field_sq_sums(v, &self.geom)?;
        Ok(self.spike_logits_from(&proj, &sq))
    }

    fn spike_logits_from(&self, proj: &Array3<S>, sq: &Array3<S>) -> Array3<S> {
        let p = &self.params;
        let half = S::of(0.5);
        let mut out = Array3::zeros(self.unit_shape());
        for map in 0..self.geom.num_maps() {
            let t = self.geom.tiling_of_map(map);
            let (alpha, mu, b) = (p.slab_precision[map], p.slab_mean[map], p.spike_bias[map]);
            let phi = p.gated_precision[map];
            for r in 0..self.geom.positions() {
                for c in 0..self.geom.positions() {
                    let x = proj[(map, r, c)];
                    out[(map, r, c)] =
                        half / alpha * x * x + x * mu - half * phi * sq[(t, r, c)] + b;
                }
            }
        }
        out
    }

    /// P(h_i = 1 | v) per unit.
    pub fn spike_activation(&self, v: &Array2<S>) -> Result<Array3<S>> {
        let clamp = S::of(ACTIVATION_CLAMP);
        Ok(self
            .spike_logits(v)?
            .mapv(|x| x.min(clamp).max(-clamp).sigmoid()))
    }

    pub fn sample_h_given_v<R: Rng + ?Sized>(
        &self,
        v: &Array2<S>,
        rng: &mut R,
    ) -> Result<Array3<S>> {
        let probs = self.spike_activation(v)?;
        Ok(probs.mapv(|p| {
            if S::unit_uniform(rng) < p {
                S::one()
            } else {
                S::zero()
            }
        }))
    }

    /// E[s_i | v, h_i] = (alpha^-1 v^T W_i + mu) h_i.
    pub fn slab_mean(&self, v: &Array2<S>, spikes: &Array3<S>) -> Result<Array3<S>> {
        let proj = self.projections(v)?;
        self.geom.check_units(spikes)?;
        Ok(self.slab_mean_from(&proj, spikes))
    }

    fn slab_mean_from(&self, proj: &Array3<S>, spikes: &Array3<S>) -> Array3<S> {
        let p = &self.params;
        let mut out = Array3::zeros(self.unit_shape());
        for map in 0..self.geom.num_maps() {
            let (alpha, mu) = (p.slab_precision[map], p.slab_mean[map]);
            for r in 0..self.geom.positions() {
                for c in 0..self.geom.positions() {
                    out[(map, r, c)] =
                        (proj[(map, r, c)] / alpha + mu) * spikes[(map, r, c)];
                }
            }
        }
        out
    }

    /// s_i | v, h ~ N((alpha^-1 v^T W_i + mu) h_i, alpha^-1).
    pub fn sample_s_given_vh<R: Rng + ?Sized>(
        &self,
        v: &Array2<S>,
        spikes: &Array3<S>,
        rng: &mut R,
    ) -> Result<Array3<S>> {
        let mean = self.slab_mean(v, spikes)?;
        let p = &self.params;
        let mut out = mean;
        for map in 0..self.geom.num_maps() {
            let sd = p.slab_precision[map].recip().sqrt();
            for r in 0..self.geom.positions() {
                for c in 0..self.geom.positions() {
                    out[(map, r, c)] += sd * S::standard_normal(rng);
                }
            }
        }
        Ok(out)
    }

    /// Mean and per-pixel precision of v | s, h. The precision is
    /// `lambda + sum_i phi_i h_i` on each pixel; the mean is its inverse
    /// applied to `sum_i W_i s_i h_i`.
    pub fn visible_mean_precision(
        &self,
        state: &SpikeSlabState<S>,
    ) -> Result<(Array2<S>, Array2<S>)> {
        self.geom.check_units(&state.spikes)?;
        self.geom.check_units(&state.slabs)?;
        let gated = {
            let mut sh = state.slabs.clone();
            sh.zip_mut_with(&state.spikes, |s, &h| *s *= h);
            sh
        };
        let drive = tiled_adjoint(&gated, &self.params.weights, &self.geom)?;
        let phis: Vec<S> = self.params.gated_precision.iter().copied().collect();
        let mut precision = scatter_field_scale(&state.spikes, &phis, &self.geom)?;
        precision.mapv_inplace(|x| x + self.params.vis_precision);
        if precision.iter().any(|&p| p <= S::zero()) {
            return Err(Error::Numerical(
                "non-positive visible precision in v | s,h".into(),
            ));
        }
        let mean = ndarray::Zip::from(&drive)
            .and(&precision)
            .map_collect(|&d, &p| d / p);
        Ok((mean, precision))
    }

    pub fn sample_v_given_sh<R: Rng + ?Sized>(
        &self,
        state: &SpikeSlabState<S>,
        rng: &mut R,
    ) -> Result<Array2<S>> {
        let (mean, precision) = self.visible_mean_precision(state)?;
        let mut out = mean;
        ndarray::Zip::from(&mut out).and(&precision).for_each(|m, &p| {
            *m += S::standard_normal(rng) / p.sqrt();
        });
        Ok(out)
    }

    /// One block Gibbs sweep: h | v, then s | v,h, then v | s,h.
    /// The projection pass is shared across all three conditionals.
    pub fn gibbs_sweep<R: Rng + ?Sized>(
        &self,
        v: &Array2<S>,
        rng: &mut R,
    ) -> Result<(Array3<S>, Array3<S>, Array2<S>)> {
        let proj = self.projections(v)?;
        let sq = field_sq_sums(v, &self.geom)?;
        let clamp = S::of(ACTIVATION_CLAMP);
        let spikes = self
            .spike_logits_from(&proj, &sq)
            .mapv(|x| {
                if S::unit_uniform(rng) < x.min(clamp).max(-clamp).sigmoid() {
                    S::one()
                } else {
                    S::zero()
                }
            });
        let mut slabs = self.slab_mean_from(&proj, &spikes);
        for map in 0..self.geom.num_maps() {
            let sd = self.params.slab_precision[map].recip().sqrt();
            for r in 0..self.geom.positions() {
                for c in 0..self.geom.positions() {
                    slabs[(map, r, c)] += sd * S::standard_normal(rng);
                }
            }
        }
        let state = SpikeSlabState {
            spikes: spikes.clone(),
            slabs: slabs.clone(),
        };
        let v_next = self.sample_v_given_sh(&state, rng)?;
        Ok((spikes, slabs, v_next))
    }

    /// Fused positive/negative phase statistics: sample h | v, integrate the
    /// slab out, reusing one projection pass.
    pub fn sampled_phase_stats<R: Rng + ?Sized>(
        &self,
        v: &Array2<S>,
        rng: &mut R,
    ) -> Result<SsRbmParams<S>> {
        self.geom.check_image(v)?;
        let proj = self.projections(v)?;
        let sq = field_sq_sums(v, &self.geom)?;
        let clamp = S::of(ACTIVATION_CLAMP);
        let spikes = self
            .spike_logits_from(&proj, &sq)
            .mapv(|x| {
                if S::unit_uniform(rng) < x.min(clamp).max(-clamp).sigmoid() {
                    S::one()
                } else {
                    S::zero()
                }
            });
        self.rb_grad_stats_from(v, &proj, &sq, &spikes)
    }

    /// F(v) = lambda/2 |v|^2 - sum_i softplus(logit_i(v)), up to an additive
    /// constant. Monitoring only.
    pub fn free_energy(&self, v: &Array2<S>) -> Result<S> {
        let logits = self.spike_logits(v)?;
        let quad = S::of(0.5) * self.params.vis_precision * v.iter().map(|&x| x * x).sum::<S>();
        Ok(quad - logits.iter().map(|&x| x.softplus()).sum::<S>())
    }

    /// dE/dtheta at a full configuration, summed over weight-sharing ties.
    pub fn energy_grad_stats(
        &self,
        v: &Array2<S>,
        state: &SpikeSlabState<S>,
    ) -> Result<SsRbmParams<S>> {
        self.geom.check_image(v)?;
        self.geom.check_units(&state.spikes)?;
        self.geom.check_units(&state.slabs)?;
        let sq = field_sq_sums(v, &self.geom)?;
        let mut second_moment = state.slabs.clone();
        second_moment.mapv_inplace(|s| s * s);
        let mut slab_spike = state.slabs.clone();
        slab_spike.zip_mut_with(&state.spikes, |s, &h| *s *= h);
        self.grad_stats_from(v, &state.spikes, &slab_spike, &second_moment, &sq)
    }

    /// dE/dtheta with the slab integrated out given (v, binary h): s h is
    /// replaced by its conditional mean, s^2 by its conditional second moment
    /// mean^2 + alpha^-1.
    pub fn rb_grad_stats(&self, v: &Array2<S>, spikes: &Array3<S>) -> Result<SsRbmParams<S>> {
        self.geom.check_image(v)?;
        self.geom.check_units(spikes)?;
        let proj = self.projections(v)?;
        let sq = field_sq_sums(v, &self.geom)?;
        self.rb_grad_stats_from(v, &proj, &sq, spikes)
    }

    fn rb_grad_stats_from(
        &self,
        v: &Array2<S>,
        proj: &Array3<S>,
        sq: &Array3<S>,
        spikes: &Array3<S>,
    ) -> Result<SsRbmParams<S>> {
        let mean = self.slab_mean_from(proj, spikes);
        let mut second_moment = Array3::zeros(self.unit_shape());
        for map in 0..self.geom.num_maps() {
            let var = self.params.slab_precision[map].recip();
            for r in 0..self.geom.positions() {
                for c in 0..self.geom.positions() {
                    let m = mean[(map, r, c)];
                    second_moment[(map, r, c)] = m * m + var;
                }
            }
        }
        self.grad_stats_from(v, spikes, &mean, &second_moment, sq)
    }

    /// E[dE/dtheta | v] with both h and s integrated out (factorial
    /// conditionals make this closed-form). Deterministic in v.
    pub fn expected_grad_stats(&self, v: &Array2<S>) -> Result<SsRbmParams<S>> {
        self.geom.check_image(v)?;
        let proj = self.projections(v)?;
        let sq = field_sq_sums(v, &self.geom)?;
        let logits = self.spike_logits_from(&proj, &sq);
        let clamp = S::of(ACTIVATION_CLAMP);
        let probs = logits.mapv(|x| x.min(clamp).max(-clamp).sigmoid());
        let p = &self.params;
        let mut slab_spike = Array3::zeros(self.unit_shape());
        let mut second_moment = Array3::zeros(self.unit_shape());
        for map in 0..self.geom.num_maps() {
            let (alpha, mu) = (p.slab_precision[map], p.slab_mean[map]);
            for r in 0..self.geom.positions() {
                for c in 0..self.geom.positions() {
                    let ungated = proj[(map, r, c)] / alpha + mu;
                    let q = probs[(map, r, c)];
                    slab_spike[(map, r, c)] = q * ungated;
                    second_moment[(map, r, c)] = alpha.recip() + q * ungated * ungated;
                }
            }
        }
        self.grad_stats_from(v, &probs, &slab_spike, &second_moment, &sq)
    }

    /// Shared accumulation: `spikes` = h (or E[h]), `slab_spike` = s h (or
    /// E[s h]), `second_moment` = s^2 (or E[s^2]), `sq` = per-field |v|^2.
    fn grad_stats_from(
        &self,
        v: &Array2<S>,
        spikes: &Array3<S>,
        slab_spike: &Array3<S>,
        second_moment: &Array3<S>,
        sq: &Array3<S>,
    ) -> Result<SsRbmParams<S>> {
        let p = &self.params;
        let half = S::of(0.5);
        let (maps, m, k) = (
            self.geom.num_maps(),
            self.geom.positions(),
            self.geom.kernel(),
        );
        let mut g = SsRbmParams::zeros(maps, k);
        g.vis_precision = half * v.iter().map(|&x| x * x).sum::<S>();
        let width = self.geom.image_width();
        let img: Vec<S> = match v.as_slice() {
            Some(s) => s.to_vec(),
            None => v.iter().copied().collect(),
        };
        let img = img.as_slice();
        let wacc = g.weights.as_slice_mut().expect("freshly allocated");
        for map in 0..maps {
            let t = self.geom.tiling_of_map(map);
            let (alpha, mu) = (p.slab_precision[map], p.slab_mean[map]);
            let mut b_acc = S::zero();
            let mut mu_acc = S::zero();
            let mut alpha_acc = S::zero();
            let mut phi_acc = S::zero();
            for r in 0..m {
                for c in 0..m {
                    let h = spikes[(map, r, c)];
                    let sh = slab_spike[(map, r, c)];
                    let ss = second_moment[(map, r, c)];
                    b_acc += h;
                    mu_acc += mu * h - sh;
                    alpha_acc += half * ss - mu * sh + half * mu * mu * h;
                    phi_acc += h * sq[(t, r, c)];
                    if sh != S::zero() {
                        let (r0, c0) = self.geom.field_origin(t, r, c);
                        let kern = &mut wacc[map * k * k..(map + 1) * k * k];
                        for dr in 0..k {
                            let irow = &img
                                [(r0 + dr) * width + c0..(r0 + dr) * width + c0 + k];
                            let krow = &mut kern[dr * k..(dr + 1) * k];
                            for (o, &x) in krow.iter_mut().zip(irow) {
                                *o -= x * sh;
                            }
                        }
                    }
                }
            }
            g.spike_bias[map] = -b_acc;
            g.slab_mean[map] = alpha * mu_acc;
            g.slab_precision[map] = alpha_acc;
            g.gated_precision[map] = half * phi_acc;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn tiny_model(seed: u64) -> SsRbm<f64> {
        // 2x2 image, one tiling, kernel 2: each of the 2 maps covers the
        // whole image with a single unit.
        let geom = TiledGeometry::new(2, 2, 2, 1, 2).unwrap();
        let mut rng = stream_rng(seed, Stream::ParamInit);
        let mut params = SsRbmParams::zeros(geom.num_maps(), geom.kernel());
        params.weights.mapv_inplace(|_| rng.random::<f64>() - 0.5);
        params.spike_bias.mapv_inplace(|_| rng.random::<f64>() - 0.5);
        params.slab_mean.mapv_inplace(|_| rng.random::<f64>() - 0.5);
        params
            .slab_precision
            .mapv_inplace(|_| 0.6 + rng.random::<f64>());
        params.vis_precision = 0.8 + rng.random::<f64>();
        params
            .gated_precision
            .mapv_inplace(|_| 0.3 * rng.random::<f64>());
        SsRbm::new(params, geom).unwrap()
    }

    fn random_state(model: &SsRbm<f64>, rng: &mut impl Rng) -> (Array2<f64>, SpikeSlabState<f64>) {
        let g = &model.geom;
        let v = Array2::from_shape_fn((g.image_height(), g.image_width()), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        });
        let shape = (g.num_maps(), g.positions(), g.positions());
        let spikes = Array3::from_shape_fn(shape, |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let slabs = Array3::from_shape_fn(shape, |_| rng.random::<f64>() * 2.0 - 1.0);
        (v, SpikeSlabState { spikes, slabs })
    }

    #[test]
    fn energy_vanishes_at_origin() {
        let model = tiny_model(1);
        let v = Array2::zeros((2, 2));
        let zero = SpikeSlabState {
            spikes: Array3::zeros((2, 1, 1)),
            slabs: Array3::zeros((2, 1, 1)),
        };
        assert_eq!(model.energy(&v, &zero).unwrap(), 0.0);
    }

    #[test]
    fn slab_terms_cancel_at_conditional_mean() {
        // One-pixel model: W = 0, lambda = 1, phi = 0, alpha = 1, b = 0,
        // h = 1, s = mu, v = 1 gives E = 1/2 regardless of mu.
        for mu in [0.0, 0.7, -2.3] {
            let geom = TiledGeometry::new(1, 1, 1, 1, 1).unwrap();
            let mut params = SsRbmParams::<f64>::zeros(1, 1);
            params.slab_precision[0] = 1.0;
            params.slab_mean[0] = mu;
            params.vis_precision = 1.0;
            let model = SsRbm::new(params, geom).unwrap();
            let v = Array2::from_elem((1, 1), 1.0);
            let state = SpikeSlabState {
                spikes: Array3::from_elem((1, 1, 1), 1.0),
                slabs: Array3::from_elem((1, 1, 1), mu),
            };
            assert!((model.energy(&v, &state).unwrap() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn energy_matches_term_by_term_resummation() {
        // Independent summation straight from the definition, using the
        // geometry's pixel lists instead of the forward map.
        let mut rng = stream_rng(7, Stream::DataSampling);
        for seed in 0..20 {
            let model = tiny_model(seed);
            let (v, state) = random_state(&model, &mut rng);
            let g = &model.geom;
            let p = &model.params;
            let mut expected = 0.5 * p.vis_precision * v.iter().map(|x| x * x).sum::<f64>();
            for map in 0..g.num_maps() {
                let t = g.tiling_of_map(map);
                for r in 0..g.positions() {
                    for c in 0..g.positions() {
                        let h = state.spikes[(map, r, c)];
                        let s = state.slabs[(map, r, c)];
                        let mut proj = 0.0;
                        let mut sq = 0.0;
                        for (i, px) in g.field_pixels(t, r, c).into_iter().enumerate() {
                            proj += v[px] * p.weights[(map, i / g.kernel(), i % g.kernel())];
                            sq += v[px] * v[px];
                        }
                        let (a, mu, b) =
                            (p.slab_precision[map], p.slab_mean[map], p.spike_bias[map]);
                        expected += -proj * s * h
                            + 0.5 * p.gated_precision[map] * h * sq
                            + 0.5 * a * s * s
                            - a * mu * s * h
                            - b * h
                            + 0.5 * a * mu * mu * h;
                    }
                }
            }
            let got = model.energy(&v, &state).unwrap();
            assert!((got - expected).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn zero_weights_activation_is_sigmoid_of_bias() {
        let mut model = tiny_model(2);
        model.params.weights.fill(0.0);
        model.params.gated_precision.fill(0.0);
        model.params.spike_bias.fill(0.0);
        let v = Array2::from_elem((2, 2), 0.4);
        let probs = model.spike_activation(&v).unwrap();
        assert!(probs.iter().all(|&p| (p - 0.5).abs() < 1e-15));
        model.params.spike_bias.fill(-1.25);
        let probs = model.spike_activation(&v).unwrap();
        let expect = 1.0 / (1.0 + 1.25f64.exp());
        assert!(probs.iter().all(|&p| (p - expect).abs() < 1e-15));
    }

    #[test]
    fn activation_monotone_under_scaling_without_mean_terms() {
        let mut model = tiny_model(3);
        model.params.slab_mean.fill(0.0);
        model.params.gated_precision.fill(0.0);
        model.params.spike_bias.fill(0.0);
        let mut rng = stream_rng(3, Stream::DataSampling);
        let v = Array2::from_shape_fn((2, 2), |_| rng.random::<f64>() - 0.5);
        let base = model.spike_activation(&v).unwrap();
        for c in [1.5, 2.0, 10.0] {
            let scaled = model.spike_activation(&v.mapv(|x| c * x)).unwrap();
            for (a, b) in scaled.iter().zip(base.iter()) {
                assert!(a >= b);
            }
        }
    }

    #[test]
    fn slab_mean_with_zero_weights_is_gated_mu() {
        let mut model = tiny_model(4);
        model.params.weights.fill(0.0);
        let v = Array2::from_elem((2, 2), 0.7);
        let mut spikes = Array3::zeros((2, 1, 1));
        spikes[(0, 0, 0)] = 1.0;
        let mean = model.slab_mean(&v, &spikes).unwrap();
        assert_eq!(mean[(0, 0, 0)], model.params.slab_mean[0]);
        assert_eq!(mean[(1, 0, 0)], 0.0);
    }

    #[test]
    fn slab_sampler_matches_closed_form_moments() {
        let model = tiny_model(5);
        let mut rng = stream_rng(5, Stream::Chains);
        let v = Array2::from_shape_fn((2, 2), |_| rng.random::<f64>() - 0.5);
        let spikes = Array3::from_elem((2, 1, 1), 1.0);
        let mean = model.slab_mean(&v, &spikes).unwrap();
        let n = 100_000;
        let mut acc = vec![0.0; 2];
        let mut acc2 = vec![0.0; 2];
        for _ in 0..n {
            let s = model.sample_s_given_vh(&v, &spikes, &mut rng).unwrap();
            for map in 0..2 {
                acc[map] += s[(map, 0, 0)];
                acc2[map] += s[(map, 0, 0)] * s[(map, 0, 0)];
            }
        }
        for map in 0..2 {
            let var = 1.0 / model.params.slab_precision[map];
            let emp_mean = acc[map] / n as f64;
            let se = (var / n as f64).sqrt();
            assert!(
                (emp_mean - mean[(map, 0, 0)]).abs() < 4.0 * se,
                "mean off: {emp_mean} vs {}",
                mean[(map, 0, 0)]
            );
            let emp_var = acc2[map] / n as f64 - emp_mean * emp_mean;
            // SE of a Gaussian sample variance ~ var * sqrt(2/n)
            assert!((emp_var - var).abs() < 4.0 * var * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn decoupled_slab_when_spike_off() {
        let model = tiny_model(6);
        let v = Array2::from_elem((2, 2), 0.9);
        let spikes = Array3::zeros((2, 1, 1));
        let mean = model.slab_mean(&v, &spikes).unwrap();
        assert!(mean.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn visible_mean_zero_when_slabs_off_and_variance_matches() {
        let model = tiny_model(7);
        let mut rng = stream_rng(7, Stream::Chains);
        let spikes = Array3::from_elem((2, 1, 1), 1.0);
        let state = SpikeSlabState {
            spikes: spikes.clone(),
            slabs: Array3::zeros((2, 1, 1)),
        };
        let (mean, precision) = model.visible_mean_precision(&state).unwrap();
        assert!(mean.iter().all(|&m| m == 0.0));
        let expect_prec = model.params.vis_precision
            + model.params.gated_precision[0]
            + model.params.gated_precision[1];
        assert!(precision.iter().all(|&p| (p - expect_prec).abs() < 1e-14));

        let n = 100_000;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let v = model.sample_v_given_sh(&state, &mut rng).unwrap();
            acc2 += v[(0, 0)] * v[(0, 0)];
        }
        let var = 1.0 / expect_prec;
        let emp = acc2 / n as f64;
        assert!((emp - var).abs() < 4.0 * var * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn visible_mean_reduces_to_scaled_adjoint_without_gating() {
        let mut model = tiny_model(8);
        model.params.gated_precision.fill(0.0);
        let mut rng = stream_rng(8, Stream::Chains);
        let shape = (2, 1, 1);
        let state = SpikeSlabState {
            spikes: Array3::from_shape_fn(shape, |_| f64::from(rng.random::<bool>())),
            slabs: Array3::from_shape_fn(shape, |_| rng.random::<f64>() - 0.5),
        };
        let (mean, _) = model.visible_mean_precision(&state).unwrap();
        let mut gated = state.slabs.clone();
        gated.zip_mut_with(&state.spikes, |s, &h| *s *= h);
        let adj = tiled_adjoint(&gated, &model.params.weights, &model.geom).unwrap();
        let lam = model.params.vis_precision;
        for (m, a) in mean.iter().zip(adj.iter()) {
            assert!((m - a / lam).abs() < 1e-14);
        }
    }

    #[test]
    fn gibbs_sweep_is_seed_deterministic() {
        let model = tiny_model(9);
        let v = Array2::from_elem((2, 2), 0.1);
        let run = |seed| {
            let mut rng = stream_rng(seed, Stream::Chains);
            let mut img = v.clone();
            for _ in 0..50 {
                img = model.gibbs_sweep(&img, &mut rng).unwrap().2;
            }
            img
        };
        assert_eq!(run(42), run(42));
        assert_ne!(run(42), run(43));
    }

    #[test]
    fn free_energy_closed_form_without_weights() {
        let mut model = tiny_model(10);
        model.params.weights.fill(0.0);
        model.params.slab_mean.fill(0.0);
        model.params.gated_precision.fill(0.0);
        let mut rng = stream_rng(10, Stream::DataSampling);
        let v = Array2::from_shape_fn((2, 2), |_| rng.random::<f64>() - 0.5);
        let f = model.free_energy(&v).unwrap();
        let quad = 0.5 * model.params.vis_precision * v.iter().map(|x| x * x).sum::<f64>();
        let sp: f64 = model
            .params
            .spike_bias
            .iter()
            .map(|&b| (1.0 + b.exp()).ln())
            .sum();
        assert!((f - (quad - sp)).abs() < 1e-12);
    }

    #[test]
    fn free_energy_decreases_along_strong_filter_direction() {
        let mut model = tiny_model(11);
        model.params.slab_mean.fill(0.0);
        model.params.gated_precision.fill(0.0);
        model.params.vis_precision = 1.0;
        // v aligned with kernel 0; scaling it up beats the quadratic penalty
        // through the squared projection term as long as alpha is small.
        model.params.slab_precision.fill(0.05);
        let w0 = model
            .params
            .weights
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        let v = w0;
        let f1 = model.free_energy(&v).unwrap();
        let f2 = model.free_energy(&v.mapv(|x| 2.0 * x)).unwrap();
        assert!(f2 < f1);
    }

    #[test]
    fn spike_bias_gradient_is_negative_spike_count() {
        let model = tiny_model(12);
        let mut rng = stream_rng(12, Stream::DataSampling);
        let (v, mut state) = random_state(&model, &mut rng);
        state.spikes.fill(0.0);
        let g = model.energy_grad_stats(&v, &state).unwrap();
        assert!(g.spike_bias.iter().all(|&x| x == 0.0));
        state.spikes.fill(1.0);
        let g = model.energy_grad_stats(&v, &state).unwrap();
        assert!(g.spike_bias.iter().all(|&x| x == -1.0));
    }

    #[test]
    fn energy_grads_match_central_differences() {
        let mut rng = stream_rng(13, Stream::DataSampling);
        for seed in 0..10 {
            let model = tiny_model(100 + seed);
            let (v, state) = random_state(&model, &mut rng);
            let grads = model.energy_grad_stats(&v, &state).unwrap();
            let eps = 1e-5;
            let energy_with = |mutate: &dyn Fn(&mut SsRbmParams<f64>)| -> f64 {
                let mut m = model.clone();
                mutate(&mut m.params);
                m.energy(&v, &state).unwrap()
            };
            let check = |fd: f64, an: f64, what: &str| {
                assert!(
                    (fd - an).abs() <= 1e-6 * an.abs().max(1.0),
                    "{what}: fd {fd} vs analytic {an} (seed {seed})"
                );
            };
            for map in 0..model.geom.num_maps() {
                for dr in 0..model.geom.kernel() {
                    for dc in 0..model.geom.kernel() {
                        let up = energy_with(&|p| p.weights[(map, dr, dc)] += eps);
                        let dn = energy_with(&|p| p.weights[(map, dr, dc)] -= eps);
                        check((up - dn) / (2.0 * eps), grads.weights[(map, dr, dc)], "W");
                    }
                }
                let up = energy_with(&|p| p.spike_bias[map] += eps);
                let dn = energy_with(&|p| p.spike_bias[map] -= eps);
                check((up - dn) / (2.0 * eps), grads.spike_bias[map], "b");
                let up = energy_with(&|p| p.slab_mean[map] += eps);
                let dn = energy_with(&|p| p.slab_mean[map] -= eps);
                check((up - dn) / (2.0 * eps), grads.slab_mean[map], "mu");
                let up = energy_with(&|p| p.slab_precision[map] += eps);
                let dn = energy_with(&|p| p.slab_precision[map] -= eps);
                check((up - dn) / (2.0 * eps), grads.slab_precision[map], "alpha");
                let up = energy_with(&|p| p.gated_precision[map] += eps);
                let dn = energy_with(&|p| p.gated_precision[map] -= eps);
                check((up - dn) / (2.0 * eps), grads.gated_precision[map], "phi");
            }
            let up = energy_with(&|p| p.vis_precision += eps);
            let dn = energy_with(&|p| p.vis_precision -= eps);
            check((up - dn) / (2.0 * eps), grads.vis_precision, "lambda");
        }
    }

    #[test]
    fn constraint_clamp_restores_invariants() {
        let mut params = SsRbmParams::<f64>::zeros(3, 2);
        params.slab_precision.fill(-1.0);
        params.vis_precision = 0.0;
        params.gated_precision[1] = -0.5;
        assert!(!params.satisfies_constraints());
        params.clamp_constraints();
        assert!(params.satisfies_constraints());
        assert_eq!(params.slab_precision[0], ALPHA_MIN);
        assert_eq!(params.vis_precision, LAMBDA_MIN);
        assert_eq!(params.gated_precision[1], 0.0);
        // in-range parameters pass through untouched
        let mut ok = SsRbmParams::<f64>::zeros(1, 1);
        ok.slab_precision.fill(1.3);
        ok.vis_precision = 0.9;
        let before = ok.clone();
        ok.clamp_constraints();
        assert_eq!(ok, before);
    }
}
