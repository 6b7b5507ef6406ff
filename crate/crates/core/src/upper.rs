//! Upper layers of the stack.
//!
//! [`SsVisRbm`] models the first layer's spike-and-slab state (s, h) through a
//! binary hidden vector g, with convolutional weight sharing over the feature
//! maps:
//!
//! E(s,h,g) = -sum_ij g_j U_ij s_i h_i - sum_j rho_j g_j
//!          + sum_i ( alpha_i/2 s_i^2 - alpha_i mu_i s_i h_i - b_i h_i
//!                    [+ alpha_i mu_i^2 / 2 h_i] )
//!
//! The bracketed spike-bias-shift term mirrors the first-layer energy and is
//! on by default so that parameters copied from below keep their meaning;
//! `bias_shift = false` selects the variant without it. Conditionals are
//! derived from whichever energy is active and are oracle-verified for both.
//!
//! [`BinaryRbm`] is a standard binary-binary RBM with the same convolutional
//! sharing, used as the third layer.

use ndarray::{Array1, Array3, Array4};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::ssrbm::{SsRbm, ACTIVATION_CLAMP, ALPHA_MIN};
use crate::tiling::{conv_adjoint, conv_forward, conv_weight_grad, ConvGeometry};

fn bernoulli<S: Real, R: Rng + ?Sized>(probs: &Array3<S>, rng: &mut R) -> Array3<S> {
    probs.mapv(|p| {
        if S::unit_uniform(rng) < p {
            S::one()
        } else {
            S::zero()
        }
    })
}

fn sigmoid_clamped<S: Real>(logits: &Array3<S>) -> Array3<S> {
    let clamp = S::of(ACTIVATION_CLAMP);
    logits.mapv(|x| x.min(clamp).max(-clamp).sigmoid())
}

/// RBM with spike-and-slab visibles (one (s, h) pair per lower-layer unit)
/// and binary hiddens g. Slab parameters are tied per visible feature map,
/// interactions per g-filter.
#[derive(Debug, Clone)]
pub struct SsVisRbm<S: Real = f64> {
    /// Interaction kernels U, shape (g_filters, input_maps, k, k).
    pub interaction: Array4<S>,
    /// g biases rho, one per g-filter.
    pub g_bias: Array1<S>,
    /// Spike bias per visible map.
    pub spike_bias: Array1<S>,
    /// Slab mean per visible map.
    pub slab_mean: Array1<S>,
    /// Slab precision per visible map (positive).
    pub slab_precision: Array1<S>,
    /// Include the spike-bias-shift energy term (mirrors the first layer).
    pub bias_shift: bool,
    pub geom: ConvGeometry,
}

/// Parameter-shaped gradients / fast weights for [`SsVisRbm`].
#[derive(Debug, Clone, PartialEq)]
pub struct SsVisGrads<S: Real = f64> {
    pub interaction: Array4<S>,
    pub g_bias: Array1<S>,
    pub spike_bias: Array1<S>,
    pub slab_mean: Array1<S>,
    pub slab_precision: Array1<S>,
}

impl<S: Real> SsVisGrads<S> {
    pub fn zeros(geom: &ConvGeometry) -> Self {
        Self {
            interaction: Array4::zeros((
                geom.output_filters(),
                geom.input_maps(),
                geom.kernel(),
                geom.kernel(),
            )),
            g_bias: Array1::zeros(geom.output_filters()),
            spike_bias: Array1::zeros(geom.input_maps()),
            slab_mean: Array1::zeros(geom.input_maps()),
            slab_precision: Array1::zeros(geom.input_maps()),
        }
    }

    pub fn scale(&mut self, f: S) {
        self.interaction.mapv_inplace(|x| x * f);
        self.g_bias.mapv_inplace(|x| x * f);
        self.spike_bias.mapv_inplace(|x| x * f);
        self.slab_mean.mapv_inplace(|x| x * f);
        self.slab_precision.mapv_inplace(|x| x * f);
    }

    pub fn add_scaled(&mut self, other: &Self, f: S) {
        self.interaction
            .zip_mut_with(&other.interaction, |a, &b| *a += b * f);
        self.g_bias.zip_mut_with(&other.g_bias, |a, &b| *a += b * f);
        self.spike_bias
            .zip_mut_with(&other.spike_bias, |a, &b| *a += b * f);
        self.slab_mean
            .zip_mut_with(&other.slab_mean, |a, &b| *a += b * f);
        self.slab_precision
            .zip_mut_with(&other.slab_precision, |a, &b| *a += b * f);
    }

    pub fn max_abs(&self) -> S {
        let mut m = S::zero();
        for x in self
            .interaction
            .iter()
            .chain(self.g_bias.iter())
            .chain(self.spike_bias.iter())
            .chain(self.slab_mean.iter())
            .chain(self.slab_precision.iter())
        {
            m = m.max(x.abs());
        }
        m
    }
}

impl<S: Real> SsVisRbm<S> {
    /// Initialize on top of a trained first layer: slab parameters copied
    /// per filter, interactions near zero, g biases zero. With U ~ 0 the
    /// implied distribution over (s, h) matches the copied spike-slab shape.
    pub fn init_from_lower<R: Rng + ?Sized>(
        lower: &SsRbm<S>,
        g_filters: usize,
        kernel: usize,
        bias_shift: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let geom = ConvGeometry::new(
            lower.geom.num_maps(),
            lower.geom.positions(),
            lower.geom.positions(),
            kernel,
            g_filters,
        )?;
        let interaction = Array4::from_shape_fn(
            (g_filters, geom.input_maps(), kernel, kernel),
            |_| S::standard_normal(rng) * S::of(0.01),
        );
        Ok(Self {
            interaction,
            g_bias: Array1::zeros(g_filters),
            spike_bias: lower.params.spike_bias.clone(),
            slab_mean: lower.params.slab_mean.clone(),
            slab_precision: lower.params.slab_precision.clone(),
            bias_shift,
            geom,
        })
    }

    pub fn new(
        interaction: Array4<S>,
        g_bias: Array1<S>,
        spike_bias: Array1<S>,
        slab_mean: Array1<S>,
        slab_precision: Array1<S>,
        bias_shift: bool,
        geom: ConvGeometry,
    ) -> Result<Self> {
        geom.check_kernels(&interaction)?;
        if g_bias.len() != geom.output_filters()
            || spike_bias.len() != geom.input_maps()
            || slab_mean.len() != geom.input_maps()
            || slab_precision.len() != geom.input_maps()
        {
            return Err(Error::dimension("upper-layer parameter lengths disagree"));
        }
        Ok(Self {
            interaction,
            g_bias,
            spike_bias,
            slab_mean,
            slab_precision,
            bias_shift,
            geom,
        })
    }

    /// Same parameters over a different (valid) map size.
    pub fn resized(&self, map_side: usize) -> Result<Self> {
        let geom = ConvGeometry::new(
            self.geom.input_maps(),
            map_side,
            map_side,
            self.geom.kernel(),
            self.geom.output_filters(),
        )?;
        let mut out = self.clone();
        out.geom = geom;
        Ok(out)
    }

    fn gated(&self, s: &Array3<S>, h: &Array3<S>) -> Array3<S> {
        let mut sh = s.clone();
        sh.zip_mut_with(h, |a, &b| *a *= b);
        sh
    }

    fn bias_shift_factor(&self) -> S {
        if self.bias_shift {
            S::one()
        } else {
            S::zero()
        }
    }

    pub fn energy(&self, s: &Array3<S>, h: &Array3<S>, g: &Array3<S>) -> Result<S> {
        self.geom.check_inputs(s)?;
        self.geom.check_inputs(h)?;
        self.geom.check_outputs(g)?;
        let sh = self.gated(s, h);
        let drive = conv_forward(&sh, &self.interaction, &self.geom)?;
        let half = S::of(0.5);
        let shift = self.bias_shift_factor();
        let mut e = S::zero();
        for j in 0..self.geom.output_filters() {
            for r in 0..self.geom.output_height() {
                for c in 0..self.geom.output_width() {
                    e -= g[(j, r, c)] * (drive[(j, r, c)] + self.g_bias[j]);
                }
            }
        }
        for map in 0..self.geom.input_maps() {
            let (alpha, mu, b) = (
                self.slab_precision[map],
                self.slab_mean[map],
                self.spike_bias[map],
            );
            for r in 0..self.geom.map_height() {
                for c in 0..self.geom.map_width() {
                    let (si, hi) = (s[(map, r, c)], h[(map, r, c)]);
                    e += half * alpha * si * si - alpha * mu * si * hi - b * hi
                        + shift * half * alpha * mu * mu * hi;
                }
            }
        }
        Ok(e)
    }

    /// Logits of p(g_j = 1 | s, h) = sigma(sum_i U_ij s_i h_i + rho_j).
    pub fn g_logits(&self, s: &Array3<S>, h: &Array3<S>) -> Result<Array3<S>> {
        let sh = self.gated(s, h);
        let mut drive = conv_forward(&sh, &self.interaction, &self.geom)?;
        for j in 0..self.geom.output_filters() {
            let rho = self.g_bias[j];
            drive
                .index_axis_mut(ndarray::Axis(0), j)
                .mapv_inplace(|x| x + rho);
        }
        Ok(drive)
    }

    pub fn g_activation(&self, s: &Array3<S>, h: &Array3<S>) -> Result<Array3<S>> {
        Ok(sigmoid_clamped(&self.g_logits(s, h)?))
    }

    pub fn sample_g_given_sh<R: Rng + ?Sized>(
        &self,
        s: &Array3<S>,
        h: &Array3<S>,
        rng: &mut R,
    ) -> Result<Array3<S>> {
        Ok(bernoulli(&self.g_activation(s, h)?, rng))
    }

    /// Top-down drive d_i = sum_j U_ij g_j.
    pub fn down_input(&self, g: &Array3<S>) -> Result<Array3<S>> {
        conv_adjoint(g, &self.interaction, &self.geom)
    }

    /// Logits of P(h_i = 1 | g), derived by integrating the slab out of the
    /// active energy variant: `d^2/(2 alpha) + mu d + b` plus
    /// `alpha mu^2 / 2` exactly when the bias-shift term is absent.
    pub fn spike_logits_given_g(&self, g: &Array3<S>) -> Result<Array3<S>> {
        let d = self.down_input(g)?;
        Ok(self.spike_logits_from_drive(&d))
    }

    fn spike_logits_from_drive(&self, drive: &Array3<S>) -> Array3<S> {
        let half = S::of(0.5);
        let shift = S::one() - self.bias_shift_factor();
        let mut out = drive.clone();
        for map in 0..self.geom.input_maps() {
            let (alpha, mu, b) = (
                self.slab_precision[map],
                self.slab_mean[map],
                self.spike_bias[map],
            );
            out.index_axis_mut(ndarray::Axis(0), map).mapv_inplace(|d| {
                half / alpha * d * d + mu * d + b + shift * half * alpha * mu * mu
            });
        }
        out
    }

    pub fn spike_activation_given_g(&self, g: &Array3<S>) -> Result<Array3<S>> {
        Ok(sigmoid_clamped(&self.spike_logits_given_g(g)?))
    }

    /// Samples h | g and returns the activation probabilities alongside.
    pub fn sample_h_given_g<R: Rng + ?Sized>(
        &self,
        g: &Array3<S>,
        rng: &mut R,
    ) -> Result<(Array3<S>, Array3<S>)> {
        let probs = self.spike_activation_given_g(g)?;
        Ok((bernoulli(&probs, rng), probs))
    }

    /// E[s_i | h, g] = (alpha^-1 d_i + mu_i) h_i.
    pub fn slab_mean_given(&self, h: &Array3<S>, g: &Array3<S>) -> Result<Array3<S>> {
        let d = self.down_input(g)?;
        self.geom.check_inputs(h)?;
        let mut out = d;
        for map in 0..self.geom.input_maps() {
            let (alpha, mu) = (self.slab_precision[map], self.slab_mean[map]);
            for r in 0..self.geom.map_height() {
                for c in 0..self.geom.map_width() {
                    out[(map, r, c)] = (out[(map, r, c)] / alpha + mu) * h[(map, r, c)];
                }
            }
        }
        Ok(out)
    }

    pub fn sample_s_given_hg<R: Rng + ?Sized>(
        &self,
        h: &Array3<S>,
        g: &Array3<S>,
        rng: &mut R,
    ) -> Result<Array3<S>> {
        let mut out = self.slab_mean_given(h, g)?;
        for map in 0..self.geom.input_maps() {
            let sd = self.slab_precision[map].recip().sqrt();
            for r in 0..self.geom.map_height() {
                for c in 0..self.geom.map_width() {
                    out[(map, r, c)] += sd * S::standard_normal(rng);
                }
            }
        }
        Ok(out)
    }

    /// One block sweep: g | (s, h), then h | g, then s | (h, g).
    pub fn gibbs_sweep<R: Rng + ?Sized>(
        &self,
        s: &Array3<S>,
        h: &Array3<S>,
        rng: &mut R,
    ) -> Result<(Array3<S>, Array3<S>, Array3<S>)> {
        let g = self.sample_g_given_sh(s, h, rng)?;
        let (h_next, _) = self.sample_h_given_g(&g, rng)?;
        let s_next = self.sample_s_given_hg(&h_next, &g, rng)?;
        Ok((g, h_next, s_next))
    }

    /// F(s, h) with g summed out; monitoring only.
    pub fn free_energy(&self, s: &Array3<S>, h: &Array3<S>) -> Result<S> {
        let logits = self.g_logits(s, h)?;
        let half = S::of(0.5);
        let shift = self.bias_shift_factor();
        let mut e = S::zero();
        for map in 0..self.geom.input_maps() {
            let (alpha, mu, b) = (
                self.slab_precision[map],
                self.slab_mean[map],
                self.spike_bias[map],
            );
            for r in 0..self.geom.map_height() {
                for c in 0..self.geom.map_width() {
                    let (si, hi) = (s[(map, r, c)], h[(map, r, c)]);
                    e += half * alpha * si * si - alpha * mu * si * hi - b * hi
                        + shift * half * alpha * mu * mu * hi;
                }
            }
        }
        Ok(e - logits.iter().map(|&x| x.softplus()).sum::<S>())
    }

    /// dE/dtheta at a full configuration (conv ties summed).
    pub fn energy_grad_stats(
        &self,
        s: &Array3<S>,
        h: &Array3<S>,
        g: &Array3<S>,
    ) -> Result<SsVisGrads<S>> {
        self.geom.check_inputs(s)?;
        self.geom.check_inputs(h)?;
        self.geom.check_outputs(g)?;
        let sh = self.gated(s, h);
        let mut grads = SsVisGrads::zeros(&self.geom);
        grads.interaction = conv_weight_grad(&sh, g, &self.geom)?;
        grads.interaction.mapv_inplace(|x| -x);
        for j in 0..self.geom.output_filters() {
            let mut acc = S::zero();
            for r in 0..self.geom.output_height() {
                for c in 0..self.geom.output_width() {
                    acc += g[(j, r, c)];
                }
            }
            grads.g_bias[j] = -acc;
        }
        let half = S::of(0.5);
        let shift = self.bias_shift_factor();
        for map in 0..self.geom.input_maps() {
            let (alpha, mu) = (self.slab_precision[map], self.slab_mean[map]);
            let mut b_acc = S::zero();
            let mut mu_acc = S::zero();
            let mut a_acc = S::zero();
            for r in 0..self.geom.map_height() {
                for c in 0..self.geom.map_width() {
                    let (si, hi) = (s[(map, r, c)], h[(map, r, c)]);
                    b_acc += hi;
                    mu_acc += shift * mu * hi - si * hi;
                    a_acc += half * si * si - mu * si * hi + shift * half * mu * mu * hi;
                }
            }
            grads.spike_bias[map] = -b_acc;
            grads.slab_mean[map] = alpha * mu_acc;
            grads.slab_precision[map] = a_acc;
        }
        Ok(grads)
    }

    /// dE/dtheta with g integrated out given the visible (s, h): exact since
    /// the g-dependent statistics are linear in g.
    pub fn rb_grad_stats(&self, s: &Array3<S>, h: &Array3<S>) -> Result<SsVisGrads<S>> {
        let g_probs = self.g_activation(s, h)?;
        self.energy_grad_stats(s, h, &g_probs)
    }

    pub fn clamp_constraints(&mut self) {
        let amin = S::of(ALPHA_MIN);
        self.slab_precision.mapv_inplace(|a| a.max(amin));
    }
}

/// Binary-binary RBM with convolutional weight sharing (third layer).
#[derive(Debug, Clone)]
pub struct BinaryRbm<S: Real = f64> {
    pub weights: Array4<S>,
    /// Per input-map visible bias.
    pub visible_bias: Array1<S>,
    /// Per filter hidden bias.
    pub hidden_bias: Array1<S>,
    pub geom: ConvGeometry,
}

/// Parameter-shaped gradients / fast weights for [`BinaryRbm`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryRbmGrads<S: Real = f64> {
    pub weights: Array4<S>,
    pub visible_bias: Array1<S>,
    pub hidden_bias: Array1<S>,
}

impl<S: Real> BinaryRbmGrads<S> {
    pub fn zeros(geom: &ConvGeometry) -> Self {
        Self {
            weights: Array4::zeros((
                geom.output_filters(),
                geom.input_maps(),
                geom.kernel(),
                geom.kernel(),
            )),
            visible_bias: Array1::zeros(geom.input_maps()),
            hidden_bias: Array1::zeros(geom.output_filters()),
        }
    }

    pub fn scale(&mut self, f: S) {
        self.weights.mapv_inplace(|x| x * f);
        self.visible_bias.mapv_inplace(|x| x * f);
        self.hidden_bias.mapv_inplace(|x| x * f);
    }

    pub fn add_scaled(&mut self, other: &Self, f: S) {
        self.weights.zip_mut_with(&other.weights, |a, &b| *a += b * f);
        self.visible_bias
            .zip_mut_with(&other.visible_bias, |a, &b| *a += b * f);
        self.hidden_bias
            .zip_mut_with(&other.hidden_bias, |a, &b| *a += b * f);
    }

    pub fn max_abs(&self) -> S {
        let mut m = S::zero();
        for x in self
            .weights
            .iter()
            .chain(self.visible_bias.iter())
            .chain(self.hidden_bias.iter())
        {
            m = m.max(x.abs());
        }
        m
    }
}

impl<S: Real> BinaryRbm<S> {
    pub fn init<R: Rng + ?Sized>(geom: ConvGeometry, rng: &mut R) -> Self {
        let weights = Array4::from_shape_fn(
            (
                geom.output_filters(),
                geom.input_maps(),
                geom.kernel(),
                geom.kernel(),
            ),
            |_| S::standard_normal(rng) * S::of(0.01),
        );
        Self {
            weights,
            visible_bias: Array1::zeros(geom.input_maps()),
            hidden_bias: Array1::zeros(geom.output_filters()),
            geom,
        }
    }

    pub fn resized(&self, map_side: usize) -> Result<Self> {
        let geom = ConvGeometry::new(
            self.geom.input_maps(),
            map_side,
            map_side,
            self.geom.kernel(),
            self.geom.output_filters(),
        )?;
        let mut out = self.clone();
        out.geom = geom;
        Ok(out)
    }

    pub fn energy(&self, v: &Array3<S>, h: &Array3<S>) -> Result<S> {
        self.geom.check_inputs(v)?;
        self.geom.check_outputs(h)?;
        let drive = conv_forward(v, &self.weights, &self.geom)?;
        let mut e = S::zero();
        for j in 0..self.geom.output_filters() {
            for r in 0..self.geom.output_height() {
                for c in 0..self.geom.output_width() {
                    e -= h[(j, r, c)] * (drive[(j, r, c)] + self.hidden_bias[j]);
                }
            }
        }
        for map in 0..self.geom.input_maps() {
            let a = self.visible_bias[map];
            for r in 0..self.geom.map_height() {
                for c in 0..self.geom.map_width() {
                    e -= a * v[(map, r, c)];
                }
            }
        }
        Ok(e)
    }

    pub fn hidden_logits(&self, v: &Array3<S>) -> Result<Array3<S>> {
        let mut drive = conv_forward(v, &self.weights, &self.geom)?;
        for j in 0..self.geom.output_filters() {
            let c = self.hidden_bias[j];
            drive
                .index_axis_mut(ndarray::Axis(0), j)
                .mapv_inplace(|x| x + c);
        }
        Ok(drive)
    }

    pub fn visible_logits(&self, h: &Array3<S>) -> Result<Array3<S>> {
        let mut drive = conv_adjoint(h, &self.weights, &self.geom)?;
        for map in 0..self.geom.input_maps() {
            let a = self.visible_bias[map];
            drive
                .index_axis_mut(ndarray::Axis(0), map)
                .mapv_inplace(|x| x + a);
        }
        Ok(drive)
    }

    pub fn hidden_activation(&self, v: &Array3<S>) -> Result<Array3<S>> {
        Ok(sigmoid_clamped(&self.hidden_logits(v)?))
    }

    pub fn visible_activation(&self, h: &Array3<S>) -> Result<Array3<S>> {
        Ok(sigmoid_clamped(&self.visible_logits(h)?))
    }

    pub fn sample_h_given_v<R: Rng + ?Sized>(
        &self,
        v: &Array3<S>,
        rng: &mut R,
    ) -> Result<Array3<S>> {
        Ok(bernoulli(&self.hidden_activation(v)?, rng))
    }

    pub fn sample_v_given_h<R: Rng + ?Sized>(
        &self,
        h: &Array3<S>,
        rng: &mut R,
    ) -> Result<Array3<S>> {
        Ok(bernoulli(&self.visible_activation(h)?, rng))
    }

    pub fn gibbs_sweep<R: Rng + ?Sized>(
        &self,
        v: &Array3<S>,
        rng: &mut R,
    ) -> Result<(Array3<S>, Array3<S>)> {
        let h = self.sample_h_given_v(v, rng)?;
        let v_next = self.sample_v_given_h(&h, rng)?;
        Ok((h, v_next))
    }

    pub fn free_energy(&self, v: &Array3<S>) -> Result<S> {
        let logits = self.hidden_logits(v)?;
        let mut e = S::zero();
        for map in 0..self.geom.input_maps() {
            let a = self.visible_bias[map];
            for r in 0..self.geom.map_height() {
                for c in 0..self.geom.map_width() {
                    e -= a * v[(map, r, c)];
                }
            }
        }
        Ok(e - logits.iter().map(|&x| x.softplus()).sum::<S>())
    }

    pub fn energy_grad_stats(&self, v: &Array3<S>, h: &Array3<S>) -> Result<BinaryRbmGrads<S>> {
        self.geom.check_inputs(v)?;
        self.geom.check_outputs(h)?;
        let mut grads = BinaryRbmGrads::zeros(&self.geom);
        grads.weights = conv_weight_grad(v, h, &self.geom)?;
        grads.weights.mapv_inplace(|x| -x);
        for map in 0..self.geom.input_maps() {
            let mut acc = S::zero();
            for r in 0..self.geom.map_height() {
                for c in 0..self.geom.map_width() {
                    acc += v[(map, r, c)];
                }
            }
            grads.visible_bias[map] = -acc;
        }
        for j in 0..self.geom.output_filters() {
            let mut acc = S::zero();
            for r in 0..self.geom.output_height() {
                for c in 0..self.geom.output_width() {
                    acc += h[(j, r, c)];
                }
            }
            grads.hidden_bias[j] = -acc;
        }
        Ok(grads)
    }

    /// dE/dtheta with h integrated out given v (h statistics are linear).
    pub fn rb_grad_stats(&self, v: &Array3<S>) -> Result<BinaryRbmGrads<S>> {
        let probs = self.hidden_activation(v)?;
        self.energy_grad_stats(v, &probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use crate::tiling::TiledGeometry;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn tiny_upper(seed: u64, bias_shift: bool) -> SsVisRbm<f64> {
        // 1 input map of 2x2, kernel 2 -> 1x1 outputs, 2 g-filters.
        let geom = ConvGeometry::new(1, 2, 2, 2, 2).unwrap();
        let mut rng = stream_rng(seed, Stream::ParamInit);
        SsVisRbm::new(
            Array4::from_shape_fn((2, 1, 2, 2), |_| rng.random::<f64>() - 0.5),
            Array1::from_shape_fn(2, |_| rng.random::<f64>() - 0.5),
            Array1::from_shape_fn(1, |_| rng.random::<f64>() - 0.5),
            Array1::from_shape_fn(1, |_| rng.random::<f64>() - 0.5),
            Array1::from_shape_fn(1, |_| 0.7 + rng.random::<f64>()),
            bias_shift,
            geom,
        )
        .unwrap()
    }

    fn random_shg(
        model: &SsVisRbm<f64>,
        rng: &mut impl Rng,
    ) -> (Array3<f64>, Array3<f64>, Array3<f64>) {
        let g = &model.geom;
        let s = Array3::from_shape_fn((g.input_maps(), g.map_height(), g.map_width()), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        });
        let h = Array3::from_shape_fn((g.input_maps(), g.map_height(), g.map_width()), |_| {
            f64::from(rng.random::<bool>())
        });
        let gg = Array3::from_shape_fn(
            (g.output_filters(), g.output_height(), g.output_width()),
            |_| f64::from(rng.random::<bool>()),
        );
        (s, h, gg)
    }

    #[test]
    fn energy_vanishes_at_origin() {
        let model = tiny_upper(1, true);
        let s = Array3::zeros((1, 2, 2));
        let h = Array3::zeros((1, 2, 2));
        let g = Array3::zeros((2, 1, 1));
        assert_eq!(model.energy(&s, &h, &g).unwrap(), 0.0);
    }

    #[test]
    fn hidden_off_decouples_interactions() {
        let mut rng = stream_rng(2, Stream::DataSampling);
        let mut model = tiny_upper(2, true);
        let (s, h, _) = random_shg(&model, &mut rng);
        let g = Array3::zeros((2, 1, 1));
        let e1 = model.energy(&s, &h, &g).unwrap();
        model.interaction.mapv_inplace(|x| x * 7.0 + 1.0);
        model.g_bias.mapv_inplace(|x| x - 3.0);
        let e2 = model.energy(&s, &h, &g).unwrap();
        assert!((e1 - e2).abs() < 1e-14);
    }

    #[test]
    fn energy_matches_term_by_term_resummation() {
        let mut rng = stream_rng(3, Stream::DataSampling);
        for seed in 0..10 {
            for bias_shift in [true, false] {
                let model = tiny_upper(30 + seed, bias_shift);
                let (s, h, g) = random_shg(&model, &mut rng);
                // dense re-summation: the single output position sees all 4 inputs
                let mut expected = 0.0;
                for j in 0..2 {
                    let mut drive = 0.0;
                    for r in 0..2 {
                        for c in 0..2 {
                            drive += model.interaction[(j, 0, r, c)]
                                * s[(0, r, c)]
                                * h[(0, r, c)];
                        }
                    }
                    expected -= g[(j, 0, 0)] * (drive + model.g_bias[j]);
                }
                let (a, mu, b) = (
                    model.slab_precision[0],
                    model.slab_mean[0],
                    model.spike_bias[0],
                );
                for r in 0..2 {
                    for c in 0..2 {
                        let (si, hi) = (s[(0, r, c)], h[(0, r, c)]);
                        expected += 0.5 * a * si * si - a * mu * si * hi - b * hi;
                        if bias_shift {
                            expected += 0.5 * a * mu * mu * hi;
                        }
                    }
                }
                let got = model.energy(&s, &h, &g).unwrap();
                assert!((got - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_interactions_give_half_activation() {
        let mut model = tiny_upper(4, true);
        model.interaction.fill(0.0);
        model.g_bias.fill(0.0);
        let s = Array3::from_elem((1, 2, 2), 0.3);
        let h = Array3::from_elem((1, 2, 2), 1.0);
        let probs = model.g_activation(&s, &h).unwrap();
        assert!(probs.iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn spikes_off_gate_g_to_bias() {
        let model = tiny_upper(5, true);
        let s = Array3::from_elem((1, 2, 2), 5.0);
        let h = Array3::zeros((1, 2, 2));
        let logits = model.g_logits(&s, &h).unwrap();
        for j in 0..2 {
            assert!((logits[(j, 0, 0)] - model.g_bias[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn spike_given_g_closed_forms_at_zero_interaction() {
        // With U = 0 the logit is b under the bias-shift energy and
        // b + alpha mu^2 / 2 under the literal variant.
        for bias_shift in [true, false] {
            let mut model = tiny_upper(6, bias_shift);
            model.interaction.fill(0.0);
            let g = Array3::from_elem((2, 1, 1), 1.0);
            let logits = model.spike_logits_given_g(&g).unwrap();
            let (a, mu, b) = (
                model.slab_precision[0],
                model.slab_mean[0],
                model.spike_bias[0],
            );
            let expect = if bias_shift { b } else { b + 0.5 * a * mu * mu };
            assert!(logits.iter().all(|&x| (x - expect).abs() < 1e-14));
        }
    }

    #[test]
    fn slab_mean_gated_by_spikes() {
        let model = tiny_upper(7, true);
        let g = Array3::from_elem((2, 1, 1), 1.0);
        let h = Array3::zeros((1, 2, 2));
        let mean = model.slab_mean_given(&h, &g).unwrap();
        assert!(mean.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn sweep_is_seed_deterministic() {
        let model = tiny_upper(8, true);
        let mut rng = stream_rng(8, Stream::DataSampling);
        let (s, h, _) = random_shg(&model, &mut rng);
        let run = |seed| {
            let mut rng = stream_rng(seed, Stream::Chains);
            let (mut cs, mut ch) = (s.clone(), h.clone());
            for _ in 0..20 {
                let (_, hn, sn) = model.gibbs_sweep(&cs, &ch, &mut rng).unwrap();
                cs = sn;
                ch = hn;
            }
            (cs, ch)
        };
        assert_eq!(run(1), run(1));
    }

    #[test]
    fn upper_grads_match_central_differences() {
        let mut rng = stream_rng(9, Stream::DataSampling);
        for bias_shift in [true, false] {
            let model = tiny_upper(90, bias_shift);
            let (s, h, g) = random_shg(&model, &mut rng);
            let grads = model.energy_grad_stats(&s, &h, &g).unwrap();
            let eps = 1e-5;
            let energy_with = |mutate: &dyn Fn(&mut SsVisRbm<f64>)| -> f64 {
                let mut m = model.clone();
                mutate(&mut m);
                m.energy(&s, &h, &g).unwrap()
            };
            let check = |fd: f64, an: f64, what: &str| {
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{what}: {fd} vs {an}");
            };
            for j in 0..2 {
                for r in 0..2 {
                    for c in 0..2 {
                        let up = energy_with(&|m| m.interaction[(j, 0, r, c)] += eps);
                        let dn = energy_with(&|m| m.interaction[(j, 0, r, c)] -= eps);
                        check((up - dn) / (2.0 * eps), grads.interaction[(j, 0, r, c)], "U");
                    }
                }
                let up = energy_with(&|m| m.g_bias[j] += eps);
                let dn = energy_with(&|m| m.g_bias[j] -= eps);
                check((up - dn) / (2.0 * eps), grads.g_bias[j], "rho");
            }
            let up = energy_with(&|m| m.spike_bias[0] += eps);
            let dn = energy_with(&|m| m.spike_bias[0] -= eps);
            check((up - dn) / (2.0 * eps), grads.spike_bias[0], "b");
            let up = energy_with(&|m| m.slab_mean[0] += eps);
            let dn = energy_with(&|m| m.slab_mean[0] -= eps);
            check((up - dn) / (2.0 * eps), grads.slab_mean[0], "mu");
            let up = energy_with(&|m| m.slab_precision[0] += eps);
            let dn = energy_with(&|m| m.slab_precision[0] -= eps);
            check((up - dn) / (2.0 * eps), grads.slab_precision[0], "alpha");
        }
    }

    #[test]
    fn init_from_lower_copies_parameters_exactly() {
        let mut rng = stream_rng(10, Stream::ParamInit);
        let geom = TiledGeometry::new(21, 21, 11, 11, 3).unwrap();
        let lower = SsRbm::<f64>::init(geom, &mut rng);
        let upper = SsVisRbm::init_from_lower(&lower, 4, 1, true, &mut rng).unwrap();
        assert_eq!(upper.spike_bias, lower.params.spike_bias);
        assert_eq!(upper.slab_mean, lower.params.slab_mean);
        assert_eq!(upper.slab_precision, lower.params.slab_precision);
        assert!(upper.g_bias.iter().all(|&r| r == 0.0));
        let scale = upper.interaction.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(scale > 0.0 && scale < 0.1);
        // map geometry chains: 11x11 maps of 1x1 positions with kernel 1
        assert_eq!(upper.geom.input_maps(), 33);
        assert_eq!(upper.geom.output_height(), 1);
    }

    #[test]
    fn brbm_zero_weights_conditionals_are_bias_sigmoids() {
        let geom = ConvGeometry::new(2, 3, 3, 2, 2).unwrap();
        let mut rng = stream_rng(11, Stream::ParamInit);
        let mut model = BinaryRbm::<f64>::init(geom, &mut rng);
        model.weights.fill(0.0);
        model.visible_bias[0] = 0.5;
        model.visible_bias[1] = -0.5;
        model.hidden_bias.fill(1.0);
        let v = Array3::from_elem((2, 3, 3), 1.0);
        let h = Array3::from_elem((2, 2, 2), 1.0);
        let hp = model.hidden_activation(&v).unwrap();
        assert!(hp.iter().all(|&p| (p - 1.0f64.sigmoid()).abs() < 1e-15));
        let vp = model.visible_activation(&h).unwrap();
        assert!((vp[(0, 0, 0)] - 0.5f64.sigmoid()).abs() < 1e-15);
        assert!((vp[(1, 0, 0)] - (-0.5f64).sigmoid()).abs() < 1e-15);
    }

    #[test]
    fn brbm_grads_match_central_differences() {
        let geom = ConvGeometry::new(2, 3, 3, 2, 2).unwrap();
        let mut rng = stream_rng(12, Stream::ParamInit);
        let model = BinaryRbm::<f64>::init(geom, &mut rng);
        let v = Array3::from_shape_fn((2, 3, 3), |_| f64::from(rng.random::<bool>()));
        let h = Array3::from_shape_fn((2, 2, 2), |_| f64::from(rng.random::<bool>()));
        let grads = model.energy_grad_stats(&v, &h).unwrap();
        let eps = 1e-5;
        let energy_with = |mutate: &dyn Fn(&mut BinaryRbm<f64>)| -> f64 {
            let mut m = model.clone();
            mutate(&mut m);
            m.energy(&v, &h).unwrap()
        };
        for j in 0..2 {
            for ch in 0..2 {
                let up = energy_with(&|m| m.weights[(j, ch, 1, 0)] += eps);
                let dn = energy_with(&|m| m.weights[(j, ch, 1, 0)] -= eps);
                let fd = (up - dn) / (2.0 * eps);
                assert!((fd - grads.weights[(j, ch, 1, 0)]).abs() < 1e-6);
            }
            let up = energy_with(&|m| m.hidden_bias[j] += eps);
            let dn = energy_with(&|m| m.hidden_bias[j] -= eps);
            assert!(((up - dn) / (2.0 * eps) - grads.hidden_bias[j]).abs() < 1e-6);
            let up = energy_with(&|m| m.visible_bias[j] += eps);
            let dn = energy_with(&|m| m.visible_bias[j] -= eps);
            assert!(((up - dn) / (2.0 * eps) - grads.visible_bias[j]).abs() < 1e-6);
        }
    }
}
