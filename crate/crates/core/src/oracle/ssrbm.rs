//! Exact computations for a tiny, dense spike-and-slab RBM.
//!
//! Per binary spike configuration h, the joint over x = (v, s) is Gaussian:
//! precision has the diagonal visible block `lambda + sum_i phi_i h_i`, the
//! diagonal slab block `alpha`, and off-diagonal coupling `-W_i h_i`; the
//! linear term is `alpha_i mu_i h_i` on the slabs. Everything reduces to
//! enumeration plus Gaussian algebra.

use ndarray::{Array1, Array2};

use super::linalg::{chol_inverse, chol_logdet, chol_solve, cholesky, logsumexp};
use super::{bit_vector, MAX_ENUM_BITS};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::ssrbm::{SsRbm, SsRbmParams};
use crate::tiling::TiledGeometry;

const LN_2PI: f64 = 1.8378770664093453;

/// Dense tiny model: D visible pixels, N spike/slab units, no weight sharing.
#[derive(Debug, Clone)]
pub struct TinySsRbm {
    /// Weight vectors, one column per unit (D x N).
    pub w: Array2<f64>,
    /// Spike biases (N).
    pub b: Array1<f64>,
    /// Slab means (N).
    pub mu: Array1<f64>,
    /// Slab precisions (N).
    pub alpha: Array1<f64>,
    /// Per-pixel visible precision diagonal (D).
    pub lambda: Array1<f64>,
    /// Per-unit gated precision diagonal contribution (D x N).
    pub phi: Array2<f64>,
}

/// Dense parameter-shaped gradients.
#[derive(Debug, Clone)]
pub struct TinySsRbmGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub mu: Array1<f64>,
    pub alpha: Array1<f64>,
    pub lambda: Array1<f64>,
    pub phi: Array2<f64>,
}

impl TinySsRbm {
    pub fn new(
        w: Array2<f64>,
        b: Array1<f64>,
        mu: Array1<f64>,
        alpha: Array1<f64>,
        lambda: Array1<f64>,
        phi: Array2<f64>,
    ) -> Result<Self> {
        let (d, n) = w.dim();
        if b.len() != n || mu.len() != n || alpha.len() != n || lambda.len() != d {
            return Err(Error::dimension("tiny ssRBM parameter lengths disagree"));
        }
        if phi.dim() != (d, n) {
            return Err(Error::dimension("phi must be D x N"));
        }
        if n > MAX_ENUM_BITS {
            return Err(Error::config(format!(
                "enumeration over {n} spikes is intractable"
            )));
        }
        if alpha.iter().any(|&a| a <= 0.0) {
            return Err(Error::ImproperModel("slab precision must be positive".into()));
        }
        Ok(Self {
            w,
            b,
            mu,
            alpha,
            lambda,
            phi,
        })
    }

    /// Expand a weight-shared layer into dense form. Unit order matches the
    /// layer's (tiling, filter, row, col) enumeration; pixels are row-major.
    pub fn from_layer<S: Real>(layer: &SsRbm<S>) -> Result<Self> {
        let geom = &layer.geom;
        let p = &layer.params;
        let d = geom.num_pixels();
        let n = geom.num_units();
        let width = geom.image_width();
        let mut w = Array2::<f64>::zeros((d, n));
        let mut phi = Array2::<f64>::zeros((d, n));
        let mut b = Array1::<f64>::zeros(n);
        let mut mu = Array1::<f64>::zeros(n);
        let mut alpha = Array1::<f64>::zeros(n);
        let m = geom.positions();
        let mut unit = 0;
        for map in 0..geom.num_maps() {
            let t = geom.tiling_of_map(map);
            for r in 0..m {
                for c in 0..m {
                    for (idx, (pr, pc)) in geom.field_pixels(t, r, c).into_iter().enumerate() {
                        let pix = pr * width + pc;
                        let (dr, dc) = (idx / geom.kernel(), idx % geom.kernel());
                        w[(pix, unit)] = p.weights[(map, dr, dc)].as_f64();
                        phi[(pix, unit)] = p.gated_precision[map].as_f64();
                    }
                    b[unit] = p.spike_bias[map].as_f64();
                    mu[unit] = p.slab_mean[map].as_f64();
                    alpha[unit] = p.slab_precision[map].as_f64();
                    unit += 1;
                }
            }
        }
        let lambda = Array1::from_elem(d, p.vis_precision.as_f64());
        Self::new(w, b, mu, alpha, lambda, phi)
    }

    /// Sum dense parameter-shaped values back onto the layer's tied shapes.
    pub fn collapse_grads(
        grads: &TinySsRbmGrads,
        geom: &TiledGeometry,
    ) -> Result<SsRbmParams<f64>> {
        let mut out = SsRbmParams::<f64>::zeros(geom.num_maps(), geom.kernel());
        let width = geom.image_width();
        let m = geom.positions();
        let mut unit = 0;
        for map in 0..geom.num_maps() {
            let t = geom.tiling_of_map(map);
            for r in 0..m {
                for c in 0..m {
                    for (idx, (pr, pc)) in geom.field_pixels(t, r, c).into_iter().enumerate() {
                        let pix = pr * width + pc;
                        let (dr, dc) = (idx / geom.kernel(), idx % geom.kernel());
                        out.weights[(map, dr, dc)] += grads.w[(pix, unit)];
                        out.gated_precision[map] += grads.phi[(pix, unit)];
                    }
                    out.spike_bias[map] += grads.b[unit];
                    out.slab_mean[map] += grads.mu[unit];
                    out.slab_precision[map] += grads.alpha[unit];
                    unit += 1;
                }
            }
        }
        out.vis_precision = grads.lambda.sum();
        Ok(out)
    }

    pub fn num_pixels(&self) -> usize {
        self.w.nrows()
    }
    pub fn num_units(&self) -> usize {
        self.w.ncols()
    }

    pub fn energy(&self, v: &Array1<f64>, s: &Array1<f64>, h: &Array1<f64>) -> f64 {
        let (d, n) = self.w.dim();
        let mut e = 0.0;
        for k in 0..d {
            let mut prec = self.lambda[k];
            for i in 0..n {
                prec += self.phi[(k, i)] * h[i];
            }
            e += 0.5 * prec * v[k] * v[k];
        }
        for i in 0..n {
            let proj: f64 = (0..d).map(|k| v[k] * self.w[(k, i)]).sum();
            e += -proj * s[i] * h[i] + 0.5 * self.alpha[i] * s[i] * s[i]
                - self.alpha[i] * self.mu[i] * s[i] * h[i]
                - self.b[i] * h[i]
                + 0.5 * self.alpha[i] * self.mu[i] * self.mu[i] * h[i];
        }
        e
    }

    /// Joint Gaussian over (v, s) for a fixed spike configuration:
    /// (precision matrix, linear coefficient, log of the h-dependent constant).
    fn joint_gaussian(&self, h: &Array1<f64>) -> (Array2<f64>, Array1<f64>, f64) {
        let (d, n) = self.w.dim();
        let dim = d + n;
        let mut prec = Array2::<f64>::zeros((dim, dim));
        let mut lin = Array1::<f64>::zeros(dim);
        let mut constant = 0.0;
        for k in 0..d {
            let mut p = self.lambda[k];
            for i in 0..n {
                p += self.phi[(k, i)] * h[i];
            }
            prec[(k, k)] = p;
        }
        for i in 0..n {
            prec[(d + i, d + i)] = self.alpha[i];
            for k in 0..d {
                let c = -self.w[(k, i)] * h[i];
                prec[(k, d + i)] = c;
                prec[(d + i, k)] = c;
            }
            lin[d + i] = self.alpha[i] * self.mu[i] * h[i];
            constant += (self.b[i] - 0.5 * self.alpha[i] * self.mu[i] * self.mu[i]) * h[i];
        }
        (prec, lin, constant)
    }

    /// log of the unnormalized mass of one spike configuration,
    /// `log int int exp(-E(v, s, h)) dv ds`.
    fn log_mass(&self, h: &Array1<f64>) -> Result<f64> {
        let (prec, lin, constant) = self.joint_gaussian(h);
        let dim = prec.nrows();
        let l = cholesky(&prec).ok_or_else(|| {
            Error::ImproperModel(format!("non-PD precision for spikes {h}"))
        })?;
        let mean = chol_solve(&l, &lin);
        let quad: f64 = mean.iter().zip(lin.iter()).map(|(m, r)| m * r).sum();
        Ok(constant + 0.5 * (dim as f64 * LN_2PI - chol_logdet(&l) + quad))
    }

    /// log Z by enumerating spikes and integrating (v, s) analytically.
    pub fn log_partition(&self) -> Result<f64> {
        let n = self.num_units();
        let mut terms = Vec::with_capacity(1 << n);
        for mask in 0..(1usize << n) {
            terms.push(self.log_mass(&bit_vector(n, mask))?);
        }
        Ok(logsumexp(&terms))
    }

    /// p(h) table over all 2^N configurations, in mask order.
    pub fn spike_config_table(&self) -> Result<Vec<f64>> {
        let n = self.num_units();
        let mut logs = Vec::with_capacity(1 << n);
        for mask in 0..(1usize << n) {
            logs.push(self.log_mass(&bit_vector(n, mask))?);
        }
        let z = logsumexp(&logs);
        Ok(logs.into_iter().map(|l| (l - z).exp()).collect())
    }

    /// Model marginals P(h_i = 1).
    pub fn spike_marginals(&self) -> Result<Array1<f64>> {
        let n = self.num_units();
        let table = self.spike_config_table()?;
        let mut out = Array1::<f64>::zeros(n);
        for (mask, p) in table.iter().enumerate() {
            for i in 0..n {
                if (mask >> i) & 1 == 1 {
                    out[i] += p;
                }
            }
        }
        Ok(out)
    }

    /// Mean and covariance of (v, s) under the model (mixture over spikes).
    pub fn joint_moments(&self) -> Result<(Array1<f64>, Array2<f64>)> {
        let n = self.num_units();
        let dim = self.num_pixels() + n;
        let table = self.spike_config_table()?;
        let mut mean = Array1::<f64>::zeros(dim);
        let mut second = Array2::<f64>::zeros((dim, dim));
        for mask in 0..(1usize << n) {
            let h = bit_vector(n, mask);
            let (prec, lin, _) = self.joint_gaussian(&h);
            let l = cholesky(&prec)
                .ok_or_else(|| Error::ImproperModel("non-PD precision".into()))?;
            let m = chol_solve(&l, &lin);
            let cov = chol_inverse(&l);
            let p = table[mask];
            for a in 0..dim {
                mean[a] += p * m[a];
                for bb in 0..dim {
                    second[(a, bb)] += p * (cov[(a, bb)] + m[a] * m[bb]);
                }
            }
        }
        let cov = Array2::from_shape_fn((dim, dim), |(a, bb)| {
            second[(a, bb)] - mean[a] * mean[bb]
        });
        Ok((mean, cov))
    }

    /// Marginal mean and variance of each pixel under the model.
    pub fn visible_moments(&self) -> Result<(Array1<f64>, Array1<f64>)> {
        let d = self.num_pixels();
        let (mean, cov) = self.joint_moments()?;
        let vm = Array1::from_shape_fn(d, |k| mean[k]);
        let vv = Array1::from_shape_fn(d, |k| cov[(k, k)]);
        Ok((vm, vv))
    }

    /// log of the unnormalized v-density for one spike configuration, with
    /// the slabs integrated out.
    fn log_vmass_given_h(&self, v: &Array1<f64>, mask: usize) -> f64 {
        let (d, n) = self.w.dim();
        let mut quad = 0.0;
        for k in 0..d {
            let mut p = self.lambda[k];
            for i in 0..n {
                if (mask >> i) & 1 == 1 {
                    p += self.phi[(k, i)];
                }
            }
            quad += 0.5 * p * v[k] * v[k];
        }
        let mut active = 0.0;
        for i in 0..n {
            if (mask >> i) & 1 == 1 {
                let proj: f64 = (0..d).map(|k| v[k] * self.w[(k, i)]).sum();
                let t = proj + self.alpha[i] * self.mu[i];
                active += t * t / (2.0 * self.alpha[i]) + self.b[i]
                    - 0.5 * self.alpha[i] * self.mu[i] * self.mu[i];
            }
        }
        let slab_norm: f64 = (0..n)
            .map(|i| 0.5 * (LN_2PI - self.alpha[i].ln()))
            .sum();
        -quad + active + slab_norm
    }

    /// Exact joint table P(h | v) over all 2^N configurations.
    pub fn spike_table_given_v(&self, v: &Array1<f64>) -> Vec<f64> {
        let n = self.num_units();
        let logs: Vec<f64> = (0..(1usize << n))
            .map(|mask| self.log_vmass_given_h(v, mask))
            .collect();
        let z = logsumexp(&logs);
        logs.into_iter().map(|l| (l - z).exp()).collect()
    }

    /// Exact conditional marginals P(h_i = 1 | v) by enumeration (independent
    /// of the factorized sigmoid route the layer uses).
    pub fn spike_marginals_given_v(&self, v: &Array1<f64>) -> Array1<f64> {
        let n = self.num_units();
        let table = self.spike_table_given_v(v);
        let mut out = Array1::<f64>::zeros(n);
        for (mask, p) in table.iter().enumerate() {
            for i in 0..n {
                if (mask >> i) & 1 == 1 {
                    out[i] += p;
                }
            }
        }
        out
    }

    /// Unnormalized log density of the visible marginal p(v).
    pub fn log_vmass(&self, v: &Array1<f64>) -> f64 {
        let n = self.num_units();
        let logs: Vec<f64> = (0..(1usize << n))
            .map(|mask| self.log_vmass_given_h(v, mask))
            .collect();
        logsumexp(&logs)
    }

    /// Exact log p(v).
    pub fn log_likelihood(&self, v: &Array1<f64>) -> Result<f64> {
        Ok(self.log_vmass(v) - self.log_partition()?)
    }

    /// E_model[dE/dtheta]: mixture over spikes of per-configuration Gaussian
    /// moments. Central finite differences of `log_partition` equal the
    /// negative of this (exponential-family identity).
    pub fn model_grad_expectations(&self) -> Result<TinySsRbmGrads> {
        let (d, n) = self.w.dim();
        let dim = d + n;
        let table = self.spike_config_table()?;
        let mut g = TinySsRbmGrads {
            w: Array2::zeros((d, n)),
            b: Array1::zeros(n),
            mu: Array1::zeros(n),
            alpha: Array1::zeros(n),
            lambda: Array1::zeros(d),
            phi: Array2::zeros((d, n)),
        };
        for mask in 0..(1usize << n) {
            let h = bit_vector(n, mask);
            let (prec, lin, _) = self.joint_gaussian(&h);
            let l = cholesky(&prec)
                .ok_or_else(|| Error::ImproperModel("non-PD precision".into()))?;
            let m = chol_solve(&l, &lin);
            let cov = chol_inverse(&l);
            let p = table[mask];
            let e2 = |a: usize, bb: usize| cov[(a, bb)] + m[a] * m[bb];
            debug_assert_eq!(dim, d + n);
            for k in 0..d {
                g.lambda[k] += p * 0.5 * e2(k, k);
            }
            for i in 0..n {
                let hi = h[i];
                let si = d + i;
                g.b[i] += p * (-hi);
                g.mu[i] += p * self.alpha[i] * hi * (self.mu[i] - m[si]);
                g.alpha[i] += p
                    * (0.5 * e2(si, si) - self.mu[i] * hi * m[si]
                        + 0.5 * self.mu[i] * self.mu[i] * hi);
                for k in 0..d {
                    g.w[(k, i)] += p * (-hi) * e2(k, si);
                    g.phi[(k, i)] += p * 0.5 * hi * e2(k, k);
                }
            }
        }
        Ok(g)
    }

    /// Gradient of mean log-likelihood over `data` by central finite
    /// differences on every dense parameter.
    pub fn loglik_grad_fd(&self, data: &[Array1<f64>], eps: f64) -> Result<TinySsRbmGrads> {
        let (d, n) = self.w.dim();
        let mean_ll = |model: &TinySsRbm| -> Result<f64> {
            let z = model.log_partition()?;
            let total: f64 = data.iter().map(|v| model.log_vmass(v) - z).sum();
            Ok(total / data.len() as f64)
        };
        let fd = |bump: &dyn Fn(&mut TinySsRbm, f64)| -> Result<f64> {
            let mut up = self.clone();
            bump(&mut up, eps);
            let mut dn = self.clone();
            bump(&mut dn, -eps);
            Ok((mean_ll(&up)? - mean_ll(&dn)?) / (2.0 * eps))
        };
        let mut g = TinySsRbmGrads {
            w: Array2::zeros((d, n)),
            b: Array1::zeros(n),
            mu: Array1::zeros(n),
            alpha: Array1::zeros(n),
            lambda: Array1::zeros(d),
            phi: Array2::zeros((d, n)),
        };
        for k in 0..d {
            for i in 0..n {
                g.w[(k, i)] = fd(&|m, e| m.w[(k, i)] += e)?;
                g.phi[(k, i)] = fd(&|m, e| m.phi[(k, i)] += e)?;
            }
            g.lambda[k] = fd(&|m, e| m.lambda[k] += e)?;
        }
        for i in 0..n {
            g.b[i] = fd(&|m, e| m.b[i] += e)?;
            g.mu[i] = fd(&|m, e| m.mu[i] += e)?;
            g.alpha[i] = fd(&|m, e| m.alpha[i] += e)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::linalg::{gauss_hermite, gh_log_integral};
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    pub(crate) fn random_tiny(
        d: usize,
        n: usize,
        seed: u64,
        with_phi: bool,
    ) -> TinySsRbm {
        let mut rng = stream_rng(seed, Stream::ParamInit);
        let w = Array2::from_shape_fn((d, n), |_| 0.6 * (rng.random::<f64>() - 0.5));
        let b = Array1::from_shape_fn(n, |_| rng.random::<f64>() - 0.5);
        let mu = Array1::from_shape_fn(n, |_| rng.random::<f64>() - 0.5);
        let alpha = Array1::from_shape_fn(n, |_| 0.8 + rng.random::<f64>());
        let lambda = Array1::from_shape_fn(d, |_| 1.0 + rng.random::<f64>());
        let phi = if with_phi {
            Array2::from_shape_fn((d, n), |_| 0.2 * rng.random::<f64>())
        } else {
            Array2::zeros((d, n))
        };
        TinySsRbm::new(w, b, mu, alpha, lambda, phi).unwrap()
    }

    #[test]
    fn hand_computed_partition() {
        // D = 1, N = 1, W = 0, phi = 0, b = 0, lambda = alpha = 1:
        // both spike states integrate to 2*pi regardless of mu.
        for mu in [0.0, 0.8, -1.7] {
            let model = TinySsRbm::new(
                Array2::zeros((1, 1)),
                Array1::zeros(1),
                Array1::from_elem(1, mu),
                Array1::from_elem(1, 1.0),
                Array1::from_elem(1, 1.0),
                Array2::zeros((1, 1)),
            )
            .unwrap();
            let z = model.log_partition().unwrap();
            assert!((z - (2.0 * 2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_matches_gauss_hermite_quadrature() {
        // Independent route: enumerate h, then 2-D adaptive-width GH over (v, s).
        let (nodes, weights) = gauss_hermite(64);
        for seed in 0..5 {
            let model = random_tiny(1, 1, seed, true);
            let analytic = model.log_partition().unwrap();
            let mut terms = Vec::new();
            for mask in 0..2usize {
                let h = bit_vector(1, mask);
                let sig_v = (1.0 / model.lambda[0]).sqrt() * 1.5;
                let sig_s = (1.0 / model.alpha[0]).sqrt() * 1.5;
                let log_g = |v: f64| {
                    gh_log_integral(&nodes, &weights, model.mu[0] * h[0], sig_s, |s| {
                        -model.energy(
                            &Array1::from_elem(1, v),
                            &Array1::from_elem(1, s),
                            &h,
                        )
                    })
                };
                terms.push(gh_log_integral(&nodes, &weights, 0.0, sig_v, log_g));
            }
            let quad = logsumexp(&terms);
            assert!(
                (analytic - quad).abs() < 1e-6,
                "seed {seed}: {analytic} vs {quad}"
            );
        }
    }

    #[test]
    fn partition_matches_dense_grid_quadrature() {
        // Brute-force trapezoid over a wide (v, s) grid.
        let model = random_tiny(1, 1, 11, true);
        let analytic = model.log_partition().unwrap();
        let (lo, hi, steps) = (-12.0, 12.0, 3000usize);
        let dx = (hi - lo) / steps as f64;
        let mut total = 0.0;
        for mask in 0..2usize {
            let h = bit_vector(1, mask);
            for iv in 0..=steps {
                let v = lo + iv as f64 * dx;
                let wv = if iv == 0 || iv == steps { 0.5 } else { 1.0 };
                for is in 0..=steps {
                    let s = lo + is as f64 * dx;
                    let ws = if is == 0 || is == steps { 0.5 } else { 1.0 };
                    total += wv
                        * ws
                        * (-model.energy(
                            &Array1::from_elem(1, v),
                            &Array1::from_elem(1, s),
                            &h,
                        ))
                        .exp();
                }
            }
        }
        let grid = (total * dx * dx).ln();
        assert!((analytic - grid).abs() < 1e-6, "{analytic} vs {grid}");
    }

    #[test]
    fn improper_model_is_rejected() {
        // Strong coupling with weak visible precision: lambda - W alpha^-1 W^T < 0
        // once the spike is on.
        let model = TinySsRbm::new(
            Array2::from_elem((1, 1), 3.0),
            Array1::zeros(1),
            Array1::zeros(1),
            Array1::from_elem(1, 1.0),
            Array1::from_elem(1, 0.5),
            Array2::zeros((1, 1)),
        )
        .unwrap();
        assert!(matches!(
            model.log_partition(),
            Err(Error::ImproperModel(_))
        ));
    }

    #[test]
    fn symmetric_construction_gives_uniform_conditionals() {
        // Two identical decoupled units: P(h | v) must be the same for both,
        // and 0.5 each when the logits vanish.
        let model = TinySsRbm::new(
            Array2::zeros((2, 2)),
            Array1::zeros(2),
            Array1::zeros(2),
            Array1::from_elem(2, 1.0),
            Array1::from_elem(2, 1.0),
            Array2::zeros((2, 2)),
        )
        .unwrap();
        let v = Array1::from_vec(vec![0.3, -0.2]);
        let marg = model.spike_marginals_given_v(&v);
        assert!((marg[0] - 0.5).abs() < 1e-14);
        assert!((marg[1] - 0.5).abs() < 1e-14);
        let table = model.spike_table_given_v(&v);
        assert!(table.iter().all(|&p| (p - 0.25).abs() < 1e-14));
    }

    #[test]
    fn marginal_density_integrates_to_one() {
        let model = random_tiny(1, 2, 3, true);
        let z = model.log_partition().unwrap();
        let (lo, hi, steps) = (-14.0, 14.0, 20000usize);
        let dx = (hi - lo) / steps as f64;
        let mut total = 0.0;
        for i in 0..=steps {
            let v = Array1::from_elem(1, lo + i as f64 * dx);
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            total += w * (model.log_vmass(&v) - z).exp();
        }
        total *= dx;
        assert!((total - 1.0).abs() < 1e-4, "integral {total}");
    }

    #[test]
    fn partition_gradient_is_spike_expectation() {
        // d logZ / d b_i = E[h_i]
        let model = random_tiny(2, 2, 5, true);
        let marg = model.spike_marginals().unwrap();
        let eps = 1e-6;
        for i in 0..2 {
            let mut up = model.clone();
            up.b[i] += eps;
            let mut dn = model.clone();
            dn.b[i] -= eps;
            let fd = (up.log_partition().unwrap() - dn.log_partition().unwrap()) / (2.0 * eps);
            assert!((fd - marg[i]).abs() < 1e-6, "unit {i}: {fd} vs {}", marg[i]);
        }
    }

    #[test]
    fn model_grad_expectations_match_partition_differences() {
        // d logZ / d theta = -E_model[dE/dtheta], every parameter.
        let model = random_tiny(2, 2, 6, true);
        let g = model.model_grad_expectations().unwrap();
        let eps = 1e-6;
        let fd = |bump: &dyn Fn(&mut TinySsRbm, f64)| -> f64 {
            let mut up = model.clone();
            bump(&mut up, eps);
            let mut dn = model.clone();
            bump(&mut dn, -eps);
            (up.log_partition().unwrap() - dn.log_partition().unwrap()) / (2.0 * eps)
        };
        for i in 0..2 {
            assert!((fd(&|m, e| m.b[i] += e) + g.b[i]).abs() < 1e-6);
            assert!((fd(&|m, e| m.mu[i] += e) + g.mu[i]).abs() < 1e-6);
            assert!((fd(&|m, e| m.alpha[i] += e) + g.alpha[i]).abs() < 1e-6);
            for k in 0..2 {
                assert!((fd(&|m, e| m.w[(k, i)] += e) + g.w[(k, i)]).abs() < 1e-6);
                assert!((fd(&|m, e| m.phi[(k, i)] += e) + g.phi[(k, i)]).abs() < 1e-6);
            }
        }
        for k in 0..2 {
            assert!((fd(&|m, e| m.lambda[k] += e) + g.lambda[k]).abs() < 1e-6);
        }
    }
}
