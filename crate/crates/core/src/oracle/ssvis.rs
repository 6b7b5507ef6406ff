//! Exact computations for a tiny, dense second-layer model (spike-and-slab
//! visibles, binary hiddens g). Enumeration runs over (h, g); the slabs
//! integrate analytically per unit.

use ndarray::{Array1, Array2, Array3};

use super::linalg::logsumexp;
use super::{bit_vector, MAX_ENUM_BITS};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tiling::ConvGeometry;
use crate::upper::{SsVisGrads, SsVisRbm};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone)]
pub struct TinySsVis {
    /// Interactions, one column per hidden g (N x M).
    pub u: Array2<f64>,
    /// g biases (M).
    pub rho: Array1<f64>,
    /// Spike biases (N).
    pub b: Array1<f64>,
    /// Slab means (N).
    pub mu: Array1<f64>,
    /// Slab precisions (N).
    pub alpha: Array1<f64>,
    /// Whether the spike-bias-shift term is in the energy.
    pub bias_shift: bool,
}

#[derive(Debug, Clone)]
pub struct TinySsVisGrads {
    pub u: Array2<f64>,
    pub rho: Array1<f64>,
    pub b: Array1<f64>,
    pub mu: Array1<f64>,
    pub alpha: Array1<f64>,
}

impl TinySsVis {
    pub fn new(
        u: Array2<f64>,
        rho: Array1<f64>,
        b: Array1<f64>,
        mu: Array1<f64>,
        alpha: Array1<f64>,
        bias_shift: bool,
    ) -> Result<Self> {
        let (n, m) = u.dim();
        if rho.len() != m || b.len() != n || mu.len() != n || alpha.len() != n {
            return Err(Error::dimension("tiny upper-layer parameter lengths disagree"));
        }
        if n + m > MAX_ENUM_BITS {
            return Err(Error::config("enumeration over h and g is intractable"));
        }
        if alpha.iter().any(|&a| a <= 0.0) {
            return Err(Error::ImproperModel("slab precision must be positive".into()));
        }
        Ok(Self {
            u,
            rho,
            b,
            mu,
            alpha,
            bias_shift,
        })
    }

    /// Expand a convolutionally shared layer into dense form. Visible units
    /// are in (map, row, col) C-order, hiddens in (filter, row, col) C-order.
    pub fn from_layer<S: Real>(layer: &SsVisRbm<S>) -> Result<Self> {
        let geom = &layer.geom;
        let n = geom.num_inputs();
        let m = geom.num_outputs();
        let (mh, mw) = (geom.map_height(), geom.map_width());
        let (oh, ow) = (geom.output_height(), geom.output_width());
        let kk = geom.kernel();
        let mut u = Array2::<f64>::zeros((n, m));
        for jf in 0..geom.output_filters() {
            for jr in 0..oh {
                for jc in 0..ow {
                    let j = (jf * oh + jr) * ow + jc;
                    for c in 0..geom.input_maps() {
                        for dr in 0..kk {
                            for dc in 0..kk {
                                let i = (c * mh + jr + dr) * mw + jc + dc;
                                u[(i, j)] = layer.interaction[(jf, c, dr, dc)].as_f64();
                            }
                        }
                    }
                }
            }
        }
        let per_unit = |v: &Array1<S>| {
            Array1::from_shape_fn(n, |i| v[i / (mh * mw)].as_f64())
        };
        let rho = Array1::from_shape_fn(m, |j| layer.g_bias[j / (oh * ow)].as_f64());
        Self::new(
            u,
            rho,
            per_unit(&layer.spike_bias),
            per_unit(&layer.slab_mean),
            per_unit(&layer.slab_precision),
            layer.bias_shift,
        )
    }

    /// Sum dense parameter-shaped values back onto the layer's tied shapes.
    pub fn collapse_grads(grads: &TinySsVisGrads, geom: &ConvGeometry) -> SsVisGrads<f64> {
        let mut out = SsVisGrads::<f64>::zeros(geom);
        let (mh, mw) = (geom.map_height(), geom.map_width());
        let (oh, ow) = (geom.output_height(), geom.output_width());
        let kk = geom.kernel();
        for jf in 0..geom.output_filters() {
            for jr in 0..oh {
                for jc in 0..ow {
                    let j = (jf * oh + jr) * ow + jc;
                    out.g_bias[jf] += grads.rho[j];
                    for c in 0..geom.input_maps() {
                        for dr in 0..kk {
                            for dc in 0..kk {
                                let i = (c * mh + jr + dr) * mw + jc + dc;
                                out.interaction[(jf, c, dr, dc)] += grads.u[(i, j)];
                            }
                        }
                    }
                }
            }
        }
        for c in 0..geom.input_maps() {
            for r in 0..mh {
                for col in 0..mw {
                    let i = (c * mh + r) * mw + col;
                    out.spike_bias[c] += grads.b[i];
                    out.slab_mean[c] += grads.mu[i];
                    out.slab_precision[c] += grads.alpha[i];
                }
            }
        }
        out
    }

    pub fn num_units(&self) -> usize {
        self.u.nrows()
    }
    pub fn num_hidden(&self) -> usize {
        self.u.ncols()
    }

    fn shift(&self) -> f64 {
        if self.bias_shift {
            1.0
        } else {
            0.0
        }
    }

    pub fn energy(&self, s: &Array1<f64>, h: &Array1<f64>, g: &Array1<f64>) -> f64 {
        let (n, m) = self.u.dim();
        let zeta = self.shift();
        let mut e = 0.0;
        for j in 0..m {
            let mut drive = 0.0;
            for i in 0..n {
                drive += self.u[(i, j)] * s[i] * h[i];
            }
            e -= g[j] * (drive + self.rho[j]);
        }
        for i in 0..n {
            e += 0.5 * self.alpha[i] * s[i] * s[i]
                - self.alpha[i] * self.mu[i] * s[i] * h[i]
                - self.b[i] * h[i]
                + zeta * 0.5 * self.alpha[i] * self.mu[i] * self.mu[i] * h[i];
        }
        e
    }

    fn drive_given_g(&self, g: &Array1<f64>) -> Array1<f64> {
        let (n, m) = self.u.dim();
        Array1::from_shape_fn(n, |i| (0..m).map(|j| self.u[(i, j)] * g[j]).sum())
    }

    /// log of `int exp(-E(s, h, g)) ds` for fixed binary (h, g).
    fn log_mass(&self, h: &Array1<f64>, g: &Array1<f64>) -> f64 {
        let n = self.num_units();
        let zeta = self.shift();
        let d = self.drive_given_g(g);
        let mut out = 0.0;
        for j in 0..self.num_hidden() {
            out += self.rho[j] * g[j];
        }
        for i in 0..n {
            out += (self.b[i] - zeta * 0.5 * self.alpha[i] * self.mu[i] * self.mu[i]) * h[i];
            let t = d[i] + self.alpha[i] * self.mu[i];
            out += h[i] * t * t / (2.0 * self.alpha[i]);
            out += 0.5 * (LN_2PI - self.alpha[i].ln());
        }
        out
    }

    pub fn log_partition(&self) -> f64 {
        let (n, m) = self.u.dim();
        let mut terms = Vec::with_capacity(1 << (n + m));
        for hm in 0..(1usize << n) {
            let h = bit_vector(n, hm);
            for gm in 0..(1usize << m) {
                terms.push(self.log_mass(&h, &bit_vector(m, gm)));
            }
        }
        logsumexp(&terms)
    }

    /// Exact P(g | s, h) marginals by enumeration over g configurations,
    /// straight from the energy (h, s may be real-valued).
    pub fn g_marginals_given_sh(&self, s: &Array1<f64>, h: &Array1<f64>) -> Array1<f64> {
        let m = self.num_hidden();
        let logs: Vec<f64> = (0..(1usize << m))
            .map(|gm| -self.energy(s, h, &bit_vector(m, gm)))
            .collect();
        let z = logsumexp(&logs);
        let mut out = Array1::<f64>::zeros(m);
        for (gm, l) in logs.iter().enumerate() {
            let p = (l - z).exp();
            for j in 0..m {
                if (gm >> j) & 1 == 1 {
                    out[j] += p;
                }
            }
        }
        out
    }

    /// Exact P(h | g) marginals: enumeration over h with slabs integrated.
    pub fn h_marginals_given_g(&self, g: &Array1<f64>) -> Array1<f64> {
        let n = self.num_units();
        let logs: Vec<f64> = (0..(1usize << n))
            .map(|hm| self.log_mass(&bit_vector(n, hm), g))
            .collect();
        let z = logsumexp(&logs);
        let mut out = Array1::<f64>::zeros(n);
        for (hm, l) in logs.iter().enumerate() {
            let p = (l - z).exp();
            for i in 0..n {
                if (hm >> i) & 1 == 1 {
                    out[i] += p;
                }
            }
        }
        out
    }

    /// Exact slab conditional moments given (h, g), by 1-D quadrature on the
    /// unnormalized density (independent of the closed form the layer uses).
    pub fn slab_moments_given_hg(
        &self,
        h: &Array1<f64>,
        g: &Array1<f64>,
        nodes: &[f64],
        weights: &[f64],
    ) -> (Array1<f64>, Array1<f64>) {
        let n = self.num_units();
        let d = self.drive_given_g(g);
        let mut mean = Array1::<f64>::zeros(n);
        let mut var = Array1::<f64>::zeros(n);
        for i in 0..n {
            let log_density = |s: f64| {
                -0.5 * self.alpha[i] * s * s
                    + (d[i] + self.alpha[i] * self.mu[i]) * h[i] * s
            };
            let sigma = (1.0 / self.alpha[i]).sqrt() * 1.5;
            let center = (d[i] / self.alpha[i] + self.mu[i]) * h[i];
            let scale = std::f64::consts::SQRT_2 * sigma;
            let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for (&x, &w) in nodes.iter().zip(weights) {
                let s = center + scale * x;
                let f = (x * x + log_density(s)).exp() * w;
                z += f;
                m1 += f * s;
                m2 += f * s * s;
            }
            mean[i] = m1 / z;
            var[i] = m2 / z - mean[i] * mean[i];
        }
        (mean, var)
    }

    /// Joint p(h, g) table; index = h_mask + (g_mask << N).
    pub fn joint_table(&self) -> Vec<f64> {
        let (n, m) = self.u.dim();
        let mut logs = Vec::with_capacity(1 << (n + m));
        for gm in 0..(1usize << m) {
            let g = bit_vector(m, gm);
            for hm in 0..(1usize << n) {
                logs.push(self.log_mass(&bit_vector(n, hm), &g));
            }
        }
        let z = logsumexp(&logs);
        logs.into_iter().map(|l| (l - z).exp()).collect()
    }

    /// log p(s, h) of a visible configuration (g summed out).
    pub fn log_likelihood(&self, s: &Array1<f64>, h: &Array1<f64>) -> f64 {
        let m = self.num_hidden();
        let logs: Vec<f64> = (0..(1usize << m))
            .map(|gm| -self.energy(s, h, &bit_vector(m, gm)))
            .collect();
        logsumexp(&logs) - self.log_partition()
    }

    /// E_model[dE/dtheta] by enumeration over (h, g) with analytic slab moments.
    pub fn model_grad_expectations(&self) -> TinySsVisGrads {
        let (n, m) = self.u.dim();
        let zeta = self.shift();
        let mut grads = TinySsVisGrads {
            u: Array2::zeros((n, m)),
            rho: Array1::zeros(m),
            b: Array1::zeros(n),
            mu: Array1::zeros(n),
            alpha: Array1::zeros(n),
        };
        let table = self.joint_table();
        for gm in 0..(1usize << m) {
            let g = bit_vector(m, gm);
            let d = self.drive_given_g(&g);
            for hm in 0..(1usize << n) {
                let h = bit_vector(n, hm);
                let p = table[hm + (gm << n)];
                for i in 0..n {
                    // slab mean is gated by the binary h
                    let mi = (d[i] / self.alpha[i] + self.mu[i]) * h[i];
                    let s2 = mi * mi + 1.0 / self.alpha[i];
                    for j in 0..m {
                        grads.u[(i, j)] += p * (-g[j] * mi);
                    }
                    grads.b[i] += p * (-h[i]);
                    grads.mu[i] += p * self.alpha[i] * (zeta * self.mu[i] * h[i] - mi);
                    grads.alpha[i] += p
                        * (0.5 * s2 - self.mu[i] * mi
                            + zeta * 0.5 * self.mu[i] * self.mu[i] * h[i]);
                }
                for j in 0..m {
                    grads.rho[j] += p * (-g[j]);
                }
            }
        }
        grads
    }

    /// Gradient of mean log p(s, h) over data by central finite differences.
    pub fn loglik_grad_fd(
        &self,
        data: &[(Array1<f64>, Array1<f64>)],
        eps: f64,
    ) -> TinySsVisGrads {
        let (n, m) = self.u.dim();
        let mean_ll = |model: &TinySsVis| -> f64 {
            data.iter()
                .map(|(s, h)| model.log_likelihood(s, h))
                .sum::<f64>()
                / data.len() as f64
        };
        let fd = |bump: &dyn Fn(&mut TinySsVis, f64)| -> f64 {
            let mut up = self.clone();
            bump(&mut up, eps);
            let mut dn = self.clone();
            bump(&mut dn, -eps);
            (mean_ll(&up) - mean_ll(&dn)) / (2.0 * eps)
        };
        let mut g = TinySsVisGrads {
            u: Array2::zeros((n, m)),
            rho: Array1::zeros(m),
            b: Array1::zeros(n),
            mu: Array1::zeros(n),
            alpha: Array1::zeros(n),
        };
        for i in 0..n {
            for j in 0..m {
                g.u[(i, j)] = fd(&|mo, e| mo.u[(i, j)] += e);
            }
            g.b[i] = fd(&|mo, e| mo.b[i] += e);
            g.mu[i] = fd(&|mo, e| mo.mu[i] += e);
            g.alpha[i] = fd(&|mo, e| mo.alpha[i] += e);
        }
        for j in 0..m {
            g.rho[j] = fd(&|mo, e| mo.rho[j] += e);
        }
        g
    }

    /// Convenience for tests comparing layer-shaped states: flatten (map, r, c)
    /// C-order maps into the dense unit order.
    pub fn flatten_maps(maps: &Array3<f64>) -> Array1<f64> {
        Array1::from_iter(maps.iter().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::linalg::gauss_hermite;
    use crate::rng::{stream_rng, Stream};
    use rand::Rng;

    fn random_tiny(n: usize, m: usize, seed: u64, bias_shift: bool) -> TinySsVis {
        let mut rng = stream_rng(seed, Stream::ParamInit);
        TinySsVis::new(
            Array2::from_shape_fn((n, m), |_| 0.8 * (rng.random::<f64>() - 0.5)),
            Array1::from_shape_fn(m, |_| rng.random::<f64>() - 0.5),
            Array1::from_shape_fn(n, |_| rng.random::<f64>() - 0.5),
            Array1::from_shape_fn(n, |_| rng.random::<f64>() - 0.5),
            Array1::from_shape_fn(n, |_| 0.7 + rng.random::<f64>()),
            bias_shift,
        )
        .unwrap()
    }

    #[test]
    fn zero_interaction_hidden_marginals_close_forms() {
        // U = 0: P(h_i=1) is sigma(b) with the bias-shift term, and
        // sigma(b + alpha mu^2/2) without it, independent of g.
        for bias_shift in [true, false] {
            let mut model = random_tiny(2, 2, 1, bias_shift);
            model.u.fill(0.0);
            for gm in 0..4usize {
                let marg = model.h_marginals_given_g(&bit_vector(2, gm));
                for i in 0..2 {
                    let logit = if bias_shift {
                        model.b[i]
                    } else {
                        model.b[i] + 0.5 * model.alpha[i] * model.mu[i] * model.mu[i]
                    };
                    let expect = 1.0 / (1.0 + (-logit).exp());
                    assert!((marg[i] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn partition_matches_quadrature() {
        let (nodes, weights) = gauss_hermite(64);
        let model = random_tiny(1, 1, 2, true);
        let analytic = model.log_partition();
        // brute force: enumerate (h, g), integrate s by GH in log space
        let mut terms = Vec::new();
        for hm in 0..2usize {
            for gm in 0..2usize {
                let h = bit_vector(1, hm);
                let g = bit_vector(1, gm);
                let sigma = (1.0 / model.alpha[0]).sqrt() * 1.5;
                let log_int = crate::oracle::linalg::gh_log_integral(
                    &nodes,
                    &weights,
                    0.0,
                    sigma,
                    |s| -model.energy(&Array1::from_elem(1, s), &h, &g),
                );
                terms.push(log_int);
            }
        }
        let quad = logsumexp(&terms);
        assert!((analytic - quad).abs() < 1e-8, "{analytic} vs {quad}");
    }

    #[test]
    fn slab_moments_quadrature_matches_closed_form() {
        let (nodes, weights) = gauss_hermite(64);
        let model = random_tiny(2, 2, 3, true);
        let h = Array1::from_vec(vec![1.0, 0.0]);
        let g = Array1::from_vec(vec![1.0, 1.0]);
        let (mean, var) = model.slab_moments_given_hg(&h, &g, &nodes, &weights);
        let d = model.drive_given_g(&g);
        for i in 0..2 {
            let expect_mean = (d[i] / model.alpha[i] + model.mu[i]) * h[i];
            assert!((mean[i] - expect_mean).abs() < 1e-10);
            assert!((var[i] - 1.0 / model.alpha[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn model_grads_match_partition_differences() {
        for bias_shift in [true, false] {
            let model = random_tiny(2, 2, 4, bias_shift);
            let g = model.model_grad_expectations();
            let eps = 1e-6;
            let fd = |bump: &dyn Fn(&mut TinySsVis, f64)| -> f64 {
                let mut up = model.clone();
                bump(&mut up, eps);
                let mut dn = model.clone();
                bump(&mut dn, -eps);
                (up.log_partition() - dn.log_partition()) / (2.0 * eps)
            };
            for i in 0..2 {
                assert!((fd(&|m, e| m.b[i] += e) + g.b[i]).abs() < 1e-6);
                assert!((fd(&|m, e| m.mu[i] += e) + g.mu[i]).abs() < 1e-6);
                assert!((fd(&|m, e| m.alpha[i] += e) + g.alpha[i]).abs() < 1e-6);
                for j in 0..2 {
                    assert!((fd(&|m, e| m.u[(i, j)] += e) + g.u[(i, j)]).abs() < 1e-6);
                }
            }
            for j in 0..2 {
                assert!((fd(&|m, e| m.rho[j] += e) + g.rho[j]).abs() < 1e-6);
            }
        }
    }
}
