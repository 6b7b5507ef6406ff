//! Exact computations for a tiny dense binary-binary RBM: full enumeration
//! over both layers.

use ndarray::{Array1, Array2};

use super::linalg::logsumexp;
use super::{bit_vector, MAX_ENUM_BITS};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tiling::ConvGeometry;
use crate::upper::{BinaryRbm, BinaryRbmGrads};

#[derive(Debug, Clone)]
pub struct TinyBrbm {
    /// Weights (visible x hidden).
    pub w: Array2<f64>,
    /// Visible biases.
    pub a: Array1<f64>,
    /// Hidden biases.
    pub c: Array1<f64>,
}

impl TinyBrbm {
    pub fn new(w: Array2<f64>, a: Array1<f64>, c: Array1<f64>) -> Result<Self> {
        let (d, n) = w.dim();
        if a.len() != d || c.len() != n {
            return Err(Error::dimension("tiny binary RBM parameter lengths disagree"));
        }
        if d + n > MAX_ENUM_BITS {
            return Err(Error::config("enumeration over v and h is intractable"));
        }
        Ok(Self { w, a, c })
    }

    /// Expand a convolutionally shared layer into dense form. Visibles are
    /// (map, row, col) C-order, hiddens (filter, row, col) C-order.
    pub fn from_layer<S: Real>(layer: &BinaryRbm<S>) -> Result<Self> {
        let geom = &layer.geom;
        let d = geom.num_inputs();
        let n = geom.num_outputs();
        let (mh, mw) = (geom.map_height(), geom.map_width());
        let (oh, ow) = (geom.output_height(), geom.output_width());
        let kk = geom.kernel();
        let mut w = Array2::<f64>::zeros((d, n));
        for jf in 0..geom.output_filters() {
            for jr in 0..oh {
                for jc in 0..ow {
                    let j = (jf * oh + jr) * ow + jc;
                    for ch in 0..geom.input_maps() {
                        for dr in 0..kk {
                            for dc in 0..kk {
                                let i = (ch * mh + jr + dr) * mw + jc + dc;
                                w[(i, j)] = layer.weights[(jf, ch, dr, dc)].as_f64();
                            }
                        }
                    }
                }
            }
        }
        let a = Array1::from_shape_fn(d, |i| layer.visible_bias[i / (mh * mw)].as_f64());
        let c = Array1::from_shape_fn(n, |j| layer.hidden_bias[j / (oh * ow)].as_f64());
        Self::new(w, a, c)
    }

    pub fn collapse_grads(
        grads_w: &Array2<f64>,
        grads_a: &Array1<f64>,
        grads_c: &Array1<f64>,
        geom: &ConvGeometry,
    ) -> BinaryRbmGrads<f64> {
        let mut out = BinaryRbmGrads::<f64>::zeros(geom);
        let (mh, mw) = (geom.map_height(), geom.map_width());
        let (oh, ow) = (geom.output_height(), geom.output_width());
        let kk = geom.kernel();
        for jf in 0..geom.output_filters() {
            for jr in 0..oh {
                for jc in 0..ow {
                    let j = (jf * oh + jr) * ow + jc;
                    out.hidden_bias[jf] += grads_c[j];
                    for ch in 0..geom.input_maps() {
                        for dr in 0..kk {
                            for dc in 0..kk {
                                let i = (ch * mh + jr + dr) * mw + jc + dc;
                                out.weights[(jf, ch, dr, dc)] += grads_w[(i, j)];
                            }
                        }
                    }
                }
            }
        }
        for ch in 0..geom.input_maps() {
            for r in 0..mh {
                for col in 0..mw {
                    out.visible_bias[ch] += grads_a[(ch * mh + r) * mw + col];
                }
            }
        }
        out
    }

    pub fn num_visible(&self) -> usize {
        self.w.nrows()
    }
    pub fn num_hidden(&self) -> usize {
        self.w.ncols()
    }

    pub fn energy(&self, v: &Array1<f64>, h: &Array1<f64>) -> f64 {
        let (d, n) = self.w.dim();
        let mut e = 0.0;
        for i in 0..d {
            for j in 0..n {
                e -= v[i] * self.w[(i, j)] * h[j];
            }
            e -= self.a[i] * v[i];
        }
        for j in 0..n {
            e -= self.c[j] * h[j];
        }
        e
    }

    pub fn log_partition(&self) -> f64 {
        let (d, n) = self.w.dim();
        let mut terms = Vec::with_capacity(1 << (d + n));
        for vm in 0..(1usize << d) {
            let v = bit_vector(d, vm);
            for hm in 0..(1usize << n) {
                terms.push(-self.energy(&v, &bit_vector(n, hm)));
            }
        }
        logsumexp(&terms)
    }

    /// Stationary marginal p(v) over all visible configurations.
    pub fn visible_table(&self) -> Vec<f64> {
        let (d, n) = self.w.dim();
        let z = self.log_partition();
        (0..(1usize << d))
            .map(|vm| {
                let v = bit_vector(d, vm);
                let logs: Vec<f64> = (0..(1usize << n))
                    .map(|hm| -self.energy(&v, &bit_vector(n, hm)))
                    .collect();
                (logsumexp(&logs) - z).exp()
            })
            .collect()
    }

    /// Exact conditional marginals by enumeration.
    pub fn hidden_marginals_given_v(&self, v: &Array1<f64>) -> Array1<f64> {
        let n = self.num_hidden();
        let logs: Vec<f64> = (0..(1usize << n))
            .map(|hm| -self.energy(v, &bit_vector(n, hm)))
            .collect();
        let z = logsumexp(&logs);
        let mut out = Array1::<f64>::zeros(n);
        for (hm, l) in logs.iter().enumerate() {
            let p = (l - z).exp();
            for j in 0..n {
                if (hm >> j) & 1 == 1 {
                    out[j] += p;
                }
            }
        }
        out
    }

    pub fn visible_marginals_given_h(&self, h: &Array1<f64>) -> Array1<f64> {
        let d = self.num_visible();
        let logs: Vec<f64> = (0..(1usize << d))
            .map(|vm| -self.energy(&bit_vector(d, vm), h))
            .collect();
        let z = logsumexp(&logs);
        let mut out = Array1::<f64>::zeros(d);
        for (vm, l) in logs.iter().enumerate() {
            let p = (l - z).exp();
            for i in 0..d {
                if (vm >> i) & 1 == 1 {
                    out[i] += p;
                }
            }
        }
        out
    }

    /// E_model[dE/dtheta] by full enumeration.
    pub fn model_grad_expectations(&self) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let (d, n) = self.w.dim();
        let z = self.log_partition();
        let mut gw = Array2::<f64>::zeros((d, n));
        let mut ga = Array1::<f64>::zeros(d);
        let mut gc = Array1::<f64>::zeros(n);
        for vm in 0..(1usize << d) {
            let v = bit_vector(d, vm);
            for hm in 0..(1usize << n) {
                let h = bit_vector(n, hm);
                let p = (-self.energy(&v, &h) - z).exp();
                for i in 0..d {
                    ga[i] -= p * v[i];
                    for j in 0..n {
                        gw[(i, j)] -= p * v[i] * h[j];
                    }
                }
                for j in 0..n {
                    gc[j] -= p * h[j];
                }
            }
        }
        (gw, ga, gc)
    }

    pub fn log_likelihood(&self, v: &Array1<f64>) -> f64 {
        let n = self.num_hidden();
        let logs: Vec<f64> = (0..(1usize << n))
            .map(|hm| -self.energy(v, &bit_vector(n, hm)))
            .collect();
        logsumexp(&logs) - self.log_partition()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_zero_params_partition_is_log4() {
        let model = TinyBrbm::new(Array2::zeros((1, 1)), Array1::zeros(1), Array1::zeros(1))
            .unwrap();
        assert!((model.log_partition() - 4.0f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn conditionals_are_sigmoids() {
        let w = Array2::from_shape_fn((2, 2), |(i, j)| 0.3 * (i as f64 - j as f64 + 0.5));
        let a = Array1::from_vec(vec![0.2, -0.4]);
        let c = Array1::from_vec(vec![-0.1, 0.3]);
        let model = TinyBrbm::new(w.clone(), a.clone(), c.clone()).unwrap();
        let v = Array1::from_vec(vec![1.0, 0.0]);
        let marg = model.hidden_marginals_given_v(&v);
        for j in 0..2 {
            let logit: f64 = (0..2).map(|i| v[i] * w[(i, j)]).sum::<f64>() + c[j];
            let expect = 1.0 / (1.0 + (-logit).exp());
            assert!((marg[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn visible_table_sums_to_one() {
        let w = Array2::from_shape_fn((3, 2), |(i, j)| 0.4 * ((i + j) as f64 - 1.0));
        let model =
            TinyBrbm::new(w, Array1::from_elem(3, 0.1), Array1::from_elem(2, -0.2)).unwrap();
        let table = model.visible_table();
        let total: f64 = table.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn model_grads_match_partition_differences() {
        let w = Array2::from_shape_fn((2, 2), |(i, j)| 0.3 * (i as f64 + 1.0) * (j as f64 - 0.5));
        let model =
            TinyBrbm::new(w, Array1::from_elem(2, 0.2), Array1::from_elem(2, -0.1)).unwrap();
        let (gw, ga, gc) = model.model_grad_expectations();
        let eps = 1e-6;
        let fd = |bump: &dyn Fn(&mut TinyBrbm, f64)| -> f64 {
            let mut up = model.clone();
            bump(&mut up, eps);
            let mut dn = model.clone();
            bump(&mut dn, -eps);
            (up.log_partition() - dn.log_partition()) / (2.0 * eps)
        };
        for i in 0..2 {
            assert!((fd(&|m, e| m.a[i] += e) + ga[i]).abs() < 1e-6);
            assert!((fd(&|m, e| m.c[i] += e) + gc[i]).abs() < 1e-6);
            for j in 0..2 {
                assert!((fd(&|m, e| m.w[(i, j)] += e) + gw[(i, j)]).abs() < 1e-6);
            }
        }
    }
}
