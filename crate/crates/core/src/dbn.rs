//! Deep belief network stacking of one to three layers: upward inference,
//! top-down generation, and border-clamped inpainting.
//!
//! Generation runs block Gibbs in the top layer only; the downward projection
//! samples the binary spikes at the top interface, takes expectations for the
//! slabs, and emits the conditional mean for the visible image.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::ssrbm::{SpikeSlabState, SsRbm};
use crate::upper::{BinaryRbm, SsVisRbm};

/// Per-layer representations of one image from the upward pass.
#[derive(Debug, Clone)]
pub struct UpPass<S: Real = f64> {
    /// q = P(h = 1 | v), deterministic in v.
    pub spike_probs: Array3<S>,
    /// One spike sample drawn from q.
    pub spike_sample: Array3<S>,
    /// Slab conditional mean E[s | v, spike_sample].
    pub slab_mean: Array3<S>,
    /// Second-layer g probabilities given (slab_mean, spike_probs), present
    /// when a second layer exists (training data for a third layer).
    pub g_probs: Option<Array3<S>>,
}

#[derive(Debug, Clone)]
pub struct DbnModel<S: Real = f64> {
    pub layer1: SsRbm<S>,
    pub layer2: Option<SsVisRbm<S>>,
    pub layer3: Option<BinaryRbm<S>>,
    pub normalization: Normalization<S>,
}

impl<S: Real> DbnModel<S> {
    pub fn single(layer1: SsRbm<S>, normalization: Normalization<S>) -> Result<Self> {
        Ok(Self {
            layer1,
            layer2: None,
            layer3: None,
            normalization,
        })
    }

    pub fn with_layer2(mut self, layer2: SsVisRbm<S>) -> Result<Self> {
        if layer2.geom.input_maps() != self.layer1.geom.num_maps()
            || layer2.geom.map_height() != self.layer1.geom.positions()
            || layer2.geom.map_width() != self.layer1.geom.positions()
        {
            return Err(Error::dimension(format!(
                "layer 2 expects {}x{}x{} inputs, layer 1 produces {}x{}x{}",
                layer2.geom.input_maps(),
                layer2.geom.map_height(),
                layer2.geom.map_width(),
                self.layer1.geom.num_maps(),
                self.layer1.geom.positions(),
                self.layer1.geom.positions(),
            )));
        }
        self.layer2 = Some(layer2);
        Ok(self)
    }

    pub fn with_layer3(mut self, layer3: BinaryRbm<S>) -> Result<Self> {
        let l2 = self
            .layer2
            .as_ref()
            .ok_or_else(|| Error::config("layer 3 requires a layer 2"))?;
        if layer3.geom.input_maps() != l2.geom.output_filters()
            || layer3.geom.map_height() != l2.geom.output_height()
            || layer3.geom.map_width() != l2.geom.output_width()
        {
            return Err(Error::dimension("layer 3 geometry does not chain onto layer 2"));
        }
        self.layer3 = Some(layer3);
        Ok(self)
    }

    pub fn depth(&self) -> usize {
        1 + usize::from(self.layer2.is_some()) + usize::from(self.layer3.is_some())
    }

    /// Same parameters over a different (valid) image side.
    pub fn resized(&self, side: usize) -> Result<Self> {
        let layer1 = self.layer1.resized(side)?;
        let m = layer1.geom.positions();
        let layer2 = match &self.layer2 {
            Some(l2) => Some(l2.resized(m)?),
            None => None,
        };
        let layer3 = match (&self.layer3, &layer2) {
            (Some(l3), Some(l2)) => Some(l3.resized(l2.geom.output_height())?),
            (Some(_), None) => unreachable!("layer 3 without layer 2"),
            _ => None,
        };
        Ok(Self {
            layer1,
            layer2,
            layer3,
            normalization: self.normalization,
        })
    }

    /// Upward inference: sample the first-layer spikes, keep the spike
    /// probabilities and the sampled-spike slab means, then map through the
    /// second layer as probabilities.
    pub fn infer_up<R: Rng + ?Sized>(&self, v: &Array2<S>, rng: &mut R) -> Result<UpPass<S>> {
        let spike_probs = self.layer1.spike_activation(v)?;
        let spike_sample = spike_probs.mapv(|p| {
            if S::unit_uniform(rng) < p {
                S::one()
            } else {
                S::zero()
            }
        });
        let slab_mean = self.layer1.slab_mean(v, &spike_sample)?;
        let g_probs = match &self.layer2 {
            Some(l2) => Some(l2.g_activation(&slab_mean, &spike_probs)?),
            None => None,
        };
        Ok(UpPass {
            spike_probs,
            spike_sample,
            slab_mean,
            g_probs,
        })
    }

    /// Visible conditional mean from a top-interface state (sampled spikes,
    /// expected slabs).
    fn project_down(&self, spikes: Array3<S>, slabs: Array3<S>) -> Result<Array2<S>> {
        let (mean, _) = self
            .layer1
            .visible_mean_precision(&SpikeSlabState { spikes, slabs })?;
        Ok(mean)
    }

    /// Unconstrained synthesis. Runs block Gibbs in the top layer, collecting
    /// a conditional-mean image every `thin` sweeps after `burn_in` sweeps.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        n_samples: usize,
        burn_in: usize,
        thin: usize,
        out_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Array2<S>>> {
        if burn_in < 1 {
            return Err(Error::config("burn_in must be >= 1"));
        }
        if thin < 1 {
            return Err(Error::config("thin must be >= 1"));
        }
        let model = self.resized(out_size)?;
        let mut images = Vec::with_capacity(n_samples);
        match model.depth() {
            1 => {
                let l1 = &model.layer1;
                let mut v = Array2::from_shape_fn((out_size, out_size), |_| {
                    S::standard_normal(rng)
                });
                for _ in 0..burn_in - 1 {
                    v = l1.gibbs_sweep(&v, rng)?.2;
                }
                let mut state = l1.gibbs_sweep(&v, rng)?;
                for i in 0..n_samples {
                    if i > 0 {
                        for _ in 0..thin {
                            state = l1.gibbs_sweep(&state.2, rng)?;
                        }
                    }
                    let slabs = {
                        let mut sh = state.1.clone();
                        sh.zip_mut_with(&state.0, |s, &h| *s *= h);
                        sh
                    };
                    images.push(model.project_down(state.0.clone(), slabs)?);
                }
            }
            2 => {
                let l2 = model.layer2.as_ref().unwrap();
                let shape = (
                    l2.geom.input_maps(),
                    l2.geom.map_height(),
                    l2.geom.map_width(),
                );
                let mut s = Array3::from_shape_fn(shape, |_| S::standard_normal(rng));
                let mut h = Array3::from_shape_fn(shape, |_| {
                    if S::unit_uniform(rng) < S::of(0.5) {
                        S::one()
                    } else {
                        S::zero()
                    }
                });
                let mut g = Array3::zeros((0, 0, 0));
                for sweep in 0..burn_in {
                    let (gg, hn, sn) = l2.gibbs_sweep(&s, &h, rng)?;
                    g = gg;
                    h = hn;
                    s = sn;
                    let _ = sweep;
                }
                for i in 0..n_samples {
                    if i > 0 {
                        for _ in 0..thin {
                            let (gg, hn, sn) = l2.gibbs_sweep(&s, &h, rng)?;
                            g = gg;
                            h = hn;
                            s = sn;
                        }
                    }
                    // expectation for the slab, sample for the spikes
                    let slabs = l2.slab_mean_given(&h, &g)?;
                    images.push(model.project_down(h.clone(), slabs)?);
                }
            }
            _ => {
                let l2 = model.layer2.as_ref().unwrap();
                let l3 = model.layer3.as_ref().unwrap();
                let shape = (
                    l3.geom.input_maps(),
                    l3.geom.map_height(),
                    l3.geom.map_width(),
                );
                let mut g = Array3::from_shape_fn(shape, |_| {
                    if S::unit_uniform(rng) < S::of(0.5) {
                        S::one()
                    } else {
                        S::zero()
                    }
                });
                for _ in 0..burn_in {
                    g = l3.gibbs_sweep(&g, rng)?.1;
                }
                for i in 0..n_samples {
                    if i > 0 {
                        for _ in 0..thin {
                            g = l3.gibbs_sweep(&g, rng)?.1;
                        }
                    }
                    let (h, _) = l2.sample_h_given_g(&g, rng)?;
                    let slabs = l2.slab_mean_given(&h, &g)?;
                    images.push(model.project_down(h, slabs)?);
                }
            }
        }
        Ok(images)
    }

    /// Constrained synthesis: Gibbs iterations over the whole stack with the
    /// masked (true) pixels clamped to the frame. Returns the conditional
    /// mean of the final iteration on free pixels, originals elsewhere.
    pub fn inpaint<R: Rng + ?Sized>(
        &self,
        frame: &Array2<S>,
        mask: &Array2<bool>,
        iters: usize,
        rng: &mut R,
    ) -> Result<Array2<S>> {
        let (fh, fw) = frame.dim();
        if fh != fw {
            return Err(Error::dimension("inpainting frame must be square"));
        }
        if mask.dim() != frame.dim() {
            return Err(Error::dimension("mask does not match frame"));
        }
        if iters == 0 {
            return Ok(frame.clone());
        }
        let model = self.resized(fh)?;
        let mut img = frame.clone();
        let mut mean = frame.clone();
        for _ in 0..iters {
            let (next, cond_mean) = model.inpaint_step(&img, rng)?;
            img = next;
            mean = cond_mean;
            for ((i, m), &clamped) in img.indexed_iter_mut().zip(mask.iter()) {
                if clamped {
                    *m = frame[i];
                }
            }
        }
        let mut out = mean;
        for ((i, m), &clamped) in out.indexed_iter_mut().zip(mask.iter()) {
            if clamped {
                *m = frame[i];
            }
        }
        Ok(out)
    }

    /// One whole-stack iteration from the current image: upward pass, one
    /// top-layer Gibbs step, downward pass. Returns the sampled next image
    /// and the visible conditional mean of the same step.
    fn inpaint_step<R: Rng + ?Sized>(
        &self,
        img: &Array2<S>,
        rng: &mut R,
    ) -> Result<(Array2<S>, Array2<S>)> {
        match self.depth() {
            1 => {
                let (h, s, v_next) = self.layer1.gibbs_sweep(img, rng)?;
                let slabs = {
                    let mut sh = s;
                    sh.zip_mut_with(&h, |x, &hh| *x *= hh);
                    sh
                };
                let mean = self.project_down(h, slabs)?;
                Ok((v_next, mean))
            }
            2 => {
                let up = self.infer_up(img, rng)?;
                let l2 = self.layer2.as_ref().unwrap();
                let g = l2.sample_g_given_sh(&up.slab_mean, &up.spike_probs, rng)?;
                let (h, _) = l2.sample_h_given_g(&g, rng)?;
                let slabs = l2.slab_mean_given(&h, &g)?;
                let state = SpikeSlabState {
                    spikes: h,
                    slabs,
                };
                let (mean, _) = self.layer1.visible_mean_precision(&state)?;
                let sample = self.layer1.sample_v_given_sh(&state, rng)?;
                Ok((sample, mean))
            }
            _ => {
                let up = self.infer_up(img, rng)?;
                let l2 = self.layer2.as_ref().unwrap();
                let l3 = self.layer3.as_ref().unwrap();
                let g_probs = up
                    .g_probs
                    .expect("depth 3 implies layer 2 output");
                let g_in = g_probs.mapv(|p| {
                    if S::unit_uniform(rng) < p {
                        S::one()
                    } else {
                        S::zero()
                    }
                });
                let (_, g_next) = l3.gibbs_sweep(&g_in, rng)?;
                let (h, _) = l2.sample_h_given_g(&g_next, rng)?;
                let slabs = l2.slab_mean_given(&h, &g_next)?;
                let state = SpikeSlabState {
                    spikes: h,
                    slabs,
                };
                let (mean, _) = self.layer1.visible_mean_precision(&state)?;
                let sample = self.layer1.sample_v_given_sh(&state, rng)?;
                Ok((sample, mean))
            }
        }
    }
}

/// Border mask for the standard inpainting protocol: everything clamped
/// except a centered `free`-square.
pub fn center_free_mask(side: usize, free: usize) -> Result<Array2<bool>> {
    if free > side {
        return Err(Error::dimension("free region exceeds frame"));
    }
    let off = (side - free) / 2;
    Ok(Array2::from_shape_fn((side, side), |(r, c)| {
        !(r >= off && r < off + free && c >= off && c < off + free)
    }))
}
