//! Weight-sharing geometries and the linear maps they induce.
//!
//! Two sharing patterns are used. The first layer ties each filter across a
//! grid of non-overlapping receptive fields (stride = kernel size), with
//! several diagonally offset copies of that grid so that different filters do
//! overlap. Upper layers use plain convolutional sharing with stride 1.

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Diagonal tiled-convolution geometry.
///
/// Hidden units are enumerated as (tiling, filter, row, col), row-major; the
/// flat order equals the C-order flattening of an `(T*F, M, M)` array whose
/// map index is `tiling * filters_per_tiling + filter`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TiledGeometry {
    image_height: usize,
    image_width: usize,
    kernel: usize,
    num_tilings: usize,
    filters_per_tiling: usize,
    positions: usize,
}

impl TiledGeometry {
    /// Validates the divisibility invariant: every tiling offset must produce
    /// the same number of in-bounds, non-overlapping fields per axis.
    pub fn new(
        height: usize,
        width: usize,
        kernel: usize,
        tilings: usize,
        filters: usize,
    ) -> Result<Self> {
        if height != width {
            return Err(Error::dimension(format!(
                "only square images supported, got {height}x{width}"
            )));
        }
        if kernel == 0 || tilings == 0 || filters == 0 {
            return Err(Error::dimension("kernel, tilings and filters must be nonzero"));
        }
        if kernel > height {
            return Err(Error::dimension(format!(
                "kernel {kernel} exceeds image side {height}"
            )));
        }
        if tilings > height + 1 - kernel {
            return Err(Error::dimension(format!(
                "tiling offset {} places a {kernel}-kernel out of bounds on side {height}",
                tilings - 1
            )));
        }
        let positions_at = |t: usize| (height - t - kernel) / kernel + 1;
        let m = positions_at(0);
        for t in 1..tilings {
            if positions_at(t) != m {
                return Err(Error::dimension(format!(
                    "side {height} not divisible for {tilings} tilings of kernel {kernel}: \
                     offset {t} yields {} positions, offset 0 yields {m}",
                    positions_at(t)
                )));
            }
        }
        if (height - tilings + 1) % kernel != 0 {
            return Err(Error::dimension(format!(
                "side {height} minus {} not divisible by kernel {kernel}",
                tilings - 1
            )));
        }
        Ok(Self {
            image_height: height,
            image_width: width,
            kernel,
            num_tilings: tilings,
            filters_per_tiling: filters,
            positions: m,
        })
    }

    /// Same sharing parameters on a different (valid) image side.
    pub fn resized(&self, side: usize) -> Result<Self> {
        Self::new(
            side,
            side,
            self.kernel,
            self.num_tilings,
            self.filters_per_tiling,
        )
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }
    pub fn image_width(&self) -> usize {
        self.image_width
    }
    pub fn kernel(&self) -> usize {
        self.kernel
    }
    pub fn num_tilings(&self) -> usize {
        self.num_tilings
    }
    pub fn filters_per_tiling(&self) -> usize {
        self.filters_per_tiling
    }
    /// Positions per axis within one tiling (M).
    pub fn positions(&self) -> usize {
        self.positions
    }
    /// Number of distinct shared kernels (= feature maps), `T * F`.
    pub fn num_maps(&self) -> usize {
        self.num_tilings * self.filters_per_tiling
    }
    /// Total hidden units `N = F * T * M^2`.
    pub fn num_units(&self) -> usize {
        self.num_maps() * self.positions * self.positions
    }
    pub fn num_pixels(&self) -> usize {
        self.image_height * self.image_width
    }

    /// Tiling offset of a feature map index.
    pub fn tiling_of_map(&self, map: usize) -> usize {
        map / self.filters_per_tiling
    }

    /// Top-left image pixel of the receptive field at (tiling, row, col).
    pub fn field_origin(&self, tiling: usize, row: usize, col: usize) -> (usize, usize) {
        (tiling + row * self.kernel, tiling + col * self.kernel)
    }

    /// Pixels covered by the unit (tiling, row, col), row-major.
    pub fn field_pixels(&self, tiling: usize, row: usize, col: usize) -> Vec<(usize, usize)> {
        let (r0, c0) = self.field_origin(tiling, row, col);
        let mut pixels = Vec::with_capacity(self.kernel * self.kernel);
        for dr in 0..self.kernel {
            for dc in 0..self.kernel {
                pixels.push((r0 + dr, c0 + dc));
            }
        }
        pixels
    }

    pub fn check_image<S: Real>(&self, image: &Array2<S>) -> Result<()> {
        if image.dim() != (self.image_height, self.image_width) {
            return Err(Error::dimension(format!(
                "image is {:?}, geometry wants ({}, {})",
                image.dim(),
                self.image_height,
                self.image_width
            )));
        }
        Ok(())
    }

    pub fn check_units<S: Real>(&self, units: &Array3<S>) -> Result<()> {
        if units.dim() != (self.num_maps(), self.positions, self.positions) {
            return Err(Error::dimension(format!(
                "unit array is {:?}, geometry wants ({}, {}, {})",
                units.dim(),
                self.num_maps(),
                self.positions,
                self.positions
            )));
        }
        Ok(())
    }
}

/// Per-unit projections `v^T W_i`: each shared kernel correlated with the
/// image at its tiling's non-overlapping field grid.
pub fn tiled_forward<S: Real>(
    image: &Array2<S>,
    weights: &Array3<S>,
    geom: &TiledGeometry,
) -> Result<Array3<S>> {
    geom.check_image(image)?;
    check_weights(weights, geom)?;
    let (maps, m, k) = (geom.num_maps(), geom.positions(), geom.kernel());
    let width = geom.image_width();
    let img = contiguous2(image);
    let img = img.as_ref();
    let wall = contiguous3(weights);
    let wall = wall.as_ref();
    let mut out = Array3::zeros((maps, m, m));
    let out_slice = out.as_slice_mut().expect("freshly allocated");
    for map in 0..maps {
        let t = geom.tiling_of_map(map);
        let kern = &wall[map * k * k..(map + 1) * k * k];
        for r in 0..m {
            for c in 0..m {
                let (r0, c0) = geom.field_origin(t, r, c);
                let mut acc = S::zero();
                for dr in 0..k {
                    let irow = &img[(r0 + dr) * width + c0..(r0 + dr) * width + c0 + k];
                    let krow = &kern[dr * k..dr * k + k];
                    acc += irow
                        .iter()
                        .zip(krow)
                        .map(|(&a, &b)| a * b)
                        .sum::<S>();
                }
                out_slice[(map * m + r) * m + c] = acc;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`tiled_forward`]: paste `coeff * kernel` at every field.
pub fn tiled_adjoint<S: Real>(
    coeffs: &Array3<S>,
    weights: &Array3<S>,
    geom: &TiledGeometry,
) -> Result<Array2<S>> {
    geom.check_units(coeffs)?;
    check_weights(weights, geom)?;
    let (maps, m, k) = (geom.num_maps(), geom.positions(), geom.kernel());
    let width = geom.image_width();
    let wall = contiguous3(weights);
    let wall = wall.as_ref();
    let mut out = Array2::zeros((geom.image_height(), geom.image_width()));
    let out_slice = out.as_slice_mut().expect("freshly allocated");
    for map in 0..maps {
        let t = geom.tiling_of_map(map);
        let kern = &wall[map * k * k..(map + 1) * k * k];
        for r in 0..m {
            for c in 0..m {
                let coeff = coeffs[(map, r, c)];
                if coeff == S::zero() {
                    continue;
                }
                let (r0, c0) = geom.field_origin(t, r, c);
                for dr in 0..k {
                    let orow = &mut out_slice
                        [(r0 + dr) * width + c0..(r0 + dr) * width + c0 + k];
                    let krow = &kern[dr * k..dr * k + k];
                    for (o, &w) in orow.iter_mut().zip(krow) {
                        *o += coeff * w;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sum of squared pixels over each receptive field, indexed (tiling, row, col).
/// Filter-independent, so one plane per tiling.
pub fn field_sq_sums<S: Real>(image: &Array2<S>, geom: &TiledGeometry) -> Result<Array3<S>> {
    geom.check_image(image)?;
    let (tilings, m, k) = (geom.num_tilings(), geom.positions(), geom.kernel());
    let width = geom.image_width();
    let img = contiguous2(image);
    let img = img.as_ref();
    let mut out = Array3::zeros((tilings, m, m));
    for t in 0..tilings {
        for r in 0..m {
            for c in 0..m {
                let (r0, c0) = geom.field_origin(t, r, c);
                let mut acc = S::zero();
                for dr in 0..k {
                    let irow = &img[(r0 + dr) * width + c0..(r0 + dr) * width + c0 + k];
                    acc += irow.iter().map(|&v| v * v).sum::<S>();
                }
                out[(t, r, c)] = acc;
            }
        }
    }
    Ok(out)
}

/// Accumulates `scale[map] * coeffs[unit]` uniformly over each unit's field:
/// the h-gated diagonal precision contribution on the visible grid.
pub fn scatter_field_scale<S: Real>(
    coeffs: &Array3<S>,
    scale: &[S],
    geom: &TiledGeometry,
) -> Result<Array2<S>> {
    geom.check_units(coeffs)?;
    if scale.len() != geom.num_maps() {
        return Err(Error::dimension("per-map scale length mismatch"));
    }
    let (maps, m, k) = (geom.num_maps(), geom.positions(), geom.kernel());
    let width = geom.image_width();
    let mut out = Array2::zeros((geom.image_height(), geom.image_width()));
    let out_slice = out.as_slice_mut().expect("freshly allocated");
    for map in 0..maps {
        if scale[map] == S::zero() {
            continue;
        }
        let t = geom.tiling_of_map(map);
        for r in 0..m {
            for c in 0..m {
                let add = scale[map] * coeffs[(map, r, c)];
                if add == S::zero() {
                    continue;
                }
                let (r0, c0) = geom.field_origin(t, r, c);
                for dr in 0..k {
                    for o in &mut out_slice
                        [(r0 + dr) * width + c0..(r0 + dr) * width + c0 + k]
                    {
                        *o += add;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Borrow the standard-layout slice, copying only if the array is strided.
fn contiguous2<S: Real>(a: &Array2<S>) -> std::borrow::Cow<'_, [S]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

fn contiguous3<S: Real>(a: &Array3<S>) -> std::borrow::Cow<'_, [S]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

fn contiguous4<S: Real>(a: &Array4<S>) -> std::borrow::Cow<'_, [S]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

fn check_weights<S: Real>(weights: &Array3<S>, geom: &TiledGeometry) -> Result<()> {
    if weights.dim() != (geom.num_maps(), geom.kernel(), geom.kernel()) {
        return Err(Error::dimension(format!(
            "weight stack is {:?}, geometry wants ({}, {}, {})",
            weights.dim(),
            geom.num_maps(),
            geom.kernel(),
            geom.kernel()
        )));
    }
    Ok(())
}

/// Plain convolutional sharing for the upper layers: every output unit sees
/// the same kernel window across all input maps, stride 1, no padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeometry {
    input_maps: usize,
    map_height: usize,
    map_width: usize,
    kernel: usize,
    output_filters: usize,
}

impl ConvGeometry {
    pub fn new(
        input_maps: usize,
        map_height: usize,
        map_width: usize,
        kernel: usize,
        output_filters: usize,
    ) -> Result<Self> {
        if input_maps == 0 || output_filters == 0 || kernel == 0 {
            return Err(Error::dimension("conv geometry fields must be nonzero"));
        }
        if kernel > map_height || kernel > map_width {
            return Err(Error::dimension(format!(
                "kernel {kernel} exceeds map size {map_height}x{map_width}"
            )));
        }
        Ok(Self {
            input_maps,
            map_height,
            map_width,
            kernel,
            output_filters,
        })
    }

    pub fn input_maps(&self) -> usize {
        self.input_maps
    }
    pub fn map_height(&self) -> usize {
        self.map_height
    }
    pub fn map_width(&self) -> usize {
        self.map_width
    }
    pub fn kernel(&self) -> usize {
        self.kernel
    }
    pub fn output_filters(&self) -> usize {
        self.output_filters
    }
    pub fn output_height(&self) -> usize {
        self.map_height - self.kernel + 1
    }
    pub fn output_width(&self) -> usize {
        self.map_width - self.kernel + 1
    }
    pub fn num_inputs(&self) -> usize {
        self.input_maps * self.map_height * self.map_width
    }
    pub fn num_outputs(&self) -> usize {
        self.output_filters * self.output_height() * self.output_width()
    }

    pub fn check_inputs<S: Real>(&self, maps: &Array3<S>) -> Result<()> {
        if maps.dim() != (self.input_maps, self.map_height, self.map_width) {
            return Err(Error::dimension(format!(
                "input maps are {:?}, geometry wants ({}, {}, {})",
                maps.dim(),
                self.input_maps,
                self.map_height,
                self.map_width
            )));
        }
        Ok(())
    }

    pub fn check_outputs<S: Real>(&self, maps: &Array3<S>) -> Result<()> {
        if maps.dim() != (self.output_filters, self.output_height(), self.output_width()) {
            return Err(Error::dimension(format!(
                "output maps are {:?}, geometry wants ({}, {}, {})",
                maps.dim(),
                self.output_filters,
                self.output_height(),
                self.output_width()
            )));
        }
        Ok(())
    }

    pub fn check_kernels<S: Real>(&self, kernels: &Array4<S>) -> Result<()> {
        if kernels.dim() != (self.output_filters, self.input_maps, self.kernel, self.kernel) {
            return Err(Error::dimension(format!(
                "kernel stack is {:?}, geometry wants ({}, {}, {}, {})",
                kernels.dim(),
                self.output_filters,
                self.input_maps,
                self.kernel,
                self.kernel
            )));
        }
        Ok(())
    }
}

/// Valid-mode cross-correlation over all input maps jointly.
pub fn conv_forward<S: Real>(
    maps: &Array3<S>,
    kernels: &Array4<S>,
    geom: &ConvGeometry,
) -> Result<Array3<S>> {
    geom.check_inputs(maps)?;
    geom.check_kernels(kernels)?;
    let (kf, c, kk) = (geom.output_filters, geom.input_maps, geom.kernel);
    let (mh, mw) = (geom.map_height, geom.map_width);
    let (oh, ow) = (geom.output_height(), geom.output_width());
    let mslice = contiguous3(maps);
    let mslice = mslice.as_ref();
    let kslice = contiguous4(kernels);
    let kslice = kslice.as_ref();
    let mut out = Array3::zeros((kf, oh, ow));
    let out_slice = out.as_slice_mut().expect("freshly allocated");
    for j in 0..kf {
        for ch in 0..c {
            let kern = &kslice[(j * c + ch) * kk * kk..(j * c + ch + 1) * kk * kk];
            let base = ch * mh * mw;
            for r in 0..oh {
                let orow = &mut out_slice[(j * oh + r) * ow..(j * oh + r + 1) * ow];
                for dr in 0..kk {
                    let mrow = &mslice[base + (r + dr) * mw..base + (r + dr + 1) * mw];
                    let krow = &kern[dr * kk..(dr + 1) * kk];
                    for (col, o) in orow.iter_mut().enumerate() {
                        let win = &mrow[col..col + kk];
                        *o += win
                            .iter()
                            .zip(krow)
                            .map(|(&a, &b)| a * b)
                            .sum::<S>();
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv_forward`] (scatter output coefficients back through the kernels).
pub fn conv_adjoint<S: Real>(
    coeffs: &Array3<S>,
    kernels: &Array4<S>,
    geom: &ConvGeometry,
) -> Result<Array3<S>> {
    geom.check_outputs(coeffs)?;
    geom.check_kernels(kernels)?;
    let (kf, c, kk) = (geom.output_filters, geom.input_maps, geom.kernel);
    let (mh, mw) = (geom.map_height, geom.map_width);
    let (oh, ow) = (geom.output_height(), geom.output_width());
    let cslice = contiguous3(coeffs);
    let cslice = cslice.as_ref();
    let kslice = contiguous4(kernels);
    let kslice = kslice.as_ref();
    let mut out = Array3::zeros((c, mh, mw));
    let out_slice = out.as_slice_mut().expect("freshly allocated");
    for j in 0..kf {
        for r in 0..oh {
            let crow = &cslice[(j * oh + r) * ow..(j * oh + r + 1) * ow];
            for (col, &coeff) in crow.iter().enumerate() {
                if coeff == S::zero() {
                    continue;
                }
                for ch in 0..c {
                    let kern = &kslice[(j * c + ch) * kk * kk..(j * c + ch + 1) * kk * kk];
                    let base = ch * mh * mw;
                    for dr in 0..kk {
                        let orow = &mut out_slice
                            [base + (r + dr) * mw + col..base + (r + dr) * mw + col + kk];
                        let krow = &kern[dr * kk..(dr + 1) * kk];
                        for (o, &w) in orow.iter_mut().zip(krow) {
                            *o += coeff * w;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Kernel-shaped gradient of `<coeffs, conv_forward(maps)>`: correlation of
/// the output coefficients with input windows, summed over tied positions.
pub fn conv_weight_grad<S: Real>(
    maps: &Array3<S>,
    coeffs: &Array3<S>,
    geom: &ConvGeometry,
) -> Result<Array4<S>> {
    geom.check_inputs(maps)?;
    geom.check_outputs(coeffs)?;
    let (kf, c, kk) = (geom.output_filters, geom.input_maps, geom.kernel);
    let (mh, mw) = (geom.map_height, geom.map_width);
    let (oh, ow) = (geom.output_height(), geom.output_width());
    let cslice = contiguous3(coeffs);
    let cslice = cslice.as_ref();
    let mslice = contiguous3(maps);
    let mslice = mslice.as_ref();
    let mut out = Array4::zeros((kf, c, kk, kk));
    let out_slice = out.as_slice_mut().expect("freshly allocated");
    for j in 0..kf {
        for r in 0..oh {
            let crow = &cslice[(j * oh + r) * ow..(j * oh + r + 1) * ow];
            for (col, &coeff) in crow.iter().enumerate() {
                if coeff == S::zero() {
                    continue;
                }
                for ch in 0..c {
                    let base = ch * mh * mw;
                    let kern = &mut out_slice
                        [(j * c + ch) * kk * kk..(j * c + ch + 1) * kk * kk];
                    for dr in 0..kk {
                        let mrow = &mslice
                            [base + (r + dr) * mw + col..base + (r + dr) * mw + col + kk];
                        let krow = &mut kern[dr * kk..(dr + 1) * kk];
                        for (o, &v) in krow.iter_mut().zip(mrow) {
                            *o += coeff * v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
