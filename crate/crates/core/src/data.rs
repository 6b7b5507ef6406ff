//! Texture ingestion, preprocessing, patch sampling, image output and
//! bit-exact binary serialization of models and cached datasets.
//!
//! Images travel as binary PGM (P5, maxval 255). Model files carry the magic
//! `SSDBN\x01`, a little-endian header (layer count, per-layer type tag and
//! geometry) followed by named f64 arrays; `load . save` is bit-identical.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;

use crate::dbn::DbnModel;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::ssrbm::{SsRbm, SsRbmParams};
use crate::tiling::{ConvGeometry, TiledGeometry};
use crate::upper::{BinaryRbm, SsVisRbm};

pub const MODEL_MAGIC: &[u8; 6] = b"SSDBN\x01";
pub const DATASET_MAGIC: &[u8; 6] = b"SSTEX\x01";

const TAG_SSRBM: u8 = 1;
const TAG_SSVIS: u8 = 2;
const TAG_BRBM: u8 = 3;

/// Affine statistics that map normalized pixels back to [0, 1] gray values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization<S: Real = f64> {
    pub mean: S,
    pub std: S,
}

impl<S: Real> Normalization<S> {
    pub fn identity() -> Self {
        Self {
            mean: S::zero(),
            std: S::one(),
        }
    }
}

/// A texture split into a training half (top) and test half (bottom), both
/// normalized with the training half's statistics.
#[derive(Debug, Clone)]
pub struct TextureDataset<S: Real = f64> {
    pub name: String,
    pub train: Array2<S>,
    pub test: Array2<S>,
    pub mean: S,
    pub std: S,
    pub source_height: usize,
    pub source_width: usize,
}

impl<S: Real> TextureDataset<S> {
    pub fn normalization(&self) -> Normalization<S> {
        Normalization {
            mean: self.mean,
            std: self.std,
        }
    }

    /// Uniformly random `size`-square patches from the training half.
    pub fn sample_patches<R: Rng + ?Sized>(
        &self,
        size: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Array2<S>>> {
        patches_from(&self.train, size, count, rng)
    }

    /// Patches from the test half (held-out monitoring, inpainting frames).
    pub fn sample_test_patches<R: Rng + ?Sized>(
        &self,
        size: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Array2<S>>> {
        patches_from(&self.test, size, count, rng)
    }
}

fn patches_from<S: Real, R: Rng + ?Sized>(
    half: &Array2<S>,
    size: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Array2<S>>> {
    let (h, w) = half.dim();
    if size > h || size > w {
        return Err(Error::dimension(format!(
            "patch {size} exceeds region {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let r0 = rng.random_range(0..=(h - size));
        let c0 = rng.random_range(0..=(w - size));
        out.push(
            half.slice(ndarray::s![r0..r0 + size, c0..c0 + size])
                .to_owned(),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PGM

/// Binary PGM (P5, maxval 255) to [0, 1] grays.
pub fn load_pgm<S: Real>(path: impl AsRef<Path>) -> Result<Array2<S>> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes)
}

pub fn parse_pgm<S: Real>(bytes: &[u8]) -> Result<Array2<S>> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (magic P5 missing)".into()));
    }
    pos += 2;
    let next_token = |pos: &mut usize| -> Result<usize> {
        // skip whitespace and '#' comments
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            } else {
                break;
            }
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("malformed PGM header".into()));
        }
        std::str::from_utf8(&bytes[start..*pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PGM header".into()))
    };
    let width = next_token(&mut pos)?;
    let height = next_token(&mut pos)?;
    let maxval = next_token(&mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "unsupported PGM maxval {maxval} (need 255)"
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("missing separator before PGM payload".into()));
    }
    pos += 1;
    let need = width * height;
    if bytes.len() - pos < need {
        return Err(Error::Format(format!(
            "truncated PGM payload: need {need} bytes, have {}",
            bytes.len() - pos
        )));
    }
    let data = &bytes[pos..pos + need];
    Ok(Array2::from_shape_fn((height, width), |(r, c)| {
        S::of(data[r * width + c] as f64 / 255.0)
    }))
}

/// Write [0, 1] grays as binary PGM, clamping and rounding to 8 bits.
pub fn save_pgm<S: Real>(grid: &Array2<S>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = grid.dim();
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n")?;
    for v in grid.iter() {
        let byte = (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8;
        out.push(byte);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Denormalize through the dataset statistics and write as PGM.
pub fn save_image<S: Real>(
    grid: &Array2<S>,
    stats: &Normalization<S>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let denorm = grid.mapv(|x| x * stats.std + stats.mean);
    save_pgm(&denorm, path)
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Bilinear rescale (pixel-center sampling, edge clamped).
pub fn bilinear_resize<S: Real>(img: &Array2<S>, out_h: usize, out_w: usize) -> Array2<S> {
    let (h, w) = img.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = (S::of(fy - y0 as f64), S::of(fx - x0 as f64));
        let one = S::one();
        img[(y0, x0)] * (one - dy) * (one - dx)
            + img[(y0, x1)] * (one - dy) * dx
            + img[(y1, x0)] * dy * (one - dx)
            + img[(y1, x1)] * dy * dx
    })
}

/// Rescale to `target` square, split top/bottom halves, normalize both with
/// the training half's mean and standard deviation.
pub fn preprocess<S: Real>(
    image: &Array2<S>,
    target: usize,
    name: impl Into<String>,
) -> Result<TextureDataset<S>> {
    let (h, w) = image.dim();
    if target > h || target > w {
        return Err(Error::dimension(format!(
            "target {target} exceeds source {h}x{w}"
        )));
    }
    if target < 2 {
        return Err(Error::dimension("target too small to split"));
    }
    let scaled = bilinear_resize(image, target, target);
    let split = target / 2;
    let train_raw = scaled.slice(ndarray::s![..split, ..]).to_owned();
    let test_raw = scaled.slice(ndarray::s![split.., ..]).to_owned();
    let n = S::of(train_raw.len() as f64);
    let mean = train_raw.iter().copied().sum::<S>() / n;
    let var = train_raw
        .iter()
        .map(|&x| (x - mean) * (x - mean))
        .sum::<S>()
        / n;
    let std = var.sqrt();
    if std < S::of(1e-9) {
        return Err(Error::Format(
            "degenerate texture: training half has (near-)zero variance".into(),
        ));
    }
    Ok(TextureDataset {
        name: name.into(),
        train: train_raw.mapv(|x| (x - mean) / std),
        test: test_raw.mapv(|x| (x - mean) / std),
        mean,
        std,
        source_height: h,
        source_width: w,
    })
}

// ---------------------------------------------------------------------------
// Binary container primitives

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array<'a, S: Real>(
    out: &mut Vec<u8>,
    name: &str,
    dims: &[usize],
    values: impl Iterator<Item = &'a S>,
) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u64(out, d as u64);
    }
    for v in values {
        put_f64(out, v.as_f64());
    }
}

fn read_array(r: &mut Reader) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let name_len = r.u32()? as usize;
    if name_len > 256 {
        return Err(Error::Format("array name too long".into()));
    }
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| Error::Format("array name not utf-8".into()))?
        .to_string();
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Format("array rank too large".into()));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u64()? as usize);
    }
    let count: usize = dims.iter().product();
    if count > (1 << 28) {
        return Err(Error::Format("array too large".into()));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(r.f64()?);
    }
    Ok((name, dims, data))
}

fn expect_array(
    r: &mut Reader,
    want_name: &str,
    want_dims: &[usize],
) -> Result<Vec<f64>> {
    let (name, dims, data) = read_array(r)?;
    if name != want_name {
        return Err(Error::Format(format!(
            "expected array '{want_name}', found '{name}'"
        )));
    }
    if dims != want_dims {
        return Err(Error::Format(format!(
            "array '{name}' has dims {dims:?}, expected {want_dims:?}"
        )));
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// Model serialization

/// Serialize a model to its byte representation.
pub fn model_to_bytes<S: Real>(model: &DbnModel<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    let layers = model.depth() as u32;
    put_u32(&mut out, layers);

    let g1 = &model.layer1.geom;
    out.push(TAG_SSRBM);
    for v in [
        g1.image_height(),
        g1.kernel(),
        g1.num_tilings(),
        g1.filters_per_tiling(),
    ] {
        put_u32(&mut out, v as u32);
    }
    if let Some(l2) = &model.layer2 {
        out.push(TAG_SSVIS);
        for v in [
            l2.geom.input_maps(),
            l2.geom.map_height(),
            l2.geom.kernel(),
            l2.geom.output_filters(),
        ] {
            put_u32(&mut out, v as u32);
        }
        out.push(u8::from(l2.bias_shift));
    }
    if let Some(l3) = &model.layer3 {
        out.push(TAG_BRBM);
        for v in [
            l3.geom.input_maps(),
            l3.geom.map_height(),
            l3.geom.kernel(),
            l3.geom.output_filters(),
        ] {
            put_u32(&mut out, v as u32);
        }
    }
    put_f64(&mut out, model.normalization.mean.as_f64());
    put_f64(&mut out, model.normalization.std.as_f64());

    let mut arrays = 6u32;
    if model.layer2.is_some() {
        arrays += 5;
    }
    if model.layer3.is_some() {
        arrays += 3;
    }
    put_u32(&mut out, arrays);

    let p = &model.layer1.params;
    let maps = g1.num_maps();
    let k = g1.kernel();
    put_array(&mut out, "layer1.weights", &[maps, k, k], p.weights.iter());
    put_array(&mut out, "layer1.spike_bias", &[maps], p.spike_bias.iter());
    put_array(&mut out, "layer1.slab_mean", &[maps], p.slab_mean.iter());
    put_array(
        &mut out,
        "layer1.slab_precision",
        &[maps],
        p.slab_precision.iter(),
    );
    put_array(
        &mut out,
        "layer1.vis_precision",
        &[1],
        std::iter::once(&p.vis_precision),
    );
    put_array(
        &mut out,
        "layer1.gated_precision",
        &[maps],
        p.gated_precision.iter(),
    );

    if let Some(l2) = &model.layer2 {
        let (kf, c, kk) = (
            l2.geom.output_filters(),
            l2.geom.input_maps(),
            l2.geom.kernel(),
        );
        put_array(
            &mut out,
            "layer2.interaction",
            &[kf, c, kk, kk],
            l2.interaction.iter(),
        );
        put_array(&mut out, "layer2.g_bias", &[kf], l2.g_bias.iter());
        put_array(&mut out, "layer2.spike_bias", &[c], l2.spike_bias.iter());
        put_array(&mut out, "layer2.slab_mean", &[c], l2.slab_mean.iter());
        put_array(
            &mut out,
            "layer2.slab_precision",
            &[c],
            l2.slab_precision.iter(),
        );
    }
    if let Some(l3) = &model.layer3 {
        let (kf, c, kk) = (
            l3.geom.output_filters(),
            l3.geom.input_maps(),
            l3.geom.kernel(),
        );
        put_array(
            &mut out,
            "layer3.weights",
            &[kf, c, kk, kk],
            l3.weights.iter(),
        );
        put_array(
            &mut out,
            "layer3.visible_bias",
            &[c],
            l3.visible_bias.iter(),
        );
        put_array(
            &mut out,
            "layer3.hidden_bias",
            &[kf],
            l3.hidden_bias.iter(),
        );
    }
    out
}

pub fn save_model<S: Real>(model: &DbnModel<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn model_from_bytes<S: Real>(bytes: &[u8]) -> Result<DbnModel<S>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(6)?;
    if magic != MODEL_MAGIC {
        return Err(Error::Version(format!(
            "bad model magic {magic:?}, expected {MODEL_MAGIC:?}"
        )));
    }
    let layers = r.u32()? as usize;
    if !(1..=3).contains(&layers) {
        return Err(Error::Format(format!("layer count {layers} out of range")));
    }

    if r.u8()? != TAG_SSRBM {
        return Err(Error::Format("first layer must be the tiled layer".into()));
    }
    let side = r.u32()? as usize;
    let kernel = r.u32()? as usize;
    let tilings = r.u32()? as usize;
    let filters = r.u32()? as usize;
    let geom1 = TiledGeometry::new(side, side, kernel, tilings, filters)?;

    let geom2 = if layers >= 2 {
        if r.u8()? != TAG_SSVIS {
            return Err(Error::Format("second layer tag mismatch".into()));
        }
        let input_maps = r.u32()? as usize;
        let map_side = r.u32()? as usize;
        let kk = r.u32()? as usize;
        let kf = r.u32()? as usize;
        let bias_shift = r.u8()? != 0;
        Some((
            ConvGeometry::new(input_maps, map_side, map_side, kk, kf)?,
            bias_shift,
        ))
    } else {
        None
    };
    let geom3 = if layers >= 3 {
        if r.u8()? != TAG_BRBM {
            return Err(Error::Format("third layer tag mismatch".into()));
        }
        let input_maps = r.u32()? as usize;
        let map_side = r.u32()? as usize;
        let kk = r.u32()? as usize;
        let kf = r.u32()? as usize;
        Some(ConvGeometry::new(input_maps, map_side, map_side, kk, kf)?)
    } else {
        None
    };

    let mean = r.f64()?;
    let std = r.f64()?;
    let declared_arrays = r.u32()?;
    let expected_arrays = 6 + if layers >= 2 { 5 } else { 0 } + if layers >= 3 { 3 } else { 0 };
    if declared_arrays != expected_arrays {
        return Err(Error::Format(format!(
            "array count {declared_arrays} does not match {expected_arrays}"
        )));
    }

    let maps = geom1.num_maps();
    let k = geom1.kernel();
    let weights = expect_array(&mut r, "layer1.weights", &[maps, k, k])?;
    let spike_bias = expect_array(&mut r, "layer1.spike_bias", &[maps])?;
    let slab_mean = expect_array(&mut r, "layer1.slab_mean", &[maps])?;
    let slab_precision = expect_array(&mut r, "layer1.slab_precision", &[maps])?;
    let vis_precision = expect_array(&mut r, "layer1.vis_precision", &[1])?;
    let gated_precision = expect_array(&mut r, "layer1.gated_precision", &[maps])?;
    let params = SsRbmParams {
        weights: Array3::from_shape_vec((maps, k, k), to_scalar::<S>(weights))
            .map_err(|e| Error::Format(e.to_string()))?,
        spike_bias: Array1::from_vec(to_scalar::<S>(spike_bias)),
        slab_mean: Array1::from_vec(to_scalar::<S>(slab_mean)),
        slab_precision: Array1::from_vec(to_scalar::<S>(slab_precision)),
        vis_precision: S::of(vis_precision[0]),
        gated_precision: Array1::from_vec(to_scalar::<S>(gated_precision)),
    };
    let layer1 = SsRbm::new(params, geom1)?;
    let mut model = DbnModel::single(
        layer1,
        Normalization {
            mean: S::of(mean),
            std: S::of(std),
        },
    )?;

    if let Some((geom, bias_shift)) = geom2 {
        let (kf, c, kk) = (geom.output_filters(), geom.input_maps(), geom.kernel());
        let interaction = expect_array(&mut r, "layer2.interaction", &[kf, c, kk, kk])?;
        let g_bias = expect_array(&mut r, "layer2.g_bias", &[kf])?;
        let spike_bias = expect_array(&mut r, "layer2.spike_bias", &[c])?;
        let slab_mean = expect_array(&mut r, "layer2.slab_mean", &[c])?;
        let slab_precision = expect_array(&mut r, "layer2.slab_precision", &[c])?;
        let layer2 = SsVisRbm::new(
            Array4::from_shape_vec((kf, c, kk, kk), to_scalar::<S>(interaction))
                .map_err(|e| Error::Format(e.to_string()))?,
            Array1::from_vec(to_scalar::<S>(g_bias)),
            Array1::from_vec(to_scalar::<S>(spike_bias)),
            Array1::from_vec(to_scalar::<S>(slab_mean)),
            Array1::from_vec(to_scalar::<S>(slab_precision)),
            bias_shift,
            geom,
        )?;
        model = model.with_layer2(layer2)?;
    }
    if let Some(geom) = geom3 {
        let (kf, c, kk) = (geom.output_filters(), geom.input_maps(), geom.kernel());
        let weights = expect_array(&mut r, "layer3.weights", &[kf, c, kk, kk])?;
        let visible_bias = expect_array(&mut r, "layer3.visible_bias", &[c])?;
        let hidden_bias = expect_array(&mut r, "layer3.hidden_bias", &[kf])?;
        let layer3 = BinaryRbm {
            weights: Array4::from_shape_vec((kf, c, kk, kk), to_scalar::<S>(weights))
                .map_err(|e| Error::Format(e.to_string()))?,
            visible_bias: Array1::from_vec(to_scalar::<S>(visible_bias)),
            hidden_bias: Array1::from_vec(to_scalar::<S>(hidden_bias)),
            geom,
        };
        model = model.with_layer3(layer3)?;
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after model payload".into()));
    }
    Ok(model)
}

pub fn load_model<S: Real>(path: impl AsRef<Path>) -> Result<DbnModel<S>> {
    let bytes = fs::read(path)?;
    model_from_bytes(&bytes)
}

fn to_scalar<S: Real>(values: Vec<f64>) -> Vec<S> {
    values.into_iter().map(S::of).collect()
}

// ---------------------------------------------------------------------------
// Dataset cache

pub fn dataset_to_bytes<S: Real>(ds: &TextureDataset<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    put_u32(&mut out, ds.name.len() as u32);
    out.extend_from_slice(ds.name.as_bytes());
    put_u32(&mut out, ds.source_height as u32);
    put_u32(&mut out, ds.source_width as u32);
    put_f64(&mut out, ds.mean.as_f64());
    put_f64(&mut out, ds.std.as_f64());
    put_array(&mut out, "train", &[ds.train.nrows(), ds.train.ncols()], ds.train.iter());
    put_array(&mut out, "test", &[ds.test.nrows(), ds.test.ncols()], ds.test.iter());
    out
}

pub fn save_dataset<S: Real>(ds: &TextureDataset<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_bytes(ds))?;
    Ok(())
}

pub fn load_dataset<S: Real>(path: impl AsRef<Path>) -> Result<TextureDataset<S>> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let magic = r.take(6)?;
    if magic != DATASET_MAGIC {
        return Err(Error::Version(format!(
            "bad dataset magic {magic:?}, expected {DATASET_MAGIC:?}"
        )));
    }
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| Error::Format("dataset name not utf-8".into()))?
        .to_string();
    let source_height = r.u32()? as usize;
    let source_width = r.u32()? as usize;
    let mean = r.f64()?;
    let std = r.f64()?;
    let (tname, tdims, tdata) = read_array(&mut r)?;
    let (ename, edims, edata) = read_array(&mut r)?;
    if tname != "train" || ename != "test" || tdims.len() != 2 || edims.len() != 2 {
        return Err(Error::Format("dataset arrays malformed".into()));
    }
    Ok(TextureDataset {
        name,
        train: Array2::from_shape_vec((tdims[0], tdims[1]), to_scalar::<S>(tdata))
            .map_err(|e| Error::Format(e.to_string()))?,
        test: Array2::from_shape_vec((edims[0], edims[1]), to_scalar::<S>(edata))
            .map_err(|e| Error::Format(e.to_string()))?,
        mean: S::of(mean),
        std: S::of(std),
        source_height,
        source_width,
    })
}
