//! Voxel grids and the interpolation, resampling and smoothing primitives
//! shared by the generators, the deformation tools and the metrics.
//!
//! All fields are stored row-major with the last spatial axis varying
//! fastest and channels interleaved per voxel (channel-last). Vector
//! components are ordered by axis: channel `k` is the displacement along
//! axis `k`, in voxels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of spatial axes.
pub const MAX_DIMS: usize = 3;

/// Grid geometry: voxel counts per axis and voxel size in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    dims: Vec<usize>,
    spacing: Vec<f64>,
}

impl GridMeta {
    /// Grid with unit spacing.
    pub fn new(dims: &[usize]) -> Result<Self> {
        Self::with_spacing(dims, &vec![1.0; dims.len()])
    }

    pub fn with_spacing(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if dims.len() < 2 || dims.len() > MAX_DIMS {
            return Err(Error::InvalidGrid(format!(
                "expected 2 or 3 axes, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("zero-sized axis in {dims:?}")));
        }
        if spacing.len() != dims.len() {
            return Err(Error::InvalidGrid(format!(
                "{} spacings for {} axes",
                spacing.len(),
                dims.len()
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            spacing: spacing.to_vec(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Voxel strides per axis (last axis has stride 1).
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for a in (0..self.dims.len() - 1).rev() {
            strides[a] = strides[a + 1] * self.dims[a + 1];
        }
        strides
    }

    /// Coordinates of a linear voxel index.
    pub fn coord(&self, mut index: usize) -> [usize; MAX_DIMS] {
        let mut c = [0; MAX_DIMS];
        for a in (0..self.dims.len()).rev() {
            c[a] = index % self.dims[a];
            index /= self.dims[a];
        }
        c
    }

    /// Linear index of in-bounds coordinates.
    pub fn index(&self, coord: &[usize]) -> usize {
        coord
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &d)| acc * d + c)
    }

    /// Same grid with different voxel counts; spacing scaled so the
    /// physical extent is preserved.
    pub fn resized(&self, dims: &[usize]) -> Result<Self> {
        if dims.len() != self.dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot resize {}-D grid to {dims:?}",
                self.dims.len()
            )));
        }
        let spacing: Vec<f64> = self
            .spacing
            .iter()
            .zip(self.dims.iter().zip(dims))
            .map(|(&s, (&from, &to))| s * from as f64 / to.max(1) as f64)
            .collect();
        Self::with_spacing(dims, &spacing)
    }

    fn check_same(&self, other: &GridMeta, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "{what}: grid {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Real-valued field with `channels` values per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    meta: GridMeta,
    channels: usize,
    data: Vec<f32>,
}

impl ScalarField {
    pub fn new(meta: GridMeta, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidArgument(
                "field needs at least one channel".into(),
            ));
        }
        let expected = meta.num_voxels() * channels;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "expected {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::OutOfRange(format!(
                "non-finite value at index {pos}"
            )));
        }
        Ok(Self {
            meta,
            channels,
            data,
        })
    }

    pub fn filled(meta: GridMeta, channels: usize, value: f32) -> Self {
        assert!(channels > 0 && value.is_finite());
        let n = meta.num_voxels() * channels;
        Self {
            meta,
            channels,
            data: vec![value; n],
        }
    }

    pub fn zeros(meta: GridMeta, channels: usize) -> Self {
        Self::filled(meta, channels, 0.0)
    }

    /// Builds a field from per-voxel values; panics on non-finite values.
    pub(crate) fn from_vec_unchecked(meta: GridMeta, channels: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), meta.num_voxels() * channels);
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            meta,
            channels,
            data,
        }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn dims(&self) -> &[usize] {
        self.meta.dims()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, voxel: usize, channel: usize) -> f32 {
        self.data[voxel * self.channels + channel]
    }

    /// Copy of a single channel.
    pub fn channel(&self, c: usize) -> ScalarField {
        assert!(c < self.channels);
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|v| v[c])
            .collect();
        Self::from_vec_unchecked(self.meta.clone(), 1, data)
    }

    /// Stacks single- or multi-channel fields on the same grid.
    pub fn stack(fields: &[ScalarField]) -> Result<ScalarField> {
        let first = fields
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to stack".into()))?;
        for f in fields {
            first.meta.check_same(&f.meta, "stack")?;
        }
        let channels: usize = fields.iter().map(|f| f.channels).sum();
        let mut data = Vec::with_capacity(first.meta.num_voxels() * channels);
        for v in 0..first.meta.num_voxels() {
            for f in fields {
                data.extend_from_slice(&f.data[v * f.channels..(v + 1) * f.channels]);
            }
        }
        Ok(Self::from_vec_unchecked(first.meta.clone(), channels, data))
    }

    /// Element-wise map; errors if the result is not finite.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<ScalarField> {
        Self::new(
            self.meta.clone(),
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Element-wise combination of two fields of identical shape.
    pub fn zip_with(
        &self,
        other: &ScalarField,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<ScalarField> {
        self.meta.check_same(&other.meta, "zip")?;
        if self.channels != other.channels {
            return Err(Error::ShapeMismatch(format!(
                "{} vs {} channels",
                self.channels, other.channels
            )));
        }
        Self::new(
            self.meta.clone(),
            self.channels,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Field of `D` displacement-like components per voxel, in voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField(ScalarField);

impl VectorField {
    pub fn new(meta: GridMeta, data: Vec<f32>) -> Result<Self> {
        let d = meta.ndim();
        ScalarField::new(meta, d, data).map(Self)
    }

    pub fn zeros(meta: GridMeta) -> Self {
        let d = meta.ndim();
        Self(ScalarField::zeros(meta, d))
    }

    /// Constant vector everywhere.
    pub fn constant(meta: GridMeta, value: &[f32]) -> Result<Self> {
        if value.len() != meta.ndim() {
            return Err(Error::ShapeMismatch(format!(
                "{} components for a {}-D grid",
                value.len(),
                meta.ndim()
            )));
        }
        let n = meta.num_voxels();
        Self::new(meta, value.repeat(n))
    }

    pub fn from_scalar(field: ScalarField) -> Result<Self> {
        if field.channels() != field.meta().ndim() {
            return Err(Error::ShapeMismatch(format!(
                "vector field needs {} channels, got {}",
                field.meta().ndim(),
                field.channels()
            )));
        }
        Ok(Self(field))
    }

    pub fn as_scalar(&self) -> &ScalarField {
        &self.0
    }

    pub fn into_scalar(self) -> ScalarField {
        self.0
    }

    pub fn meta(&self) -> &GridMeta {
        self.0.meta()
    }

    pub fn dims(&self) -> &[usize] {
        self.0.dims()
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    /// Component `c` at voxel `v`.
    pub fn get(&self, voxel: usize, c: usize) -> f32 {
        self.0.get(voxel, c)
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        self.0.zip_with(&other.0, |a, b| a + b).map(Self)
    }

    pub fn scale(&self, factor: f32) -> Result<VectorField> {
        self.0.map(|v| v * factor).map(Self)
    }
}

/// Integer label per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    meta: GridMeta,
    data: Vec<u32>,
    label_set: Vec<u32>,
}

impl LabelMap {
    pub fn new(meta: GridMeta, data: Vec<u32>) -> Result<Self> {
        if data.len() != meta.num_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} labels, got {}",
                meta.num_voxels(),
                data.len()
            )));
        }
        let mut label_set = data.clone();
        label_set.sort_unstable();
        label_set.dedup();
        Ok(Self {
            meta,
            data,
            label_set,
        })
    }

    pub fn filled(meta: GridMeta, label: u32) -> Self {
        let n = meta.num_voxels();
        Self {
            meta,
            data: vec![label; n],
            label_set: vec![label],
        }
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn dims(&self) -> &[usize] {
        self.meta.dims()
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    /// Sorted distinct labels present in the map.
    pub fn label_set(&self) -> &[u32] {
        &self.label_set
    }

    /// Voxel count per label, in `label_set` order.
    pub fn histogram(&self) -> Vec<(u32, usize)> {
        let mut counts = vec![0usize; self.label_set.len()];
        for &l in &self.data {
            // label_set is sorted, so the search always succeeds
            let k = self.label_set.binary_search(&l).unwrap();
            counts[k] += 1;
        }
        self.label_set.iter().copied().zip(counts).collect()
    }
}

/// Output size of a field sampled at relative resolution `r`: every axis is
/// multiplied by `r` and rounded up, with a minimum of one voxel.
pub fn low_res_dims(full_dims: &[usize], r: f64) -> Vec<usize> {
    full_dims
        .iter()
        .map(|&d| {
            // tolerate representation error in ratios such as 1/40
            let scaled = d as f64 * r;
            let rounded = scaled.round();
            let v = if (scaled - rounded).abs() < 1e-9 {
                rounded
            } else {
                scaled.ceil()
            };
            (v as usize).max(1)
        })
        .collect()
}

/// Interpolation positions for a corner-aligned resize of one axis:
/// `(lower index, upper index, weight of upper)`.
fn axis_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Corner-aligned multilinear resampling to `target_dims`.
///
/// The first and last sample of every axis map onto the first and last
/// sample of the target; constant fields and axis-aligned ramps are
/// reproduced exactly up to rounding.
pub fn resample_linear(src: &ScalarField, target_dims: &[usize]) -> Result<ScalarField> {
    let meta = src.meta().resized(target_dims)?;
    if target_dims == src.dims() {
        return Ok(ScalarField::from_vec_unchecked(
            meta,
            src.channels(),
            src.data().to_vec(),
        ));
    }
    let channels = src.channels();
    let mut dims = src.dims().to_vec();
    let mut data: Vec<f32> = src.data().to_vec();
    for axis in 0..dims.len() {
        let (from, to) = (dims[axis], target_dims[axis]);
        if from == to {
            continue;
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product::<usize>() * channels;
        let positions = axis_positions(from, to);
        let mut out = vec![0f32; outer * to * inner];
        for o in 0..outer {
            let src_block = &data[o * from * inner..(o + 1) * from * inner];
            let dst_block = &mut out[o * to * inner..(o + 1) * to * inner];
            for (i, &(lo, hi, t)) in positions.iter().enumerate() {
                let a = &src_block[lo * inner..(lo + 1) * inner];
                let b = &src_block[hi * inner..(hi + 1) * inner];
                let d = &mut dst_block[i * inner..(i + 1) * inner];
                for k in 0..inner {
                    let (av, bv) = (a[k] as f64, b[k] as f64);
                    d[k] = (av + t * (bv - av)) as f32;
                }
            }
        }
        dims[axis] = to;
        data = out;
    }
    Ok(ScalarField::from_vec_unchecked(meta, channels, data))
}

fn check_vector_for(meta: &GridMeta, u: &VectorField, what: &str) -> Result<()> {
    meta.check_same(u.meta(), what)
}

/// Samples `src` at `x + u(x)` with multilinear interpolation.
///
/// Neighbors that fall outside the grid contribute `fill`, so positions
/// fully outside the grid evaluate to `fill` exactly.
pub fn warp_linear(src: &ScalarField, u: &VectorField, fill: f32) -> Result<ScalarField> {
    check_vector_for(src.meta(), u, "warp_linear")?;
    let meta = src.meta();
    let nd = meta.ndim();
    let dims = meta.dims();
    let strides = meta.strides();
    let channels = src.channels();
    let fill = fill as f64;
    let mut out = vec![0f32; src.data().len()];
    let mut acc = vec![0f64; channels];
    for v in 0..meta.num_voxels() {
        let coord = meta.coord(v);
        let mut base = [0i64; MAX_DIMS];
        let mut frac = [0f64; MAX_DIMS];
        for a in 0..nd {
            let p = coord[a] as f64 + u.get(v, a) as f64;
            let f = p.floor();
            base[a] = f as i64;
            frac[a] = p - f;
        }
        acc.iter_mut().for_each(|x| *x = 0.0);
        for corner in 0..(1usize << nd) {
            let mut w = 1.0;
            let mut offset = 0usize;
            let mut inside = true;
            for a in 0..nd {
                let upper = (corner >> a) & 1 == 1;
                w *= if upper { frac[a] } else { 1.0 - frac[a] };
                let idx = base[a] + upper as i64;
                if idx < 0 || idx >= dims[a] as i64 {
                    inside = false;
                } else {
                    offset += idx as usize * strides[a];
                }
            }
            if w == 0.0 {
                continue;
            }
            if inside {
                let vals = &src.data()[offset * channels..(offset + 1) * channels];
                for (c, x) in acc.iter_mut().enumerate() {
                    *x += w * vals[c] as f64;
                }
            } else {
                acc.iter_mut().for_each(|x| *x += w * fill);
            }
        }
        for c in 0..channels {
            out[v * channels + c] = acc[c] as f32;
        }
    }
    Ok(ScalarField::from_vec_unchecked(meta.clone(), channels, out))
}

/// Nearest-neighbor round with ties toward the lower coordinate.
fn round_half_down(p: f64) -> i64 {
    (p - 0.5).ceil() as i64
}

/// Nearest-neighbor warp of a label map; out-of-grid samples take
/// `fill_label`.
pub fn warp_nearest(src: &LabelMap, u: &VectorField, fill_label: u32) -> Result<LabelMap> {
    check_vector_for(src.meta(), u, "warp_nearest")?;
    let meta = src.meta();
    let nd = meta.ndim();
    let dims = meta.dims();
    let strides = meta.strides();
    let data = (0..meta.num_voxels())
        .map(|v| {
            let coord = meta.coord(v);
            let mut offset = 0usize;
            for a in 0..nd {
                let idx = round_half_down(coord[a] as f64 + u.get(v, a) as f64);
                if idx < 0 || idx >= dims[a] as i64 {
                    return fill_label;
                }
                offset += idx as usize * strides[a];
            }
            src.data()[offset]
        })
        .collect();
    LabelMap::new(meta.clone(), data)
}

/// One binary channel per entry of `labels`.
pub fn one_hot(s: &LabelMap, labels: &[u32]) -> Result<ScalarField> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument(
            "one_hot needs at least one label".into(),
        ));
    }
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "duplicate labels in {labels:?}"
        )));
    }
    let c = labels.len();
    let mut data = vec![0f32; s.data().len() * c];
    for (v, &l) in s.data().iter().enumerate() {
        if let Some(j) = labels.iter().position(|&x| x == l) {
            data[v * c + j] = 1.0;
        }
    }
    Ok(ScalarField::from_vec_unchecked(s.meta().clone(), c, data))
}

/// Rescales all values to [0, 1]. A constant field maps to zeros.
pub fn minmax_normalize(img: &ScalarField) -> ScalarField {
    let (lo, hi) = (img.min() as f64, img.max() as f64);
    let range = hi - lo;
    let data = if range > 0.0 {
        img.data()
            .iter()
            .map(|&v| ((v as f64 - lo) / range) as f32)
            .collect()
    } else {
        vec![0.0; img.data().len()]
    };
    ScalarField::from_vec_unchecked(img.meta().clone(), img.channels(), data)
}

/// Normalized Gaussian kernel truncated at radius `ceil(3 sigma)`.
/// `sigma == 0` yields the unit kernel.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

/// Convolves a contiguous run of samples with `kernel`, replicating the
/// border samples.
pub(crate) fn convolve_replicate(src: &[f64], kernel: &[f64], out: &mut [f64]) {
    let n = src.len() as i64;
    let radius = (kernel.len() / 2) as i64;
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, &w) in kernel.iter().enumerate() {
            let j = (i as i64 + k as i64 - radius).clamp(0, n - 1);
            acc += w * src[j as usize];
        }
        *o = acc;
    }
}

/// Separable Gaussian smoothing with one standard deviation (in voxels)
/// per axis. Borders are replicated.
pub fn gaussian_blur_separable(img: &ScalarField, sigmas: &[f64]) -> Result<ScalarField> {
    let nd = img.meta().ndim();
    if sigmas.len() != nd {
        return Err(Error::InvalidArgument(format!(
            "{} sigmas for a {nd}-D field",
            sigmas.len()
        )));
    }
    if sigmas.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "blur sigmas must be non-negative, got {sigmas:?}"
        )));
    }
    let dims = img.dims().to_vec();
    let channels = img.channels();
    let mut data: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    for (axis, &sigma) in sigmas.iter().enumerate() {
        if sigma == 0.0 || dims[axis] == 1 {
            continue;
        }
        let kernel = gaussian_kernel(sigma);
        let n = dims[axis];
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product::<usize>() * channels;
        let mut line = vec![0f64; n];
        let mut smoothed = vec![0f64; n];
        for o in 0..outer {
            for k in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + k;
                for (i, x) in line.iter_mut().enumerate() {
                    *x = data[at(i)];
                }
                convolve_replicate(&line, &kernel, &mut smoothed);
                for (i, &x) in smoothed.iter().enumerate() {
                    data[at(i)] = x;
                }
            }
        }
    }
    Ok(ScalarField::from_vec_unchecked(
        img.meta().clone(),
        channels,
        data.into_iter().map(|v| v as f32).collect(),
    ))
}
