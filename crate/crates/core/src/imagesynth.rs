//! Gray-scale image synthesis from label maps.
//!
//! The chain is fixed: per-label Gaussian intensities, anisotropic blur,
//! multiplicative bias field, min-max normalization, then a global gamma.
//! Every random draw is kept in the returned [`SynthRecord`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    convolve_replicate, gaussian_blur_separable, gaussian_kernel, minmax_normalize, LabelMap,
    ScalarField,
};
use crate::sampling::{sample_noise_field, GenParams, RngStream};

/// Number of intensity levels remapped by a lookup table.
pub const LUT_SIZE: usize = 256;

/// Per-label intensity distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmDraw {
    pub labels: Vec<u32>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl GmmDraw {
    fn component(&self, label: u32) -> Option<(f64, f64)> {
        self.labels
            .iter()
            .position(|&l| l == label)
            .map(|k| (self.means[k], self.sds[k]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub image: ScalarField,
    pub gmm: GmmDraw,
    pub blur_sigmas: Vec<f64>,
    pub bias_sd: f64,
    pub gamma: f64,
}

/// Draws a mean from U(a_mu, b_mu) and an SD from U(a_sigma, b_sigma) for
/// every label, in order.
pub fn sample_gmm(rng: &mut RngStream, labels: &[u32], params: &GenParams) -> Result<GmmDraw> {
    let mut means = Vec::with_capacity(labels.len());
    let mut sds = Vec::with_capacity(labels.len());
    for _ in labels {
        means.push(rng.uniform(params.a_mu, params.b_mu)?);
        sds.push(rng.uniform(params.a_sigma, params.b_sigma)?);
    }
    Ok(GmmDraw {
        labels: labels.to_vec(),
        means,
        sds,
    })
}

/// Independent normal intensity per voxel from its label's component.
pub fn render_gmm(rng: &mut RngStream, s: &LabelMap, gmm: &GmmDraw) -> Result<ScalarField> {
    let data = s
        .data()
        .iter()
        .map(|&l| {
            let (mu, sd) = gmm.component(l).ok_or(Error::MissingLabel(l))?;
            Ok(rng.normal(mu, sd)? as f32)
        })
        .collect::<Result<Vec<_>>>()?;
    ScalarField::new(s.meta().clone(), 1, data)
}

pub fn sample_gmm_image(
    rng: &mut RngStream,
    s: &LabelMap,
    params: &GenParams,
) -> Result<(ScalarField, GmmDraw)> {
    let gmm = sample_gmm(rng, s.label_set(), params)?;
    let image = render_gmm(rng, s, &gmm)?;
    Ok((image, gmm))
}

/// Smooth positive field: `exp` of N(0, sd^2) noise sampled at `r_B` and
/// upsampled, with `sd ~ U(0, b_B)`. Returns the field and the drawn SD.
pub fn sample_bias_field_with_sd(
    rng: &mut RngStream,
    dims: &[usize],
    params: &GenParams,
) -> Result<(ScalarField, f64)> {
    let meta = crate::grid::GridMeta::new(dims)?;
    let sd = rng.uniform(0.0, params.b_b)?;
    let noise = sample_noise_field(rng, &meta, params.r_b)?;
    let field = noise.map(|z| (sd * z as f64).exp() as f32)?;
    Ok((field, sd))
}

pub fn sample_bias_field(
    rng: &mut RngStream,
    dims: &[usize],
    params: &GenParams,
) -> Result<ScalarField> {
    sample_bias_field_with_sd(rng, dims, params).map(|(f, _)| f)
}

fn check_unit_range(img: &ScalarField, what: &str) -> Result<()> {
    if img.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::OutOfRange(format!(
            "{what} expects values in [0, 1]"
        )));
    }
    Ok(())
}

/// `img ^ exp(gamma)` for a fixed `gamma`.
pub fn apply_gamma(img: &ScalarField, gamma: f64) -> Result<ScalarField> {
    check_unit_range(img, "gamma")?;
    let e = gamma.exp();
    img.map(|v| (v as f64).powf(e) as f32)
}

/// Global exponentiation with `gamma ~ N(0, sigma_gamma^2)`.
pub fn gamma_augment(
    rng: &mut RngStream,
    img_norm: &ScalarField,
    sigma_gamma: f64,
) -> Result<(ScalarField, f64)> {
    check_unit_range(img_norm, "gamma")?;
    let gamma = rng.normal(0.0, sigma_gamma)?;
    Ok((apply_gamma(img_norm, gamma)?, gamma))
}

/// Full synthesis chain with a given intensity model.
pub fn synthesize_image_with_gmm(
    rng: &mut RngStream,
    s: &LabelMap,
    params: &GenParams,
    gmm: GmmDraw,
) -> Result<SynthRecord> {
    let raw = render_gmm(rng, s, &gmm)?;
    let blur_sigmas = (0..s.meta().ndim())
        .map(|_| rng.uniform(0.0, params.b_k))
        .collect::<Result<Vec<_>>>()?;
    let blurred = gaussian_blur_separable(&raw, &blur_sigmas)?;
    let (bias, bias_sd) = sample_bias_field_with_sd(rng, s.dims(), params)?;
    let biased = blurred.zip_with(&bias, |a, b| a * b)?;
    let normalized = minmax_normalize(&biased);
    let (image, gamma) = gamma_augment(rng, &normalized, params.sigma_gamma)?;
    Ok(SynthRecord {
        image,
        gmm,
        blur_sigmas,
        bias_sd,
        gamma,
    })
}

/// Image of arbitrary contrast from a label map.
pub fn synthesize_image(
    rng: &mut RngStream,
    s: &LabelMap,
    params: &GenParams,
) -> Result<SynthRecord> {
    let gmm = sample_gmm(rng, s.label_set(), params)?;
    synthesize_image_with_gmm(rng, s, params, gmm)
}

/// Random lookup table over the 256 intensity levels: entries drawn from
/// U(0, 255), then smoothed with a Gaussian of SD `sigma_l` entries.
pub fn sample_lut(rng: &mut RngStream, sigma_l: f64) -> Result<Vec<f64>> {
    if !(sigma_l >= 0.0 && sigma_l.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "LUT sigma must be non-negative, got {sigma_l}"
        )));
    }
    let raw = (0..LUT_SIZE)
        .map(|_| rng.uniform(0.0, 255.0))
        .collect::<Result<Vec<_>>>()?;
    let mut smooth = vec![0.0; LUT_SIZE];
    convolve_replicate(&raw, &gaussian_kernel(sigma_l), &mut smooth);
    Ok(smooth)
}

/// Quantizes a [0, 1] image to 256 levels, remaps through `lut`, and
/// min-max normalizes the result.
pub fn apply_lut(img: &ScalarField, lut: &[f64]) -> Result<ScalarField> {
    check_unit_range(img, "lookup table")?;
    if lut.len() != LUT_SIZE || lut.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "lookup table needs {LUT_SIZE} finite entries"
        )));
    }
    let remapped = img.map(|v| {
        let bin = ((v as f64) * (LUT_SIZE - 1) as f64).round() as usize;
        lut[bin.min(LUT_SIZE - 1)] as f32
    })?;
    Ok(minmax_normalize(&remapped))
}

pub fn lut_augment(rng: &mut RngStream, img: &ScalarField, sigma_l: f64) -> Result<ScalarField> {
    check_unit_range(img, "lookup table")?;
    let lut = sample_lut(rng, sigma_l)?;
    apply_lut(img, &lut)
}
