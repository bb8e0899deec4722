//! Generation hyperparameters and deterministic random streams.
//!
//! Every stochastic routine in the crate draws from an explicit
//! [`RngStream`]. Streams are ChaCha8 keyed by the seed with the stream id
//! selecting an independent ChaCha stream, so a `(seed, stream)` pair gives
//! the same sequence on every platform. [`RngStream::split`] derives a child
//! from the parent's identity only, never from how much of the parent has
//! been consumed.
//!
//! Normal deviates use the cosine branch of the Box-Muller transform on
//! two 53-bit uniforms; the sine branch is discarded so every draw consumes
//! exactly two 64-bit words.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{low_res_dims, resample_linear, GridMeta, ScalarField};

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seeded, splittable random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = seed;
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Independent child stream number `id`.
    pub fn split(&self, id: u64) -> RngStream {
        let child = splitmix64(self.stream.rotate_left(17) ^ splitmix64(id.wrapping_add(1)));
        RngStream::new(self.seed, child)
    }

    /// Child stream keyed by the next word of this stream; successive forks
    /// differ.
    pub fn fork(&mut self) -> RngStream {
        let id = self.next_u64();
        self.split(id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, a: f64, b: f64) -> Result<f64> {
        if !(a.is_finite() && b.is_finite()) || a > b {
            return Err(Error::InvalidArgument(format!(
                "invalid uniform range [{a}, {b}]"
            )));
        }
        if a == b {
            return Ok(a);
        }
        Ok(a + (b - a) * self.next_f64())
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal(&mut self, mu: f64, sigma: f64) -> Result<f64> {
        if !(sigma >= 0.0 && sigma.is_finite() && mu.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "invalid normal parameters mu={mu}, sigma={sigma}"
            )));
        }
        let z = self.standard_normal();
        Ok(if sigma == 0.0 { mu } else { mu + sigma * z })
    }
}

pub fn sample_uniform(rng: &mut RngStream, a: f64, b: f64) -> Result<f64> {
    rng.uniform(a, b)
}

pub fn sample_normal(rng: &mut RngStream, mu: f64, sigma: f64) -> Result<f64> {
    rng.normal(mu, sigma)
}

/// Hyperparameters of the generative model. Spatial quantities are in
/// voxels; ratios are relative resolutions in (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    /// Regularization weight of the smoothness term.
    pub lambda_reg: f64,
    /// Resolution of the label-generating noise images and their warps.
    pub r_p: f64,
    /// Resolution of the bias field.
    #[serde(rename = "r_B")]
    pub r_b: f64,
    /// Resolution of the pair-generating SVFs.
    pub r_v: f64,
    /// Cap on the SVF SD used to warp the noise images.
    pub b_p: f64,
    /// Cap on the SVF SD used to deform label maps into pairs.
    pub b_v: f64,
    pub a_mu: f64,
    pub b_mu: f64,
    pub a_sigma: f64,
    pub b_sigma: f64,
    /// Cap on the log bias-field SD.
    #[serde(rename = "b_B")]
    pub b_b: f64,
    /// Cap on the per-axis blur SD.
    #[serde(rename = "b_K")]
    pub b_k: f64,
    pub sigma_gamma: f64,
    /// Number of labels in synthesized shape maps.
    #[serde(rename = "J")]
    pub j: usize,
    /// Resolutions of the additive SVF components for single-source pairs.
    pub multires_rv: Vec<f64>,
    /// Scaling-and-squaring steps.
    pub int_steps: usize,
    pub dims: Vec<usize>,
}

impl Default for GenParams {
    fn default() -> Self {
        default_params(&[160, 160, 192])
    }
}

/// Default hyperparameters bound to `dims`.
pub fn default_params(dims: &[usize]) -> GenParams {
    GenParams {
        lambda_reg: 1.0,
        r_p: 1.0 / 32.0,
        r_b: 1.0 / 40.0,
        r_v: 1.0 / 16.0,
        b_p: 100.0,
        b_v: 3.0,
        a_mu: 25.0,
        b_mu: 225.0,
        a_sigma: 5.0,
        b_sigma: 25.0,
        b_b: 0.3,
        b_k: 1.0,
        sigma_gamma: 0.25,
        j: 26,
        multires_rv: vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0],
        int_steps: 5,
        dims: dims.to_vec(),
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        GridMeta::new(&self.dims).map_err(|e| Error::InvalidParams(e.to_string()))?;
        for (name, r) in [("r_p", self.r_p), ("r_B", self.r_b), ("r_v", self.r_v)]
            .into_iter()
            .chain(self.multires_rv.iter().map(|&r| ("multires_rv", r)))
        {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {r}"));
            }
        }
        if self.multires_rv.is_empty() {
            return bad("multires_rv must not be empty".into());
        }
        for (name, a, b) in [
            ("mu", self.a_mu, self.b_mu),
            ("sigma", self.a_sigma, self.b_sigma),
        ] {
            if !(a.is_finite() && b.is_finite()) || a > b {
                return bad(format!("{name} range [{a}, {b}] is invalid"));
            }
        }
        if self.a_sigma < 0.0 {
            return bad("a_sigma must be non-negative".into());
        }
        for (name, cap) in [
            ("lambda_reg", self.lambda_reg),
            ("b_p", self.b_p),
            ("b_v", self.b_v),
            ("b_B", self.b_b),
            ("b_K", self.b_k),
            ("sigma_gamma", self.sigma_gamma),
        ] {
            if !(cap >= 0.0 && cap.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {cap}"));
            }
        }
        if self.j == 0 {
            return bad("J must be at least 1".into());
        }
        Ok(())
    }

    pub fn meta(&self) -> Result<GridMeta> {
        GridMeta::new(&self.dims)
    }

    /// Parses a JSON document; omitted keys take the defaults, unknown keys
    /// are rejected.
    pub fn from_json(text: &str) -> Result<GenParams> {
        let p: GenParams =
            serde_json::from_str(text).map_err(|e| Error::InvalidParams(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }
}

/// Smooth noise: i.i.d. standard normal voxels on the grid scaled by `r`,
/// linearly upsampled to `full`.
pub fn sample_noise_field(rng: &mut RngStream, full: &GridMeta, r: f64) -> Result<ScalarField> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio {r} outside (0, 1]")));
    }
    let low = full.resized(&low_res_dims(full.dims(), r))?;
    let data = (0..low.num_voxels())
        .map(|_| rng.standard_normal() as f32)
        .collect();
    let field = ScalarField::new(low, 1, data)?;
    let mut up = resample_linear(&field, full.dims())?;
    if up.meta() != full {
        up = ScalarField::new(full.clone(), 1, up.into_data())?;
    }
    Ok(up)
}
