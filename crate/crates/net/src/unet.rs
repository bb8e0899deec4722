//! U-Net topology: `levels` stride-2 encoder convolutions, `levels - 1`
//! decoder blocks (convolution, 2x upsampling, skip concatenation), three
//! convolutions at half resolution and a linear D-channel output layer.

use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;

/// Channels of the network input: moving and fixed image.
pub const IN_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub ndim: usize,
    pub levels: usize,
    pub width: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub final_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig::desk()
    }
}

/// One convolution of the network, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub activation: bool,
}

impl UNetConfig {
    /// 2D network used for training on a laptop.
    pub fn desk() -> Self {
        UNetConfig {
            ndim: 2,
            levels: 4,
            width: 16,
            kernel: 3,
            leaky_slope: 0.2,
            final_channels: 2,
        }
    }

    /// Full-size 3D configuration.
    pub fn paper_3d() -> Self {
        UNetConfig {
            ndim: 3,
            width: 256,
            final_channels: 3,
            ..UNetConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NetError::Config(m));
        if !(2..=3).contains(&self.ndim) {
            return bad(format!("ndim {} not in {{2, 3}}", self.ndim));
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.final_channels != self.ndim {
            return bad(format!(
                "final_channels {} must equal ndim {}",
                self.final_channels, self.ndim
            ));
        }
        if self.width < self.final_channels {
            return bad(format!("width {} below final_channels", self.width));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return bad(format!("leaky_slope {}", self.leaky_slope));
        }
        Ok(())
    }

    /// Input grids must halve cleanly at every encoder level.
    pub fn check_dims(&self, dims: &[usize]) -> Result<()> {
        let f = 1usize << self.levels;
        if dims.len() != self.ndim || dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(NetError::Shape(format!(
                "input {dims:?} must have {} axes divisible by {f}",
                self.ndim
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let w = self.width;
        let conv = |name: String, cin, cout, stride, activation| LayerSpec {
            name,
            cin,
            cout,
            stride,
            activation,
        };
        let mut out = Vec::new();
        for i in 0..self.levels {
            let cin = if i == 0 { IN_CHANNELS } else { w };
            out.push(conv(format!("enc{i}"), cin, w, 2, true));
        }
        for i in 0..self.levels - 1 {
            let cin = if i == 0 { w } else { 2 * w };
            out.push(conv(format!("dec{i}"), cin, w, 1, true));
        }
        for i in 0..3 {
            let cin = if i == 0 && self.levels > 1 { 2 * w } else { w };
            out.push(conv(format!("half{i}"), cin, w, 1, true));
        }
        out.push(conv("flow".into(), w, self.final_channels, 1, false));
        out
    }

    /// Kernel shape `[Cout, Cin, k..]` of a layer.
    pub fn kernel_shape(&self, l: &LayerSpec) -> Vec<usize> {
        let mut s = vec![l.cout, l.cin];
        s.extend(std::iter::repeat_n(self.kernel, self.ndim));
        s
    }

    /// Named parameter shapes in storage order: kernel then bias per layer.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), self.kernel_shape(l)),
                    (format!("{}.bias", l.name), vec![l.cout]),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Output of [`build`]: the half-resolution SVF and every layer's
/// activation in execution order (the last one is the SVF itself).
#[derive(Debug, Clone)]
pub struct Built {
    pub svf: Var,
    pub activations: Vec<(String, Var)>,
}

/// Appends the network to `g`. `params` holds one leaf per entry of
/// [`UNetConfig::param_shapes`]; `input` is `[2, spatial..]`.
pub fn build<T: Real>(
    g: &mut Graph<T>,
    cfg: &UNetConfig,
    params: &[Var],
    input: Var,
) -> Result<Built> {
    let layers = cfg.layers();
    if params.len() != 2 * layers.len() {
        return Err(NetError::Shape(format!(
            "{} parameter tensors for {} layers",
            params.len(),
            layers.len()
        )));
    }
    cfg.check_dims(&g.shape(input)[1..])?;
    let mut activations = Vec::with_capacity(layers.len());
    let mut apply = |g: &mut Graph<T>, k: usize, x: Var| -> Result<Var> {
        let l = &layers[k];
        let mut y = g.conv(x, params[2 * k], params[2 * k + 1], l.stride)?;
        if l.activation {
            y = g.leaky_relu(y, cfg.leaky_slope);
        }
        activations.push((l.name.clone(), y));
        Ok(y)
    };
    let mut skips = Vec::with_capacity(cfg.levels);
    let mut x = input;
    for k in 0..cfg.levels {
        x = apply(g, k, x)?;
        skips.push(x);
    }
    for i in 0..cfg.levels - 1 {
        x = apply(g, cfg.levels + i, x)?;
        let skip = skips[cfg.levels - 2 - i];
        let target = g.shape(skip)[1..].to_vec();
        x = g.resize(x, &target)?;
        x = g.concat(x, skip)?;
    }
    let base = 2 * cfg.levels - 1;
    for k in base..base + 4 {
        x = apply(g, k, x)?;
    }
    Ok(Built {
        svf: x,
        activations,
    })
}
