//! Central finite-difference verification of backward passes.
//!
//! Reference derivatives are always taken on the `f64` graph. The
//! analytic side runs in the requested precision, so an `F32` check
//! measures the gradients that training actually uses.

use synreg_core::RngStream;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::state::NetState;
use crate::train::{integrate_in_graph, loss_graph, LossKind, TrainSample};

/// Derivatives below this magnitude on both sides are treated as zero
/// and left out of the relative comparison.
pub const ZERO_GRAD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    /// Entries whose difference stencil straddles a kink (LeakyReLU or an
    /// interpolation cell edge) and so has no usable numeric reference.
    pub kinked: usize,
}

/// Changes between neighbouring slopes may differ by this fraction of the
/// slope magnitude before the stencil counts as straddling a kink.
pub const KINK_TOL: f64 = 5e-4;

/// Central difference at the middle of `f` sampled at `w - 2 eps ..= w + 2 eps`,
/// or `None` when the stencil straddles a kink. On smooth stretches the
/// slope increments are nearly equal; a kink puts a jump into one of them.
pub fn central_difference(f: [f64; 5], eps: f64) -> Option<f64> {
    let s: Vec<f64> = f.windows(2).map(|w| (w[1] - w[0]) / eps).collect();
    let scale = s.iter().fold(0f64, |m, v| m.max(v.abs()));
    let third = |i: usize| ((s[i + 2] - s[i + 1]) - (s[i + 1] - s[i])).abs();
    if scale >= ZERO_GRAD && third(0).max(third(1)) > KINK_TOL * scale {
        None
    } else {
        Some((f[3] - f[1]) / (2.0 * eps))
    }
}

/// Relative error `|a - n| / max(|a|, |n|)` over pairs that are not both
/// near zero.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheckReport {
    let mut rep = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
        kinked: 0,
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        if scale < ZERO_GRAD {
            rep.excluded += 1;
            continue;
        }
        rep.checked += 1;
        rep.max_rel_error = rep.max_rel_error.max((a - n).abs() / scale);
    }
    rep
}

/// `count` distinct indices below `n`, or all of them if fewer.
fn pick(rng: &mut RngStream, n: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let count = count.min(n);
    for i in 0..count {
        let j = i + (rng.next_u64() % (n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (t, &n) in sizes.iter().enumerate() {
        if flat < n {
            return (t, flat);
        }
        flat -= n;
    }
    unreachable!("index beyond parameter count")
}

fn cast<T: Real>(w: &[Vec<f64>]) -> Vec<Vec<T>> {
    w.iter()
        .map(|t| t.iter().map(|&v| T::of(v)).collect())
        .collect()
}

fn analytic_grads<T: Real>(
    state: &NetState,
    w: &[Vec<f64>],
    sample: &TrainSample,
    kind: LossKind,
) -> Result<Vec<Vec<f64>>> {
    let lg = loss_graph::<T>(state, &cast::<T>(w), sample, kind)?;
    let grads = lg.g.backward(lg.total);
    Ok(lg
        .params
        .iter()
        .zip(w)
        .map(|(&p, t)| {
            grads.get(p).map_or_else(
                || vec![0.0; t.len()],
                |g| g.iter().map(|v| v.as_f64()).collect(),
            )
        })
        .collect())
}

/// Compares backward gradients of the training loss with central
/// differences of step `eps` on `samples` randomly chosen weights.
pub fn grad_check(
    state: &NetState,
    sample: &TrainSample,
    kind: LossKind,
    eps: f64,
    samples: usize,
    precision: Precision,
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    let w: Vec<Vec<f64>> = state
        .weights
        .iter()
        .map(|t| t.data.iter().map(|&v| v as f64).collect())
        .collect();
    let grads = match precision {
        Precision::F32 => analytic_grads::<f32>(state, &w, sample, kind)?,
        Precision::F64 => analytic_grads::<f64>(state, &w, sample, kind)?,
    };
    let sizes: Vec<usize> = w.iter().map(Vec::len).collect();
    let mid = {
        let lg = loss_graph::<f64>(state, &w, sample, kind)?;
        lg.g.scalar(lg.total)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut kinked = 0;
    for flat in pick(rng, sizes.iter().sum(), samples) {
        let (t, i) = locate(&sizes, flat);
        let mut probe = w.clone();
        let mut eval = |delta: f64| -> Result<f64> {
            probe[t][i] = w[t][i] + delta;
            let lg = loss_graph::<f64>(state, &probe, sample, kind)?;
            Ok(lg.g.scalar(lg.total))
        };
        let f = [
            eval(-2.0 * eps)?,
            eval(-eps)?,
            mid,
            eval(eps)?,
            eval(2.0 * eps)?,
        ];
        match central_difference(f, eps) {
            Some(n) => {
                numeric.push(n);
                analytic.push(grads[t][i]);
            }
            None => kinked += 1,
        }
    }
    Ok(GradCheckReport {
        kinked,
        ..compare(&analytic, &numeric)
    })
}

/// Autodiff building blocks and losses with their own checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Conv,
    ConvStride2,
    Conv3d,
    LeakyRelu,
    Resize,
    Concat,
    Add,
    Scale,
    Warp,
    Warp3d,
    IntegrationStep,
    Integration,
    SoftDice,
    Smoothness,
    Mse,
    TotalLoss,
}

impl Primitive {
    pub const ALL: [Primitive; 16] = [
        Primitive::Conv,
        Primitive::ConvStride2,
        Primitive::Conv3d,
        Primitive::LeakyRelu,
        Primitive::Resize,
        Primitive::Concat,
        Primitive::Add,
        Primitive::Scale,
        Primitive::Warp,
        Primitive::Warp3d,
        Primitive::IntegrationStep,
        Primitive::Integration,
        Primitive::SoftDice,
        Primitive::Smoothness,
        Primitive::Mse,
        Primitive::TotalLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Conv => "conv",
            Primitive::ConvStride2 => "conv_stride2",
            Primitive::Conv3d => "conv_3d",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::Resize => "upsample",
            Primitive::Concat => "concat",
            Primitive::Add => "add",
            Primitive::Scale => "scale",
            Primitive::Warp => "warp",
            Primitive::Warp3d => "warp_3d",
            Primitive::IntegrationStep => "integration_step",
            Primitive::Integration => "integration",
            Primitive::SoftDice => "soft_dice",
            Primitive::Smoothness => "smoothness",
            Primitive::Mse => "mse",
            Primitive::TotalLoss => "total_loss",
        }
    }
}

/// Random inputs of one primitive check plus constant data (targets).
struct Case {
    inputs: Vec<(Vec<f64>, Vec<usize>)>,
    consts: Vec<Vec<f64>>,
}

fn uniform(rng: &mut RngStream, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| lo + (hi - lo) * rng.next_f64()).collect()
}

/// Displacements whose sample points keep away from grid lines, where
/// linear interpolation has kinks.
fn displacements(rng: &mut RngStream, n: usize, mag: f64) -> Vec<f64> {
    uniform(rng, n, -mag, mag)
        .into_iter()
        .map(|d| {
            let f = d - d.floor();
            if f < 0.05 {
                d + 0.05
            } else if f > 0.95 {
                d - 0.05
            } else {
                d
            }
        })
        .collect()
}

fn one_hot_target(rng: &mut RngStream, c: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; c * n];
    for v in 0..n {
        t[(rng.next_u64() % c as u64) as usize * n + v] = 1.0;
    }
    t
}

fn case(p: Primitive, rng: &mut RngStream) -> Case {
    let u = |rng: &mut RngStream, shape: &[usize]| {
        (
            uniform(rng, shape.iter().product(), -1.0, 1.0),
            shape.to_vec(),
        )
    };
    let inputs = match p {
        Primitive::Conv | Primitive::ConvStride2 => {
            vec![u(rng, &[3, 6, 6]), u(rng, &[4, 3, 3, 3]), u(rng, &[4])]
        }
        Primitive::Conv3d => vec![
            u(rng, &[2, 4, 4, 4]),
            u(rng, &[2, 2, 3, 3, 3]),
            u(rng, &[2]),
        ],
        Primitive::LeakyRelu => {
            let (mut x, s) = u(rng, &[2, 6, 6]);
            for v in x.iter_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1f64.copysign(*v);
                }
            }
            vec![(x, s)]
        }
        Primitive::Resize => vec![u(rng, &[2, 5, 6])],
        Primitive::Concat => vec![u(rng, &[2, 4, 5]), u(rng, &[1, 4, 5])],
        Primitive::Add => vec![u(rng, &[2, 5, 5]), u(rng, &[2, 5, 5])],
        Primitive::Scale | Primitive::Mse => vec![u(rng, &[3, 5, 5])],
        Primitive::Warp => vec![
            u(rng, &[2, 7, 7]),
            (displacements(rng, 98, 2.5), vec![2, 7, 7]),
        ],
        Primitive::Warp3d => vec![
            u(rng, &[1, 4, 5, 5]),
            (displacements(rng, 300, 1.5), vec![3, 4, 5, 5]),
        ],
        Primitive::IntegrationStep => vec![(displacements(rng, 128, 1.5), vec![2, 8, 8])],
        Primitive::Integration => vec![(uniform(rng, 128, -3.0, 3.0), vec![2, 8, 8])],
        Primitive::SoftDice => vec![(uniform(rng, 75, 0.0, 1.0), vec![3, 5, 5])],
        Primitive::Smoothness => vec![u(rng, &[2, 6, 7])],
        Primitive::TotalLoss => vec![
            (uniform(rng, 192, 0.0, 1.0), vec![3, 8, 8]),
            (displacements(rng, 128, 1.5), vec![2, 8, 8]),
        ],
    };
    let out_len = match p {
        Primitive::Conv => 4 * 36,
        Primitive::ConvStride2 => 4 * 9,
        Primitive::Conv3d => 2 * 8,
        Primitive::LeakyRelu => 72,
        Primitive::Resize => 2 * 9 * 11,
        Primitive::Concat => 60,
        Primitive::Add => 50,
        Primitive::Scale | Primitive::Mse => 75,
        Primitive::Warp => 98,
        Primitive::Warp3d => 100,
        Primitive::IntegrationStep | Primitive::Integration => 128,
        Primitive::SoftDice => 0,
        Primitive::Smoothness => 0,
        Primitive::TotalLoss => 0,
    };
    let consts = match p {
        Primitive::SoftDice => vec![one_hot_target(rng, 3, 25)],
        Primitive::TotalLoss => vec![one_hot_target(rng, 3, 64)],
        _ => vec![uniform(rng, out_len, -1.0, 1.0)],
    };
    Case { inputs, consts }
}

fn build_case<T: Real>(
    p: Primitive,
    g: &mut Graph<T>,
    x: &[Var],
    consts: &[Vec<f64>],
) -> Result<Var> {
    let c = |i: usize| consts[i].iter().map(|&v| T::of(v)).collect::<Vec<T>>();
    let out = match p {
        Primitive::Conv => g.conv(x[0], x[1], x[2], 1)?,
        Primitive::ConvStride2 | Primitive::Conv3d => g.conv(x[0], x[1], x[2], 2)?,
        Primitive::LeakyRelu => g.leaky_relu(x[0], 0.2),
        Primitive::Resize => g.resize(x[0], &[9, 11])?,
        Primitive::Concat => g.concat(x[0], x[1])?,
        Primitive::Add => g.add(x[0], x[1])?,
        Primitive::Scale => g.scale(x[0], 1.7),
        Primitive::Warp | Primitive::Warp3d => g.warp(x[0], x[1])?,
        Primitive::IntegrationStep => {
            let w = g.warp(x[0], x[0])?;
            g.add(x[0], w)?
        }
        Primitive::Integration => integrate_in_graph(g, x[0], 5)?,
        Primitive::SoftDice => return g.soft_dice(x[0], c(0)),
        Primitive::Smoothness => return g.smoothness(x[0]),
        Primitive::Mse => return g.mse(x[0], c(0)),
        Primitive::TotalLoss => {
            let moved = g.warp(x[0], x[1])?;
            let d = g.soft_dice(moved, c(0))?;
            let r = g.smoothness(x[1])?;
            return g.weighted(d, r, 1.0, 0.7);
        }
    };
    // non-scalar outputs are reduced against a fixed random target
    g.mse(out, c(0))
}

fn eval_case<T: Real>(
    p: Primitive,
    case: &Case,
    inputs: &[Vec<f64>],
) -> Result<(Graph<T>, Vec<Var>, Var)> {
    let mut g = Graph::<T>::new();
    let vars = inputs
        .iter()
        .zip(&case.inputs)
        .map(|(v, (_, s))| g.leaf(v.iter().map(|&x| T::of(x)).collect(), s))
        .collect::<Result<Vec<_>>>()?;
    let loss = build_case(p, &mut g, &vars, &case.consts)?;
    Ok((g, vars, loss))
}

fn case_grads<T: Real>(p: Primitive, case: &Case, inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let (g, vars, loss) = eval_case::<T>(p, case, inputs)?;
    let grads = g.backward(loss);
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            grads.get(v).map_or_else(
                || vec![0.0; x.len()],
                |d| d.iter().map(|g| g.as_f64()).collect(),
            )
        })
        .collect())
}

/// Finite-difference check of one primitive on random inputs, with
/// `samples` input entries compared.
pub fn check_primitive(
    p: Primitive,
    eps: f64,
    samples: usize,
    precision: Precision,
    rng: &mut RngStream,
) -> Result<GradCheckReport> {
    let mut case = case(p, rng);
    if precision == Precision::F32 {
        // both sides must see the same (representable) inputs
        for (v, _) in case.inputs.iter_mut() {
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
    let inputs: Vec<Vec<f64>> = case.inputs.iter().map(|(v, _)| v.clone()).collect();
    let grads = match precision {
        Precision::F32 => case_grads::<f32>(p, &case, &inputs)?,
        Precision::F64 => case_grads::<f64>(p, &case, &inputs)?,
    };
    let sizes: Vec<usize> = inputs.iter().map(Vec::len).collect();
    let mid = {
        let (g, _, loss) = eval_case::<f64>(p, &case, &inputs)?;
        g.scalar(loss)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut kinked = 0;
    for flat in pick(rng, sizes.iter().sum(), samples) {
        let (t, i) = locate(&sizes, flat);
        let mut probe = inputs.clone();
        let mut eval = |delta: f64| -> Result<f64> {
            probe[t][i] = inputs[t][i] + delta;
            let (g, _, loss) = eval_case::<f64>(p, &case, &probe)?;
            Ok(g.scalar(loss))
        };
        let f = [
            eval(-2.0 * eps)?,
            eval(-eps)?,
            mid,
            eval(eps)?,
            eval(2.0 * eps)?,
        ];
        match central_difference(f, eps) {
            Some(n) => {
                numeric.push(n);
                analytic.push(grads[t][i]);
            }
            None => kinked += 1,
        }
    }
    Ok(GradCheckReport {
        kinked,
        ..compare(&analytic, &numeric)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_excludes_zero_pairs() {
        let r = compare(&[1.0, 0.0, 2.0], &[1.001, 1e-10, 2.0]);
        assert_eq!((r.checked, r.excluded), (2, 1));
        assert!((r.max_rel_error - 0.001 / 1.001).abs() < 1e-12);
    }

    #[test]
    fn kinks_are_screened() {
        let at =
            |f: &dyn Fn(f64) -> f64, w: f64| [-2.0, -1.0, 0.0, 1.0, 2.0].map(|k| f(w + k * 1e-4));
        let abs = |x: f64| x.abs();
        assert_eq!(central_difference(at(&abs, 0.5e-4), 1e-4), None);
        let cube = |x: f64| x * x * x;
        let d = central_difference(at(&cube, 2.0), 1e-4).unwrap();
        assert!((d - 12.0).abs() < 1e-6);
        assert_eq!(central_difference([1.0; 5], 1e-4), Some(0.0));
    }

    #[test]
    fn pick_is_distinct() {
        let mut rng = RngStream::from_seed(1);
        let p = pick(&mut rng, 100, 60);
        assert_eq!(p.len(), 60);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(pick(&mut rng, 5, 60), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn primitives_pass_in_double_precision() {
        let mut rng = RngStream::from_seed(2);
        for p in Primitive::ALL {
            let r = check_primitive(p, 1e-4, 64, Precision::F64, &mut rng).unwrap();
            assert!(r.checked >= 50, "{}: {r:?}", p.name());
            assert!(r.max_rel_error < 1e-6, "{}: {r:?}", p.name());
        }
    }

    #[test]
    fn primitives_pass_in_single_precision() {
        let mut rng = RngStream::from_seed(3);
        for p in Primitive::ALL {
            let r = check_primitive(p, 1e-4, 64, Precision::F32, &mut rng).unwrap();
            assert!(r.checked >= 50, "{}: {r:?}", p.name());
            assert!(r.max_rel_error < 1e-3, "{}: {r:?}", p.name());
        }
    }
}
