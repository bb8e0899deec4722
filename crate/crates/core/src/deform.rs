//! Stationary velocity fields, their integration into diffeomorphic
//! displacements by scaling and squaring, composition, and Jacobian-based
//! folding analysis.

use crate::error::{Error, Result};
use crate::grid::{low_res_dims, resample_linear, warp_linear, GridMeta, ScalarField, VectorField};
use crate::sampling::RngStream;

/// Stationary velocity field, in voxels per unit flow time.
#[derive(Debug, Clone, PartialEq)]
pub struct Svf(pub VectorField);

/// Displacement `u` of the map `x -> x + u(x)`, in voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField(pub VectorField);

impl Svf {
    pub fn zeros(meta: GridMeta) -> Self {
        Self(VectorField::zeros(meta))
    }

    pub fn field(&self) -> &VectorField {
        &self.0
    }

    pub fn meta(&self) -> &GridMeta {
        self.0.meta()
    }

    pub fn neg(&self) -> Svf {
        Svf(self.0.scale(-1.0).expect("negation keeps values finite"))
    }
}

impl DisplacementField {
    pub fn zeros(meta: GridMeta) -> Self {
        Self(VectorField::zeros(meta))
    }

    pub fn field(&self) -> &VectorField {
        &self.0
    }

    pub fn meta(&self) -> &GridMeta {
        self.0.meta()
    }

    pub fn into_field(self) -> VectorField {
        self.0
    }
}

/// `u + warp(u, u)`: the displacement of `phi o phi`.
fn square(u: &VectorField) -> Result<VectorField> {
    let warped = warp_linear(u.as_scalar(), u, 0.0)?;
    u.add(&VectorField::from_scalar(warped)?)
}

/// Integrates `v` over unit time by scaling and squaring: the field is
/// scaled by `2^-steps` and then composed with itself `steps` times.
/// Squaring samples outside the grid as zero displacement.
pub fn integrate_svf(v: &Svf, steps: usize) -> Result<DisplacementField> {
    let scale = 0.5f64.powi(steps as i32) as f32;
    let mut u = v.0.scale(scale)?;
    for _ in 0..steps {
        u = square(&u)?;
    }
    Ok(DisplacementField(u))
}

/// Displacement of `phi1 o phi2`, i.e. `u2(x) + u1(x + u2(x))`.
pub fn compose(u1: &DisplacementField, u2: &DisplacementField) -> Result<DisplacementField> {
    let warped = warp_linear(u1.0.as_scalar(), &u2.0, 0.0)?;
    Ok(DisplacementField(
        u2.0.add(&VectorField::from_scalar(warped)?)?,
    ))
}

/// Random SVF: one SD drawn from U(0, b), then every component of every
/// voxel drawn from N(0, SD^2) on the grid scaled by `r`, upsampled to
/// `full`.
pub fn sample_svf(rng: &mut RngStream, full: &GridMeta, r: f64, b: f64) -> Result<Svf> {
    if !(b >= 0.0 && b.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "SVF cap must be non-negative, got {b}"
        )));
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio {r} outside (0, 1]")));
    }
    let sigma = rng.uniform(0.0, b)?;
    let low = full.resized(&low_res_dims(full.dims(), r))?;
    let d = full.ndim();
    let data = (0..low.num_voxels() * d)
        .map(|_| (sigma * rng.standard_normal()) as f32)
        .collect();
    let low_field = ScalarField::new(low, d, data)?;
    let up = resample_linear(&low_field, full.dims())?;
    Ok(Svf(VectorField::new(full.clone(), up.into_data())?))
}

/// Sum of independent [`sample_svf`] draws, one per ratio, each with its
/// own SD from U(0, b).
pub fn sample_multires_svf(
    rng: &mut RngStream,
    full: &GridMeta,
    ratios: &[f64],
    b: f64,
) -> Result<Svf> {
    let (first, rest) = ratios
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("at least one SVF resolution is required".into()))?;
    let mut acc = sample_svf(rng, full, *first, b)?.0;
    for &r in rest {
        acc = acc.add(&sample_svf(rng, full, r, b)?.0)?;
    }
    Ok(Svf(acc))
}

/// Spatial derivative `d u_c / d x_axis` at voxel `v`: forward difference,
/// backward on the last sample of the axis, zero on singleton axes.
pub(crate) fn forward_diff(
    u: &VectorField,
    v: usize,
    coord: &[usize],
    axis: usize,
    c: usize,
) -> f64 {
    let n = u.dims()[axis];
    if n == 1 {
        return 0.0;
    }
    let stride = u.meta().strides()[axis];
    let here = u.get(v, c) as f64;
    if coord[axis] + 1 < n {
        u.get(v + stride, c) as f64 - here
    } else {
        here - u.get(v - stride, c) as f64
    }
}

/// Per-voxel determinant of the Jacobian of `x + u(x)`.
pub fn jacobian_det(u: &DisplacementField) -> ScalarField {
    let f = &u.0;
    let meta = f.meta();
    let nd = meta.ndim();
    let data = (0..meta.num_voxels())
        .map(|v| {
            let coord = meta.coord(v);
            let mut j = [[0f64; 3]; 3];
            for (c, row) in j.iter_mut().enumerate().take(nd) {
                for (a, x) in row.iter_mut().enumerate().take(nd) {
                    *x = forward_diff(f, v, &coord, a, c) + if a == c { 1.0 } else { 0.0 };
                }
            }
            let det = if nd == 2 {
                j[0][0] * j[1][1] - j[0][1] * j[1][0]
            } else {
                j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
            };
            det as f32
        })
        .collect();
    ScalarField::from_vec_unchecked(meta.clone(), 1, data)
}

/// Fraction of voxels whose Jacobian determinant is not positive.
pub fn folding_fraction(u: &DisplacementField) -> f64 {
    let det = jacobian_det(u);
    det.data().iter().filter(|&&d| d <= 0.0).count() as f64 / det.data().len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(dims: &[usize]) -> GridMeta {
        GridMeta::new(dims).unwrap()
    }

    fn line_field(n: usize, f: impl Fn(usize) -> f32) -> VectorField {
        let data = (0..n).flat_map(|x| [0.0, f(x)]).collect();
        VectorField::new(meta(&[1, n]), data).unwrap()
    }

    #[test]
    fn zero_flow_integrates_to_zero() {
        let v = Svf::zeros(meta(&[8, 8]));
        for steps in [0, 1, 5] {
            let u = integrate_svf(&v, steps).unwrap();
            assert!(u.field().data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn zero_steps_return_velocity() {
        let v = Svf(line_field(5, |x| x as f32 * 0.1));
        assert_eq!(integrate_svf(&v, 0).unwrap().0, v.0);
    }

    #[test]
    fn constant_flow_interior() {
        let m = meta(&[40, 40]);
        let v = Svf(VectorField::constant(m, &[1.5, -0.75]).unwrap());
        let u = integrate_svf(&v, 5).unwrap();
        let f = u.field();
        for y in 10..30 {
            for x in 10..30 {
                let i = y * 40 + x;
                assert!((f.get(i, 0) - 1.5).abs() < 1e-5);
                assert!((f.get(i, 1) + 0.75).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn linear_flow_matches_exponential() {
        let n = 201;
        let x0 = 100.0;
        for a in [-0.2f64, -0.1, 0.1, 0.2] {
            let v = Svf(line_field(n, |x| (a * (x as f64 - x0)) as f32));
            let u = integrate_svf(&v, 5).unwrap();
            for x in 80..=120usize {
                let d = x as f64 - x0;
                if d == 0.0 {
                    continue;
                }
                let expect = (a.exp() - 1.0) * d;
                let got = u.field().get(x, 1) as f64;
                assert!(
                    ((got - expect) / expect).abs() < 1e-2,
                    "a={a} x={x}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn compose_examples() {
        let m = meta(&[30, 30]);
        let c1 = DisplacementField(VectorField::constant(m.clone(), &[1.0, 2.0]).unwrap());
        let c2 = DisplacementField(VectorField::constant(m.clone(), &[-0.5, 0.25]).unwrap());
        let zero = DisplacementField::zeros(m);
        assert_eq!(compose(&zero, &c1).unwrap(), c1);
        assert_eq!(compose(&c1, &zero).unwrap(), c1);
        let both = compose(&c1, &c2).unwrap();
        for y in 5..25 {
            for x in 5..25 {
                let i = y * 30 + x;
                assert!((both.field().get(i, 0) - 0.5).abs() < 1e-6);
                assert!((both.field().get(i, 1) - 2.25).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn svf_sampling_examples() {
        let m = meta(&[32, 32]);
        let zero = sample_svf(&mut RngStream::from_seed(1), &m, 1.0 / 16.0, 0.0).unwrap();
        assert!(zero.field().data().iter().all(|&x| x == 0.0));
        let a = sample_svf(&mut RngStream::from_seed(2), &m, 1.0 / 16.0, 3.0).unwrap();
        let b = sample_svf(&mut RngStream::from_seed(2), &m, 1.0 / 16.0, 3.0).unwrap();
        assert_eq!(a, b);
        let single =
            sample_multires_svf(&mut RngStream::from_seed(2), &m, &[1.0 / 16.0], 3.0).unwrap();
        assert_eq!(single, a);
        let z = sample_multires_svf(&mut RngStream::from_seed(3), &m, &[0.5, 0.25], 0.0).unwrap();
        assert!(z.field().data().iter().all(|&x| x == 0.0));
        assert!(sample_multires_svf(&mut RngStream::from_seed(3), &m, &[], 1.0).is_err());
    }

    #[test]
    fn jacobian_examples() {
        let m = meta(&[6, 7]);
        let zero = DisplacementField::zeros(m.clone());
        assert!(jacobian_det(&zero).data().iter().all(|&d| d == 1.0));
        assert_eq!(folding_fraction(&zero), 0.0);
        let shift = DisplacementField(VectorField::constant(m, &[2.0, -1.0]).unwrap());
        assert!(jacobian_det(&shift).data().iter().all(|&d| d == 1.0));

        let u = DisplacementField(line_field(6, |x| -1.5 * x as f32));
        let det = jacobian_det(&u);
        assert!(det.data().iter().all(|&d| (d + 0.5).abs() < 1e-6));
        assert_eq!(folding_fraction(&u), 1.0);
    }

    #[test]
    fn jacobian_of_3d_scaling() {
        let m = meta(&[4, 5, 6]);
        let data = (0..m.num_voxels())
            .flat_map(|v| {
                let c = m.coord(v);
                [0.1 * c[0] as f32, -0.2 * c[1] as f32, 0.5 * c[2] as f32]
            })
            .collect();
        let u = DisplacementField(VectorField::new(m, data).unwrap());
        let expect = 1.1 * 0.8 * 1.5;
        assert!(jacobian_det(&u)
            .data()
            .iter()
            .all(|&d| (d as f64 - expect).abs() < 1e-5));
    }
}
