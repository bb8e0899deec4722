//! Random geometric label maps and moving/fixed label-map pairs.

use crate::deform::{integrate_svf, sample_multires_svf, sample_svf, DisplacementField, Svf};
use crate::error::{Error, Result};
use crate::grid::{warp_linear, warp_nearest, LabelMap, ScalarField};
use crate::sampling::{sample_noise_field, GenParams, RngStream};

/// Label introduced where a warp samples outside the grid.
pub const FILL_LABEL: u32 = 0;

/// Moving and fixed label maps with the velocities that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePair {
    pub s_m: LabelMap,
    pub s_f: LabelMap,
    pub truth_v_m: Svf,
    pub truth_v_f: Svf,
    /// Known moving-to-fixed displacement, when the pair was built so that
    /// one exists (see [`supervised_pair`]).
    pub truth_u_net: Option<DisplacementField>,
}

/// Per-voxel argmax of `|p_j|` over the candidate images; label `j + 1`
/// wins for image `j`, ties go to the lowest `j`.
pub fn argmax_labels(images: &[ScalarField]) -> Result<LabelMap> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no candidate images".into()))?;
    let n = first.meta().num_voxels();
    let mut best = vec![f32::NEG_INFINITY; n];
    let mut labels = vec![1u32; n];
    for (j, img) in images.iter().enumerate() {
        if img.dims() != first.dims() || img.channels() != 1 {
            return Err(Error::ShapeMismatch(
                "candidate images differ in shape".into(),
            ));
        }
        for (k, &v) in img.data().iter().enumerate() {
            let a = v.abs();
            if a > best[k] {
                best[k] = a;
                labels[k] = j as u32 + 1;
            }
        }
    }
    LabelMap::new(first.meta().clone(), labels)
}

/// Random shapes: `J` smooth noise images, each warped by its own random
/// diffeomorphism, labeled by the image of largest magnitude.
pub fn generate_shape_labels(rng: &mut RngStream, params: &GenParams) -> Result<LabelMap> {
    params.validate()?;
    let meta = params.meta()?;
    let images = (0..params.j)
        .map(|_| {
            let p = sample_noise_field(rng, &meta, params.r_p)?;
            let v = sample_svf(rng, &meta, params.r_p, params.b_p)?;
            let phi = integrate_svf(&v, params.int_steps)?;
            warp_linear(&p, phi.field(), 0.0)
        })
        .collect::<Result<Vec<_>>>()?;
    argmax_labels(&images)
}

fn deform_labels(s: &LabelMap, v: &Svf, steps: usize) -> Result<LabelMap> {
    let u = integrate_svf(v, steps)?;
    warp_nearest(s, u.field(), FILL_LABEL)
}

/// Pair from one source map, each side deformed by a multi-resolution SVF
/// drawn from its own stream.
pub fn pair_from_single_map_streams(
    rng_m: &mut RngStream,
    rng_f: &mut RngStream,
    s: &LabelMap,
    params: &GenParams,
) -> Result<ShapePair> {
    let v_m = sample_multires_svf(rng_m, s.meta(), &params.multires_rv, params.b_v)?;
    let v_f = sample_multires_svf(rng_f, s.meta(), &params.multires_rv, params.b_v)?;
    Ok(ShapePair {
        s_m: deform_labels(s, &v_m, params.int_steps)?,
        s_f: deform_labels(s, &v_f, params.int_steps)?,
        truth_v_m: v_m,
        truth_v_f: v_f,
        truth_u_net: None,
    })
}

/// Pair from one source map: `s_m = s o phi_m`, `s_f = s o phi_f`, with the
/// two velocities drawn from two forks of `rng`.
pub fn pair_from_single_map(
    rng: &mut RngStream,
    s: &LabelMap,
    params: &GenParams,
) -> Result<ShapePair> {
    params.validate()?;
    let (mut rm, mut rf) = (rng.fork(), rng.fork());
    pair_from_single_map_streams(&mut rm, &mut rf, s, params)
}

/// Pair from two source maps on the same grid, each deformed by a
/// single-resolution SVF at `r_v` capped by `b_v`. No ground-truth
/// correspondence exists between the sides.
pub fn pair_from_two_maps(
    rng: &mut RngStream,
    s1: &LabelMap,
    s2: &LabelMap,
    params: &GenParams,
) -> Result<ShapePair> {
    params.validate()?;
    if s1.dims() != s2.dims() {
        return Err(Error::ShapeMismatch(format!(
            "label maps on {:?} and {:?}",
            s1.dims(),
            s2.dims()
        )));
    }
    let v_m = sample_svf(rng, s1.meta(), params.r_v, params.b_v)?;
    let v_f = sample_svf(rng, s2.meta(), params.r_v, params.b_v)?;
    Ok(ShapePair {
        s_m: deform_labels(s1, &v_m, params.int_steps)?,
        s_f: deform_labels(s2, &v_f, params.int_steps)?,
        truth_v_m: v_m,
        truth_v_f: v_f,
        truth_u_net: None,
    })
}

/// Pair with a known moving-to-fixed warp: the moving side is `s o phi_m`
/// and the fixed side deforms the moving map further, `s_f = s_m o phi_f`.
/// The target of supervised training is then the fixed-side field alone:
/// `truth_v_f` and its integral `truth_u_net`.
pub fn supervised_pair(rng: &mut RngStream, s: &LabelMap, params: &GenParams) -> Result<ShapePair> {
    params.validate()?;
    let (mut rm, mut rf) = (rng.fork(), rng.fork());
    let v_m = sample_multires_svf(&mut rm, s.meta(), &params.multires_rv, params.b_v)?;
    let v_f = sample_multires_svf(&mut rf, s.meta(), &params.multires_rv, params.b_v)?;
    let s_m = deform_labels(s, &v_m, params.int_steps)?;
    let u_f = integrate_svf(&v_f, params.int_steps)?;
    let s_f = warp_nearest(&s_m, u_f.field(), FILL_LABEL)?;
    Ok(ShapePair {
        s_m,
        s_f,
        truth_v_m: v_m,
        truth_v_f: v_f,
        truth_u_net: Some(u_f),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::default_params;

    fn params(dims: &[usize], j: usize) -> GenParams {
        GenParams {
            j,
            ..default_params(dims)
        }
    }

    #[test]
    fn single_label() {
        let s = generate_shape_labels(&mut RngStream::from_seed(1), &params(&[16, 16], 1)).unwrap();
        assert_eq!(s.label_set(), &[1]);
    }

    #[test]
    fn deterministic_and_partitioning() {
        let p = params(&[32, 32], 6);
        let a = generate_shape_labels(&mut RngStream::from_seed(4), &p).unwrap();
        let b = generate_shape_labels(&mut RngStream::from_seed(4), &p).unwrap();
        assert_eq!(a, b);
        let total: usize = a.histogram().iter().map(|(_, c)| c).sum();
        assert_eq!(total, 32 * 32);
        assert!(a.label_set().iter().all(|&l| (1..=6).contains(&l)));
    }

    #[test]
    fn zero_deformation_pairs() {
        let mut p = params(&[24, 24], 5);
        let s = generate_shape_labels(&mut RngStream::from_seed(9), &p).unwrap();
        p.b_v = 0.0;
        let pair = pair_from_single_map(&mut RngStream::from_seed(1), &s, &p).unwrap();
        assert_eq!(pair.s_m, s);
        assert_eq!(pair.s_f, s);
        let s2 = generate_shape_labels(&mut RngStream::from_seed(10), &p).unwrap();
        let pair = pair_from_two_maps(&mut RngStream::from_seed(1), &s, &s2, &p).unwrap();
        assert_eq!((pair.s_m, pair.s_f), (s, s2));
        assert!(pair.truth_u_net.is_none());
    }

    #[test]
    fn pairs_create_no_new_labels() {
        let p = params(&[32, 32], 6);
        let s = generate_shape_labels(&mut RngStream::from_seed(2), &p).unwrap();
        let pair = pair_from_single_map(&mut RngStream::from_seed(3), &s, &p).unwrap();
        for m in [&pair.s_m, &pair.s_f] {
            assert!(m
                .label_set()
                .iter()
                .all(|l| *l == FILL_LABEL || s.label_set().contains(l)));
        }
        let again = pair_from_single_map(&mut RngStream::from_seed(3), &s, &p).unwrap();
        assert_eq!(pair, again);
    }

    #[test]
    fn identical_streams_give_identical_sides() {
        let p = params(&[32, 32], 4);
        let s = generate_shape_labels(&mut RngStream::from_seed(7), &p).unwrap();
        let pair = pair_from_single_map_streams(
            &mut RngStream::new(1, 2),
            &mut RngStream::new(1, 2),
            &s,
            &p,
        )
        .unwrap();
        assert_eq!(pair.s_m, pair.s_f);
    }

    #[test]
    fn mismatched_sources_rejected() {
        let p = params(&[16, 16], 2);
        let a = LabelMap::filled(crate::grid::GridMeta::new(&[16, 16]).unwrap(), 1);
        let b = LabelMap::filled(crate::grid::GridMeta::new(&[16, 8]).unwrap(), 1);
        assert!(pair_from_two_maps(&mut RngStream::from_seed(0), &a, &b, &p).is_err());
    }

    #[test]
    fn supervised_pair_warp_is_known() {
        let p = params(&[32, 32], 5);
        let s = generate_shape_labels(&mut RngStream::from_seed(5), &p).unwrap();
        let pair = supervised_pair(&mut RngStream::from_seed(6), &s, &p).unwrap();
        let u = pair.truth_u_net.as_ref().unwrap();
        assert_eq!(
            warp_nearest(&pair.s_m, u.field(), FILL_LABEL).unwrap(),
            pair.s_f
        );
    }
}
