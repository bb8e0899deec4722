use proptest::prelude::*;

use synreg_core::grid::{
    gaussian_blur_separable, one_hot, resample_linear, warp_linear, warp_nearest, GridMeta,
    LabelMap, ScalarField, VectorField,
};
use synreg_core::loss::soft_dice_loss;
use synreg_core::metrics::{hard_dice, mean_surface_distance};

fn dims2() -> impl Strategy<Value = Vec<usize>> {
    (1usize..12, 1usize..12).prop_map(|(h, w)| vec![h, w])
}

fn field_with(dims: Vec<usize>, c: usize) -> impl Strategy<Value = ScalarField> {
    let n = dims.iter().product::<usize>() * c;
    prop::collection::vec(-10.0f32..10.0, n)
        .prop_map(move |d| ScalarField::new(GridMeta::new(&dims).unwrap(), c, d).unwrap())
}

fn labels_with(dims: Vec<usize>, k: u32) -> impl Strategy<Value = LabelMap> {
    let n = dims.iter().product::<usize>();
    prop::collection::vec(0..k, n)
        .prop_map(move |d| LabelMap::new(GridMeta::new(&dims).unwrap(), d).unwrap())
}

fn flow_with(dims: Vec<usize>, mag: f32) -> impl Strategy<Value = VectorField> {
    let n = dims.iter().product::<usize>() * 2;
    prop::collection::vec(-mag..mag, n)
        .prop_map(move |d| VectorField::new(GridMeta::new(&dims).unwrap(), d).unwrap())
}

fn field_and_flow() -> impl Strategy<Value = (ScalarField, VectorField)> {
    dims2().prop_flat_map(|d| (field_with(d.clone(), 1), flow_with(d, 4.0)))
}

fn label_pair() -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (1usize..24, 1usize..24, 1u32..5)
        .prop_flat_map(|(h, w, k)| (labels_with(vec![h, w], k), labels_with(vec![h, w], k)))
}

/// Boundary of `label` in a 2D map by explicit neighbor lookup.
fn oracle_boundary(s: &LabelMap, label: u32) -> Vec<(f64, f64)> {
    let (h, w) = (s.dims()[0], s.dims()[1]);
    let at = |y: usize, x: usize| s.data()[y * w + x];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if at(y, x) != label {
                continue;
            }
            let edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            if edge
                || at(y - 1, x) != label
                || at(y + 1, x) != label
                || at(y, x - 1) != label
                || at(y, x + 1) != label
            {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

fn oracle_directed(from: &[(f64, f64)], to: &[(f64, f64)], sp: (f64, f64)) -> f64 {
    let mut total = 0.0;
    for p in from {
        let mut best = f64::INFINITY;
        for q in to {
            let (dy, dx) = (p.0 * sp.0 - q.0 * sp.0, p.1 * sp.1 - q.1 * sp.1);
            best = best.min((dy * dy + dx * dx).sqrt());
        }
        total += best;
    }
    total / from.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn warp_stays_within_source_range((src, u) in field_and_flow()) {
        let out = warp_linear(&src, &u, 0.0).unwrap();
        let lo = src.min().min(0.0);
        let hi = src.max().max(0.0);
        for &v in out.data() {
            prop_assert!(v >= lo - 1e-4 && v <= hi + 1e-4);
        }
    }

    #[test]
    fn zero_warp_is_identity(src in dims2().prop_flat_map(|d| field_with(d, 3))) {
        let zero = VectorField::zeros(src.meta().clone());
        let out = warp_linear(&src, &zero, 5.0).unwrap();
        prop_assert_eq!(out.data(), src.data());
    }

    #[test]
    fn one_hot_argmax_recovers_labels(s in dims2().prop_flat_map(|d| labels_with(d, 6))) {
        let labels = s.label_set().to_vec();
        let oh = one_hot(&s, &labels).unwrap();
        for (v, &l) in s.data().iter().enumerate() {
            let row = &oh.data()[v * labels.len()..(v + 1) * labels.len()];
            prop_assert_eq!(row.iter().sum::<f32>(), 1.0);
            let j = row.iter().position(|&x| x == 1.0).unwrap();
            prop_assert_eq!(labels[j], l);
        }
    }

    #[test]
    fn blur_preserves_mean_of_constants(c in -5.0f32..5.0, sy in 0.0f64..3.0, sx in 0.0f64..3.0, d in dims2()) {
        let img = ScalarField::filled(GridMeta::new(&d).unwrap(), 1, c);
        let out = gaussian_blur_separable(&img, &[sy, sx]).unwrap();
        for &v in out.data() {
            prop_assert!((v - c).abs() <= 1e-5 * c.abs().max(1.0));
        }
    }

    #[test]
    fn blur_keeps_values_in_range(img in dims2().prop_flat_map(|d| field_with(d, 1)), s in 0.0f64..2.5) {
        let out = gaussian_blur_separable(&img, &[s, s]).unwrap();
        for &v in out.data() {
            prop_assert!(v >= img.min() - 1e-4 && v <= img.max() + 1e-4);
        }
    }

    #[test]
    fn resample_reproduces_ramps(h in 2usize..10, w in 2usize..10, th in 2usize..20, tw in 2usize..20, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        // corner-aligned linear interpolation is exact on affine functions
        // of the normalized position
        let meta = GridMeta::new(&[h, w]).unwrap();
        let f = |y: f64, x: f64| a * y + b * x;
        let data = (0..h * w).map(|i| f((i / w) as f64 / (h - 1) as f64, (i % w) as f64 / (w - 1) as f64) as f32).collect();
        let out = resample_linear(&ScalarField::new(meta, 1, data).unwrap(), &[th, tw]).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            let truth = f((i / tw) as f64 / (th - 1) as f64, (i % tw) as f64 / (tw - 1) as f64);
            prop_assert!((v as f64 - truth).abs() < 1e-5, "{} vs {}", v, truth);
        }
    }

    #[test]
    fn resample_keeps_constants(c in -5.0f32..5.0, d in dims2(), t in dims2()) {
        let img = ScalarField::filled(GridMeta::new(&d).unwrap(), 2, c);
        let out = resample_linear(&img, &t).unwrap();
        prop_assert!(out.data().iter().all(|&v| v == c));
    }

    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in label_pair()) {
        let labels: Vec<u32> = (0..5).collect();
        let ab = hard_dice(&a, &b, &labels).unwrap();
        let ba = hard_dice(&b, &a, &labels).unwrap();
        prop_assert_eq!(&ab, &ba);
        for e in ab.values() {
            prop_assert!((0.0..=1.0).contains(&e.dice));
        }
        let (oa, ob) = (one_hot(&a, &labels).unwrap(), one_hot(&b, &labels).unwrap());
        let s = soft_dice_loss(&oa, &ob).unwrap();
        prop_assert!((-1.0..=0.0).contains(&s));
        prop_assert_eq!(s, soft_dice_loss(&ob, &oa).unwrap());
    }

    #[test]
    fn nearest_zero_warp_has_unit_dice(s in dims2().prop_flat_map(|d| labels_with(d, 4))) {
        let zero = VectorField::zeros(s.meta().clone());
        let moved = warp_nearest(&s, &zero, 0).unwrap();
        let d = hard_dice(&moved, &s, s.label_set()).unwrap();
        prop_assert!(d.values().all(|e| e.dice == 1.0));
    }

    #[test]
    fn msd_matches_brute_force((a, b) in label_pair(), sy in 0.5f64..2.0, sx in 0.5f64..2.0) {
        for &l in a.label_set() {
            let (pa, pb) = (oracle_boundary(&a, l), oracle_boundary(&b, l));
            let got = mean_surface_distance(&a, &b, l, &[sy, sx]);
            if pb.is_empty() {
                prop_assert!(got.is_err());
                continue;
            }
            let want = 0.5 * (oracle_directed(&pa, &pb, (sy, sx)) + oracle_directed(&pb, &pa, (sy, sx)));
            prop_assert_eq!(got.unwrap(), want);
        }
    }
}
