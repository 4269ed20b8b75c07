use deformkit::autograd::{selective_scan, ScanInputs, Var};
use deformkit::blocks::{Block, BlockConfig};
use deformkit::data::{generate_synthetic_pair, sample_pair_indices, SyntheticSpec};
use deformkit::designs::{correlation, Radius};
use deformkit::grid::{compose_fields, resize_field, warp_nearest, warp_trilinear};
use deformkit::harness::pair_hash;
use deformkit::metrics::{dice_score, hd90, jacobian_map, ndv_pct, sdlogj, NdvMode};
use deformkit::models::{Resampling, VariantConfig, VariantName};
use deformkit::nn::{init_rng, ParamBuilder, ParamStore};
use deformkit::objectives::{
    dice_loss, one_hot, similarity_loss, smoothness_loss, total_loss, LossInputs, LossWeights, SimilarityKind,
};
use deformkit::{DisplacementField, Dims3, FeatureMap, LabelMap, Tensor, Volume};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dims() -> impl Strategy<Value = Dims3> {
    (2usize..7, 2usize..7, 2usize..7).prop_map(|(x, y, z)| Dims3::new(x, y, z))
}

fn volume(d: Dims3, seed: u64) -> Volume {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Volume::new(d, (0..d.len()).map(|_| r.gen::<f64>()).collect()).unwrap()
}

fn labels(d: Dims3, k: u32, seed: u64) -> LabelMap {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    LabelMap::new(d, (0..d.len()).map(|_| r.gen_range(0..=k)).collect()).unwrap()
}

fn field(d: Dims3, amp: f64, seed: u64) -> DisplacementField {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::new(d.shape_with_channels(3), (0..3 * d.len()).map(|_| r.gen_range(-amp..=amp)).collect()).unwrap();
    DisplacementField::new(t, 0).unwrap()
}

/// Smooth low-amplitude field built from a few sinusoids.
fn smooth_field(d: Dims3, amp: f64, seed: u64) -> DisplacementField {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let coef: Vec<[f64; 4]> = (0..3).map(|_| [r.gen(), r.gen(), r.gen(), r.gen::<f64>() * 6.0]).collect();
    let mut data = Vec::with_capacity(3 * d.len());
    for c in &coef {
        data.extend(d.iter().map(|(x, y, z)| {
            amp * (0.3 * (c[0] * x as f64 + c[1] * y as f64 + c[2] * z as f64) + c[3]).sin()
        }));
    }
    DisplacementField::new(Tensor::new(d.shape_with_channels(3), data).unwrap(), 0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn zero_field_warp_is_bitwise_identity(d in dims(), seed in any::<u64>()) {
        let v = volume(d, seed);
        let w = warp_trilinear(&v, &DisplacementField::zeros(d, 0)).unwrap();
        prop_assert_eq!(w.data(), v.data());
    }

    #[test]
    fn trilinear_warp_stays_in_source_range(d in dims(), seed in any::<u64>(), amp in 0.0f64..4.0) {
        let v = volume(d, seed);
        let (lo, hi) = v.min_max();
        let w = warp_trilinear(&v, &field(d, amp, seed ^ 1)).unwrap();
        prop_assert!(w.data().iter().all(|&x| x >= lo && x <= hi));
    }

    #[test]
    fn constant_field_survives_resize_round_trip(level in 1usize..4, c in prop::array::uniform3(-3.0f64..3.0)) {
        let d = Dims3::new(3, 4, 2);
        let f = DisplacementField::constant(d, level, c);
        let back = resize_field(&resize_field(&f, 0), level);
        prop_assert_eq!(back.tensor(), f.tensor());
    }

    #[test]
    fn nearest_warp_keeps_label_inclusion(d in dims(), seed in any::<u64>(), amp in 0.0f64..3.0) {
        let l = labels(d, 4, seed);
        let w = warp_nearest(&l, &field(d, amp, seed ^ 2)).unwrap();
        let src = l.label_set();
        prop_assert!(w.label_set().iter().all(|x| src.contains(x)));
    }

    #[test]
    fn dice_is_symmetric(d in dims(), seed in any::<u64>()) {
        let (a, b) = (labels(d, 3, seed), labels(d, 3, seed ^ 3));
        prop_assert_eq!(dice_score(&a, &b).unwrap(), dice_score(&b, &a).unwrap());
    }

    #[test]
    fn hd90_of_a_map_with_itself_is_zero(d in dims(), seed in any::<u64>()) {
        let a = labels(d, 3, seed);
        prop_assert_eq!(hd90(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn simplex_ndv_dominates_central(d in dims(), seed in any::<u64>(), amp in 0.0f64..1.5) {
        let f = field(d, amp, seed);
        let mask = vec![true; d.len()];
        let s = ndv_pct(&f, &mask, NdvMode::Simplex).unwrap();
        let c = ndv_pct(&f, &mask, NdvMode::Central).unwrap();
        prop_assert!(s >= c, "simplex {} < central {}", s, c);
    }

    #[test]
    fn losses_are_non_negative(d in dims(), seed in any::<u64>()) {
        let (a, b) = (volume(d, seed), volume(d, seed ^ 4));
        for kind in [SimilarityKind::Lncc, SimilarityKind::Mse] {
            let v = similarity_loss(&a, &b, kind).unwrap();
            prop_assert!(v >= 0.0 && v <= 2.0 + 1e-12, "{:?} {}", kind, v);
        }
        let la = labels(d, 3, seed);
        let set = [1, 2, 3];
        let soft = one_hot(&labels(d, 3, seed ^ 5), &set);
        prop_assert!(dice_loss(&la, &soft, &set).unwrap() >= 0.0);
        prop_assert!(smoothness_loss(&field(d, 2.0, seed)) >= 0.0);
    }

    #[test]
    fn loss_breakdown_recombines_exactly(seed in any::<u64>(), gamma in 0.0f64..2.0, lambda in 0.0f64..2.0) {
        let d = Dims3::cube(8);
        let (t, s) = (volume(d, seed), volume(d, seed ^ 6));
        let (lt, ls) = (labels(d, 2, seed), labels(d, 2, seed ^ 7));
        let inputs = LossInputs::new(&t, &s, Some((&lt, &ls)), &[1, 2]).unwrap();
        let w = LossWeights { gamma, lambda, ..LossWeights::default() };
        let phi = DisplacementField::new(field(d.at_level(1), 0.5, seed).into_tensor(), 1).unwrap();
        let b = total_loss(&inputs, &phi, &[], &w).unwrap();
        prop_assert_eq!(b.recombine(&w), b.total);
    }

    #[test]
    fn pair_sampling_is_seeded_and_avoids_self_pairs(n_entries in 2usize..40, n in 0usize..60, seed in any::<u64>()) {
        let a = sample_pair_indices(n_entries, n, seed).unwrap();
        prop_assert_eq!(&a, &sample_pair_indices(n_entries, n, seed).unwrap());
        prop_assert_eq!(a.len(), n);
        prop_assert!(a.iter().all(|&(t, s)| t != s && t < n_entries && s < n_entries));
    }

    #[test]
    fn scan_is_causal(seed in any::<u64>(), k in 0usize..7) {
        let (l, e, n) = (8, 3, 2);
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize], lo: f64, hi: f64| {
            let len = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..len).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
        };
        let (u, delta, a, b, c, dd) = (t(&[l, e], -1.0, 1.0), t(&[l, e], 0.05, 0.5), t(&[e, n], -2.0, -0.1), t(&[l, n], -1.0, 1.0), t(&[l, n], -1.0, 1.0), t(&[e], -1.0, 1.0));
        let run = |u: &Tensor| {
            let v = |x: &Tensor| Var::constant(x.clone());
            let (u, delta, a, b, c, dd) = (v(u), v(&delta), v(&a), v(&b), v(&c), v(&dd));
            selective_scan(&ScanInputs { u: &u, delta: &delta, a: &a, b: &b, c: &c, d: &dd }).value().clone()
        };
        let base = run(&u);
        let mut bumped = u.clone();
        for x in &mut bumped.data_mut()[(k + 1) * e..] {
            *x += 3.0;
        }
        let after = run(&bumped);
        prop_assert_eq!(&base.data()[..(k + 1) * e], &after.data()[..(k + 1) * e]);
        prop_assert_ne!(&base.data()[(k + 1) * e..], &after.data()[(k + 1) * e..]);
    }
}

#[test]
fn composition_is_associative_on_smooth_fields() {
    let d = Dims3::cube(8);
    let (a, b, c) = (smooth_field(d, 0.4, 1), smooth_field(d, 0.4, 2), smooth_field(d, 0.4, 3));
    let left = compose_fields(&compose_fields(&a, &b).unwrap(), &c).unwrap();
    let right = compose_fields(&a, &compose_fields(&b, &c).unwrap()).unwrap();
    let err = left.tensor().data().iter().zip(right.tensor().data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < 0.05, "max deviation {err}");
}

#[test]
fn jacobian_of_composition_is_product_of_determinants() {
    let d = Dims3::cube(8);
    let (outer, inner) = (smooth_field(d, 0.05, 4), smooth_field(d, 0.05, 5));
    let comp = compose_fields(&outer, &inner).unwrap();
    let (jo, ji, jc) = (jacobian_map(&outer), jacobian_map(&inner), jacobian_map(&comp));
    // The product is taken with the outer determinant at the displaced point;
    // at this amplitude the displacement is sub-voxel and evaluation at x is
    // within first order.
    for (x, y, z) in d.iter() {
        if [x, y, z].iter().any(|&p| p == 0 || p == 7) {
            continue;
        }
        let i = d.index(x, y, z);
        let prod = jo.data[i] * ji.data[i];
        assert!((jc.data[i] - prod).abs() < 5e-3, "at {:?}: {} vs {}", (x, y, z), jc.data[i], prod);
    }
}

#[test]
fn correlation_is_translation_equivariant() {
    let d = Dims3::cube(8);
    let c = 4;
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let base: Vec<f64> = (0..c * d.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let other: Vec<f64> = (0..c * d.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    // Cyclic shift by one voxel along x.
    let roll = |v: &[f64]| {
        let mut out = vec![0.0; v.len()];
        for ch in 0..c {
            for (x, y, z) in d.iter() {
                out[ch * d.len() + d.index((x + 1) % d.nx, y, z)] = v[ch * d.len() + d.index(x, y, z)];
            }
        }
        out
    };
    let fm = |v: Vec<f64>| FeatureMap::new(Tensor::new(d.shape_with_channels(c), v).unwrap(), 2).unwrap();
    let r1 = Radius::Local(1);
    let plain = correlation(&fm(base.clone()), &fm(other.clone()), r1).unwrap().data;
    let moved = correlation(&fm(roll(&base)), &fm(roll(&other)), r1).unwrap().data;
    let k = plain.channels();
    for ch in 0..k {
        for (x, y, z) in d.iter() {
            // Away from the borders and the wrap seam the scores just move.
            if !(2..6).contains(&x) || !(1..7).contains(&y) || !(1..7).contains(&z) {
                continue;
            }
            let a = plain.data()[ch * d.len() + d.index(x, y, z)];
            let b = moved.data()[ch * d.len() + d.index(x + 1, y, z)];
            assert_eq!(a, b);
        }
    }
}

#[test]
fn normalized_self_correlation_peaks_at_the_center() {
    let d = Dims3::cube(5);
    let c = 6;
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let mut v: Vec<f64> = (0..c * d.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    for i in 0..d.len() {
        let norm = (0..c).map(|ch| v[ch * d.len() + i].powi(2)).sum::<f64>().sqrt();
        for ch in 0..c {
            v[ch * d.len() + i] /= norm;
        }
    }
    let f = FeatureMap::new(Tensor::new(d.shape_with_channels(c), v).unwrap(), 1).unwrap();
    let out = correlation(&f, &f, Radius::Local(2)).unwrap().data;
    let k = out.channels();
    for i in 0..d.len() {
        let center = out.data()[(k / 2) * d.len() + i];
        assert!((0..k).all(|ch| out.data()[ch * d.len() + i] <= center + 1e-15));
    }
}

#[test]
fn blocks_keep_or_halve_extents() {
    let d = Dims3::new(8, 6, 5);
    let x = FeatureMap::new(Tensor::full(d.shape_with_channels(8), 0.3), 0).unwrap();
    let cfgs = [
        (BlockConfig::conv(8, 8, 1), d),
        (BlockConfig::conv(8, 8, 2), d.halved()),
        (BlockConfig::large_kernel(8, 8, 1), d),
        (BlockConfig::large_kernel(8, 8, 2), d.halved()),
        (BlockConfig::attention(8, 2), d),
        (BlockConfig::ssm(8), d),
    ];
    for (cfg, want) in cfgs {
        let mut store = ParamStore::new();
        let mut rng = init_rng(3);
        let block = Block::build(&mut ParamBuilder::new(&mut store, &mut rng), &cfg).unwrap();
        let y = block.apply(&store, &x).unwrap();
        assert_eq!(y.dims(), want, "{:?}", cfg.kind);
    }
}

#[test]
fn variant_lattice_differs_only_in_flags() {
    let strip = |v: VariantName| {
        let mut c = VariantConfig::published(v);
        c.name = VariantName::Custom;
        c
    };
    let mut dwcpi = strip(VariantName::Dwcpi);
    dwcpi.flags.iteration = false;
    assert_eq!(dwcpi, strip(VariantName::Dwcp));
    let mut dwcp = strip(VariantName::Dwcp);
    dwcp.flags.correlation = false;
    assert_eq!(dwcp, strip(VariantName::Dwp));
    let mut pool = strip(VariantName::PoolUp);
    assert_eq!(pool.resampling, Resampling::PoolUp);
    pool.resampling = Resampling::Strided;
    assert_eq!(pool, strip(VariantName::Vxm));
}

#[test]
fn synthetic_fields_never_fold() {
    for seed in 0..20 {
        let p = generate_synthetic_pair(&SyntheticSpec { seed, ..SyntheticSpec::default() }).unwrap();
        let mask = vec![true; p.gt_field.dims().len()];
        assert_eq!(ndv_pct(&p.gt_field, &mask, NdvMode::Simplex).unwrap(), 0.0, "seed {seed}");
        assert!(sdlogj(&jacobian_map(&p.gt_field), &mask).unwrap().is_finite());
    }
}

#[test]
fn pair_hash_tracks_the_sequence() {
    let pairs: Vec<(String, String)> = (0..5).map(|i| (format!("t{i}"), format!("s{i}"))).collect();
    let mut swapped = pairs.clone();
    swapped.swap(1, 2);
    assert_eq!(pair_hash(&pairs), pair_hash(&pairs.clone()));
    assert_ne!(pair_hash(&pairs), pair_hash(&swapped));
}
