use proptest::prelude::*;

use rotconv::bench::{parse_csv_str, to_csv_string, BenchRecord, Mode};
use rotconv::group::{
    group_conv_gather, group_conv_scatter_phased, group_conv_scatter_reuse, orientation_pool_avg,
    orientation_pool_max, transform_kernel, GroupElement, GroupSpec,
};
use rotconv::reference::{conv_gather_same, conv_gather_valid, conv_via_matmul};
use rotconv::scatter::{scatter_conv_multi, tiled_scatter_conv, HaloMode, MultCounter, TileConfig};
use rotconv::steerable::{
    build_orientation_bank, gaussian_derivative_basis, loss_mag, loss_orth, steer, SteerableBasis,
};
use rotconv::tensor::{
    max_rel_diff, mirror_plane, pack_cnhw, pack_nhwc, rot90_plane, unpack_cnhw, unpack_nhwc,
    FilterBank, Plane, Tensor3,
};
use rotconv::train::generate_dataset;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

fn tensor(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor3<f64>> {
    values(c * h * w).prop_map(move |v| Tensor3::new(c, h, w, v).unwrap())
}

fn bank(co: usize, ci: usize, kh: usize, kw: usize) -> impl Strategy<Value = FilterBank<f64>> {
    values(co * ci * kh * kw).prop_map(move |v| FilterBank::new(co, ci, kh, kw, v).unwrap())
}

/// Input and filters with matching channels; odd square kernel no larger than the input.
fn conv_case(
    max_side: usize,
    max_c: usize,
) -> impl Strategy<Value = (Tensor3<f64>, FilterBank<f64>)> {
    (
        1..=max_side,
        1..=max_side,
        1..=max_c,
        1..=max_c,
        prop::sample::select(vec![1usize, 3, 5]),
    )
        .prop_filter("kernel fits", |&(h, w, _, _, k)| k <= h && k <= w)
        .prop_flat_map(|(h, w, ci, co, k)| (tensor(ci, h, w), bank(co, ci, k, k)))
}

fn square_case(
    max_side: usize,
    max_c: usize,
) -> impl Strategy<Value = (Tensor3<f64>, FilterBank<f64>)> {
    (
        3..=max_side,
        1..=max_c,
        1..=max_c,
        prop::sample::select(vec![1usize, 3, 5]),
    )
        .prop_filter("kernel fits", |&(n, _, _, k)| k <= n)
        .prop_flat_map(|(n, ci, co, k)| (tensor(ci, n, n), bank(co, ci, k, k)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scatter_equals_gather_same((x, w) in conv_case(12, 4)) {
        let s = scatter_conv_multi(&x, &w, &mut MultCounter::new()).unwrap();
        let g = conv_gather_same(&x, &w).unwrap();
        prop_assert!(max_rel_diff(s.data(), g.data()) < 1e-12);
    }

    #[test]
    fn scatter_handles_even_kernels(
        (x, w) in (2..8usize, 2..8usize, 1..3usize, prop::sample::select(vec![2usize, 4]))
            .prop_filter("fits", |&(h, w, _, k)| k <= h && k <= w)
            .prop_flat_map(|(h, w, c, k)| (tensor(c, h, w), bank(2, c, k, k - 1)))
    ) {
        let s = scatter_conv_multi(&x, &w, &mut MultCounter::new()).unwrap();
        let g = conv_gather_same(&x, &w).unwrap();
        prop_assert!(max_rel_diff(s.data(), g.data()) < 1e-12);
    }

    #[test]
    fn matmul_equals_gather_valid((x, w) in conv_case(12, 4)) {
        let m = conv_via_matmul(&x, &w).unwrap();
        let g = conv_gather_valid(&x, &w).unwrap();
        prop_assert_eq!(m.shape(), g.shape());
        prop_assert!(max_rel_diff(m.data(), g.data()) < 1e-12);
    }

    #[test]
    fn scatter_is_linear((x, w) in conv_case(8, 3), a in -2.0f64..2.0) {
        let y = scatter_conv_multi(&x, &w, &mut MultCounter::new()).unwrap();
        let ys = scatter_conv_multi(&x.map(|v| a * v), &w, &mut MultCounter::new()).unwrap();
        let expect: Vec<f64> = y.data().iter().map(|v| a * v).collect();
        prop_assert!(max_rel_diff(ys.data(), &expect) < 1e-12);
    }

    #[test]
    fn mult_count_is_exact((x, w) in conv_case(10, 3)) {
        let mut c = MultCounter::new();
        scatter_conv_multi(&x, &w, &mut c).unwrap();
        let (ci, h, wd) = x.shape();
        let (co, _, k, _) = w.shape();
        prop_assert_eq!(c.mults(), (h * wd * k * k * ci * co) as u64);
    }

    #[test]
    fn tiling_is_bit_exact(
        (x, w) in conv_case(12, 3),
        th in 1..7usize,
        tw in 1..7usize,
        workers in 1..5usize,
    ) {
        let base = scatter_conv_multi(&x, &w, &mut MultCounter::new()).unwrap();
        let cfg = TileConfig::for_kernel(th, tw, w.kernel_h(), w.kernel_w(), HaloMode::Plain);
        prop_assert_eq!(tiled_scatter_conv(&x, &w, &cfg, workers).unwrap(), base);
    }

    #[test]
    fn group_reuse_equals_gather((x, w) in square_case(9, 3), mirrored in any::<bool>()) {
        let g = if mirrored { GroupSpec::p4m() } else { GroupSpec::p4() };
        let mut c = MultCounter::new();
        let fast = group_conv_scatter_reuse(&x, &w, g, &mut c).unwrap();
        let slow = group_conv_gather(&x, &w, g).unwrap();
        prop_assert!(max_rel_diff(fast.data(), slow.data()) < 1e-12);
        let (ci, n, _) = x.shape();
        let (co, _, k, _) = w.shape();
        prop_assert_eq!(c.mults(), (n * n * k * k * ci * co) as u64);
    }

    #[test]
    fn phased_group_equals_reuse((x, w) in square_case(8, 3), workers in 1..4usize) {
        let a = group_conv_scatter_reuse(&x, &w, GroupSpec::p4(), &mut MultCounter::new()).unwrap();
        let b = group_conv_scatter_phased(&x, &w, GroupSpec::p4(), workers, &mut MultCounter::new()).unwrap();
        prop_assert!(max_rel_diff(a.data(), b.data()) < 1e-12);
    }

    #[test]
    fn pooled_group_conv_is_rotation_equivariant((x, w) in square_case(8, 2), k in 1..4i64) {
        let f = |t: &Tensor3<f64>| {
            orientation_pool_avg(&group_conv_scatter_reuse(t, &w, GroupSpec::p4(), &mut MultCounter::new()).unwrap())
        };
        let lhs = f(&x.rot90(k));
        let rhs = f(&x).rot90(k);
        prop_assert!(max_rel_diff(lhs.data(), rhs.data()) < 1e-12);
        let g = |t: &Tensor3<f64>| {
            orientation_pool_max(&group_conv_gather(t, &w, GroupSpec::p4m()).unwrap()).0
        };
        prop_assert!(max_rel_diff(g(&x.rot90(k)).data(), g(&x).rot90(k).data()) < 1e-12);
    }

    #[test]
    fn max_pool_dominates_avg((x, w) in square_case(6, 2)) {
        let f = group_conv_gather(&x, &w, GroupSpec::p4()).unwrap();
        let avg = orientation_pool_avg(&f);
        let (max, _) = orientation_pool_max(&f);
        prop_assert!(avg.data().iter().zip(max.data()).all(|(a, m)| *a <= *m + 1e-15));
    }

    #[test]
    fn rotation_group_laws(v in values(25)) {
        let p = Plane::new(5, 5, v).unwrap();
        prop_assert_eq!(rot90_plane(&rot90_plane(&rot90_plane(&rot90_plane(&p, 1), 1), 1), 1), p.clone());
        prop_assert_eq!(rot90_plane(&p, -1), rot90_plane(&p, 3));
        prop_assert_eq!(mirror_plane(&mirror_plane(&p)), p.clone());
        for r in 0..4u8 {
            for g in [GroupElement::rotation(r), GroupElement::mirrored_rotation(r)] {
                prop_assert_eq!(g.invert_plane(&g.apply_plane(&p)), p.clone());
            }
        }
    }

    #[test]
    fn transform_kernel_preserves_energy(w in bank(2, 2, 3, 3), r in 0..4u8, m in any::<bool>()) {
        let g = if m { GroupElement::mirrored_rotation(r) } else { GroupElement::rotation(r) };
        let t = transform_kernel(&w, g).unwrap();
        let e = |b: &FilterBank<f64>| b.data().iter().map(|v| v * v).sum::<f64>();
        prop_assert!((e(&t) - e(&w)).abs() < 1e-12);
    }

    #[test]
    fn packing_round_trips(
        (c, h, w, n) in (1..4usize, 1..5usize, 1..5usize, 1..3usize),
        seed in values(4 * 4 * 4 * 2 * 9),
    ) {
        let batch: Vec<Tensor3<f64>> = (0..n)
            .map(|b| Tensor3::from_fn(c, h, w, |ci, i, j| seed[((b * c + ci) * h + i) * w + j]))
            .collect();
        let m = pack_cnhw(&batch).unwrap();
        prop_assert_eq!(unpack_cnhw(&m, h, w).unwrap(), batch);
        let fb = FilterBank::from_fn(n, c, 3, 3, |o, ci, i, j| seed[((o * c + ci) * 3 + i) * 3 + j]);
        prop_assert_eq!(unpack_nhwc(&pack_nhwc(&fb), c, 3, 3).unwrap(), fb);
    }

    #[test]
    fn steering_is_linear(fx in bank(2, 1, 3, 3), fy in bank(2, 1, 3, 3), theta in 0.0f64..6.3) {
        let b = SteerableBasis::new(fx.clone(), fy.clone()).unwrap();
        let s = steer(&b, theta);
        for ((v, x), y) in s.data().iter().zip(fx.data()).zip(fy.data()) {
            prop_assert!((v - (theta.sin() * x + theta.cos() * y)).abs() < 1e-15);
        }
    }

    #[test]
    fn covariant_basis_reuse_is_exact(k in prop::sample::select(vec![3usize, 5, 7]), sigma in 0.5f64..2.0) {
        let b = gaussian_derivative_basis(k, sigma).unwrap();
        for item in build_orientation_bank(&b, 16).unwrap() {
            prop_assert!(max_rel_diff(item.kernel.data(), steer(&b, item.angle).data()) < 1e-12);
        }
    }

    #[test]
    fn regularizers_are_nonnegative(fx in bank(3, 2, 3, 3), fy in bank(3, 2, 3, 3)) {
        let b = SteerableBasis::new(fx, fy).unwrap();
        prop_assert!(loss_mag(&b) >= 0.0);
        prop_assert!(loss_orth(&b, 1e-8).unwrap() >= 0.0);
        let same = SteerableBasis::new(b.f_x.clone(), b.f_x.clone()).unwrap();
        prop_assert_eq!(loss_mag(&same), 0.0);
    }

    #[test]
    fn rotated_samples_keep_label_counts(seed in any::<u64>(), k in 1..4i64) {
        let s = &generate_dataset(1, 12, 3, seed).unwrap()[0];
        let r = s.rot90(k);
        prop_assert_eq!(r.class_histogram(3), s.class_histogram(3));
        prop_assert_eq!(r.rot90(4 - k), s.clone());
    }

    #[test]
    fn bench_csv_round_trips(
        rows in prop::collection::vec(
            (0..5usize, 1..256usize, 1..64usize, 1..64usize, 1e-6f64..1e4, any::<u32>(), any::<u32>()),
            1..8,
        )
    ) {
        let records: Vec<BenchRecord> = rows
            .into_iter()
            .map(|(m, size, ci, co, ms, mults, aux)| BenchRecord {
                mode: Mode::ALL[m],
                input_size: size,
                in_channels: ci,
                out_channels: co,
                orientations: if Mode::ALL[m].is_group() { 4 } else { 1 },
                repeats: 3,
                wall_ms: ms,
                mults: u64::from(mults),
                peak_aux_bytes: u64::from(aux),
            })
            .collect();
        let text = to_csv_string(&records).unwrap();
        prop_assert_eq!(text.lines().count(), records.len() + 1);
        prop_assert_eq!(parse_csv_str(&text).unwrap(), records);
    }
}
