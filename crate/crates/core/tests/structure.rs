//! Structural invariants checked against dense brute-force constructions.

use nalgebra::DMatrix;
use proptest::prelude::*;

use netid1d::linalg::BandCholesky;
use netid1d::network::{lift_cluster, random_network, SubsystemMatrices};
use netid1d::oracle::{in_region, structural_suite, word_expansion, SuiteConfig};
use netid1d::structure::{
    block_hankel, build_h, markov_band_of, markov_oracle, tv_controllability, tv_observability, ParamKind, ParamMap,
    TwoLayerToeplitz,
};

fn subsystem(n: usize, m: usize, p: usize, seed: u64) -> SubsystemMatrices {
    random_network(n, m, p, 8, seed, 0.9).unwrap().subsystem
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    (a - b).amax() <= tol * (1.0 + b.amax())
}

#[test]
fn structural_suite_passes_on_fifty_systems() {
    let out = structural_suite(&SuiteConfig::default()).unwrap();
    for c in &out {
        assert!(c.passed, "{} failed with max error {:e}", c.name, c.max_error);
    }
}

#[test]
fn first_moments_match_hand_expansion() {
    let sub = subsystem(2, 1, 1, 11);
    let band = markov_band_of(&sub, 4);
    assert!(close(band.get(0, 0), &(&sub.c * &sub.b), 1e-14));
    assert!(close(band.get(1, -1), &(&sub.c * &sub.a_left * &sub.b), 1e-14));
    assert!(close(band.get(1, 1), &(&sub.c * &sub.a_right * &sub.b), 1e-14));
    let mid = &sub.c * (&sub.a * &sub.a + &sub.a_left * &sub.a_right + &sub.a_right * &sub.a_left) * &sub.b;
    assert!(close(band.get(2, 0), &mid, 1e-13));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn band_is_similarity_invariant(n in 1usize..4, m in 1usize..3, p in 1usize..3, seed in 0u64..1000, s2 in 2usize..4) {
        let s = 2 * s2;
        let sub = subsystem(n, m, p, seed);
        let q = DMatrix::from_fn(n, n, |i, j| if i == j { 1.5 } else { 0.25 * ((i + 3 * j + seed as usize) % 5) as f64 - 0.5 });
        let moved = sub.transformed(&q).unwrap();
        let (a, b) = (markov_band_of(&sub, s), markov_band_of(&moved, s));
        for (j, k, blk) in a.iter() {
            prop_assert!(close(b.get(j, k), blk, 1e-9));
        }
    }

    #[test]
    fn band_matches_word_expansion(n in 1usize..4, seed in 0u64..1000, j in 0usize..5) {
        let sub = subsystem(n, 2, 1, seed);
        let band = markov_band_of(&sub, 6);
        for k in -(j as isize)..=(j as isize) {
            prop_assert!(close(band.get(j, k), &word_expansion(&sub, j, k), 1e-10));
        }
    }

    #[test]
    fn interior_lifted_blocks_equal_band(n in 1usize..3, seed in 0u64..1000, radius in 2usize..4) {
        let sub = subsystem(n, 1, 2, seed);
        let lifted = lift_cluster(&sub, radius);
        let band = markov_band_of(&sub, 6);
        let (p, m) = (2, 1);
        for j in 0..5 {
            let moment = markov_oracle(&lifted, j);
            for l in 0..2 * radius + 1 {
                for q in 0..2 * radius + 1 {
                    let blk = moment.view((l * p, q * m), (p, m)).into_owned();
                    if l.abs_diff(q) > j {
                        prop_assert!(blk.amax() == 0.0);
                    } else if in_region(j, l, q, radius) {
                        prop_assert!(close(&blk, band.get(j, q as isize - l as isize), 1e-10));
                    }
                }
            }
        }
    }

    #[test]
    fn h_matrix_factors_through_observability(n in 1usize..4, p in 1usize..3, m in 1usize..3, seed in 0u64..1000, radius in 2usize..5, s2 in 2usize..4) {
        let s = 2 * s2;
        let sub = subsystem(n, m, p, seed);
        let band = markov_band_of(&sub, s);
        let width = 2 * radius + 1;
        let o = tv_observability(width, s / 2, &sub).unwrap();
        let c = tv_controllability(width, s / 2, &sub).unwrap();
        let h = build_h(&band, radius, s).unwrap();
        prop_assert!(close(&h, &(&o * &c), 1e-10));
    }

    #[test]
    fn hankel_blocks_repeat_along_antidiagonals(rows in 8usize..30, w in 1usize..4, s in 1usize..5, start in 0usize..3) {
        let seq = DMatrix::from_fn(rows, w, |i, j| (i * 7 + j * 3) as f64);
        let h = rows.saturating_sub(start + s - 1);
        prop_assume!(h >= 1);
        let bh = block_hankel(&seq, s, h, start).unwrap();
        prop_assert!(bh.is_block_hankel());
        for a in 0..s {
            for b in 0..h {
                for c in 0..w {
                    prop_assert_eq!(bh.matrix[(a * w + c, b)], seq[(start + a + b, c)]);
                }
            }
        }
        prop_assert!(block_hankel(&seq, s, h + 1, start).is_err());
    }

    #[test]
    fn toeplitz_scalars_round_trip(radius in 1usize..4, s in 2usize..5, p in 1usize..3, m in 1usize..3, seed in 0u64..100) {
        let map = ParamMap::new(radius, s, p, m).unwrap();
        let phi: Vec<f64> = (0..map.num_scalars()).map(|i| ((i as u64 * 31 + seed) % 17) as f64 - 8.0).collect();
        let t = TwoLayerToeplitz::from_scalars(map.clone(), &phi).unwrap();
        prop_assert_eq!(t.to_scalars(), phi);
        let dense = t.assemble();
        prop_assert!(map.contains(&dense, 0.0));
        let mut broken = dense.clone();
        let last = broken.ncols() - 1;
        broken[(0, last)] = 1.0;
        prop_assert!(!map.contains(&broken, 0.0));
    }

    #[test]
    fn band_ids_cover_exactly_the_region(radius in 1usize..4, s in 2usize..6) {
        let map = ParamMap::new(radius, s, 1, 1).unwrap();
        let width = 2 * radius + 1;
        for j in 0..s - 1 {
            for l in 0..width {
                for q in 0..width {
                    match map.id(j, l, q) {
                        None => prop_assert!(l.abs_diff(q) > j),
                        Some(id) => {
                            let band = matches!(map.kinds()[id], ParamKind::Band { .. });
                            prop_assert_eq!(band, in_region(j, l, q, radius));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn band_cholesky_matches_dense_solve(n in 1usize..40, bw in 0usize..6, seed in 0u64..1000) {
        let entry = |i: usize, d: usize| {
            if d == 0 { 4.0 + (bw as f64) } else { (((i * 13 + d * 7) as u64 + seed) % 11) as f64 / 11.0 - 0.5 }
        };
        let dense = DMatrix::from_fn(n, n, |i, j| {
            let (hi, d) = if i >= j { (i, i - j) } else { (j, j - i) };
            if d <= bw { entry(hi, d) } else { 0.0 }
        });
        let chol = BandCholesky::factor(n, bw, entry).unwrap();
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut x = rhs.clone();
        chol.solve_in_place(&mut x);
        let want = dense.clone().cholesky().unwrap().solve(&nalgebra::DVector::from_vec(rhs));
        for i in 0..n {
            prop_assert!((x[i] - want[i]).abs() <= 1e-10 * (1.0 + want[i].abs()));
        }
    }
}
