use proptest::prelude::*;

use refinestyle::adaptation::{direction_loss_graph, swd, SwdConfig};
use refinestyle::domain::split_seed;
use refinestyle::io::checkpoint::{Checkpoint, Provenance};
use refinestyle::io::image::{byte_to_unit, decode_png, encode_png, unit_to_byte};
use refinestyle::linalg::{numerical_rank, singular_values};
use refinestyle::refinement::{compose_residual, count_trainables};
use refinestyle::{Graph, ParamStore, Rng, Tensor};

fn gauss(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut Rng::new(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composed_residual_rank_is_at_most_l(l in 1usize..6, co in 2usize..12, ci in 2usize..12, seed in any::<u64>()) {
        let p = gauss(&[l, co], seed);
        let q = gauss(&[l, ci], seed ^ 1);
        let d = compose_residual(&p, &q).unwrap();
        prop_assert_eq!(d.shape(), &[co, ci][..]);
        let sigma = singular_values(d.data(), co, ci).unwrap();
        prop_assert!(numerical_rank(&sigma, 1e-9) <= l);
    }

    #[test]
    fn trainable_count_matches_enumeration(table in prop::collection::vec((1usize..64, 1usize..64), 1..6), l in 1usize..9, scaling: bool) {
        let mut n = 0u64;
        for &(co, ci) in &table {
            n += (l * co + l * ci) as u64;
            if scaling {
                n += 2 * l as u64;
            }
        }
        prop_assert_eq!(count_trainables(&table, l, scaling).unwrap(), n);
    }

    #[test]
    fn direction_loss_is_bounded_and_scale_invariant(seed in any::<u64>(), c in 0.1f64..10.0) {
        let src = gauss(&[3, 6], seed);
        let off = gauss(&[3, 6], seed ^ 2);
        let dt = gauss(&[6], seed ^ 3).to_f64_vec();
        let tar = |k: f64| Tensor::from_f64([3, 6], &src.data().iter().zip(off.data()).map(|(s, o)| s + k * 0.1 * o).collect::<Vec<_>>()).unwrap();
        let loss = |t: &Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let (a, b) = (g.constant(&src).unwrap(), g.constant(t).unwrap());
            let l = direction_loss_graph(&mut g, a, b, &dt).unwrap();
            g.item(l)
        };
        let l1 = loss(&tar(1.0));
        prop_assert!((0.0..=2.0).contains(&l1));
        let scaled_dt: Vec<f64> = dt.iter().map(|v| v * c).collect();
        let mut g = Graph::<f64>::new();
        let (a, b) = (g.constant(&src).unwrap(), g.constant(&tar(1.0)).unwrap());
        let l2 = direction_loss_graph(&mut g, a, b, &scaled_dt).unwrap();
        prop_assert!((g.item(l2) - l1).abs() < 1e-12);
    }

    #[test]
    fn swd_is_symmetric_and_nonnegative(n in 2usize..20, d in 1usize..5, k in 1usize..32, seed in any::<u64>()) {
        let a = gauss(&[n, d], seed);
        let b = gauss(&[n, d], seed ^ 5);
        let cfg = SwdConfig { directions: k, seed, ..SwdConfig::default() };
        let ab = swd(&a, &b, &cfg).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - swd(&b, &a, &cfg).unwrap()).abs() < 1e-9);
        prop_assert_eq!(swd(&a, &a, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn one_dimensional_swd_ignores_direction_count(n in 2usize..20, k in 1usize..16, seed in any::<u64>()) {
        let a = gauss(&[n, 1], seed);
        let b = gauss(&[n, 1], seed ^ 7);
        let (mut x, mut y) = (a.to_f64_vec(), b.to_f64_vec());
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        let w2 = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n as f64;
        let cfg = SwdConfig { directions: k, seed, ..SwdConfig::default() };
        prop_assert!((swd(&a, &b, &cfg).unwrap() - w2).abs() < 1e-9 * w2.max(1.0));
    }

    #[test]
    fn checkpoints_round_trip_bit_identically(shapes in prop::collection::vec(prop::collection::vec(1usize..5, 1..4), 1..5), seed in any::<u64>(), frozen in any::<u8>()) {
        let mut params = ParamStore::new();
        let mut rng = Rng::new(seed);
        for (i, s) in shapes.iter().enumerate() {
            let mut t = Tensor::randn(s.clone(), 1.0, &mut rng);
            t.set_requires_grad(frozen >> (i % 8) & 1 == 0);
            params.insert_raw(&format!("t{i}"), t);
        }
        let c = Checkpoint { kind: "factors".into(), config: serde_json::json!({ "seed": seed }), provenance: Provenance::fixed(seed), params };
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.params, &c.params);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn png_export_of_import_is_byte_identical(pixels in prop::collection::vec(any::<u8>(), 3 * 8 * 8)) {
        let img = Tensor::new([3, 8, 8], pixels.iter().map(|&b| byte_to_unit(b)).collect()).unwrap();
        let png = encode_png(&img).unwrap();
        let back = decode_png(&png).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(encode_png(&back).unwrap(), png);
        prop_assert!(pixels.iter().zip(back.data()).all(|(&b, &v)| unit_to_byte(v) == b));
    }

    #[test]
    fn quantization_error_is_at_most_half_a_step(v in -1.0f32..=1.0) {
        let back = byte_to_unit(unit_to_byte(v));
        prop_assert!((back - v).abs() <= 0.5 / 127.5 + 1e-6);
    }

    #[test]
    fn split_seeds_never_collide(seed in 0u64..1 << 20, i in 0usize..10_000, j in 0usize..10_000) {
        prop_assert_ne!(split_seed(seed, false, i), split_seed(seed, true, j));
        if i != j {
            prop_assert_ne!(split_seed(seed, true, i), split_seed(seed, true, j));
        }
    }
}
