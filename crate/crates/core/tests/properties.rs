use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use tokvox_core::codec::distill::cosine_distance_value;
use tokvox_core::codec::losses::{disc_loss_value, gen_adv_loss_value};
use tokvox_core::codec::quant::{kmeans, rvq_encode};
use tokvox_core::codec::{bitrate, CodeGrid};
use tokvox_core::lm::sum_code_embeddings;
use tokvox_core::mapi::{aggregate, make_streams, AggregationHead, StreamMaskPlan};
use tokvox_core::{Tape, Tensor};

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| n.sample(&mut rng)).collect()).unwrap()
}

fn mean_sq(t: &Tensor<f64>) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn code_embedding_sum_matches_loop(k in 1usize..5, len in 1usize..10, cs in 2usize..9, seed in any::<u64>()) {
        let tables: Vec<Tensor<f64>> = (0..k).map(|i| tensor(cs, 3, seed ^ i as u64)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codes: Vec<u32> = (0..k * len).map(|_| rand::Rng::random_range(&mut rng, 0..cs as u32)).collect();
        let grid = CodeGrid::new(k, len, cs, codes).unwrap();
        let got = sum_code_embeddings(&grid, &tables).unwrap();
        for t in 0..len {
            for d in 0..3 {
                let want: f64 = (0..k).map(|l| tables[l].at2(grid.get(l, t), d)).sum();
                prop_assert!((got.at2(t, d) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_plans_are_deterministic(p in 1usize..6, prob in 0.0f64..1.0, seed in any::<u64>(), n in 0usize..40) {
        let a = StreamMaskPlan::new(p, prob, seed).unwrap();
        let b = StreamMaskPlan::new(p, prob, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let x = tensor(n + 3, 4, seed);
        let sa = make_streams(&x, &a, 3..n + 3, 2).unwrap();
        prop_assert_eq!(&sa, &make_streams(&x, &b, 3..n + 3, 2).unwrap());
        prop_assert!(sa.drops[0].iter().all(|l| l.iter().all(|d| !d)));
        prop_assert!(sa.inputs.iter().all(|xi| xi == &x));
    }

    #[test]
    fn aggregation_is_a_permutation_invariant_convex_combination(p in 1usize..6, seed in any::<u64>(), shift in 0usize..5) {
        let d = 6;
        let mut head = AggregationHead::<f64>::new(d, seed);
        // nonzero scoring vector, as after training
        let ids: Vec<_> = head.params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let shape = head.params.get(id).shape().to_vec();
            let n = shape.iter().product();
            *head.params.get_mut(id) = tensor(1, n, seed ^ i as u64).reshape(shape).unwrap();
        }
        let o = tensor(p, d, seed.wrapping_add(1));
        let (y, w) = aggregate(&o, &head).unwrap();
        prop_assert!((w.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.data().iter().all(|&v| v > 0.0));
        for j in 0..d {
            let col: Vec<f64> = (0..p).map(|i| o.at2(i, j)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(y.data()[j] >= lo - 1e-9 && y.data()[j] <= hi + 1e-9);
        }
        let perm: Vec<usize> = (0..p).map(|i| (i + shift) % p).collect();
        let mut od = Vec::new();
        for &i in &perm {
            od.extend_from_slice(o.row(i));
        }
        let (y2, w2) = aggregate(&Tensor::new(vec![p, d], od).unwrap(), &head).unwrap();
        prop_assert!(y.max_abs_diff(&y2).unwrap() < 1e-12);
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((w2.data()[k] - w.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn distill_distance_is_bounded_and_scale_free(l in 1usize..6, seed in any::<u64>(), alpha in 1e-3f64..1e3) {
        let a = tensor(l, 5, seed);
        let b = tensor(l, 5, seed ^ 0xff);
        let v = cosine_distance_value(&a, &b);
        prop_assert!((0.0..=2.0).contains(&v));
        let scaled = a.map(|x| x * alpha);
        prop_assert!((cosine_distance_value(&scaled, &b) - v).abs() < 1e-6);
    }

    #[test]
    fn hinge_losses_are_non_negative(r in prop::collection::vec(-5.0f64..5.0, 1..8), f in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let rt = vec![Tensor::vector(r)];
        let ft = vec![Tensor::vector(f)];
        prop_assert!(disc_loss_value(&rt, &ft) >= 0.0);
        prop_assert!(gen_adv_loss_value(&ft) >= 0.0);
    }

    #[test]
    fn softmax_normalises_and_ignores_shifts(v in prop::collection::vec(-30.0f64..30.0, 1..10), c in -50.0f64..50.0) {
        let n = v.len();
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(vec![1, n], v.clone()).unwrap());
        let b = t.constant(Tensor::new(vec![1, n], v.iter().map(|x| x + c).collect()).unwrap());
        let sa = t.softmax(a);
        let sb = t.softmax(b);
        prop_assert!((t.value(sa).data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(t.value(sa).max_abs_diff(t.value(sb)).unwrap() < 1e-9);
    }

    #[test]
    fn bitrate_is_linear_in_levels_and_rate(k in 1usize..16, bits in 1u32..16, rate in 1u32..200) {
        let cs = 1usize << bits;
        prop_assert_eq!(bitrate(k, cs, rate as f64), (k as u32 * bits * rate) as f64);
    }
}

/// Three well-separated Gaussian blobs in 8 dimensions.
fn mixture(n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let centers = tensor(3, 8, seed ^ 0xc0ffee).map(|v| 4.0 * v);
    let mut data = Vec::with_capacity(n * 8);
    for i in 0..n {
        let c = centers.row(i % 3);
        data.extend(c.iter().map(|&m| m + noise.sample(&mut rng)));
    }
    Tensor::new(vec![n, 8], data).unwrap()
}

#[test]
fn rvq_residual_energy_never_grows_on_kmeans_codebooks() {
    for seed in 0..5u64 {
        let x = mixture(1000, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut levels = Vec::new();
        let mut r = x.clone();
        for _ in 0..4 {
            let cb = kmeans(&r, 16, 20, &mut rng);
            r = rvq_encode(std::slice::from_ref(&cb), &r).unwrap().residuals[0].clone();
            levels.push(cb);
        }
        let out = rvq_encode(&levels, &x).unwrap();
        let mut prev = mean_sq(&x);
        for res in &out.residuals {
            let m = mean_sq(res);
            assert!(m <= prev + 1e-12, "seed {seed}: {m} > {prev}");
            prev = m;
        }
    }
}
