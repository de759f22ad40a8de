use proptest::prelude::*;

use prosody_hvae::corpus::{decode_corpus, encode_corpus, generate_corpus, CorpusConfig};
use prosody_hvae::diffcore::{Graph, Tensor};
use prosody_hvae::disentangle::{linear_fit_r2, variance_ratio, AttributeProbe, DisentangleError};
use prosody_hvae::metrics::{f0_error_metrics, mcd_frame, F0Track};
use prosody_hvae::model::{pool_phones_to_words, schedule_mask};
use prosody_hvae::training::kl_standard_normal;

fn track(v: &[Option<f64>]) -> F0Track {
    F0Track::from_values(v.to_vec(), 0.01)
}

fn f0_value() -> impl Strategy<Value = Option<f64>> {
    prop_oneof![Just(None), (80.0f64..500.0).prop_map(Some)]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn kl_is_nonnegative(mu in -10.0f64..10.0, ls in -5.0f64..5.0) {
        prop_assert!(kl_standard_normal(mu, ls) >= 0.0);
    }

    #[test]
    fn schedule_is_monotone_in_step(step in 0u64..20_000, d in 1usize..6, interval in 1u64..5000) {
        let a = schedule_mask(step, d, interval);
        let b = schedule_mask(step + interval, d, interval);
        prop_assert!(a[0]);
        for k in 0..d {
            prop_assert!(!a[k] || b[k]);
            prop_assert_eq!(a[k], step >= k as u64 * interval);
        }
    }

    #[test]
    fn word_pooling_preserves_weighted_mean(rows in prop::collection::vec(-5.0f64..5.0, 1..10), cut in 0usize..10) {
        let n = rows.len();
        let cut = cut.min(n - 1);
        let phones: Vec<Vec<f64>> = rows.iter().map(|v| vec![*v]).collect();
        let map: Vec<usize> = (0..n).map(|i| usize::from(i > cut)).collect();
        let words = pool_phones_to_words(&phones, &map).unwrap();
        let counts = [cut + 1, n - cut - 1];
        let total: f64 = words.iter().zip(counts).map(|(w, c)| w[0] * c as f64).sum();
        prop_assert!((total - rows.iter().sum::<f64>()).abs() < 1e-9);
    }

    #[test]
    fn f0_errors_are_rates(pairs in prop::collection::vec((f0_value(), f0_value()), 1..30)) {
        let (r, e): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let m = f0_error_metrics(&track(&r), &track(&e)).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.vde));
        prop_assert!((0.0..=1.0).contains(&m.ffe));
        prop_assert!(m.ffe >= m.vde);
        if let Some(g) = m.gpe {
            prop_assert!((0.0..=1.0).contains(&g));
        }
        let same = f0_error_metrics(&track(&r), &track(&r)).unwrap();
        prop_assert_eq!(same.ffe, 0.0);
    }

    #[test]
    fn mcd_is_a_metric_on_frames(a in prop::collection::vec(-3.0f64..3.0, 13), b in prop::collection::vec(-3.0f64..3.0, 13)) {
        prop_assert_eq!(mcd_frame(&a, &a), 0.0);
        prop_assert!((mcd_frame(&a, &b) - mcd_frame(&b, &a)).abs() < 1e-12);
        prop_assert!(mcd_frame(&a, &b) >= 0.0);
    }

    #[test]
    fn broadcast_add_gradient_counts_rows(rows in 1usize..6, cols in 1usize..6) {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[rows, cols]));
        let b = g.param(Tensor::zeros(&[cols]));
        let s = g.add(a, b).unwrap();
        let out = g.sum(s);
        let grads = g.backward(out).unwrap();
        prop_assert!(grads.get(b).unwrap().data().iter().all(|&v| v == rows as f64));
    }

    #[test]
    fn concat_then_sum_equals_sum_of_parts(x in prop::collection::vec(-10.0f64..10.0, 6), y in prop::collection::vec(-10.0f64..10.0, 4)) {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, x.clone()).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, y.clone()).unwrap());
        let c = g.concat_cols(&[a, b]).unwrap();
        let s = g.sum(c);
        let expect: f64 = x.iter().chain(&y).sum();
        prop_assert!((g.value(s).item() - expect).abs() < 1e-9);
    }

    #[test]
    fn r2_is_bounded(y in prop::collection::vec(-10.0f64..10.0, 9)) {
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let r = linear_fit_r2(&x, &y);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&r));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn corpus_round_trip_is_bit_exact(seed in any::<u64>(), count in 1usize..4) {
        let cfg = CorpusConfig { seed, ..CorpusConfig::desk() };
        let corpus = generate_corpus(&cfg, count).unwrap();
        let bytes = encode_corpus(&corpus).unwrap();
        let back = decode_corpus(&bytes).unwrap();
        prop_assert_eq!(&back, &corpus);
        prop_assert_eq!(encode_corpus(&back).unwrap(), bytes);
        for u in &corpus {
            let wm = u.word_map();
            prop_assert!(wm.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
            prop_assert_eq!(u.alignment.len(), u.n_frames());
        }
    }

    #[test]
    fn variance_ratio_is_at_least_one_per_dim(mix in 0.0f64..1.0, seed in 0u64..100) {
        struct Mixed(f64);
        impl AttributeProbe for Mixed {
            fn n_dims(&self) -> usize { 2 }
            fn measure(&mut self, z: &[f64]) -> Result<[f64; 3], DisentangleError> {
                Ok([z[0] + self.0 * z[1], z[1] + self.0 * z[0], z[0] - z[1]])
            }
        }
        let r = variance_ratio(&mut Mixed(mix), "mixed", 50, 1, seed).unwrap();
        for d in &r.seeds[0].dims {
            prop_assert!(d.ratio.unwrap() >= 1.0);
        }
    }
}

type Build = fn(&mut Graph, &[prosody_hvae::diffcore::NodeId]) -> prosody_hvae::diffcore::Result<prosody_hvae::diffcore::NodeId>;

/// Each entry reduces one primitive op to a scalar through a fixed weighting
/// so that every output coordinate contributes a distinct gradient.
fn op_cases() -> Vec<(&'static str, Build)> {
    fn weigh(g: &mut Graph, y: prosody_hvae::diffcore::NodeId) -> prosody_hvae::diffcore::Result<prosody_hvae::diffcore::NodeId> {
        let n = g.value(y).len();
        let w = Tensor::new(g.shape(y).to_vec(), (0..n).map(|i| 0.3 + 0.1 * i as f64).collect())?;
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }
    vec![
        ("matmul", |g, x| { let y = g.matmul(x[0], x[1])?; weigh(g, y) }),
        ("add", |g, x| { let y = g.add(x[0], x[2])?; weigh(g, y) }),
        ("sub", |g, x| { let y = g.sub(x[0], x[2])?; weigh(g, y) }),
        ("mul", |g, x| { let y = g.mul(x[0], x[2])?; weigh(g, y) }),
        ("scale", |g, x| { let y = g.scale(x[0], -1.7); weigh(g, y) }),
        ("add_scalar", |g, x| { let y = g.add_scalar(x[0], 0.4); let y = g.square(y); weigh(g, y) }),
        ("neg", |g, x| { let y = g.neg(x[0]); weigh(g, y) }),
        ("tanh", |g, x| { let y = g.tanh(x[0]); weigh(g, y) }),
        ("sigmoid", |g, x| { let y = g.sigmoid(x[0]); weigh(g, y) }),
        ("softplus", |g, x| { let y = g.softplus(x[0]); weigh(g, y) }),
        ("exp", |g, x| { let y = g.exp(x[0]); weigh(g, y) }),
        ("log", |g, x| { let s = g.square(x[0]); let s = g.add_scalar(s, 0.5); let y = g.log(s); weigh(g, y) }),
        ("square", |g, x| { let y = g.square(x[0]); weigh(g, y) }),
        ("mean", |g, x| { let y = g.tanh(x[0]); let m = g.mean(y); Ok(g.square(m)) }),
        ("sum_rows", |g, x| { let y = g.sum_rows(x[0])?; weigh(g, y) }),
        ("concat_cols", |g, x| { let y = g.concat_cols(&[x[0], x[1]])?; let y = g.tanh(y); weigh(g, y) }),
        ("concat_rows", |g, x| { let t = g.matmul(x[1], x[1])?; let y = g.concat_rows(&[x[0], t])?; weigh(g, y) }),
        ("slice_cols", |g, x| { let y = g.slice_cols(x[0], 1, 2)?; weigh(g, y) }),
        ("slice_rows", |g, x| { let y = g.slice_rows(x[0], 1, 2)?; weigh(g, y) }),
        ("gather_rows", |g, x| { let y = g.gather_rows(x[0], &[2, 0, 2, 1])?; weigh(g, y) }),
        ("linear", |g, x| { let y = g.linear(x[0], x[1], x[2])?; let y = g.tanh(y); weigh(g, y) }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn every_primitive_matches_finite_differences(
        a in prop::collection::vec(-1.5f64..1.5, 9),
        b in prop::collection::vec(-1.5f64..1.5, 9),
        c in prop::collection::vec(-1.5f64..1.5, 3),
    ) {
        let inputs = [
            Tensor::matrix(3, 3, a).unwrap(),
            Tensor::matrix(3, 3, b).unwrap(),
            Tensor::vector(c),
        ];
        for (name, build) in op_cases() {
            let r = prosody_hvae::diffcore::grad_check(build, &inputs, 1e-3, 1e-4).unwrap();
            prop_assert!(r.passed, "{} max relative error {}", name, r.max_rel_error);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss(
        a in prop::collection::vec(-1.0f64..1.0, 6),
        w in prop::collection::vec(-1.0f64..1.0, 6),
        alpha in -3.0f64..3.0,
    ) {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 3, a).unwrap());
        let wt = g.param(Tensor::matrix(3, 2, w).unwrap());
        let h = g.matmul(x, wt).unwrap();
        let t = g.tanh(h);
        let l1 = g.sum(t);
        let s = g.square(x);
        let l2 = g.mean(s);
        let l2s = g.scale(l2, alpha);
        let both = g.add(l1, l2s).unwrap();
        let g1 = g.backward(l1).unwrap();
        let g2 = g.backward(l2).unwrap();
        let gb = g.backward(both).unwrap();
        for id in [x, wt] {
            let shape = g.shape(id).to_vec();
            let (u, v, s) = (g1.get_or_zeros(id, &shape), g2.get_or_zeros(id, &shape), gb.get_or_zeros(id, &shape));
            for i in 0..u.len() {
                prop_assert!((u.data()[i] + alpha * v.data()[i] - s.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_pure(a in prop::collection::vec(-2.0f64..2.0, 6)) {
        let eval = || {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(2, 3, a.clone()).unwrap());
            let y = g.softplus(x);
            let z = g.sum_rows(y).unwrap();
            let m = g.mean(z);
            g.value(m).item().to_bits()
        };
        prop_assert_eq!(eval(), eval());
    }
}
