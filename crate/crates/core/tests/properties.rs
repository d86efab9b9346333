use proptest::prelude::*;

use fsac::backbone::{EncoderBackend, ToyLinearBackend};
use fsac::descriptor::{i2t_attention, t2i_attention, TextMatrix};
use fsac::embedding::Embedding;
use fsac::image::{Image, ImageSample, Label};
use fsac::metrics::{aupr, auroc, f1_max, ScoredSet};
use fsac::model::{Head, HeadOptions};
use fsac::objective::{loss_ce, loss_i2t, loss_t2i};
use fsac::prompts::text_anchor;
use fsac::rng::stream;
use fsac::score::score;
use fsac::synth::{nsa_blend, perturb, NsaParams, PerturbParams};
use fsac::tensor::Matrix;

const C: usize = 16;

fn vec_c() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, C).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn scored_set() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40)
        .prop_flat_map(|n| (prop::collection::vec(0u8..20, n), prop::collection::vec(0u8..=1, n)))
        .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
        .prop_map(|(s, y)| (s.into_iter().map(|v| v as f64 / 19.0).collect(), y))
}

fn image(h: usize, w: usize, seed: u64) -> Image {
    use rand::Rng;
    let mut rng = stream(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn head() -> Head {
    let ratios = fsac::adapt::ResidualRatios {
        alpha: (0.4, 0.6),
        beta: (0.4, 0.6),
    };
    Head::init(C, 4, ratios, 0.7, HeadOptions::default(), &mut stream(3)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn score_pair_is_a_distribution(cf in vec_c(), a in vec_c(), b in vec_c(), tau in 0.01f64..1.0) {
        let ct = TextMatrix::new(&Embedding::new(a), &Embedding::new(b)).unwrap();
        let p = score(&Embedding::new(cf), &ct, tau).unwrap();
        prop_assert!(p.s_pos >= 0.0 && p.s_neg >= 0.0);
        prop_assert!((p.s_pos + p.s_neg - 1.0).abs() <= 1e-9);
        prop_assert!((p.anomaly_score - p.s_neg).abs() <= 1e-12);
    }

    #[test]
    fn temperature_never_flips_the_decision(cf in vec_c(), a in vec_c(), b in vec_c(), t1 in 0.01f64..2.0, t2 in 0.01f64..2.0) {
        let ct = TextMatrix::new(&Embedding::new(a), &Embedding::new(b)).unwrap();
        let f = Embedding::new(cf);
        let (p1, p2) = (score(&f, &ct, t1).unwrap(), score(&f, &ct, t2).unwrap());
        prop_assume!((p1.anomaly_score - 0.5).abs() > 1e-12);
        prop_assert_eq!(p1.anomaly_score > 0.5, p2.anomaly_score > 0.5);
    }

    #[test]
    fn attention_weights_are_distributions(f in vec_c(), a in vec_c(), b in vec_c(), k0 in vec_c(), k1 in vec_c(), scale in 0.1f64..10.0) {
        let h = head();
        let psi = TextMatrix::new(&Embedding::new(a), &Embedding::new(b)).unwrap();
        let w = i2t_attention(&h.descriptor, &Embedding::new(f.clone()), &psi).unwrap().weights;
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        prop_assert!((w[0] + w[1] - 1.0).abs() <= 1e-6);
        // a positive rescaling of F keeps the preferred text row
        let scaled: Vec<f64> = f.iter().map(|v| v * scale).collect();
        let ws = i2t_attention(&h.descriptor, &Embedding::new(scaled), &psi).unwrap().weights;
        if (w[0] - w[1]).abs() > 1e-9 {
            prop_assert_eq!(w[0] > w[1], ws[0] > ws[1]);
        }
        let keys = Matrix::from_rows(&[&k0, &k1]).unwrap();
        for row in t2i_attention(&h.descriptor, &keys, &psi).unwrap().weights {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row[0] + row[1] - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn losses_are_nonnegative_and_finite(p in vec_c(), n in vec_c(), tp in vec_c(), tn in vec_c(), tau in 0.01f64..1.0) {
        let [p, n, tp, tn] = [p, n, tp, tn].map(Embedding::new);
        for v in [loss_i2t(&p, &n, &tp, &tn).unwrap(), loss_t2i(&p, &n, &tp, &tn).unwrap(), loss_ce(&[p.clone(), n.clone()], &tn, &[0, 1], tau).unwrap()] {
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn metrics_lie_in_unit_interval((s, y) in scored_set()) {
        let set = ScoredSet::new(s, y).unwrap();
        for v in [auroc(&set).unwrap(), aupr(&set).unwrap(), f1_max(&set).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn auroc_ignores_monotone_transforms((s, y) in scored_set(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let base = auroc(&ScoredSet::new(s.clone(), y.clone()).unwrap()).unwrap();
        let mapped: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
        let t = auroc(&ScoredSet::new(mapped, y).unwrap()).unwrap();
        prop_assert!((base - t).abs() <= 1e-12);
    }

    #[test]
    fn f1_max_dominates_every_threshold((s, y) in scored_set()) {
        let best = f1_max(&ScoredSet::new(s.clone(), y.clone()).unwrap()).unwrap();
        let pos = y.iter().filter(|l| **l == 1).count() as f64;
        for t in &s {
            let tp = s.iter().zip(&y).filter(|(v, l)| *v >= t && **l == 1).count() as f64;
            let fp = s.iter().zip(&y).filter(|(v, l)| *v >= t && **l == 0).count() as f64;
            let f1 = 2.0 * tp / (2.0 * tp + fp + (pos - tp));
            prop_assert!(best + 1e-12 >= f1);
        }
    }

    #[test]
    fn anchor_ignores_prompt_order(mut prompts in prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,2}", 1..8), seed in any::<u64>()) {
        let backend = ToyLinearBackend::with_dims(1, C, 8, 8).unwrap();
        let a = text_anchor(&backend, &prompts, true).unwrap();
        use rand::seq::SliceRandom;
        prompts.shuffle(&mut stream(seed));
        let b = text_anchor(&backend, &prompts, true).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!((a.values.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(a.values.len(), backend.embed_dim());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perturb_only_touches_the_mask(seed in any::<u64>(), img_seed in any::<u64>()) {
        let src = ImageSample::real(image(24, 20, img_seed), Label::Normal, "a").unwrap();
        let params = PerturbParams { seed, anomalies_per_image: 2, ..Default::default() };
        for out in perturb(&src, &params).unwrap() {
            let mask = out.mask.as_ref().unwrap();
            prop_assert!(mask.count() > 0);
            prop_assert!(out.image.in_unit_range());
            for y in 0..24 {
                for x in 0..20 {
                    for c in 0..3 {
                        if !mask.get(y, x) {
                            prop_assert_eq!(out.image.get(y, x, c).to_bits(), src.image.get(y, x, c).to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn nsa_only_touches_the_mask(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        let dest = ImageSample::real(image(32, 32, a), Label::Normal, "d").unwrap();
        let source = ImageSample::real(image(32, 32, b), Label::Normal, "s").unwrap();
        let params = NsaParams { seed, anomalies_per_image: 2, ..Default::default() };
        for out in nsa_blend(&dest, &source, &params).unwrap() {
            let mask = out.mask.as_ref().unwrap();
            prop_assert!(mask.count() > 0);
            prop_assert!(out.image.in_unit_range());
            prop_assert_eq!(out.label, Label::Abnormal);
            for y in 0..32 {
                for x in 0..32 {
                    for c in 0..3 {
                        if !mask.get(y, x) {
                            prop_assert!((out.image.get(y, x, c) - dest.image.get(y, x, c)).abs() <= params.solver_tol);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gamma_sides_are_clipped(seed in any::<u64>(), h in 8usize..80, w in 8usize..80, shape in 0.5f64..6.0, scale in prop::option::of(0.5f64..40.0)) {
        let params = NsaParams { gamma_shape: shape, gamma_scale: scale, ..Default::default() };
        let (lo, hi) = NsaParams::side_bounds(h, w).unwrap();
        let mut rng = stream(seed);
        for _ in 0..200 {
            let s = params.sample_side(&mut rng, h, w).unwrap();
            prop_assert!(lo <= s && s <= hi);
        }
    }
}
