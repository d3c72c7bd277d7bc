use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use emotcav::cav::{
    train_cav, utterance_to_video, video_to_utterance, Cav, CavEnsemble, ProbeConfig,
};
use emotcav::concepts::{build_concept, estimate_pitch, ConceptRule};
use emotcav::net::{self, BcLstmModel, BottleneckId, ModelConfig, TrainConfig};
use emotcav::oracle::head_logits64;
use emotcav::synth::{generate, PlantedSpec, CLASS_COUNT};
use emotcav::tcav::{score_from_gradients, tcav_score};
use emotcav::tensor::{Graph, Tensor};

fn small_model(batch: &emotcav::synth::ConversationBatch, seed: u64) -> BcLstmModel {
    let mut cfg = ModelConfig::for_batch(batch);
    cfg.unimodal_hidden = 6;
    cfg.unimodal_dense = 5;
    cfg.fusion_hidden = 4;
    cfg.fusion_dense = 5;
    BcLstmModel::new(cfg, seed).unwrap()
}

fn cav(direction: Vec<f32>, l: BottleneckId) -> Cav {
    Cav {
        concept: "C".into(),
        bottleneck: l,
        direction,
        bias: 0.0,
        heldout_accuracy: 1.0,
        seed: 0,
    }
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-1.0f32..1.0, rows * cols)
        .prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_bitwise_deterministic(x in matrix(3, 4), w in matrix(4, 2)) {
        let run = || {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let z = g.matmul(xv, wv).unwrap();
            let h = g.tanh(z).unwrap();
            let s = g.sigmoid(h).unwrap();
            let y = g.sum(s).unwrap();
            let grads = g.backward(y).unwrap();
            (grads.get(xv).unwrap().clone(), grads.get(wv).unwrap().clone())
        };
        let (a, b) = run();
        let (c, d) = run();
        prop_assert!(a.data().iter().zip(c.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        prop_assert!(b.data().iter().zip(d.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn interior_gradient_matches_perturbing_the_interior(x in matrix(2, 3), w in matrix(3, 3)) {
        // h(f(x)) with f = x·w and h = Σ tanh; perturb f's output directly.
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.constant(w.clone());
        let f = g.matmul(xv, wv).unwrap();
        let h = g.tanh(f).unwrap();
        let y = g.sum(h).unwrap();
        let grads = g.backward(y).unwrap();
        let fv: Vec<f64> = g.value(f).data().iter().map(|&v| f64::from(v)).collect();
        for (i, &got) in grads.get(f).unwrap().data().iter().enumerate() {
            let eps = 1e-6;
            let h_at = |d: f64| -> f64 {
                fv.iter().enumerate().map(|(j, &v)| (if j == i { v + d } else { v }).tanh()).sum()
            };
            let fd = (h_at(eps) - h_at(-eps)) / (2.0 * eps);
            prop_assert!((f64::from(got) - fd).abs() < 1e-5, "{got} vs {fd}");
        }
    }

    #[test]
    fn directional_derivative_matches_finite_difference(seed in 0u64..1000, k in 0usize..CLASS_COUNT) {
        let batch = generate(&PlantedSpec::default_with_seed(seed), 2, 4).unwrap();
        let model = small_model(&batch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in [BottleneckId::unimodal_canonical("text"), BottleneckId::multimodal_canonical()] {
            let acts = model.activations(&batch, &l).unwrap();
            let grads = model.logit_gradient(&batch, k, &l).unwrap();
            let (_, _, f) = acts.dims3().unwrap();
            let v: Vec<f64> = (0..f).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            for s in batch.valid_slots() {
                let row: Vec<f64> = acts.data()[s * f..(s + 1) * f].iter().map(|&x| f64::from(x)).collect();
                let analytic: f64 = grads.data()[s * f..(s + 1) * f].iter().zip(&v).map(|(&g, b)| f64::from(g) * b).sum();
                let eps = 1e-5;
                let at = |d: f64| {
                    let moved: Vec<f64> = row.iter().zip(&v).map(|(a, b)| a + d * b).collect();
                    head_logits64(&model, &l, &moved).unwrap()[k]
                };
                let fd = (at(eps) - at(-eps)) / (2.0 * eps);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-12);
                prop_assert!(rel < 1e-3 || (analytic - fd).abs() < 1e-6, "{analytic} vs {fd}");
            }
        }
    }

    #[test]
    fn padded_slots_have_zero_logit_gradient(seed in 0u64..1000) {
        let batch = generate(&PlantedSpec::default_with_seed(seed), 3, 6).unwrap();
        let model = small_model(&batch, seed);
        for l in model.bottlenecks() {
            let g = model.logit_gradient(&batch, (seed % 6) as usize, &l).unwrap();
            let f = g.dims3().unwrap().2;
            for (s, &m) in batch.mask.iter().enumerate() {
                if !m {
                    prop_assert!(g.data()[s * f..(s + 1) * f].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn concept_sets_are_deterministic(seed in 0u64..1000) {
        let batch = generate(&PlantedSpec::default_with_seed(seed), 3, 6).unwrap();
        let rules = [
            ConceptRule::LabelSets { positive: vec![0, 4, 5], negative: vec![2] },
            ConceptRule::PitchThreshold { hz: 250.0, candidates: None },
            ConceptRule::PolaritySign { lexicon: None },
        ];
        for rule in &rules {
            let a = build_concept(&batch, "C", rule).unwrap();
            let b = build_concept(&batch.clone(), "C", rule).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn pitch_is_amplitude_invariant(freq in 80.0f64..450.0, scale in 0.01f32..20.0) {
        let samples = emotcav::concepts::tone(freq, 0.3, 0.2, 16_000, 1600);
        let scaled: Vec<f32> = samples.iter().map(|&x| x * scale).collect();
        let a = estimate_pitch(&samples, 16_000).unwrap();
        let b = estimate_pitch(&scaled, 16_000).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn reshape_is_a_bijection(mask in prop::collection::vec(any::<bool>(), 12), seed in 0u64..100) {
        let (n, t, f) = (3, 4, 2);
        let data: Vec<f32> = (0..n * t * f).map(|i| i as f32 + seed as f32).collect();
        let acts = Tensor::new(vec![n, t, f], data).unwrap();
        let rows = video_to_utterance(&acts, &mask).unwrap();
        prop_assert_eq!(rows.shape()[0], mask.iter().filter(|&&m| m).count());
        let back = utterance_to_video(&rows, &mask, n, t).unwrap();
        for (s, &m) in mask.iter().enumerate() {
            let want: &[f32] = if m { &acts.data()[s * f..(s + 1) * f] } else { &[0.0, 0.0] };
            prop_assert_eq!(&back.data()[s * f..(s + 1) * f], want);
        }
    }

    #[test]
    fn probe_direction_ignores_activation_scale(seed in 0u64..200, scale in 0.05f32..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = |rng: &mut ChaCha8Rng, shift: f32| {
            let d: Vec<f32> = (0..40 * 6)
                .map(|i| rand::Rng::random_range(rng, -1.0f32..1.0) + if i % 6 == 0 { shift } else { 0.0 })
                .collect();
            Tensor::new(vec![40, 6], d).unwrap()
        };
        let pos = gen(&mut rng, 1.0);
        let neg = gen(&mut rng, -1.0);
        let l = BottleneckId::multimodal_canonical();
        let cfg = ProbeConfig::default();
        let a = train_cav("C", &l, &pos, &neg, seed, &cfg).unwrap();
        let b = train_cav("C", &l, &pos.map(|x| x * scale), &neg.map(|x| x * scale), seed, &cfg).unwrap();
        let cos: f64 = a.direction.iter().zip(&b.direction).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
        prop_assert!(cos >= 0.999, "cos {cos}");
    }

    #[test]
    fn ensemble_mean_is_arithmetic_mean(accs in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let l = BottleneckId::multimodal_canonical();
        let members: Vec<Cav> = accs
            .iter()
            .map(|&a| Cav { heldout_accuracy: a, ..cav(vec![1.0], l.clone()) })
            .collect();
        let e = CavEnsemble { concept: "C".into(), bottleneck: l, members };
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        prop_assert!((e.accuracy_mean() - mean).abs() <= 1e-7);
    }

    #[test]
    fn opposite_directions_partition_the_class(grads in matrix(25, 4), v in prop::collection::vec(-1.0f32..1.0, 4), scale in 0.01f32..100.0) {
        let l = BottleneckId::multimodal_canonical();
        let pos = score_from_gradients(&grads, &cav(v.clone(), l.clone())).unwrap();
        let neg = score_from_gradients(&grads, &cav(v.iter().map(|x| -x).collect(), l.clone())).unwrap();
        let scaled = score_from_gradients(&grads, &cav(v.iter().map(|x| x * scale).collect(), l.clone())).unwrap();
        prop_assert!((0.0..=1.0).contains(&pos) && (0.0..=1.0).contains(&neg));
        let zeros = (0..25)
            .filter(|&i| grads.row(i).iter().zip(&v).map(|(&g, &c)| f64::from(g) * f64::from(c)).sum::<f64>() == 0.0)
            .count() as f64 / 25.0;
        prop_assert!(pos + neg <= 1.0 + zeros + 1e-12);
        if zeros == 0.0 {
            prop_assert!((pos + neg - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(pos, scaled);
    }
}

#[test]
fn scores_ignore_constant_logit_shift() {
    let batch = generate(&PlantedSpec::default_with_seed(7), 3, 6).unwrap();
    let mut model = small_model(&batch, 7);
    let l = BottleneckId::multimodal_canonical();
    let c = cav(vec![0.3, -0.2, 0.5, 0.1, -0.4], l.clone());
    let before: Vec<f64> = (0..CLASS_COUNT)
        .map(|k| tcav_score(&model, &batch, k, &c, &l).unwrap())
        .collect();
    let shifted: Vec<f32> = model
        .fusion
        .head
        .bias
        .data()
        .iter()
        .map(|b| b + 3.5)
        .collect();
    model.fusion.head.bias = Tensor::from_vec(shifted);
    let after: Vec<f64> = (0..CLASS_COUNT)
        .map(|k| tcav_score(&model, &batch, k, &c, &l).unwrap())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn training_loss_falls_over_every_ten_epoch_window() {
    let mut spec = PlantedSpec::default_with_seed(3);
    spec.noise = 0.1;
    let batch = generate(&spec, 8, 10).unwrap();
    let mut model = small_model(&batch, 3);
    let cfg = TrainConfig {
        epochs: 30,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let log = net::train(&mut model, &batch, &cfg).unwrap();
    for name in ["audio", "video", "text", "fusion"] {
        let losses = log.losses(name);
        assert_eq!(losses.len(), 30);
        for w in losses.windows(11) {
            assert!(w[10] <= w[0], "{name}: {:?}", losses);
        }
    }
}

/// Ridge one-vs-rest fit with an unpenalized intercept, by Gauss-Jordan elimination.
/// The penalty keeps the near-null noise directions from dominating the weight.
fn one_vs_rest(rows: &[Vec<f64>], target: &[f64]) -> Vec<f64> {
    let d = rows[0].len() + 1;
    let mut a = vec![vec![0.0; d + 1]; d];
    for (r, &y) in rows.iter().zip(target) {
        let x: Vec<f64> = r.iter().copied().chain([1.0]).collect();
        for i in 0..d {
            for j in 0..d {
                a[i][j] += x[i] * x[j];
            }
            a[i][d] += x[i] * y;
        }
    }
    for (i, row) in a.iter_mut().enumerate().take(d - 1) {
        row[i] += 0.1 * rows.len() as f64;
    }
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        let pivot_row = a[col].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != col {
                let f = row[col] / pivot_row[col];
                for (x, p) in row.iter_mut().zip(&pivot_row).skip(col) {
                    *x -= f * p;
                }
            }
        }
    }
    (0..d - 1).map(|i| a[i][d] / a[i][i]).collect()
}

#[test]
fn planted_class_directions_are_recoverable() {
    let mut spec = PlantedSpec::default_with_seed(11);
    spec.noise = 0.1;
    let batch = generate(&spec, 40, 20).unwrap();
    for (m, plan) in batch.modalities.iter().zip(&spec.modalities) {
        let d = m.dim();
        let slots = batch.valid_slots();
        let rows: Vec<Vec<f64>> = slots
            .iter()
            .map(|&s| {
                m.features.data()[s * d..(s + 1) * d]
                    .iter()
                    .map(|&x| f64::from(x))
                    .collect()
            })
            .collect();
        for k in 0..CLASS_COUNT {
            let y: Vec<f64> = slots
                .iter()
                .map(|&s| f64::from(u8::from(batch.labels[s] as usize == k)))
                .collect();
            let w = one_vs_rest(&rows, &y);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos: f64 = w
                .iter()
                .zip(&plan.class_directions[k])
                .map(|(a, &b)| a * f64::from(b))
                .sum::<f64>()
                / norm;
            assert!(cos >= 0.9, "{} class {k}: cos {cos}", m.name);
        }
    }
}

#[test]
fn pitch_sidecars_track_class_means() {
    let mut spec = PlantedSpec::default_with_seed(5);
    spec.pitch_jitter_hz = 0.0;
    let batch = generate(&spec, 4, 8).unwrap();
    let waves = batch.waveforms.as_ref().unwrap();
    for s in batch.valid_slots() {
        let w = waves[s].as_ref().unwrap();
        let hz = estimate_pitch(&w.to_f32(), w.sample_rate_hz).unwrap();
        let want = spec.pitch_means_hz[batch.labels[s] as usize];
        assert!((hz - want).abs() <= 0.03 * want, "{hz} vs {want}");
    }
}

#[test]
fn linear_classifier_separates_noisy_features() {
    let mut spec = PlantedSpec::default_with_seed(12);
    spec.noise = 0.1;
    let batch = generate(&spec, 40, 20).unwrap();
    let slots = batch.valid_slots();
    for m in &batch.modalities {
        let d = m.dim();
        let rows: Vec<Vec<f64>> = slots
            .iter()
            .map(|&s| {
                m.features.data()[s * d..(s + 1) * d]
                    .iter()
                    .map(|&x| f64::from(x))
                    .collect()
            })
            .collect();
        let weights: Vec<Vec<f64>> = (0..CLASS_COUNT)
            .map(|k| {
                let y: Vec<f64> = slots
                    .iter()
                    .map(|&s| f64::from(u8::from(batch.labels[s] as usize == k)))
                    .collect();
                one_vs_rest(&rows, &y)
            })
            .collect();
        let correct = rows
            .iter()
            .zip(&slots)
            .filter(|(r, &s)| {
                let best = (0..CLASS_COUNT)
                    .max_by(|&a, &b| {
                        let sa: f64 = weights[a].iter().zip(r.iter()).map(|(w, x)| w * x).sum();
                        let sb: f64 = weights[b].iter().zip(r.iter()).map(|(w, x)| w * x).sum();
                        sa.total_cmp(&sb)
                    })
                    .unwrap();
                best == batch.labels[s] as usize
            })
            .count();
        let acc = correct as f64 / rows.len() as f64;
        assert!(acc >= 0.99, "{}: {acc}", m.name);
    }
}
