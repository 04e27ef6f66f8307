use cpcmil::checkpoint::Checkpoint;
use cpcmil::cpc::{info_nce_loss, ContextNet};
use cpcmil::dataset::{augment, lattice_origins, AugmentConfig, Patch};
use cpcmil::encoder::Encoder;
use cpcmil::eval::roc_auc;
use cpcmil::layers::NormMode;
use cpcmil::mil::{attention_weights, kl_uniform, smooth_svm_loss, AttentionParams};
use cpcmil::params::flatten;
use cpcmil::tensor::Nhwc;
use cpcmil::train::make_splits;
use cpcmil::Profile;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn all_pairs_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    wins / pairs
}

fn random_map(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Nhwc {
    Nhwc::from_vec(n, h, w, c, (0..n * h * w * c).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_auc_matches_all_pairs(
        data in prop::collection::vec((0u8..12, any::<bool>()), 2..60)
    ) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 4.0).collect();
        let mut labels: Vec<bool> = data.iter().map(|(_, l)| *l).collect();
        labels[0] = true;
        labels[1] = false;
        let got = roc_auc(&scores, &labels).unwrap();
        prop_assert!((got - all_pairs_auc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auc_is_invariant_to_monotone_rescaling(
        scores in prop::collection::vec(-5.0f64..5.0, 4..40), seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut labels: Vec<bool> = scores.iter().map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let squashed: Vec<f64> = scores.iter().map(|s| s.tanh() * 3.0 + 1.0).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&squashed, &labels).unwrap());
    }

    #[test]
    fn smooth_svm_upper_bounds_hinge(
        s0 in -10.0f64..10.0, s1 in -10.0f64..10.0, label in 0usize..2, tau in 0.01f64..3.0
    ) {
        let scores = [s0, s1];
        let (loss, grad) = smooth_svm_loss(&scores, label, 1.0, tau);
        let other = scores[1 - label];
        let hinge = f64::max(0.0, 1.0 + other - scores[label]);
        prop_assert!(loss >= hinge - 1e-12);
        prop_assert!(loss <= hinge + tau * 2f64.ln() + 1e-12);
        prop_assert!(grad.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn kl_to_uniform_is_non_negative(raw in prop::collection::vec(0.001f64..1.0, 1..20)) {
        let total: f64 = raw.iter().sum();
        let a: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let (kl, _) = kl_uniform(&a);
        prop_assert!(kl >= -1e-12);
        prop_assert!(kl <= (a.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn info_nce_is_positive_and_shift_covariant(seed in any::<u64>(), k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 5;
        let vec = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let pred = vec![vec(&mut rng)];
        let pos = vec![vec(&mut rng)];
        let negs = vec![(0..k).map(|_| vec(&mut rng)).collect::<Vec<_>>()];
        let loss = info_nce_loss(&pred, &pos, &negs).unwrap();
        prop_assert!(loss > 0.0);
        // Identical candidates leave a uniform softmax.
        let same = vec![(0..k).map(|_| pos[0].clone()).collect::<Vec<_>>()];
        let uniform = info_nce_loss(&pred, &pos, &same).unwrap();
        prop_assert!((uniform - ((k + 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_is_a_distribution_and_equivariant(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = AttentionParams::new(6, 4, &mut rng);
        let e: Vec<f64> = (0..n * 6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let a = attention_weights(&att, &e, n).unwrap();
        prop_assert!(a.iter().all(|v| *v > 0.0));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut rev = Vec::with_capacity(e.len());
        for row in e.chunks(6).rev() {
            rev.extend_from_slice(row);
        }
        let b = attention_weights(&att, &rev, n).unwrap();
        for (x, y) in a.iter().zip(b.iter().rev()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn lattice_count_matches_sliding_window(h in 1usize..90, w in 1usize..90, size in 1usize..40, stride in 1usize..40) {
        let mut count = 0;
        let mut r = 0;
        while r + size <= h {
            let mut c = 0;
            while c + size <= w {
                count += 1;
                c += stride;
            }
            r += stride;
        }
        prop_assert_eq!(lattice_origins(h, w, size, stride).len(), count);
    }

    #[test]
    fn splits_are_disjoint_and_class_balanced(n_pos in 3usize..20, n_neg in 3usize..20, seed in any::<u64>()) {
        let labels: Vec<bool> = (0..n_pos + n_neg).map(|i| i < n_pos).collect();
        let total = n_pos + n_neg;
        let val = (0.25 * total as f64).round() as usize;
        prop_assume!(val >= 2 && val % 2 == 0 && val / 2 < n_pos.min(n_neg));
        let plan = make_splits(&labels, 3, 0.25, seed).unwrap();
        for f in &plan.folds {
            prop_assert!(f.train.iter().all(|i| !f.validation.contains(i)));
            let vp = f.validation.iter().filter(|&&i| labels[i]).count();
            prop_assert_eq!(vp * 2, f.validation.len());
            let tp = f.train.iter().filter(|&&i| labels[i]).count();
            prop_assert_eq!(tp * 2, f.train.len());
        }
        prop_assert_eq!(plan.clone(), make_splits(&labels, 3, 0.25, seed).unwrap());
    }

    #[test]
    fn augmentation_is_a_pure_function_of_the_seed(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let patch = Patch { pixels: random_map(&mut rng, 1, 12, 12, 3), origin: (0, 0), source_id: "p".into() };
        let cfg = AugmentConfig { color_jitter: 0.1, spatial_jitter: 2, ..AugmentConfig::cpc_default() };
        let a = augment(&patch, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = augment(&patch, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn context_rows_ignore_rows_at_and_below(seed in any::<u64>(), row in 0usize..3) {
        let p = Profile::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = ContextNet::new(&p, &mut rng);
        let rows = net.rows();
        prop_assume!(row < rows);
        let x = random_map(&mut rng, 2, rows, rows, net.feature_dim());
        let mut y = x.clone();
        for n in 0..y.n {
            for r in row..rows {
                for c in 0..rows {
                    for v in y.pixel_mut(n, r, c) {
                        *v = rng.gen_range(-5.0..5.0);
                    }
                }
            }
        }
        let (a, _) = net.forward(&x, NormMode::Running).unwrap();
        let (b, _) = net.forward(&y, NormMode::Running).unwrap();
        for n in 0..a.n {
            for r in 0..=row.min(rows - 1) {
                for c in 0..rows {
                    prop_assert_eq!(a.pixel(n, r, c), b.pixel(n, r, c));
                }
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_exactly(seed in any::<u64>()) {
        let p = Profile::tiny();
        let enc = Encoder::new(&p, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut ck = Checkpoint::new(&p.name);
        ck.put("encoder", &enc);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let mut fresh = Encoder::new(&p, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
        back.load_into("encoder", &mut fresh).unwrap();
        prop_assert_eq!(flatten(&enc), flatten(&fresh));
    }
}
