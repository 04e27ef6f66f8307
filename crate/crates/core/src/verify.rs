//! Self-checks runnable from the command line: causality, gradients, closed-form
//! losses and the AUC oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cpc::{info_nce_with_grad, CpcModel, ContextNet, DenseNegatives};
use crate::dataset::Patch;
use crate::encoder::Encoder;
use crate::eval::roc_auc;
use crate::error::Error;
use crate::layers::{relu_margin, NormMode};
use crate::mil::{kl_uniform, smooth_svm_loss, CrossEntropy, MilHead, MilMode, MilModel, MilObjective, SmoothSvmKl};
use crate::params::{zeros_like, Parameterized};
use crate::profile::Profile;
use crate::tensor::Nhwc;
use crate::train::{check_gradients, check_vector_gradient, GradReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn random_map(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, c: usize) -> Nhwc {
    Nhwc::from_vec(n, h, w, c, (0..n * h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Randomized perturbation trials on the context network with frozen statistics.
///
/// Each trial perturbs feature rows `r..` and requires context rows `..=r` to be
/// bitwise unchanged. Returns the number of violating trials.
pub fn causality_trials(net: &ContextNet, trials: usize, seed: u64) -> crate::Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = net.rows();
    let d = net.feature_dim();
    let mut violations = 0;
    for _ in 0..trials {
        let x = random_map(&mut rng, 1, rows, rows, d);
        let r = rng.gen_range(0..rows);
        let mut y = x.clone();
        for row in r..rows {
            for c in 0..rows {
                for v in y.pixel_mut(0, row, c) {
                    *v += rng.gen_range(-3.0..3.0);
                }
            }
        }
        let (a, _) = net.forward(&x, NormMode::Running)?;
        let (b, _) = net.forward(&y, NormMode::Running)?;
        let same = (0..=r).all(|row| (0..rows).all(|c| a.pixel(0, row, c) == b.pixel(0, row, c)));
        if !same {
            violations += 1;
        }
    }
    Ok(violations)
}

/// Context network with non-trivial running statistics, so the frozen path is exercised.
pub fn causality_fixture(profile: &Profile, seed: u64) -> crate::Result<ContextNet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = ContextNet::new(profile, &mut rng);
    let rows = net.rows();
    for _ in 0..3 {
        let x = random_map(&mut rng, 4, rows, rows, net.feature_dim());
        let (_, tape) = net.forward(&x, NormMode::Batch)?;
        net.update_running(&tape);
    }
    Ok(net)
}

/// Patches with distinct brightness so instance embeddings differ visibly.
fn tiny_patches(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<Patch> {
    (0..n)
        .map(|i| {
            let level = i as f64 / (n - 1).max(1) as f64;
            Patch {
                pixels: Nhwc::from_vec(
                    1,
                    size,
                    size,
                    3,
                    (0..size * size * 3).map(|_| level + rng.gen_range(-0.2..0.2)).collect(),
                ),
                origin: (0, i * size),
                source_id: format!("g{i}"),
            }
        })
        .collect()
}

/// Move every parameter off its initial value: unit gammas and zero betas put ReLU
/// inputs exactly on the kink. Biases become positive and weights stay away from zero,
/// so no unit is nearly dead; near-zero factors leave gradients below the
/// finite-difference noise floor.
fn jitter<M: Parameterized>(model: &mut M, rng: &mut ChaCha8Rng) {
    for t in model.params_mut() {
        let bias = t.name.ends_with("bias");
        for v in t.data.iter_mut() {
            *v += if bias { rng.gen_range(0.1..0.3) } else { rng.gen_range(-0.2..0.2) };
            if v.abs() < 0.1 {
                *v = 0.1f64.copysign(*v);
            }
        }
    }
    model.constrain();
}

/// Finite-difference checks of every hand-written gradient on tiny problems.
pub fn gradient_suite(eps: f64, seed: u64) -> crate::Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // InfoNCE in its inputs.
    let d = 4;
    let pred: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let pos: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let negs: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|_| (0..5).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
        .collect();
    let (_, g) = info_nce_with_grad(&pred, &pos, &negs)?;
    let flat_p: Vec<f64> = pred.concat();
    let flat_g: Vec<f64> = g.predictions.concat();
    let unflat = |v: &[f64]| v.chunks(d).map(|c| c.to_vec()).collect::<Vec<_>>();
    out.push(check_vector_gradient(
        "info_nce/predictions",
        &flat_p,
        &flat_g,
        |v| crate::cpc::info_nce_loss(&unflat(v), &pos, &negs).unwrap_or(f64::NAN),
        eps,
    ));
    let flat_pos: Vec<f64> = pos.concat();
    out.push(check_vector_gradient(
        "info_nce/positives",
        &flat_pos,
        &g.positives.concat(),
        |v| crate::cpc::info_nce_loss(&pred, &unflat(v), &negs).unwrap_or(f64::NAN),
        eps,
    ));
    let flat_negs: Vec<f64> = negs.iter().map(|n| n.concat()).collect::<Vec<_>>().concat();
    let flat_gn: Vec<f64> = g.negatives.iter().map(|n| n.concat()).collect::<Vec<_>>().concat();
    out.push(check_vector_gradient(
        "info_nce/negatives",
        &flat_negs,
        &flat_gn,
        |v| {
            let n: Vec<Vec<Vec<f64>>> = v.chunks(5 * d).map(unflat).collect();
            crate::cpc::info_nce_loss(&pred, &pos, &n).unwrap_or(f64::NAN)
        },
        eps,
    ));

    // Smooth SVM and KL in their inputs.
    for label in 0..2 {
        let s: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, gs) = smooth_svm_loss(&s, label, 1.0, 1.0);
        out.push(check_vector_gradient(
            &format!("smooth_svm/label{label}"),
            &s,
            &gs,
            |v| smooth_svm_loss(v, label, 1.0, 1.0).0,
            eps,
        ));
    }
    let a: Vec<f64> = {
        let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..1.0)).collect();
        let t: f64 = raw.iter().sum();
        raw.iter().map(|x| x / t).collect()
    };
    let (_, ga) = kl_uniform(&a);
    // The gradient is taken with `a` treated as free coordinates (N fixed).
    out.push(check_vector_gradient("kl_uniform", &a, &ga, |v| kl_uniform(v).0, eps));

    // Bag objectives through the frozen head (reducer, attention, classifier).
    let profile = Profile::tiny();
    let n = 4;
    let e: Vec<f64> = (0..n * profile.feature_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objectives: Vec<(&str, Box<dyn MilObjective>)> = vec![
        ("ce", Box::new(CrossEntropy)),
        ("r", Box::new(SmoothSvmKl::default())),
    ];
    for (name, obj) in &objectives {
        for label in 0..2 {
            let mut head = MilHead::new(&profile, MilMode::Frozen, &mut rng);
            jitter(&mut head, &mut rng);
            let loss = |h: &MilHead| {
                let (o, _) = h.forward(&e, n, None).expect("valid bag");
                obj.evaluate(&o.scores, label, &o.attention).loss
            };
            let (o, tape) = head.forward(&e, n, None)?;
            let v = obj.evaluate(&o.scores, label, &o.attention);
            let mut grads = zeros_like(&head);
            head.backward(&tape, &v.d_scores, v.d_attention.as_deref(), &mut grads);
            out.push(check_gradients(
                &format!("mil_loss/{name}/frozen/label{label}"),
                &head,
                &grads,
                loss,
                eps,
            ));
        }
    }

    // Bag objectives through the encoder in fine-tune mode.
    for (name, obj) in &objectives {
        let label = 0;
        let loss = |m: &MilModel, refs: &[&Patch]| {
            let enc = m.encoder.as_ref().expect("encoder");
            let e = enc.embed_instances(refs, profile.instance_overlap).expect("valid patches");
            let (o, _) = m.head.forward(&e, refs.len(), None).expect("valid bag");
            obj.evaluate(&o.scores, label, &o.attention).loss
        };
        let (model, patches) = redraw_until_clear(&mut rng, |rng| {
            let patches = tiny_patches(rng, 3, profile.tile_size);
            let mut model = MilModel {
                mode: MilMode::Finetune,
                encoder: Some(Encoder::new(&profile, rng)),
                head: MilHead::new(&profile, MilMode::Finetune, rng),
            };
            jitter(&mut model, rng);
            let refs: Vec<&Patch> = patches.iter().collect();
            let margin = relu_margin(|| loss(&model, &refs)).1;
            ((model, patches), margin)
        })?;
        let refs: Vec<&Patch> = patches.iter().collect();
        let loss = |m: &MilModel| loss(m, &refs);
        let enc = model.encoder.as_ref().expect("encoder");
        let (emb, etape) = enc.embed_instances_train(&refs, profile.instance_overlap)?;
        let (o, tape) = model.head.forward(&emb, refs.len(), None)?;
        let v = obj.evaluate(&o.scores, label, &o.attention);
        let mut grads = zeros_like(&model);
        let de = model
            .head
            .backward(&tape, &v.d_scores, v.d_attention.as_deref(), &mut grads.head);
        enc.backward_instances(&etape, &de, grads.encoder.as_mut().expect("encoder grads"));
        out.push(check_gradients(&format!("mil_loss/{name}/finetune"), &model, &grads, loss, eps));
    }

    // Contrastive loss through encoder, context network and prediction heads.
    let rows = profile.grid_size();
    let tiles = 2;
    let cpc_loss = |m: &CpcModel, items: &Nhwc| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        m.loss(items, tiles, rows, rows, NormMode::Batch, &DenseNegatives, &mut r)
            .unwrap_or(f64::NAN)
    };
    let (model, items) = redraw_until_clear(&mut rng, |rng| {
        let mut model = CpcModel::new(&profile, rng).expect("tiny profile is valid");
        jitter(&mut model, rng);
        let per = profile.sub_size * profile.sub_size * 3;
        let mut items = random_map(rng, tiles * rows * rows, profile.sub_size, profile.sub_size, 3);
        for chunk in items.data.chunks_mut(per) {
            // Distinct brightness per sub-patch keeps the feature vectors apart.
            let level = rng.gen_range(0.0..6.0);
            chunk.iter_mut().for_each(|v| *v += level);
        }
        let margin = relu_margin(|| cpc_loss(&model, &items)).1;
        ((model, items), margin)
    })?;
    let mut nrng = ChaCha8Rng::seed_from_u64(seed);
    let (_, grads, _) = model.loss_and_grads(&items, tiles, rows, rows, NormMode::Batch, &DenseNegatives, &mut nrng)?;
    let loss = |m: &CpcModel| cpc_loss(m, &items);
    out.push(check_gradients("info_nce/cpc_model", &model, &grads, loss, eps));
    Ok(out)
}

/// Smallest ReLU input magnitude a gradient fixture may have. Central differences
/// straddling a ReLU kink measure a blend of two slopes, not the derivative.
const RELU_CLEARANCE: f64 = 1e-3;

fn redraw_until_clear<T>(
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(&mut ChaCha8Rng) -> (T, f64),
) -> crate::Result<T> {
    for _ in 0..1000 {
        let (fixture, margin) = draw(rng);
        if margin >= RELU_CLEARANCE {
            return Ok(fixture);
        }
    }
    Err(Error::Verification("no gradient fixture clears the ReLU kinks".into()))
}

/// Closed-form loss values.
pub fn loss_value_suite() -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let k = 7;
    let zeros = vec![vec![0.0; 3]];
    let negs = vec![vec![vec![0.0; 3]; k]];
    let nce = crate::cpc::info_nce_loss(&zeros, &zeros, &negs).unwrap_or(f64::NAN);
    let want = ((k + 1) as f64).ln();
    out.push(CheckOutcome::new(
        "uniform InfoNCE = ln(K+1)",
        (nce - want).abs() < 1e-9,
        format!("{nce} vs {want}"),
    ));
    let (svm, _) = smooth_svm_loss(&[0.4, 0.4], 0, 1.0, 1.0);
    let want = (1.0 + 1f64.exp()).ln();
    out.push(CheckOutcome::new(
        "equal-score smooth SVM = log(1+e)",
        (svm - want).abs() < 1e-9,
        format!("{svm} vs {want}"),
    ));
    let kl0 = kl_uniform(&[0.25; 4]).0;
    out.push(CheckOutcome::new("KL(uniform) = 0", kl0 == 0.0, format!("{kl0}")));
    let eps = 1e-12;
    let near = [1.0 - 3.0 * eps, eps, eps, eps];
    let kl1 = kl_uniform(&near).0;
    out.push(CheckOutcome::new(
        "KL(one-hot, N=4) = ln 4",
        (kl1 - 4f64.ln()).abs() < 1e-6,
        format!("{kl1}"),
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let s: [f64; 2] = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let y = rng.gen_range(0..2);
        let hinge = (s[1 - y] + 1.0 - s[y]).max(0.0);
        worst = worst.max((smooth_svm_loss(&s, y, 1.0, 1e-6).0 - hinge).abs());
    }
    out.push(CheckOutcome::new(
        "smooth SVM at τ=1e-6 = hinge",
        worst < 1e-4,
        format!("max deviation {worst:e}"),
    ));
    out
}

/// All (positive, negative) pairs: 1 for a win, ½ for a tie.
pub fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, l)| **l) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, l)| !**l) {
            den += 1.0;
            if sp > sn {
                num += 1.0;
            } else if sp == sn {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Largest gap between rank AUC and the pairwise oracle on random tied data.
pub fn auc_oracle_gap(instances: usize, points: usize, seed: u64) -> crate::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let scores: Vec<f64> = (0..points).map(|_| rng.gen_range(0..25) as f64 * 0.04).collect();
        let mut labels: Vec<bool> = (0..points).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        worst = worst.max((roc_auc(&scores, &labels)? - pairwise_auc(&scores, &labels)).abs());
    }
    Ok(worst)
}

/// Everything the `verify` command runs.
pub fn run_all(seed: u64) -> crate::Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let net = causality_fixture(&Profile::desk(), seed)?;
    let bad = causality_trials(&net, 1000, seed)?;
    out.push(CheckOutcome::new(
        "context causality (1000 trials)",
        bad == 0,
        format!("{bad} violating trials"),
    ));
    for r in gradient_suite(1e-5, seed)? {
        out.push(CheckOutcome::new(
            &format!("gradient {}", r.name),
            r.passes(1e-4),
            format!("max rel err {:.2e} at {} ({} coords)", r.max_rel_error, r.worst, r.checked),
        ));
    }
    out.extend(loss_value_suite());
    let gap = auc_oracle_gap(100, 200, seed)?;
    out.push(CheckOutcome::new(
        "rank AUC = pairwise AUC",
        gap < 1e-12,
        format!("max gap {gap:e}"),
    ));
    Ok(out)
}
