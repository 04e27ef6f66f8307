//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p cpcmil-cli --test acceptance`. Criteria 7 to 10 pretrain
//! and train on the 48-image synthetic corpus and take most of the runtime.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use cpcmil::cpc::{cpc_pretrain, info_nce_loss, CpcConfig, CpcModel};
use cpcmil::dataset::{
    generate_synthetic_corpus, lattice_origins, make_cpc_grid, Bag, Patch, SegmentConfig, SyntheticSpec,
};
use cpcmil::eval::{instance_recovery_score, mean_std, roc_auc};
use cpcmil::mil::{count_trainable_params, kl_uniform, smooth_svm_loss, MilHead, MilMode};
use cpcmil::params::Parameterized;
use cpcmil::profile::stride_for;
use cpcmil::tensor::Nhwc;
use cpcmil::train::{
    embed_bags, label_efficiency_sweep, make_splits, nested_subsets, train_mil_with_cache, Budget, Fold,
    FoldResult, SplitPlan, TrainConfig, TrainMode,
};
use cpcmil::verify::{causality_fixture, causality_trials, gradient_suite};
use cpcmil::Profile;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const LABELS_PER_CLASS: usize = 8;
const CORPUS_IMAGES: usize = 48;

struct Report {
    failed: usize,
    ran: usize,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, passed: bool, detail: String, started: Instant) {
        self.ran += 1;
        if !passed {
            self.failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {detail} [{:.1} s]",
            if passed { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
    }
}

fn criterion_1(r: &mut Report) {
    let t = Instant::now();
    let profile = Profile::desk();
    let net = causality_fixture(&profile, 11).expect("fixture");
    let bad = causality_trials(&net, 1000, 12).expect("trials");
    let fast = t.elapsed().as_secs_f64() < 60.0;
    r.line(1, "causality", bad == 0 && fast, format!("{bad} of 1000 trials changed a protected row"), t);
}

fn criterion_2(r: &mut Report) {
    let t = Instant::now();
    let reports = gradient_suite(1e-5, 0).expect("gradient suite");
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let fast = t.elapsed().as_secs_f64() < 300.0;
    let ok = reports.iter().all(|g| g.max_rel_error < 1e-4) && fast;
    let detail = format!(
        "{} checks, worst {} at {:.2e}",
        reports.len(),
        worst.name,
        worst.max_rel_error
    );
    r.line(2, "finite-difference gradients", ok, detail, t);
}

fn criterion_3(r: &mut Report) {
    let t = Instant::now();
    let k = 7;
    let pred = vec![vec![1.0, 0.0, 0.0]];
    let pos = vec![vec![0.0, 1.0, 0.0]];
    let negs = vec![(0..k).map(|i| vec![0.0, (i % 2) as f64, 1.0]).collect::<Vec<_>>()];
    let eps = 1e-12;
    let mut hinge_gap: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let s = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let y = rng.gen_range(0..2);
        let hinge = f64::max(0.0, 1.0 + s[1 - y] - s[y]);
        hinge_gap = hinge_gap.max((smooth_svm_loss(&s, y, 1.0, 1e-6).0 - hinge).abs());
    }
    // (name, value, closed form, tolerance); kl(uniform) must be exactly zero.
    let checks = [
        ("infonce", info_nce_loss(&pred, &pos, &negs).unwrap(), ((k + 1) as f64).ln(), 1e-9),
        ("svm", smooth_svm_loss(&[0.3, 0.3], 1, 1.0, 1.0).0, (1.0 + 1f64.exp()).ln(), 1e-9),
        ("kl(uniform)", kl_uniform(&[0.25; 4]).0, 0.0, 0.0),
        ("kl(one-hot)", kl_uniform(&[1.0 - 3.0 * eps, eps, eps, eps]).0, 4f64.ln(), 1e-6),
        ("hinge", hinge_gap, 0.0, 1e-4),
    ];
    let ok = checks.iter().all(|(_, got, want, tol)| (got - want).abs() <= *tol);
    let notes: Vec<String> = checks
        .iter()
        .map(|(name, got, want, _)| format!("{name} {:.1e}", (got - want).abs()))
        .collect();
    r.line(3, "closed-form losses", ok, notes.join(", "), t);
}

fn sliding_windows(h: usize, w: usize, size: usize, step: usize) -> usize {
    let mut n = 0;
    for y in (0..h).step_by(step) {
        for x in (0..w).step_by(step) {
            if y + size <= h && x + size <= w {
                n += 1;
            }
        }
    }
    n
}

fn criterion_4(r: &mut Report) {
    let t = Instant::now();
    let tile = Patch {
        pixels: Nhwc::zeros(1, 256, 256, 3),
        origin: (0, 0),
        source_id: "tile".into(),
    };
    let grid = make_cpc_grid(&tile, 64, 0.5).expect("grid");
    let plain = lattice_origins(1536, 2048, 256, stride_for(256, 0.0).unwrap()).len();
    let half = lattice_origins(1536, 2048, 256, stride_for(256, 0.5).unwrap()).len();
    let (o_plain, o_half) = (sliding_windows(1536, 2048, 256, 256), sliding_windows(1536, 2048, 256, 128));
    let ok = grid.rows == 7 && grid.cols == 7 && plain == 48 && half == 165 && plain == o_plain && half == o_half;
    let detail = format!(
        "grid {}×{}, tilings {plain}/{half} (sliding window {o_plain}/{o_half})",
        grid.rows, grid.cols
    );
    r.line(4, "geometry", ok, detail, t);
}

fn criterion_5(r: &mut Report) {
    let t = Instant::now();
    let p = Profile::paper();
    let head = MilHead::new(&p, MilMode::Frozen, &mut ChaCha8Rng::seed_from_u64(0));
    let instantiated = head.param_count();
    // 1024→512 reducer, bias-free gated attention with 256 hidden units, 512→2 classifier.
    let oracle = (1024 * 512 + 512) + (2 * 256 * 512 + 256) + (512 * 2 + 2);
    let counted = count_trainable_params(&p, MilMode::Frozen);
    let ok = instantiated == 788_226 && oracle == 788_226 && counted == 788_226;
    let detail = format!("instantiated {instantiated}, counted {counted}, oracle {oracle}");
    r.line(5, "paper frozen-head parameters", ok, detail, t);
}

fn criterion_6(r: &mut Report) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let scores: Vec<f64> = (0..200).map(|_| rng.gen_range(0..30) as f64 / 10.0).collect();
        let mut labels: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (si, _) in scores.iter().zip(&labels).filter(|(_, l)| **l) {
            for (sj, _) in scores.iter().zip(&labels).filter(|(_, l)| !**l) {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
        worst = worst.max((roc_auc(&scores, &labels).unwrap() - wins / pairs).abs());
    }
    r.line(6, "AUC oracle", worst <= 1e-12, format!("max gap {worst:.1e} over 100×200 points"), t);
}

fn one_fold_plan(labels: &[bool], seed: u64) -> SplitPlan {
    let full = make_splits(labels, 1, 0.25, seed).expect("split");
    let subset = nested_subsets(labels, &full, &[Budget::PerClass(LABELS_PER_CLASS)], seed)
        .pop()
        .flatten()
        .expect("enough labels");
    SplitPlan {
        seed,
        folds: vec![Fold {
            train: subset[0].clone(),
            validation: full.folds[0].validation.clone(),
        }],
    }
}

fn recovery(bags: &[Bag], fold: &FoldResult) -> Vec<f64> {
    fold.predictions
        .iter()
        .filter(|p| p.label)
        .filter_map(|p| {
            let bag = bags.iter().find(|b| b.id == p.bag_id)?;
            instance_recovery_score(&p.attention, bag.instance_truth.as_ref()?).ok()
        })
        .collect()
}

fn pipeline(r: &mut Report) {
    let t = Instant::now();
    let profile = Profile::desk();
    let spec = SyntheticSpec {
        n_images: CORPUS_IMAGES,
        ..SyntheticSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec).expect("corpus");
    let bags = corpus.bags(&SegmentConfig::default()).expect("bags");
    let labels: Vec<bool> = bags.iter().map(|b| b.label).collect();
    let tiles: Vec<Patch> = bags.iter().flat_map(|b| b.instances.iter().cloned()).collect();
    println!("     corpus: {} bags, {} instances", bags.len(), tiles.len());

    let cpc_cfg = CpcConfig::default();
    let model = CpcModel::new(&profile, &mut ChaCha8Rng::seed_from_u64(cpc_cfg.seed)).expect("model");
    let (model, history) = cpc_pretrain(&tiles, &profile, model, &cpc_cfg).expect("pretraining");
    let bound = 0.8 * history.chance_loss;
    let last = *history.epoch_losses.last().unwrap();
    let curve: Vec<String> = history.epoch_losses.iter().map(|l| format!("{l:.2}")).collect();
    let detail = format!(
        "final {last:.3} vs bound {bound:.3} (chance {:.3}) after {} epochs; curve {}",
        history.chance_loss,
        history.epoch_losses.len(),
        curve.join(" ")
    );
    r.line(10, "CPC learning signal", last < bound, detail, t);

    let t = Instant::now();
    let encoder = model.encoder;
    let cache = embed_bags(&encoder, &bags, &profile).expect("embeddings");
    let (mut frozen_auc, mut scratch_auc, mut rec) = (Vec::new(), Vec::new(), Vec::new());
    let mut r_wins = 0;
    let mut rows = Vec::new();
    for seed in 0..SEEDS {
        let plan = one_fold_plan(&labels, seed);
        let cfg = |mode, loss: &str| TrainConfig {
            mode,
            loss: loss.into(),
            seed,
            ..TrainConfig::default()
        };
        let run = |c: TrainConfig, enc, cache| {
            train_mil_with_cache(&bags, &plan, enc, cache, &c, &profile).expect("training").remove(0)
        };
        let fr = run(cfg(TrainMode::Frozen, "r"), Some(&encoder), Some(&cache[..]));
        let fce = run(cfg(TrainMode::Frozen, "ce"), Some(&encoder), Some(&cache[..]));
        let sc = run(cfg(TrainMode::Scratch, "r"), None, None);
        let (a_f, a_s) = (fr.auc.unwrap(), sc.auc.unwrap());
        frozen_auc.push(a_f);
        scratch_auc.push(a_s);
        if fr.accuracy >= fce.accuracy {
            r_wins += 1;
        }
        rec.extend(recovery(&bags, &fr));
        rows.push(format!(
            "seed {seed}: frozen AUC {a_f:.3} acc R {:.2} CE {:.2}, scratch AUC {a_s:.3}",
            fr.accuracy, fce.accuracy
        ));
    }
    for row in &rows {
        println!("     {row}");
    }
    let (mf, _) = mean_std(&frozen_auc);
    let (ms, _) = mean_std(&scratch_auc);
    let ok = mf >= ms + 0.05 && r_wins >= 3;
    let detail = format!(
        "frozen CPC AUC {mf:.3} vs scratch {ms:.3} (margin {:+.3}); R ≥ CE accuracy in {r_wins}/{SEEDS} seeds",
        mf - ms
    );
    r.line(7, "pipeline ordering", ok, detail, t);

    let t = Instant::now();
    let (mr, _) = mean_std(&rec);
    r.line(
        9,
        "key-instance recovery",
        !rec.is_empty() && mr >= 0.9,
        format!("mean {mr:.3} over {} positive validation bags", rec.len()),
        t,
    );

    let t = Instant::now();
    let splits = make_splits(&labels, 5, 0.25, 0).expect("splits");
    let budgets: Vec<Budget> = ["1", "4", "16", "max"].iter().map(|b| b.parse().unwrap()).collect();
    let sweep = label_efficiency_sweep(&bags, &splits, &encoder, &budgets, &TrainConfig::default(), &profile)
        .expect("sweep");
    let aucs: Vec<f64> = sweep.iter().map(|b| b.mean_auc).collect();
    let shape_ok = sweep.len() == budgets.len() && aucs.windows(2).all(|w| w[1] >= w[0] - 0.02);
    let points: Vec<String> = sweep.iter().map(|b| format!("{}:{:.3}", b.per_class, b.mean_auc)).collect();
    r.line(8, "label-efficiency shape", shape_ok, format!("per-class AUC {}", points.join(" ")), t);
}

fn cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_cpcmil"))
        .args(["-q", "--threads", "1"])
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
        .status
        .success()
}

/// Every command twice with the same seeds; all run directories must match byte for byte.
fn criterion_11(r: &mut Report) {
    let t = Instant::now();
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();
    let commands: Vec<Vec<&str>> = vec![
        vec!["synth-gen", "--n-images", "8", "--image-size", "192", "--seed", "5", "--out", "corpus"],
        vec!["extract", "--corpus", "corpus", "--out", "bags"],
        vec!["pretrain-cpc", "--bags", "bags/bags.jsonl", "--epochs", "2", "--tiles-per-epoch", "32", "--out", "cpc"],
        vec![
            "train-mil", "--bags", "bags/bags.jsonl", "--checkpoint", "cpc/cpc.ckpt", "--folds", "2",
            "--max-epochs", "4", "--out", "train",
        ],
        vec![
            "sweep-labels", "--bags", "bags/bags.jsonl", "--checkpoint", "cpc/cpc.ckpt", "--folds", "2",
            "--budgets", "1,max", "--max-epochs", "3", "--out", "sweep",
        ],
        vec!["eval", "--run", "train", "--bags", "bags/bags.jsonl", "--out", "eval"],
        vec!["attention-map", "--run", "train", "--bags", "bags/bags.jsonl", "--out", "maps"],
        vec!["check-grads", "--out", "grads"],
        vec!["verify", "--out", "verify"],
    ];
    let mut mismatched = Vec::new();
    let mut failed = Vec::new();
    for c in &commands {
        let out = *c.last().unwrap();
        if !cli(d, c) {
            failed.push(c[0]);
            continue;
        }
        let first = snapshot(&d.join(out));
        let renamed = d.join(format!("{out}.first"));
        std::fs::rename(d.join(out), &renamed).unwrap();
        if !cli(d, c) || snapshot(&d.join(out)) != first {
            mismatched.push(c[0]);
        }
        std::fs::remove_dir_all(&renamed).unwrap();
    }
    let ok = failed.is_empty() && mismatched.is_empty();
    let detail = if ok {
        format!("{} commands rerun with identical manifests and outputs", commands.len())
    } else {
        format!("failed: {failed:?}, differing: {mismatched:?}")
    };
    r.line(11, "determinism", ok, detail, t);
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn main() {
    // Optional criterion numbers select a subset; by default all eleven run.
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |id: u32| wanted.is_empty() || wanted.contains(&id);
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("thread pool");
    let started = Instant::now();
    let mut r = Report { failed: 0, ran: 0 };
    let quick: [(u32, fn(&mut Report)); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (11, criterion_11),
    ];
    for (id, f) in quick {
        if run(id) {
            f(&mut r);
        }
    }
    if [7, 8, 9, 10].iter().any(|&id| run(id)) {
        pipeline(&mut r);
    }
    println!(
        "{} of {} criteria passed in {:.0} s",
        r.ran - r.failed,
        r.ran,
        started.elapsed().as_secs_f64()
    );
    if r.failed > 0 {
        std::process::exit(1);
    }
}
