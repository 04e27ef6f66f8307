use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cpcmil::checkpoint::Checkpoint;
use cpcmil::cpc::{cpc_pretrain, CpcModel};
use cpcmil::dataset::{
    extract_patches, generate_synthetic_corpus, read_bag_manifest, read_label_manifest,
    segment_tissue, write_bag_manifest, write_label_manifest, Bag, BagRecord, LabelRecord, RawImage,
};
use cpcmil::encoder::Encoder;
use cpcmil::eval::{
    accuracy, aggregate_folds, export_attention_map, instance_recovery_score, roc_auc, MapLayout,
};
use cpcmil::train::{label_efficiency_sweep, make_splits, train_mil, Budget, FoldResult};
use cpcmil::verify::{gradient_suite, run_all};
use cpcmil::{Error, Profile, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{resolve, FlagValue, Override, RunConfig};
use crate::manifest::{tree_hash, Manifest};
use crate::{Cli, Command, OUTPUT_ROOT_ENV};

/// Everything a command needs besides its own arguments.
struct Ctx {
    cfg: RunConfig,
    overrides: Vec<Override>,
    out: PathBuf,
    command: &'static str,
}

impl Ctx {
    fn manifest(&self, args: &impl Serialize) -> Manifest {
        let mut m = Manifest::new(self.command, &self.cfg, &self.overrides);
        m.results = json!({ "arguments": args });
        m
    }

    fn finish(&self, mut m: Manifest, results: serde_json::Value) -> Result<()> {
        if let serde_json::Value::Object(extra) = results {
            if let serde_json::Value::Object(base) = &mut m.results {
                base.extend(extra);
            }
        }
        let path = m.write(&self.out)?;
        info!("manifest: {}", path.display());
        Ok(())
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut flags: Vec<FlagValue> = Vec::new();
    if let Some(p) = &cli.profile {
        flags.push(("run.profile", toml::Value::String(p.clone())));
    }
    if let Some(t) = cli.threads {
        flags.push(("run.threads", toml::Value::Integer(t as i64)));
    }
    match &cli.command {
        Command::SynthGen(a) => a.flags(&mut flags),
        Command::Extract(a) => a.flags(&mut flags),
        Command::PretrainCpc(a) => a.flags(&mut flags),
        Command::TrainMil(a) => a.mil.flags(&mut flags),
        Command::SweepLabels(a) => {
            a.mil.flags(&mut flags);
            if let Some(b) = &a.budgets {
                flags.push(("sweep.budgets", toml::Value::try_from(b).expect("strings")));
            }
        }
        _ => {}
    }
    let (cfg, overrides) = resolve(cli.config.as_deref(), &flags)?;
    cfg.profile()?;
    if cfg.run.threads == 0 {
        return Err(config_error("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.threads)
        .build_global()
        .map_err(|e| config_error(e.to_string()))?;
    let command = cli.command.name();
    let out = cli.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(command)
    });
    for o in &overrides {
        info!("override {} = {} ({})", o.key, o.value, o.source);
    }
    let ctx = Ctx {
        cfg,
        overrides,
        out,
        command,
    };
    match &cli.command {
        Command::SynthGen(a) => synth_gen(&ctx, a),
        Command::Extract(a) => extract(&ctx, a),
        Command::PretrainCpc(a) => pretrain(&ctx, a),
        Command::TrainMil(a) => train(&ctx, a),
        Command::SweepLabels(a) => sweep(&ctx, a),
        Command::Eval(a) => evaluate(&ctx, a),
        Command::AttentionMap(a) => attention_map(&ctx, a),
        Command::CheckGrads(a) => check_grads(&ctx, a),
        Command::Verify(a) => verify(&ctx, a),
    }
}

/// Recreate the run directory so stale files never leak into a manifest.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Motifs {
    patch_size: usize,
    cells: BTreeMap<String, Vec<[usize; 2]>>,
}

fn synth_gen(ctx: &Ctx, args: &crate::SynthArgs) -> Result<()> {
    let corpus = generate_synthetic_corpus(&ctx.cfg.synthetic)?;
    fresh_dir(&ctx.out)?;
    fs::create_dir_all(ctx.out.join("images"))?;
    let mut labels = Vec::new();
    let mut motifs = Motifs {
        patch_size: ctx.cfg.synthetic.patch_size,
        cells: BTreeMap::new(),
    };
    for im in &corpus.images {
        let rel = PathBuf::from("images").join(format!("{}.png", im.image.id));
        im.image.save_png(&ctx.out.join(&rel))?;
        labels.push(LabelRecord {
            id: im.image.id.clone(),
            path: rel,
            label: im.image.label.unwrap_or(false),
        });
        motifs.cells.insert(
            im.image.id.clone(),
            im.motif_cells.iter().map(|&(r, c)| [r, c]).collect(),
        );
    }
    write_label_manifest(&ctx.out.join("labels.csv"), &labels)?;
    fs::write(ctx.out.join("motifs.json"), serde_json::to_string_pretty(&motifs)? + "\n")?;
    let n_pos = labels.iter().filter(|l| l.label).count();
    let hash = tree_hash(&ctx.out)?;
    println!("{} images ({n_pos} positive) in {}; content hash {hash}", labels.len(), ctx.out.display());
    let m = ctx.manifest(args);
    ctx.finish(m, json!({ "images": labels.len(), "positive": n_pos, "corpus_hash": hash }))
}

fn extract(ctx: &Ctx, args: &crate::ExtractArgs) -> Result<()> {
    let profile = ctx.cfg.profile()?;
    let size = profile.tile_size;
    let labels_path = args.corpus.join("labels.csv");
    let records = read_label_manifest(&labels_path)?;
    let motifs_path = args.corpus.join("motifs.json");
    let motifs: Option<Motifs> = if motifs_path.exists() {
        let m: Motifs = serde_json::from_str(&fs::read_to_string(&motifs_path)?)?;
        if m.patch_size == size {
            Some(m)
        } else {
            warn!("motifs were planted on {}px cells, extracting {size}px; instance truth dropped", m.patch_size);
            None
        }
    } else {
        None
    };
    fresh_dir(&ctx.out)?;
    let mut m = ctx.manifest(args);
    m.input(&labels_path)?;
    if motifs_path.exists() {
        m.input(&motifs_path)?;
    }
    let mut bags = Vec::new();
    let mut instances = 0;
    for rec in &records {
        m.input(&rec.path)?;
        let image = RawImage::load_png(&rec.path, &rec.id, Some(rec.label))?;
        let mask = segment_tissue(&image, &ctx.cfg.segment);
        let patches = extract_patches(&image, &mask, size, ctx.cfg.extract.overlap)?;
        if patches.is_empty() {
            warn!("{}: no tissue patches, bag skipped", rec.id);
            continue;
        }
        let truth = motifs.as_ref().and_then(|m| m.cells.get(&rec.id)).map(|cells| {
            let set: BTreeSet<(usize, usize)> = cells.iter().map(|c| (c[0], c[1])).collect();
            patches.iter().map(|p| set.contains(&p.origin)).collect::<Vec<bool>>()
        });
        instances += patches.len();
        let bag = match Bag::new(rec.id.clone(), rec.label, patches.clone(), truth) {
            Ok(b) => b,
            Err(e) => {
                warn!("{}: instance truth inconsistent with the bag label ({e}); truth dropped", rec.id);
                Bag::new(rec.id.clone(), rec.label, patches, None)?
            }
        };
        bags.push(BagRecord::from_bag(&bag, Some(rec.path.display().to_string())));
    }
    write_bag_manifest(&ctx.out.join("bags.jsonl"), &bags)?;
    println!("{} bags, {instances} instances -> {}", bags.len(), ctx.out.join("bags.jsonl").display());
    ctx.finish(m, json!({ "bags": bags.len(), "instances": instances }))
}

/// Bags re-cut from their source images, with each source image's size.
struct LoadedBags {
    bags: Vec<Bag>,
    dims: Vec<(usize, usize)>,
}

fn load_bags(path: &Path, m: &mut Manifest) -> Result<LoadedBags> {
    m.input(path)?;
    let records = read_bag_manifest(path)?;
    if records.is_empty() {
        return Err(config_error(format!("{} lists no bags", path.display())));
    }
    let mut images: BTreeMap<String, RawImage> = BTreeMap::new();
    let mut bags = Vec::with_capacity(records.len());
    let mut dims = Vec::with_capacity(records.len());
    for r in &records {
        let src = r
            .source
            .clone()
            .ok_or_else(|| config_error(format!("bag {} has no source image", r.bag_id)))?;
        if !images.contains_key(&src) {
            m.input(Path::new(&src))?;
            let img = RawImage::load_png(Path::new(&src), &r.bag_id, Some(r.label))?;
            images.insert(src.clone(), img);
        }
        let img = &images[&src];
        dims.push((img.height(), img.width()));
        bags.push(r.materialize(img)?);
    }
    Ok(LoadedBags { bags, dims })
}

fn pretrain(ctx: &Ctx, args: &crate::CpcArgs) -> Result<()> {
    let profile = ctx.cfg.profile()?;
    let mut m = ctx.manifest(args);
    let loaded = load_bags(&args.bags, &mut m)?;
    let tiles: Vec<_> = loaded.bags.iter().flat_map(|b| b.instances.iter().cloned()).collect();
    info!("{} tiles from {} bags", tiles.len(), loaded.bags.len());
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.cpc.seed);
    let model = CpcModel::new(&profile, &mut rng)?;
    let (model, history) = cpc_pretrain(&tiles, &profile, model, &ctx.cfg.cpc)?;
    fresh_dir(&ctx.out)?;
    let mut ck = Checkpoint::new(&profile.name);
    ck.put("encoder", &model.encoder);
    ck.put("context", &model.context);
    ck.put("heads", &model.heads);
    ck.save(&ctx.out.join("cpc.ckpt"))?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in history.epoch_losses.iter().enumerate() {
        writeln!(csv, "{e},{l:?}").expect("string write");
    }
    fs::write(ctx.out.join("history.csv"), csv)?;
    let last = history.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "final loss {last:.4}, chance ln(K+1) = {:.4}, ratio {:.3}",
        history.chance_loss,
        last / history.chance_loss
    );
    ctx.finish(
        m,
        json!({
            "tiles": tiles.len(),
            "epoch_losses": history.epoch_losses,
            "chance_loss": history.chance_loss,
            "final_ratio": last / history.chance_loss,
        }),
    )
}

fn load_encoder(path: Option<&Path>, profile: &Profile, m: &mut Manifest) -> Result<Option<Encoder>> {
    let Some(path) = path else { return Ok(None) };
    m.input(path)?;
    let ck = Checkpoint::load(path)?;
    if ck.profile != profile.name {
        return Err(config_error(format!(
            "checkpoint was trained with profile '{}', run uses '{}'",
            ck.profile, profile.name
        )));
    }
    let mut enc = Encoder::new(profile, &mut ChaCha8Rng::seed_from_u64(0));
    ck.load_into("encoder", &mut enc)?;
    Ok(Some(enc))
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionLine {
    fold: usize,
    bag_id: String,
    label: bool,
    prob: f64,
    attention: Vec<f64>,
}

fn write_fold_outputs(dir: &Path, results: &[FoldResult], profile: &Profile) -> Result<()> {
    let mut folds = String::from("fold,best_epoch,epochs_run,accuracy,auc\n");
    let mut history = String::from("fold,epoch,train_loss,val_loss,val_accuracy,val_auc\n");
    let mut preds = String::new();
    for r in results {
        let auc = r.auc.map_or("".into(), |a| format!("{a:?}"));
        writeln!(folds, "{},{},{},{:?},{auc}", r.fold, r.best_epoch, r.history.len(), r.accuracy)
            .expect("string write");
        for h in &r.history {
            let auc = h.val_auc.map_or("".into(), |a| format!("{a:?}"));
            writeln!(
                history,
                "{},{},{:?},{:?},{:?},{auc}",
                r.fold, h.epoch, h.train_loss, h.val_loss, h.val_accuracy
            )
            .expect("string write");
        }
        for p in &r.predictions {
            let line = PredictionLine {
                fold: r.fold,
                bag_id: p.bag_id.clone(),
                label: p.label,
                prob: p.prob,
                attention: p.attention.clone(),
            };
            preds.push_str(&serde_json::to_string(&line)?);
            preds.push('\n');
        }
        let mut ck = Checkpoint::new(&profile.name);
        ck.put("head", &r.model.head);
        if let Some(enc) = &r.model.encoder {
            ck.put("encoder", enc);
        }
        ck.save(&dir.join(format!("mil_fold{}.ckpt", r.fold)))?;
    }
    fs::write(dir.join("folds.csv"), folds)?;
    fs::write(dir.join("history.csv"), history)?;
    fs::write(dir.join("predictions.jsonl"), preds)?;
    Ok(())
}

fn train(ctx: &Ctx, args: &crate::TrainArgs) -> Result<()> {
    let cfg = &ctx.cfg.mil;
    cfg.validate()?;
    if cfg.mode.needs_checkpoint() && args.checkpoint.is_none() {
        return Err(config_error(format!("{} mode needs --checkpoint", cfg.mode)));
    }
    let profile = ctx.cfg.profile()?;
    let mut m = ctx.manifest(args);
    let encoder = load_encoder(args.checkpoint.as_deref(), &profile, &mut m)?;
    let loaded = load_bags(&args.bags, &mut m)?;
    let labels: Vec<bool> = loaded.bags.iter().map(|b| b.label).collect();
    let s = &ctx.cfg.splits;
    let splits = make_splits(&labels, s.folds, s.val_fraction, s.seed)?;
    let results = train_mil(&loaded.bags, &splits, encoder.as_ref(), cfg, &profile)?;
    fresh_dir(&ctx.out)?;
    write_fold_outputs(&ctx.out, &results, &profile)?;
    let accs: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let aucs: Vec<f64> = results.iter().filter_map(|r| r.auc).collect();
    let acc = aggregate_folds(&accs)?;
    let mut summary = format!("mode {} loss {}\naccuracy {acc}\n", cfg.mode, cfg.loss);
    let auc = if aucs.len() == results.len() {
        let a = aggregate_folds(&aucs)?;
        writeln!(summary, "auc {a}").expect("string write");
        Some(a)
    } else {
        summary.push_str("auc undefined in some fold\n");
        None
    };
    fs::write(ctx.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    let frozen_ok = results
        .iter()
        .all(|r| r.frozen_encoder_checksums.as_ref().map_or(true, |(a, b)| a == b));
    ctx.finish(
        m,
        json!({
            "fold_accuracy": accs,
            "fold_auc": results.iter().map(|r| r.auc).collect::<Vec<_>>(),
            "best_epochs": results.iter().map(|r| r.best_epoch).collect::<Vec<_>>(),
            "accuracy": acc,
            "auc": auc,
            "frozen_encoder_unchanged": frozen_ok,
            "splits": splits,
        }),
    )
}

fn sweep(ctx: &Ctx, args: &crate::SweepArgs) -> Result<()> {
    let cfg = &ctx.cfg.mil;
    cfg.validate()?;
    let Some(ck) = args.checkpoint.as_deref() else {
        return Err(config_error("sweep-labels needs --checkpoint (a CPC encoder)"));
    };
    let budgets: Vec<Budget> = ctx.cfg.sweep.budgets.iter().map(|b| b.parse()).collect::<Result<_>>()?;
    let profile = ctx.cfg.profile()?;
    let mut m = ctx.manifest(args);
    let encoder = load_encoder(Some(ck), &profile, &mut m)?.expect("checkpoint given");
    let loaded = load_bags(&args.bags, &mut m)?;
    let labels: Vec<bool> = loaded.bags.iter().map(|b| b.label).collect();
    let s = &ctx.cfg.splits;
    let splits = make_splits(&labels, s.folds, s.val_fraction, s.seed)?;
    let results = label_efficiency_sweep(&loaded.bags, &splits, &encoder, &budgets, cfg, &profile)?;
    fresh_dir(&ctx.out)?;
    let mut csv = String::from("budget,per_class,mean_auc,std_auc,fold_aucs\n");
    for r in &results {
        let folds: Vec<String> = r.fold_aucs.iter().map(|a| format!("{a:?}")).collect();
        writeln!(csv, "{},{},{:?},{:?},{}", r.budget, r.per_class, r.mean_auc, r.std_auc, folds.join(" "))
            .expect("string write");
        println!("{:>4} per class: AUC {:.3} ± {:.3}", r.per_class, r.mean_auc, r.std_auc);
    }
    fs::write(ctx.out.join("sweep.csv"), csv)?;
    ctx.finish(m, json!({ "sweep": results }))
}

fn read_predictions(run: &Path, m: &mut Manifest) -> Result<Vec<PredictionLine>> {
    let path = run.join("predictions.jsonl");
    if !path.is_file() {
        return Err(config_error(format!("{} is not a train-mil run (no predictions.jsonl)", run.display())));
    }
    m.input(&path)?;
    fs::read_to_string(&path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn evaluate(ctx: &Ctx, args: &crate::EvalArgs) -> Result<()> {
    let mut m = ctx.manifest(args);
    let preds = read_predictions(&args.run, &mut m)?;
    let truth: BTreeMap<String, Vec<bool>> = match &args.bags {
        Some(p) => {
            m.input(p)?;
            read_bag_manifest(p)?
                .into_iter()
                .filter_map(|r| r.instance_truth.map(|t| (r.bag_id, t)))
                .collect()
        }
        None => BTreeMap::new(),
    };
    let mut by_fold: BTreeMap<usize, Vec<&PredictionLine>> = BTreeMap::new();
    for p in &preds {
        by_fold.entry(p.fold).or_default().push(p);
    }
    let mut table = String::from("fold,accuracy,auc,recovery\n");
    let (mut accs, mut aucs, mut recs) = (Vec::new(), Vec::new(), Vec::new());
    for (fold, ps) in &by_fold {
        let labels: Vec<bool> = ps.iter().map(|p| p.label).collect();
        let hard: Vec<bool> = ps.iter().map(|p| p.prob >= 0.5).collect();
        let probs: Vec<f64> = ps.iter().map(|p| p.prob).collect();
        let acc = accuracy(&hard, &labels)?;
        let auc = roc_auc(&probs, &labels).ok();
        let fold_rec: Vec<f64> = ps
            .iter()
            .filter(|p| p.label)
            .filter_map(|p| truth.get(&p.bag_id).and_then(|t| instance_recovery_score(&p.attention, t).ok()))
            .collect();
        let rec = (!fold_rec.is_empty()).then(|| fold_rec.iter().sum::<f64>() / fold_rec.len() as f64);
        let show = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        writeln!(table, "{fold},{acc:?},{},{}", show(auc), show(rec)).expect("string write");
        accs.push(acc);
        aucs.extend(auc);
        recs.extend(fold_rec);
    }
    fresh_dir(&ctx.out)?;
    fs::write(ctx.out.join("metrics.csv"), &table)?;
    let acc = aggregate_folds(&accs)?;
    let auc = (aucs.len() == by_fold.len()).then(|| aggregate_folds(&aucs)).transpose()?;
    let recovery = (!recs.is_empty()).then(|| recs.iter().sum::<f64>() / recs.len() as f64);
    println!("{:<10} {:>15} {:>15}", "folds", "accuracy", "AUC");
    println!(
        "{:<10} {:>15} {:>15}",
        by_fold.len(),
        acc.to_string(),
        auc.map_or("undefined".into(), |a| a.to_string())
    );
    if let Some(r) = recovery {
        println!("mean key-instance recovery {r:.3} over {} positive bags", recs.len());
    }
    ctx.finish(m, json!({ "accuracy": acc, "auc": auc, "recovery": recovery }))
}

fn attention_map(ctx: &Ctx, args: &crate::MapArgs) -> Result<()> {
    let mut m = ctx.manifest(args);
    let preds = read_predictions(&args.run, &mut m)?;
    let loaded = load_bags(&args.bags, &mut m)?;
    let index: BTreeMap<&str, usize> = loaded.bags.iter().enumerate().map(|(i, b)| (b.id.as_str(), i)).collect();
    fresh_dir(&ctx.out)?;
    let mut written = Vec::new();
    let mut recovery = BTreeMap::new();
    for p in preds.iter().filter(|p| p.fold == args.fold) {
        if args.bag.as_deref().is_some_and(|b| b != p.bag_id) {
            continue;
        }
        let &i = index
            .get(p.bag_id.as_str())
            .ok_or_else(|| config_error(format!("bag {} is not in the bag manifest", p.bag_id)))?;
        let bag = &loaded.bags[i];
        let (height, width) = loaded.dims[i];
        let layout = MapLayout {
            height,
            width,
            patch_size: bag.instances[0].size(),
        };
        export_attention_map(bag, &p.attention, &layout, &ctx.out, &p.bag_id)?;
        if let Some(t) = &bag.instance_truth {
            if let Ok(r) = instance_recovery_score(&p.attention, t) {
                recovery.insert(p.bag_id.clone(), r);
            }
        }
        written.push(p.bag_id.clone());
    }
    if written.is_empty() {
        return Err(config_error(format!("no predictions for fold {} in {}", args.fold, args.run.display())));
    }
    println!("{} heatmaps in {}", written.len(), ctx.out.display());
    ctx.finish(m, json!({ "bags": written, "recovery": recovery }))
}

fn check_grads(ctx: &Ctx, args: &crate::GradArgs) -> Result<()> {
    let reports = gradient_suite(args.eps, args.seed)?;
    fresh_dir(&ctx.out)?;
    let mut csv = String::from("check,coordinates,max_rel_error,worst,analytic,numeric,passed\n");
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passes(args.tolerance);
        println!(
            "{} {:<30} max rel err {:.2e} at {} ({} coords)",
            if ok { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.worst,
            r.checked
        );
        writeln!(
            csv,
            "{},{},{:?},{},{:?},{:?},{ok}",
            r.name, r.checked, r.max_rel_error, r.worst, r.analytic, r.numeric
        )
        .expect("string write");
        if !ok {
            failed.push(r.name.clone());
        }
    }
    fs::write(ctx.out.join("gradients.csv"), csv)?;
    ctx.finish(ctx.manifest(args), json!({ "failed": failed }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

fn verify(ctx: &Ctx, args: &crate::VerifyArgs) -> Result<()> {
    let outcomes = run_all(args.seed)?;
    fresh_dir(&ctx.out)?;
    for o in &outcomes {
        println!("{} {} ({})", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    fs::write(ctx.out.join("verify.json"), serde_json::to_string_pretty(&outcomes)? + "\n")?;
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    ctx.finish(ctx.manifest(args), json!({ "failed": failed }))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!("{} of {} checks failed", failed.len(), outcomes.len())))
    }
}
