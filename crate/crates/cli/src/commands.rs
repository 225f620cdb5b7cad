use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use semco::data::{generate_synthetic, load_dataset, make_cold_split, save_dataset, ColdSplit, Dataset, SplitParams, SynthConfig};
use semco::eval::{aggregate, evaluate, AggregateReport, EmbeddingScorer, EvalReport};
use semco::training::{fit, fit_with_teacher, ContentModel, DistillMode, EpochRecord, TrainConfig};
use semco::Alpha;

use crate::config::RunConfig;
use crate::{AlphaArg, EvalArgs, PoolArg, SearchArgs, SplitArgs, SynthArgs, TrainArgs, TrainingFailed, VariantArg};

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Errors from the optimizer are training failures; bad inputs stay data or
/// usage errors.
fn training_error(e: semco::Error) -> anyhow::Error {
    match e {
        e if e.is_data_error() => e.into(),
        e @ (semco::Error::InvalidArgument(_) | semco::Error::InvalidAlpha(_) | semco::Error::InvalidTemperature(_)) => {
            e.into()
        }
        e => TrainingFailed(e).into(),
    }
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n_users: args.users,
        n_items: args.items,
        n_topics: args.topics,
        mode_dims: args.modes.clone(),
        noise_sigma: args.noise,
        interactions_per_user: args.per_user,
        seed: args.seed,
        topic_concentration: args.concentration,
        affinity_scale: args.affinity,
    };
    let ds = generate_synthetic(&cfg)?;
    let manifest = save_dataset(&ds, &args.out)?;
    write_json(&args.out.join("config.json"), &cfg)?;
    println!("{}", manifest.display());
    Ok(())
}

pub fn split(args: &SplitArgs) -> anyhow::Result<()> {
    let (dataset_path, mut params, out) = match &args.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            let out = args.out.clone().unwrap_or_else(|| cfg.out.join("split"));
            (cfg.dataset, cfg.split, out)
        }
        None => {
            let mut params = SplitParams::default();
            if let Some(f) = args.cold_frac {
                params.cold_frac = f;
            }
            (
                args.dataset.clone().expect("clap enforces --dataset"),
                params,
                args.out.clone().expect("clap enforces --out"),
            )
        }
    };
    if let Some(s) = args.seed {
        params.seed = s;
    }
    let dataset = load_dataset(&dataset_path)?;
    let split = make_cold_split(&dataset, &params)?;
    let summary = write_split(&split, &dataset, &dataset_path, &params, &out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn write_split(
    split: &ColdSplit,
    dataset: &Dataset,
    dataset_path: &Path,
    params: &SplitParams,
    out: &Path,
) -> anyhow::Result<semco::data::SplitSummary> {
    let canonical = fs::canonicalize(dataset_path).with_context(|| format!("resolving {}", dataset_path.display()))?;
    let summary = split.summary(canonical, params);
    split.save(out, dataset, &summary)?;
    Ok(summary)
}

/// Loads the split recorded in `dir` together with its dataset.
fn load_split(dir: &Path) -> anyhow::Result<(Dataset, ColdSplit)> {
    let summary = ColdSplit::read_summary(dir)?;
    let dataset = load_dataset(&summary.dataset)?;
    let split = ColdSplit::load(dir, &dataset)?;
    Ok((dataset, split))
}

/// Dataset and split for a run config: either the configured split
/// directory or a fresh split saved under `<out>/split`.
fn prepare_split(cfg: &RunConfig, out: &Path) -> anyhow::Result<(Dataset, ColdSplit)> {
    match &cfg.split_dir {
        Some(dir) => load_split(dir),
        None => {
            let dataset = load_dataset(&cfg.dataset)?;
            let split = make_cold_split(&dataset, &cfg.split)?;
            write_split(&split, &dataset, &cfg.dataset, &cfg.split, &out.join("split"))?;
            Ok((dataset, split))
        }
    }
}

fn apply_overrides(train: &mut TrainConfig, variant: Option<VariantArg>, alpha: Option<AlphaArg>) -> anyhow::Result<()> {
    if let Some(a) = alpha {
        train.alpha = match a {
            AlphaArg::Softmax => Alpha::SOFTMAX,
            AlphaArg::Entmax15 => Alpha::ENTMAX15,
            AlphaArg::Sparsemax => Alpha::SPARSEMAX,
        };
    }
    match variant {
        None => {}
        Some(VariantArg::Base) => train.distill = None,
        Some(v) => {
            let d = train
                .distill
                .as_mut()
                .with_context(|| format!("variant {v:?} needs a `distill` section in the config"))?;
            d.mode = if v == VariantArg::Offline {
                DistillMode::Offline
            } else {
                DistillMode::Online
            };
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_ndcg20: f64,
}

fn write_epochs(path: &Path, log: &[EpochRecord]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in log {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains one seed into `dir`: config snapshot, epoch log, checkpoint(s)
/// and the cold validation report.
fn train_run(
    dataset: &Dataset,
    split: &ColdSplit,
    snapshot: &RunConfig,
    teacher: Option<&ContentModel>,
    dir: &Path,
) -> anyhow::Result<RunSummary> {
    create_dir(dir)?;
    write_json(&dir.join("config.json"), snapshot)?;
    let train = &snapshot.train;

    let log_path = dir.join("epochs.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut write_err = None;
    let mut on_epoch = |r: &EpochRecord| {
        log::info!(
            "epoch {}: loss {:.4} val ndcg@20 {:.4}",
            r.epoch,
            r.loss_total,
            r.val_ndcg20
        );
        let res = serde_json::to_string(r)
            .map_err(anyhow::Error::from)
            .and_then(|line| Ok(writeln!(log, "{line}").and_then(|_| log.flush())?));
        if let Err(e) = res {
            write_err.get_or_insert(e);
        }
    };
    let result = match teacher {
        Some(t) => fit_with_teacher(dataset, split, train, t, &mut on_epoch),
        None => fit(dataset, split, train, &mut on_epoch),
    }
    .map_err(training_error)?;
    if let Some(e) = write_err {
        return Err(e.context(format!("writing {}", log_path.display())));
    }

    let meta = json!({
        "variant": train.variant(),
        "alpha": train.alpha,
        "seed": train.seed,
        "best_epoch": result.best_epoch,
        "best_val_ndcg20": result.best_val_ndcg20,
    });
    result.model.save(&dir.join("model.ckpt"), meta)?;
    if let Some(t) = &result.teacher {
        let meta = json!({
            "variant": "base",
            "alpha": train.alpha,
            "seed": train.seed,
            "best_epoch": t.best_epoch,
            "best_val_ndcg20": t.best_val_ndcg20,
        });
        t.model.save(&dir.join("teacher.ckpt"), meta)?;
        write_epochs(&dir.join("teacher_epochs.jsonl"), &t.log)?;
    }

    let y = result.model.item_embeddings(dataset.inputs())?;
    let scorer = EmbeddingScorer::new(y);
    let reports = snapshot
        .eval_k
        .iter()
        .map(|&k| evaluate(&scorer, &split.warm_train, &split.cold_val, &split.cold_val_items, k))
        .collect::<semco::Result<Vec<_>>>()?;
    write_json(&dir.join("val_report.json"), &strip_items(reports))?;

    Ok(RunSummary {
        seed: train.seed,
        best_epoch: result.best_epoch,
        best_val_ndcg20: result.best_val_ndcg20,
    })
}

fn strip_items(mut reports: Vec<EvalReport>) -> Vec<EvalReport> {
    reports.iter_mut().for_each(|r| r.items.clear());
    reports
}

/// Trains every configured seed into `<out>/seed-<s>/`.
fn train_seeds(
    cfg: &RunConfig,
    dataset: &Dataset,
    split: &ColdSplit,
    teacher: Option<&ContentModel>,
    out: &Path,
) -> anyhow::Result<Vec<RunSummary>> {
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut snapshot = cfg.clone();
        snapshot.train.seed = seed;
        snapshot.seeds = vec![seed];
        snapshot.out = out.to_path_buf();
        snapshot.search = None;
        let run = train_run(dataset, split, &snapshot, teacher, &out.join(format!("seed-{seed}")))?;
        log::info!("seed {seed}: best epoch {} val ndcg@20 {:.4}", run.best_epoch, run.best_val_ndcg20);
        runs.push(run);
    }
    Ok(runs)
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    apply_overrides(&mut cfg.train, args.variant, args.alpha)?;
    cfg.validate()?;
    let teacher = match &args.teacher {
        None => None,
        Some(path) => {
            if cfg.train.variant() != semco::training::Variant::Offline {
                bail!("--teacher is only meaningful for the offline variant");
            }
            Some(ContentModel::load(path)?)
        }
    };
    create_dir(&cfg.out)?;
    let (dataset, split) = prepare_split(&cfg, &cfg.out)?;
    let runs = train_seeds(&cfg, &dataset, &split, teacher.as_ref(), &cfg.out)?;
    write_json(&cfg.out.join("runs.json"), &runs)?;
    for r in &runs {
        println!("seed {}: best epoch {} val ndcg@20 {:.4}", r.seed, r.best_epoch, r.best_val_ndcg20);
    }
    Ok(())
}

#[derive(Serialize)]
struct RunReports {
    checkpoint: PathBuf,
    reports: Vec<EvalReport>,
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    if args.k.contains(&0) {
        bail!("--k must be positive");
    }
    let (dataset, split) = load_split(&args.split)?;
    let (target, pool, pool_name) = match args.pool {
        PoolArg::Test => (&split.cold_test, &split.cold_test_items, "test"),
        PoolArg::Val => (&split.cold_val, &split.cold_val_items, "val"),
    };
    create_dir(&args.out)?;
    let mut runs = Vec::with_capacity(args.checkpoint.len());
    for (i, path) in args.checkpoint.iter().enumerate() {
        let model = ContentModel::load(path)?;
        let scorer = EmbeddingScorer::new(model.item_embeddings(dataset.inputs())?);
        let mut reports = Vec::with_capacity(args.k.len());
        for &k in &args.k {
            let report = evaluate(&scorer, &split.warm_train, target, pool, k)?;
            let name = if args.checkpoint.len() == 1 && args.k.len() == 1 {
                "items.csv".to_string()
            } else {
                format!("items-run{i}-k{k}.csv")
            };
            write_item_csv(&args.out.join(name), &report, &dataset)?;
            reports.push(report);
        }
        runs.push(RunReports {
            checkpoint: path.clone(),
            reports: strip_items(reports),
        });
    }
    let aggregates = args
        .k
        .iter()
        .enumerate()
        .map(|(j, _)| {
            let per_k: Vec<EvalReport> = runs.iter().map(|r| r.reports[j].clone()).collect();
            aggregate(&per_k)
        })
        .collect::<semco::Result<Vec<AggregateReport>>>()?;
    write_json(
        &args.out.join("config.json"),
        &json!({
            "checkpoints": args.checkpoint,
            "split": args.split,
            "k": args.k,
            "pool": pool_name,
        }),
    )?;
    let report = json!({ "pool": pool_name, "runs": runs, "aggregate": aggregates });
    write_json(&args.out.join("report.json"), &report)?;
    for a in &aggregates {
        println!(
            "k={} runs={} recall {:.4}±{:.4} ndcg {:.4}±{:.4} mdg {:.4}±{:.4} gini-div {:.4}±{:.4}",
            a.k,
            a.runs,
            a.recall_at_k.mean,
            a.recall_at_k.std,
            a.ndcg_at_k.mean,
            a.ndcg_at_k.std,
            a.mdg_at_k.mean,
            a.mdg_at_k.std,
            a.gini_diversity.mean,
            a.gini_diversity.std
        );
    }
    Ok(())
}

fn write_item_csv(path: &Path, report: &EvalReport, dataset: &Dataset) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["item_id", "mdg", "pred_count"])?;
    for it in &report.items {
        let mdg = it.mdg.map(|m| m.to_string()).unwrap_or_default();
        w.write_record([dataset.item_ids[it.item].as_str(), &mdg, &it.pred_count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// One completed search trial, as stored in `ledger.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct LedgerEntry {
    id: String,
    train: TrainConfig,
    val_ndcg20: f64,
    runs: Vec<RunSummary>,
}

fn grid_trials(cfg: &RunConfig) -> anyhow::Result<Vec<TrainConfig>> {
    let space = cfg.search.clone().unwrap_or_default();
    let taus = if space.grid.tau.is_empty() { vec![cfg.train.tau] } else { space.grid.tau };
    let wds = if space.grid.weight_decay.is_empty() {
        vec![cfg.train.weight_decay]
    } else {
        space.grid.weight_decay
    };
    let mut out = Vec::with_capacity(taus.len() * wds.len());
    for &tau in &taus {
        for &wd in &wds {
            out.push(TrainConfig {
                tau,
                weight_decay: wd,
                ..cfg.train.clone()
            });
        }
    }
    Ok(out)
}

fn random_trials(cfg: &RunConfig, n: usize) -> anyhow::Result<Vec<TrainConfig>> {
    let space = cfg.search.clone().unwrap_or_default().random;
    let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut t = cfg.train.clone();
        if let Some([lo, hi]) = space.tau {
            t.tau = rng.random_range(lo..=hi);
        }
        let wants_distill = space.omega.is_some() || space.positives_per_user.is_some() || space.lambda.is_some();
        match t.distill.as_mut() {
            Some(d) => {
                if let Some([lo, hi]) = space.omega {
                    d.omega = rng.random_range(lo..=hi);
                }
                if let Some([lo, hi]) = space.positives_per_user {
                    d.positives_per_user = rng.random_range(lo..=hi);
                }
                if let Some([lo, hi]) = space.lambda {
                    d.lambda = rng.random_range(lo..=hi);
                }
            }
            None if wants_distill => bail!("distillation search ranges need a `distill` section in `train`"),
            None => {}
        }
        out.push(t);
    }
    Ok(out)
}

fn read_ledger(path: &Path) -> anyhow::Result<HashMap<String, LedgerEntry>> {
    let mut done = HashMap::new();
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(done),
        Err(e) => return Err(anyhow::Error::new(e).context(format!("reading {}", path.display()))),
    };
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // A crash mid-write leaves a truncated last line; that trial reruns.
        match serde_json::from_str::<LedgerEntry>(&line) {
            Ok(e) => {
                done.insert(e.id.clone(), e);
            }
            Err(e) => log::warn!("{}:{}: ignoring unreadable ledger entry: {e}", path.display(), n + 1),
        }
    }
    Ok(done)
}

pub fn search(args: &SearchArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    let trials = match args.random {
        Some(n) if n == 0 => bail!("--random needs at least one trial"),
        Some(n) => random_trials(&cfg, n)?,
        None => grid_trials(&cfg)?,
    };
    for t in &trials {
        t.validate()?;
    }
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("config.json"), &cfg)?;
    let (dataset, split) = prepare_split(&cfg, &cfg.out)?;

    let ledger_path = cfg.out.join("ledger.jsonl");
    let done = read_ledger(&ledger_path)?;
    let mut entries = Vec::with_capacity(trials.len());
    for (i, train) in trials.into_iter().enumerate() {
        let id = format!("t{i:03}");
        if let Some(e) = done.get(&id) {
            if e.train != train {
                bail!(
                    "{}: trial {id} was run with a different configuration; use a fresh output directory",
                    ledger_path.display()
                );
            }
            log::info!("trial {id} already complete, skipping");
            entries.push(e.clone());
            continue;
        }
        let trial_cfg = RunConfig {
            train: train.clone(),
            ..cfg.clone()
        };
        let runs = train_seeds(&trial_cfg, &dataset, &split, None, &cfg.out.join("trials").join(&id))?;
        let val = runs.iter().map(|r| r.best_val_ndcg20).sum::<f64>() / runs.len() as f64;
        let entry = LedgerEntry {
            id,
            train,
            val_ndcg20: val,
            runs,
        };
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&ledger_path)
            .with_context(|| format!("opening {}", ledger_path.display()))?;
        writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        f.sync_all()?;
        entries.push(entry);
    }

    // Stable sort keeps enumeration order among ties.
    entries.sort_by(|a, b| b.val_ndcg20.total_cmp(&a.val_ndcg20));
    let path = cfg.out.join("leaderboard.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["rank", "trial", "val_ndcg20", "tau", "weight_decay", "omega", "positives_per_user", "lambda"])?;
    for (rank, e) in entries.iter().enumerate() {
        let d = e.train.distill.as_ref();
        let opt = |v: Option<String>| v.unwrap_or_default();
        w.write_record([
            (rank + 1).to_string(),
            e.id.clone(),
            e.val_ndcg20.to_string(),
            e.train.tau.to_string(),
            e.train.weight_decay.to_string(),
            opt(d.map(|d| d.omega.to_string())),
            opt(d.map(|d| d.positives_per_user.to_string())),
            opt(d.map(|d| d.lambda.to_string())),
        ])?;
    }
    w.flush()?;
    if let Some(best) = entries.first() {
        println!("best trial {} val ndcg@20 {:.4}", best.id, best.val_ndcg20);
    }
    Ok(())
}
