use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{cache_dir, RunConfig};
use super::report::render_dir;
use crate::data::{load_splits, stratified_draws, stratified_subsample, DatasetSplits, Split};
use crate::error::{Error, Result};
use crate::ga::{read_history_csv, write_history_csv, GaRun, GenerationStats, Genotype};
use crate::model::{build, Architecture, BlockedModel, Tap};
use crate::otdd::{importance, BlockImportanceReport, ImportanceEntry};
use crate::trainer::{block_accuracy, evaluate, fine_tune, BlockAccuracy, ExperimentRecord, FitnessSplit, GaFitness, MetricsLog, TrainConfig};

pub const LOCK_FILE: &str = ".blocksel.lock";
pub const CHECKPOINT: &str = "ga_checkpoint.json";
pub const HISTORY_CSV: &str = "ga_history.csv";
pub const EXPERIMENT_JSON: &str = "experiment.json";
pub const ALL_ONES_JSON: &str = "experiment_all_ones.json";
pub const RUN_INFO_JSON: &str = "run_info.json";
pub const BI_JSON: &str = "block_importance.json";
pub const BI_CSV: &str = "block_importance.csv";
pub const BA_JSON: &str = "block_accuracy.json";
pub const BLOCK_TABLE_CSV: &str = "block_table.csv";
pub const ARTIFACTS_JSON: &str = "artifacts.json";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => {
                fs::write(&path, std::process::id().to_string()).map_err(|e| Error::io(&path, e))?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Short description of the machine, stored next to timings.
pub fn hardware_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mode = if crate::par::is_enabled() { "parallel" } else { "sequential" };
    format!("{}-{} cpu, {cpus} threads, {mode}", std::env::consts::OS, std::env::consts::ARCH)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Provenance for files whose format has no room for it (CSV, SVG).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactIndex {
    pub files: BTreeMap<String, ArtifactEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub config_hash: String,
    pub seed: u64,
    pub sha256: String,
}

fn register_artifacts(dir: &Path, names: &[&str], config_hash: &str, seed: u64) -> Result<()> {
    let path = dir.join(ARTIFACTS_JSON);
    let mut index: ArtifactIndex = if path.exists() { read_json(&path)? } else { ArtifactIndex::default() };
    for name in names {
        let file = dir.join(name);
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        index.files.insert(
            name.to_string(),
            ArtifactEntry {
                config_hash: config_hash.into(),
                seed,
                sha256: hex::encode(Sha256::digest(&bytes)),
            },
        );
    }
    write_json(&path, &index)
}

fn write_config(cfg: &RunConfig) -> Result<String> {
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    write_atomic(&dir.join("config.canonical.json"), cfg.hash_preimage()?.as_bytes())?;
    cfg.config_hash()
}

/// The backbone as pre-trained on the source domain.
///
/// Explicit weights are loaded when given. Without weights the toy network
/// is pre-trained on the source dataset once and cached; the reference
/// network requires exported weights in the cache.
pub fn pretrained_model(cfg: &RunConfig) -> Result<BlockedModel> {
    let cache = cache_dir(cfg);
    let hw = cfg.dataset.image_size;
    let weights = cfg.model.weights.as_ref().map(|w| if w.is_absolute() { w.clone() } else { cache.join(w) });
    match (cfg.model.arch, weights) {
        (arch, Some(path)) => {
            let mut m = build(arch, source_classes(cfg), hw, cfg.train.seed);
            let report = m.load_weights(&path)?;
            log::info!(
                "loaded {} tensors from {} ({} head tensors re-initialised)",
                report.loaded,
                path.display(),
                report.skipped.len()
            );
            Ok(m)
        }
        (Architecture::EfficientNetB0, None) => {
            let path = cache.join("efficientnet_b0.safetensors");
            if !path.exists() {
                return Err(Error::Config(format!(
                    "no pre-trained weights at {}; export them with scripts/export_keras_weights.py or set model.weights",
                    path.display()
                )));
            }
            let mut m = build(Architecture::EfficientNetB0, 1000, hw, cfg.train.seed);
            m.load_weights(&path)?;
            Ok(m)
        }
        (Architecture::Toy, None) => {
            let source = cfg
                .source
                .as_ref()
                .ok_or_else(|| Error::Config("toy pre-training needs a [source] dataset".into()))?;
            let key = serde_json::to_string(&(source, &cfg.model.pretrain_epochs, &cfg.model.pretrain_learning_rate, cfg.train.seed))?;
            let digest = hex::encode(Sha256::digest(key.as_bytes()));
            let path = cache.join(format!("toy-{}.safetensors", &digest[..16]));
            let mut m = build(Architecture::Toy, source.num_classes, source.image_size, cfg.train.seed);
            if path.exists() {
                m.load_weights(&path)?;
                return Ok(m);
            }
            let splits = load_splits(source, cfg.train.seed)?;
            m.set_stem_trainable(true);
            m.apply_genotype(&Genotype::ones(m.num_blocks()))?;
            let pcfg = TrainConfig {
                learning_rate: cfg.model.pretrain_learning_rate,
                ..cfg.train.clone()
            };
            let out = fine_tune(&mut m, &splits.train, &splits.val, &pcfg, cfg.model.pretrain_epochs, None)?;
            log::info!(
                "pre-trained toy backbone on {}: val accuracy {:.3}",
                source.name,
                out.curves.last().map(|c| c.val_acc).unwrap_or(f64::NAN)
            );
            fs::create_dir_all(&cache).map_err(|e| Error::io(&cache, e))?;
            m.save_weights(&path)?;
            let mut fresh = build(Architecture::Toy, source.num_classes, source.image_size, cfg.train.seed);
            fresh.load_weights(&path)?;
            Ok(fresh)
        }
    }
}

fn source_classes(cfg: &RunConfig) -> usize {
    cfg.source.as_ref().map(|s| s.num_classes).unwrap_or(cfg.dataset.num_classes)
}

/// The pre-trained backbone with a fresh head for the target classes.
pub fn target_prototype(cfg: &RunConfig) -> Result<BlockedModel> {
    let mut m = pretrained_model(cfg)?;
    m.reset_head(cfg.dataset.num_classes, cfg.train.seed);
    m.set_stem_trainable(cfg.model.stem_trainable);
    Ok(m)
}

#[derive(Clone, Debug, Default)]
pub struct RunGaOptions {
    /// Also fine-tune and evaluate the all-ones genotype for comparison.
    pub all_ones_baseline: bool,
    /// Return after this many generations in this call, leaving the
    /// checkpoint for a later resume.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Checkpoint {
    config_hash: String,
    selection_runtime: f64,
    run: GaRun,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub hardware: String,
    /// What `training_time` covers.
    pub training_epochs: usize,
    pub generations_run: usize,
    pub fitness_evaluations: usize,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub record: ExperimentRecord,
    pub all_ones: Option<ExperimentRecord>,
    pub history: Vec<GenerationStats>,
}

#[derive(Clone, Debug)]
pub enum RunGaOutcome {
    Completed(Box<RunSummary>),
    Interrupted { generation: usize },
}

fn final_train(
    proto: &BlockedModel,
    g: &Genotype,
    splits: &DatasetSplits,
    cfg: &RunConfig,
    metrics: &Path,
    selection_runtime: f64,
    config_hash: &str,
) -> Result<ExperimentRecord> {
    let mut model = proto.clone().with_genotype(g)?;
    let mut log = MetricsLog::create(metrics)?;
    let out = fine_tune(&mut model, &splits.train, &splits.val, &cfg.train, cfg.train.epochs, Some(&mut log))?;
    let eval = evaluate(&mut model, &splits.test, cfg.train.batch_size)?;
    let record = ExperimentRecord {
        selection_runtime,
        training_time: out.training_time,
        evaluation_time: eval.ms_per_batch,
        accuracy: eval.accuracy,
        trainable_params: model.count_trainable_params(),
        genotype: g.clone(),
        config_hash: config_hash.into(),
        seed: cfg.train.seed,
    };
    record.validate()?;
    Ok(record)
}

/// Genetic selection, final fine-tune of the best genotype, evaluation.
///
/// A checkpoint is written after every generation; calling again with the
/// same config resumes from it.
pub fn cmd_run_ga(cfg: &RunConfig, opts: &RunGaOptions) -> Result<RunGaOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let _lock = RunLock::acquire(&dir)?;
    let hash = write_config(cfg)?;
    let seed = cfg.train.seed;
    let splits = load_splits(&cfg.dataset, seed)?;
    for (split, ds) in [(Split::Train, &splits.train), (Split::Val, &splits.val), (Split::Test, &splits.test)] {
        write_json(&dir.join(format!("manifest_{}.json", split_name(split))), &ds.manifest(split, seed))?;
    }
    let proto = target_prototype(cfg)?;
    let b = proto.num_blocks();
    let eval_split = match cfg.train.fitness_split {
        FitnessSplit::Val => &splits.val,
        FitnessSplit::Test => &splits.test,
    };
    let fitness = GaFitness::new(|| Ok(proto.clone()), &splits.train, eval_split, cfg.train.clone(), &hash);

    let ckpt_path = dir.join(CHECKPOINT);
    let started = Instant::now();
    let (mut run, prior) = if ckpt_path.exists() {
        let c: Checkpoint = read_json(&ckpt_path)?;
        if c.config_hash != hash {
            return Err(Error::Config(format!(
                "{} belongs to a different config ({}); remove it or use another output_dir",
                ckpt_path.display(),
                c.config_hash
            )));
        }
        log::info!("resuming GA at generation {}", c.run.generation());
        (c.run, c.selection_runtime)
    } else {
        (GaRun::start(cfg.ga.clone(), b, &fitness)?, 0.0)
    };
    let save = |run: &GaRun, elapsed: f64| -> Result<()> {
        write_json(
            &ckpt_path,
            &Checkpoint {
                config_hash: hash.clone(),
                selection_runtime: elapsed,
                run: run.clone(),
            },
        )?;
        let mut csv = Vec::new();
        write_history_csv(&run.history, &mut csv)?;
        write_atomic(&dir.join(HISTORY_CSV), &csv)
    };
    save(&run, prior + started.elapsed().as_secs_f64())?;
    let mut stepped = 0;
    while !run.is_finished() {
        if opts.stop_after.is_some_and(|k| stepped >= k) {
            return Ok(RunGaOutcome::Interrupted {
                generation: run.generation(),
            });
        }
        let s = run.step(&fitness)?;
        log::info!(
            "generation {}: best {:.4} mean {:.4} ({})",
            s.generation,
            s.best_fitness,
            s.mean_fitness,
            s.best_genotype
        );
        stepped += 1;
        save(&run, prior + started.elapsed().as_secs_f64())?;
    }
    let selection_runtime = prior + started.elapsed().as_secs_f64();
    let best = run.best.genotype().clone();
    write_atomic(&dir.join("best_genotype.txt"), format!("{best}\n").as_bytes())?;

    let record = final_train(&proto, &best, &splits, cfg, &dir.join("metrics_best.csv"), selection_runtime, &hash)?;
    write_json(&dir.join(EXPERIMENT_JSON), &record)?;
    let mut produced = vec![HISTORY_CSV, "best_genotype.txt", "metrics_best.csv"];
    let all_ones = if opts.all_ones_baseline {
        let r = final_train(&proto, &Genotype::ones(b), &splits, cfg, &dir.join("metrics_all_ones.csv"), 0.0, &hash)?;
        write_json(&dir.join(ALL_ONES_JSON), &r)?;
        produced.push("metrics_all_ones.csv");
        Some(r)
    } else {
        None
    };
    write_json(
        &dir.join(RUN_INFO_JSON),
        &RunInfo {
            dataset: cfg.dataset.name.clone(),
            config_hash: hash.clone(),
            seed,
            hardware: hardware_descriptor(),
            training_epochs: cfg.train.epochs,
            generations_run: run.generation(),
            fitness_evaluations: run.cache.len(),
        },
    )?;
    render_dir(&dir)?;
    produced.extend(["ga_history.svg", "training_curves.svg"]);
    register_artifacts(&dir, &produced, &hash, seed)?;
    Ok(RunGaOutcome::Completed(Box::new(RunSummary {
        record,
        all_ones,
        history: run.history.clone(),
    })))
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

#[derive(Clone, Debug, Default)]
pub struct BlockImportanceOptions {
    /// Use a third disjoint resample of the source as the target.
    pub null_target: bool,
}

/// Block importance for every block: activations of two disjoint source
/// samples and one target sample, then the distance ratio per block.
pub fn cmd_block_importance(cfg: &RunConfig, opts: &BlockImportanceOptions) -> Result<BlockImportanceReport> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let _lock = RunLock::acquire(&dir)?;
    let hash = write_config(cfg)?;
    let seed = cfg.train.seed;
    let source_spec = cfg
        .source
        .as_ref()
        .ok_or_else(|| Error::Config("block importance needs a [source] dataset".into()))?;
    let mut model = pretrained_model(cfg)?;
    let b = model.num_blocks();
    let n = cfg.otdd.subsample;
    let source = load_splits(source_spec, seed)?.train;
    let draws = stratified_draws(&source, n, seed, if opts.null_target { 3 } else { 2 })?;
    let (target, target_name) = if opts.null_target {
        (draws[2].clone(), format!("{} (resample)", source_spec.name))
    } else {
        let t = load_splits(&cfg.dataset, seed)?.train;
        (stratified_subsample(&t, n.min(t.len()), seed)?, cfg.dataset.name.clone())
    };
    let taps: Vec<Tap> = (1..=b).map(Tap::Block).collect();
    let batch = cfg.train.batch_size;
    let feats_src = model.extract_activations(&draws[0], &taps, batch)?;
    let feats_prime = model.extract_activations(&draws[1], &taps, batch)?;
    let feats_tgt = model.extract_activations(&target, &taps, batch)?;
    let fdir = dir.join("features");
    fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
    let mut entries = Vec::with_capacity(b);
    for k in 0..b {
        let tag = |fs: &crate::otdd::LabeledFeatureSet, name: &str, draw: u64| {
            fs.clone().with_provenance(k + 1, name, seed.wrapping_add(draw))
        };
        let s = tag(&feats_src[k], &source_spec.name, 0);
        let sp = tag(&feats_prime[k], &source_spec.name, 1);
        let t = tag(&feats_tgt[k], &target_name, if opts.null_target { 2 } else { 0 });
        s.write_dump(&fdir.join(format!("source_b{}.bin", k + 1)))?;
        sp.write_dump(&fdir.join(format!("source_prime_b{}.bin", k + 1)))?;
        t.write_dump(&fdir.join(format!("target_b{}.bin", k + 1)))?;
        let e = importance(&s, &sp, &t, &cfg.otdd).map_err(|e| Error::Contract(format!("block {}: {e}", k + 1)))?;
        log::info!("block {}: BI {:.4} ({:.4} / {:.4})", k + 1, e.bi, e.numerator, e.denominator);
        entries.push(e);
    }
    let report = BlockImportanceReport {
        source: source_spec.name.clone(),
        target: target_name,
        config_hash: hash.clone(),
        seed,
        blocks: entries,
    };
    write_json(&dir.join(BI_JSON), &report)?;
    write_bi_csv(&dir.join(BI_CSV), &report.blocks)?;
    merge_block_table(&dir)?;
    render_dir(&dir)?;
    register_artifacts(&dir, &[BI_CSV, BLOCK_TABLE_CSV, "block_importance.svg"], &hash, seed)?;
    Ok(report)
}

fn write_bi_csv(path: &Path, rows: &[ImportanceEntry]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["block", "BI", "numerator", "denominator", "n_src", "n_tgt", "degenerate"])?;
    for e in rows {
        w.write_record([
            e.block_id.to_string(),
            format!("{:.6}", e.bi),
            format!("{:.6}", e.numerator),
            format!("{:.6}", e.denominator),
            e.n_src.to_string(),
            e.n_tgt.to_string(),
            e.degenerate.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, &bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockAccuracyReport {
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub blocks: Vec<BlockAccuracy>,
}

/// Per-block accuracy with exactly one block trainable, merged with block
/// importance when that has been computed.
pub fn cmd_block_accuracy(cfg: &RunConfig) -> Result<BlockAccuracyReport> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    let _lock = RunLock::acquire(&dir)?;
    let hash = write_config(cfg)?;
    let seed = cfg.train.seed;
    let splits = load_splits(&cfg.dataset, seed)?;
    let proto = target_prototype(cfg)?;
    let factory = || Ok(proto.clone());
    let mut blocks = Vec::new();
    for b in 1..=proto.num_blocks() {
        let r = block_accuracy(b, &factory, &splits.train, &splits.test, &cfg.train)
            .map_err(|e| Error::Contract(format!("block {b}: {e}")))?;
        log::info!("block {b}: train BA {:.4} test BA {:.4}", r.train_acc, r.test_acc);
        blocks.push(r);
    }
    let report = BlockAccuracyReport {
        dataset: cfg.dataset.name.clone(),
        config_hash: hash.clone(),
        seed,
        epochs: cfg.train.block_accuracy_epochs,
        blocks,
    };
    write_json(&dir.join(BA_JSON), &report)?;
    merge_block_table(&dir)?;
    render_dir(&dir)?;
    register_artifacts(&dir, &[BLOCK_TABLE_CSV, "block_accuracy.svg"], &hash, seed)?;
    Ok(report)
}

/// `block,BI,train_BA,test_BA` from whichever of the two reports exist;
/// missing values are left empty.
pub fn merge_block_table(dir: &Path) -> Result<()> {
    let bi: Option<BlockImportanceReport> = dir.join(BI_JSON).exists().then(|| read_json(&dir.join(BI_JSON))).transpose()?;
    let ba: Option<BlockAccuracyReport> = dir.join(BA_JSON).exists().then(|| read_json(&dir.join(BA_JSON))).transpose()?;
    let mut rows: BTreeMap<usize, [String; 3]> = BTreeMap::new();
    for e in bi.iter().flat_map(|r| &r.blocks) {
        rows.entry(e.block_id).or_default()[0] = format!("{:.6}", e.bi);
    }
    for e in ba.iter().flat_map(|r| &r.blocks) {
        let row = rows.entry(e.block_id).or_default();
        row[1] = format!("{:.6}", e.train_acc);
        row[2] = format!("{:.6}", e.test_acc);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["block", "BI", "train_BA", "test_BA"])?;
    for (b, [a, c, d]) in rows {
        w.write_record([b.to_string(), a, c, d])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&dir.join(BLOCK_TABLE_CSV), &bytes)
}

/// Reads a history CSV written by [`cmd_run_ga`].
pub fn read_history(dir: &Path) -> Result<Vec<GenerationStats>> {
    let path = dir.join(HISTORY_CSV);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    read_history_csv(f)
}
