use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::baselines::{published, BaselineConstants, MethodNumbers, PUBLISHED_KEYS};
use super::commands::{RunInfo, ALL_ONES_JSON, BI_CSV, BLOCK_TABLE_CSV, EXPERIMENT_JSON, HISTORY_CSV, RUN_INFO_JSON};
use super::config::RunConfig;
use super::plot;
use crate::error::{Error, Result};
use crate::trainer::ExperimentRecord;

/// Spearman rank correlation with average ranks for ties. `None` when
/// fewer than two points or one side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Matches a dataset name such as "Food-101" to a built-in baseline key.
pub fn baseline_key(dataset: &str) -> Option<&'static str> {
    let norm: String = dataset.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
    PUBLISHED_KEYS.iter().copied().find(|k| norm == *k)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockRow {
    pub block: usize,
    pub bi: Option<f64>,
    pub train_ba: Option<f64>,
    pub test_ba: Option<f64>,
}

pub fn read_block_table(path: &Path) -> Result<Vec<BlockRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let expected = ["block", "BI", "train_BA", "test_BA"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Format(format!("{}: expected columns {expected:?}", path.display())));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Format(format!("bad number {s:?} in {}", path.display())))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(BlockRow {
            block: rec[0].parse().map_err(|_| Error::Format(format!("bad block id in {}", path.display())))?,
            bi: opt(&rec[1])?,
            train_ba: opt(&rec[2])?,
            test_ba: opt(&rec[3])?,
        });
    }
    Ok(rows)
}

struct RunView {
    name: String,
    config: RunConfig,
    hash: String,
    baseline: Option<BaselineConstants>,
    record: Option<ExperimentRecord>,
    all_ones: Option<ExperimentRecord>,
    info: Option<RunInfo>,
    blocks: Vec<BlockRow>,
}

fn read_opt<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// `dir` itself and its immediate subdirectories that hold a run config,
/// sorted by name.
fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::NoRuns(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    if dir.join("config.toml").exists() {
        out.push(dir.to_path_buf());
    }
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("config.toml").exists())
        .collect();
    subs.sort();
    out.extend(subs);
    Ok(out)
}

fn load_run(root: &Path, dir: &Path) -> Result<RunView> {
    let config = RunConfig::load(&dir.join("config.toml"))?;
    let hash = config.config_hash()?;
    let baseline = match &config.baseline_constants {
        Some(b) => Some(b.resolve()?),
        None => baseline_key(&config.dataset.name).and_then(published),
    };
    let name = match dir.strip_prefix(root) {
        Ok(p) if p.as_os_str().is_empty() => ".".to_string(),
        Ok(p) => p.display().to_string(),
        Err(_) => dir.display().to_string(),
    };
    let table = dir.join(BLOCK_TABLE_CSV);
    Ok(RunView {
        name,
        hash,
        baseline,
        record: read_opt(&dir.join(EXPERIMENT_JSON))?,
        all_ones: read_opt(&dir.join(ALL_ONES_JSON))?,
        info: read_opt(&dir.join(RUN_INFO_JSON))?,
        blocks: if table.exists() { read_block_table(&table)? } else { Vec::new() },
        config,
    })
}

fn pct(measured: f64, reference: f64) -> String {
    if reference == 0.0 {
        return "n/a".into();
    }
    format!("{:+.1}%", 100.0 * (measured - reference) / reference)
}

fn measured_row(label: &str, r: &ExperimentRecord) -> MethodNumbers {
    MethodNumbers {
        label: label.into(),
        runtime_s: r.selection_runtime,
        training_time_s: r.training_time,
        evaluation_time_ms: r.evaluation_time,
        accuracy: r.accuracy,
        trainable_params: r.trainable_params as u64,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutput {
    pub markdown: PathBuf,
    pub csv: PathBuf,
    pub runs: usize,
    pub missing: Vec<String>,
}

/// Consolidated comparison of every run under `dir` against the published
/// baselines. Writes `report.md` and `report.csv`; output depends only on
/// the files read.
pub fn cmd_report(dir: &Path) -> Result<ReportOutput> {
    let dirs = run_dirs(dir)?;
    if dirs.is_empty() {
        return Err(Error::NoRuns(dir.to_path_buf()));
    }
    let runs = dirs.iter().map(|d| load_run(dir, d)).collect::<Result<Vec<_>>>()?;

    let mut missing = Vec::new();
    for r in &runs {
        if r.record.is_none() {
            missing.push(format!("{}: no {EXPERIMENT_JSON} (run-ga not completed)", r.name));
        }
        if r.blocks.is_empty() {
            missing.push(format!("{}: no {BLOCK_TABLE_CSV} (block-importance / block-accuracy not run)", r.name));
        }
    }
    for key in PUBLISHED_KEYS {
        let covered = runs.iter().any(|r| baseline_key(&r.config.dataset.name) == Some(key));
        if !covered {
            missing.push(format!("no run for published dataset {key}"));
        }
    }

    let mut md = String::new();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "run",
        "dataset",
        "method",
        "selection_runtime_s",
        "training_time_s",
        "evaluation_time_ms",
        "accuracy",
        "trainable_params",
        "config_hash",
        "seed",
    ])?;
    let _ = writeln!(md, "# Block selection report\n");
    for r in &runs {
        let seed = r.config.train.seed;
        let _ = writeln!(md, "## {} ({})\n", r.config.dataset.name, r.name);
        let _ = writeln!(md, "- config_hash: `{}`", r.hash);
        let _ = writeln!(md, "- seed: {seed}");
        if let Some(info) = &r.info {
            let _ = writeln!(md, "- hardware: {}", info.hardware);
            let _ = writeln!(
                md,
                "- training time covers {} epochs; {} generations, {} distinct genotypes evaluated",
                info.training_epochs, info.generations_run, info.fitness_evaluations
            );
        }
        let _ = writeln!(md);

        let mut rows: Vec<(MethodNumbers, Option<String>)> = Vec::new();
        if let Some(rec) = &r.record {
            rows.push((measured_row("measured BlockSelect", rec), Some(rec.genotype.to_string())));
        }
        if let Some(rec) = &r.all_ones {
            rows.push((measured_row("measured all blocks", rec), Some(rec.genotype.to_string())));
        }
        if let Some(b) = &r.baseline {
            rows.push((b.layer_select.clone(), None));
            rows.push((b.block_select.clone(), None));
        }
        if rows.is_empty() {
            let _ = writeln!(md, "_no results yet_\n");
        } else {
            let _ = writeln!(
                md,
                "| method | runtime (s) | training time (s) | eval (ms/batch) | accuracy | trainable params | genotype |"
            );
            let _ = writeln!(md, "|---|---|---|---|---|---|---|");
            for (m, g) in &rows {
                let _ = writeln!(
                    md,
                    "| {} | {:.1} | {:.1} | {:.2} | {:.4} | {} | {} |",
                    m.label,
                    m.runtime_s,
                    m.training_time_s,
                    m.evaluation_time_ms,
                    m.accuracy,
                    m.trainable_params,
                    g.as_deref().unwrap_or("")
                );
                w.write_record([
                    r.name.clone(),
                    r.config.dataset.name.clone(),
                    m.label.clone(),
                    format!("{:.3}", m.runtime_s),
                    format!("{:.3}", m.training_time_s),
                    format!("{:.3}", m.evaluation_time_ms),
                    format!("{:.6}", m.accuracy),
                    m.trainable_params.to_string(),
                    r.hash.clone(),
                    seed.to_string(),
                ])?;
            }
            let _ = writeln!(md);
        }
        if let (Some(rec), Some(b)) = (&r.record, &r.baseline) {
            let m = measured_row("", rec);
            let _ = writeln!(md, "Measured BlockSelect relative to published numbers:\n");
            let _ = writeln!(md, "| reference | runtime | training time | eval | accuracy | trainable params |");
            let _ = writeln!(md, "|---|---|---|---|---|---|");
            for p in [&b.layer_select, &b.block_select] {
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | {} | {} |",
                    p.label,
                    pct(m.runtime_s, p.runtime_s),
                    pct(m.training_time_s, p.training_time_s),
                    pct(m.evaluation_time_ms, p.evaluation_time_ms),
                    pct(m.accuracy, p.accuracy),
                    pct(m.trainable_params as f64, p.trainable_params as f64)
                );
            }
            let _ = writeln!(md, "\nTimes are wall-clock on different hardware and only indicative.\n");
        }
        if !r.blocks.is_empty() {
            let published_blocks = r.baseline.as_ref().map(|b| b.blocks.as_slice()).unwrap_or(&[]);
            let _ = writeln!(md, "| block | BI | train BA | test BA | published BI | published test BA |");
            let _ = writeln!(md, "|---|---|---|---|---|---|");
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
            for row in &r.blocks {
                let p = published_blocks.iter().find(|p| p.block == row.block);
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | {} | {} |",
                    row.block,
                    f(row.bi),
                    f(row.train_ba),
                    f(row.test_ba),
                    f(p.map(|p| p.bi)),
                    f(p.map(|p| p.test_ba))
                );
            }
            let _ = writeln!(md);
            let bi: Vec<f64> = r.blocks.iter().filter_map(|b| b.bi).collect();
            if bi.len() == r.blocks.len() && published_blocks.len() == bi.len() {
                let pb: Vec<f64> = r
                    .blocks
                    .iter()
                    .map(|row| published_blocks.iter().find(|p| p.block == row.block).map_or(f64::NAN, |p| p.bi))
                    .collect();
                match spearman(&bi, &pb) {
                    Some(rho) => {
                        let _ = writeln!(md, "Spearman rank correlation of BI with published BI: {rho:.3}\n");
                    }
                    None => {
                        let _ = writeln!(md, "Spearman rank correlation of BI with published BI: undefined\n");
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        let _ = writeln!(md, "## Missing\n");
        for m in &missing {
            let _ = writeln!(md, "- {m}");
        }
        let _ = writeln!(md);
    }
    let md_path = dir.join("report.md");
    let csv_path = dir.join("report.csv");
    fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&csv_path, bytes).map_err(|e| Error::io(&csv_path, e))?;
    Ok(ReportOutput {
        markdown: md_path,
        csv: csv_path,
        runs: runs.len(),
        missing,
    })
}

fn read_columns(path: &Path, columns: &[&str]) -> Result<Vec<Vec<Option<f64>>>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| Error::Format(format!("{}: missing column {c}", path.display())))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::new(); columns.len()];
    for rec in r.records() {
        let rec = rec?;
        for (k, &i) in idx.iter().enumerate() {
            out[k].push(rec.get(i).and_then(|s| s.parse().ok()));
        }
    }
    Ok(out)
}

fn points(xs: &[Option<f64>], ys: &[Option<f64>]) -> Vec<(f64, f64)> {
    xs.iter().zip(ys).filter_map(|(x, y)| Some(((*x)?, (*y)?))).collect()
}

/// Renders an SVG next to every known CSV in `dir`. Returns the files
/// written.
pub fn render_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |name: &str, svg: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    let history = dir.join(HISTORY_CSV);
    if history.exists() {
        let c = read_columns(&history, &["generation", "best_fitness", "mean_fitness"])?;
        emit(
            "ga_history.svg",
            plot::line_chart(
                "GA fitness",
                "generation",
                "fitness",
                &[("best", points(&c[0], &c[1])), ("mean", points(&c[0], &c[2]))],
            ),
        )?;
    }
    let metrics = dir.join("metrics_best.csv");
    if metrics.exists() {
        let c = read_columns(&metrics, &["epoch", "train_acc", "val_acc"])?;
        emit(
            "training_curves.svg",
            plot::line_chart(
                "Fine-tuning of the selected blocks",
                "epoch",
                "accuracy",
                &[("train", points(&c[0], &c[1])), ("validation", points(&c[0], &c[2]))],
            ),
        )?;
    }
    let bi = dir.join(BI_CSV);
    if bi.exists() {
        let c = read_columns(&bi, &["block", "BI"])?;
        let cats: Vec<String> = c[0].iter().map(|b| b.map(|b| format!("{b}")).unwrap_or_default()).collect();
        let vals: Vec<f64> = c[1].iter().map(|v| v.unwrap_or(f64::NAN)).collect();
        emit("block_importance.svg", plot::bar_chart("Block importance", "block", "BI", &cats, &[("BI", vals)]))?;
    }
    let table = dir.join(BLOCK_TABLE_CSV);
    if table.exists() {
        let rows = read_block_table(&table)?;
        if rows.iter().any(|r| r.test_ba.is_some()) {
            let cats: Vec<String> = rows.iter().map(|r| r.block.to_string()).collect();
            let nan = |v: Option<f64>| v.unwrap_or(f64::NAN);
            emit(
                "block_accuracy.svg",
                plot::bar_chart(
                    "Block accuracy",
                    "block",
                    "accuracy",
                    &cats,
                    &[
                        ("train BA", rows.iter().map(|r| nan(r.train_ba)).collect()),
                        ("test BA", rows.iter().map(|r| nan(r.test_ba)).collect()),
                    ],
                ),
            )?;
        }
    }
    Ok(written)
}

/// Re-renders charts for `dir` and every run directory below it.
pub fn cmd_plot(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = run_dirs(dir)?;
    if !dirs.iter().any(|d| d == dir) {
        dirs.insert(0, dir.to_path_buf());
    }
    let mut written = Vec::new();
    for d in dirs {
        written.extend(render_dir(&d)?);
    }
    if written.is_empty() {
        return Err(Error::NoRuns(dir.to_path_buf()));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        // 1 - 6*sum(d^2)/(n(n^2-1)) with d = (0, 1, -1, 0)
        let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((rho - 0.8).abs() < 1e-12);
    }

    #[test]
    fn dataset_keys() {
        assert_eq!(baseline_key("Food-101"), Some("food101"));
        assert_eq!(baseline_key("CIFAR-100"), Some("cifar100"));
        assert_eq!(baseline_key("MangoLeafBD"), Some("mangoleafbd"));
        assert_eq!(baseline_key("synthetic-target"), None);
    }

    #[test]
    fn empty_dir_has_no_runs() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_report(d.path()), Err(Error::NoRuns(_))));
    }
}
