use std::fs;
use std::path::Path;
use std::process::Command;

use blocksel::harness::{
    cmd_block_accuracy, cmd_block_importance, cmd_plot, cmd_report, cmd_run_ga, BlockImportanceOptions, RunConfig,
    RunGaOptions, RunGaOutcome, RunLock,
};
use blocksel::Error;

fn quick_toy(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::toy(dir);
    cfg.ga.generations = 6;
    cfg.train.epochs = 2;
    cfg.train.block_accuracy_epochs = 2;
    cfg.model.pretrain_epochs = 4;
    cfg
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn resumed_run_matches_uninterrupted() {
    blocksel::par::set_enabled(false);
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    std::env::set_var("BLOCKSEL_CACHE", &cache);

    let full = quick_toy(&tmp.path().join("full"));
    let RunGaOutcome::Completed(a) = cmd_run_ga(&full, &RunGaOptions::default()).unwrap() else {
        panic!("uninterrupted run stopped early");
    };

    let split = quick_toy(&tmp.path().join("split"));
    let first = cmd_run_ga(
        &split,
        &RunGaOptions {
            stop_after: Some(3),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(matches!(first, RunGaOutcome::Interrupted { generation: 3 }));
    assert_eq!(read(split.output_dir.join("ga_history.csv")).lines().count(), 4);
    let RunGaOutcome::Completed(b) = cmd_run_ga(&split, &RunGaOptions::default()).unwrap() else {
        panic!("resume did not complete");
    };

    assert_eq!(a.history, b.history);
    assert_eq!(
        read(full.output_dir.join("ga_history.csv")),
        read(split.output_dir.join("ga_history.csv"))
    );
    assert_eq!(a.record.genotype, b.record.genotype);
    assert_eq!(a.record.accuracy, b.record.accuracy);
    assert_eq!(a.record.config_hash, b.record.config_hash);

    // a checkpoint from another config is refused
    let mut other = quick_toy(&split.output_dir);
    other.ga.mutation_rate = 0.2;
    assert!(matches!(cmd_run_ga(&other, &RunGaOptions::default()), Err(Error::Config(_))));

    // lock excludes a second writer
    let lock = RunLock::acquire(&full.output_dir).unwrap();
    assert!(matches!(cmd_run_ga(&full, &RunGaOptions::default()), Err(Error::Locked(_))));
    drop(lock);
    assert!(!full.output_dir.join(".blocksel.lock").exists());

    // block tables, provenance, report
    cmd_block_importance(&full, &BlockImportanceOptions::default()).unwrap();
    let ba = cmd_block_accuracy(&full).unwrap();
    assert!(ba.blocks.iter().all(|b| b.test_acc >= 1.0 / 3.0 - 1e-12), "{ba:?}");
    let table = read(full.output_dir.join("block_table.csv"));
    assert_eq!(table.lines().next(), Some("block,BI,train_BA,test_BA"));
    assert_eq!(table.lines().count(), 4);
    let index: serde_json::Value = serde_json::from_str(&read(full.output_dir.join("artifacts.json"))).unwrap();
    for f in ["ga_history.csv", "block_table.csv", "block_importance.csv", "ga_history.svg"] {
        assert_eq!(index["files"][f]["config_hash"], serde_json::json!(a.record.config_hash), "{f}");
    }
    let exp: serde_json::Value = serde_json::from_str(&read(full.output_dir.join("experiment.json"))).unwrap();
    assert_eq!(exp["seed"], serde_json::json!(0));

    let out = cmd_report(tmp.path()).unwrap();
    assert_eq!(out.runs, 2);
    let first = fs::read(&out.markdown).unwrap();
    let first_csv = fs::read(&out.csv).unwrap();
    cmd_report(tmp.path()).unwrap();
    assert_eq!(first, fs::read(&out.markdown).unwrap());
    assert_eq!(first_csv, fs::read(&out.csv).unwrap());
    assert!(out.missing.iter().any(|m| m.contains("food101")));

    // charts are pure functions of the CSVs
    let svg = fs::read(full.output_dir.join("block_accuracy.svg")).unwrap();
    cmd_plot(tmp.path()).unwrap();
    assert_eq!(svg, fs::read(full.output_dir.join("block_accuracy.svg")).unwrap());
    std::env::remove_var("BLOCKSEL_CACHE");
}

#[test]
fn report_lists_published_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("food");
    fs::create_dir_all(&run).unwrap();
    let mut cfg = RunConfig::toy(&run);
    cfg.dataset.name = "Food-101".into();
    fs::write(run.join("config.toml"), cfg.to_toml().unwrap()).unwrap();
    let out = cmd_report(tmp.path()).unwrap();
    let md = read(&out.markdown);
    assert!(md.contains("| published LayerSelect | 10800.0 | 1860.0 | 42.00 | 0.7700 | 579813 |"), "{md}");
    assert!(out.missing.iter().any(|m| m.contains("run-ga not completed")));
}

#[test]
fn cli_surface() {
    let bin = env!("CARGO_BIN_EXE_blocksel");
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = Command::new(bin).args(["report", "--dir"]).arg(&empty).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no runs found"));

    let out = Command::new(bin).args(["run-ga"]).output().unwrap();
    assert!(!out.status.success());

    let cfg_path = tmp.path().join("bad.toml");
    fs::write(&cfg_path, "output_dir = \"x\"\nbogus = 1\n").unwrap();
    let out = Command::new(bin).args(["run-ga", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(!out.status.success());

    let help = Command::new(bin).arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["run-ga", "block-importance", "block-accuracy", "report", "plot", "--seed", "--toy"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn cli_toy_block_importance() {
    let bin = env!("CARGO_BIN_EXE_blocksel");
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("bi");
    let out = Command::new(bin)
        .args(["--toy", "--seed", "3", "block-importance", "--null-target", "--output-dir"])
        .arg(&dir)
        .env("BLOCKSEL_CACHE", tmp.path().join("cache"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().filter(|l| l.starts_with("block ")).count(), 3);
    assert!(tmp.path().join("cache").read_dir().unwrap().next().is_some());
    let report: serde_json::Value = serde_json::from_str(&read(dir.join("block_importance.json"))).unwrap();
    assert_eq!(report["seed"], serde_json::json!(3));
    assert_eq!(report["blocks"].as_array().unwrap().len(), 3);
    assert!(dir.join("features/source_b1.bin").exists());
    assert!(dir.join("block_importance.svg").exists());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "toml") {
            let cfg = RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            cfg.validate().unwrap();
            if p.file_stem().unwrap() == "toy" {
                let toy = RunConfig::toy("runs/toy");
                assert_eq!(cfg.config_hash().unwrap(), toy.config_hash().unwrap());
            }
            n += 1;
        }
    }
    assert_eq!(n, 4);
}
