use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use trusttune::config::ExperimentConfig;
use trusttune::experiments::{
    cmd_chain, cmd_cycle, cmd_finetune, cmd_pretrain, cmd_probe_matrix, cmd_report, cmd_stability, cmd_theory,
    summarize, Manifest, Pretrained, COLLAPSE_COLUMNS, FINETUNE_COLUMNS,
};

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: PathBuf,
}

/// A briefly pretrained encoder on disk, shared by every test.
fn fixture() -> &'static Fixture {
    static FIX: OnceLock<Fixture> = OnceLock::new();
    FIX.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml_str("[pretrain]\nsteps = 20\ncorpus_size = 200\n").unwrap();
        cmd_pretrain(&cfg, &dir.path().join("pre")).unwrap();
        let ckpt = dir.path().join("pre/pretrained.ckpt");
        Fixture { _dir: dir, ckpt }
    })
}

fn pre() -> Pretrained {
    Pretrained::load(&fixture().ckpt).unwrap()
}

fn config(extra: &str) -> ExperimentConfig {
    let text = format!(
        "[run]\nseeds = [0, 1]\ncheckpoint = \"{}\"\n[optim]\nmax_updates = 20\n{extra}",
        fixture().ckpt.display()
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn legend_labels(svg: &Path) -> Vec<String> {
    let text = fs::read_to_string(svg).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let legend = doc
        .descendants()
        .find(|n| n.attribute("class") == Some("legend"))
        .expect("legend group");
    legend
        .descendants()
        .filter(|n| n.has_tag_name("text"))
        .filter_map(|n| n.text().map(String::from))
        .collect()
}

fn file_sha(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

#[test]
fn finetune_writes_one_csv_and_a_manifest_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("[method]\nname = \"r3f\"\n");
    let m = cmd_finetune(&cfg, &pre(), dir.path()).unwrap();
    assert!(m.is_ok());
    assert_eq!(m.config_hash, cfg.config_hash());
    assert_eq!(m.xfp, 2 * 20 * 4);
    assert_eq!(m.inputs[0].sha256, file_sha(&fixture().ckpt));
    Manifest::load(dir.path()).unwrap().verify(dir.path()).unwrap();

    for s in [0, 1] {
        let seed = Manifest::load_file(&dir.path().join(format!("seeds/seed_{s}.json"))).unwrap();
        assert_eq!(seed.seed, Some(s));
        assert_eq!(seed.xfp, 20 * 4);
        seed.verify(dir.path()).unwrap();
        assert!(dir.path().join(format!("seeds/seed_{s}.ckpt")).exists());
    }
    let (header, rows) = csv_rows(&dir.path().join("finetune.csv"));
    assert_eq!(header, FINETUNE_COLUMNS);
    let seed_rows: Vec<&Vec<String>> = rows.iter().filter(|r| r[3].parse::<u64>().is_ok()).collect();
    let last = seed_rows.iter().rev().find(|r| r[3] == "0").unwrap();
    assert_eq!(last[9], (20 * 4).to_string());
    let labels: Vec<&str> = rows.iter().map(|r| r[3].as_str()).filter(|s| s.parse::<u64>().is_err()).collect();
    assert_eq!(labels, ["max", "median"]);

    fs::write(dir.path().join("finetune.csv"), "tampered\n").unwrap();
    let err = Manifest::load(dir.path()).unwrap().verify(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn reruns_are_byte_identical_with_and_without_concurrency() {
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (d, jobs) in dirs.iter().zip([1, 1, 2]) {
        let mut cfg = config("");
        cfg.run.jobs = jobs;
        cmd_finetune(&cfg, &pre(), d.path()).unwrap();
    }
    for name in ["finetune.csv", "manifest.json", "config.json", "seeds/seed_1.json", "seeds/seed_1.ckpt"] {
        let a = fs::read(dirs[0].path().join(name)).unwrap();
        assert_eq!(a, fs::read(dirs[1].path().join(name)).unwrap(), "{name}");
    }
    // config.json records the worker count; everything derived from training does not.
    for name in ["finetune.csv", "seeds/seed_0.json", "seeds/seed_1.json", "seeds/seed_1.ckpt"] {
        let a = fs::read(dirs[0].path().join(name)).unwrap();
        assert_eq!(a, fs::read(dirs[2].path().join(name)).unwrap(), "{name} with 2 jobs");
    }
    let text = fs::read_to_string(dirs[0].path().join("finetune.csv")).unwrap();
    assert!(!text.contains('\r'));
}

#[test]
fn lambda_grid_runs_each_point_in_its_own_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("[method]\nname = \"r3f\"\nlambda_grid = [0.1, 1.0]\n");
    let m = cmd_finetune(&cfg, &pre(), dir.path()).unwrap();
    assert_eq!(m.command, "finetune-grid");
    for sub in ["lambda_0.1", "lambda_1"] {
        let child = Manifest::load(&dir.path().join(sub)).unwrap();
        child.verify(&dir.path().join(sub)).unwrap();
        assert!(m.artifacts.iter().any(|a| a.path == format!("{sub}/manifest.json")));
    }
}

#[test]
fn stability_orders_its_statistics_and_plots_every_method() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("[task]\nnames = [\"keyword_src\", \"parity\"]\n[method]\nmethods = [\"standard\", \"r4f\"]\n");
    cmd_stability(&cfg, &pre(), dir.path()).unwrap();
    let (header, rows) = csv_rows(&dir.path().join("stability.csv"));
    assert_eq!(header, ["config_hash", "task", "method", "runs", "failed", "min", "median", "max", "stdev"]);
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let v: Vec<f64> = r[5..9].iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[0] <= v[1] && v[1] <= v[2] && v[3] >= 0.0, "{r:?}");
    }
    for task in ["keyword_src", "parity"] {
        let labels = legend_labels(&dir.path().join(format!("stability_{task}.svg")));
        for method in ["standard", "r4f"] {
            assert!(labels.iter().any(|l| l.contains(method)), "{task}: {labels:?}");
        }
    }
    let mut one = config("");
    one.run.seeds = vec![0];
    assert_eq!(cmd_stability(&one, &pre(), dir.path()).unwrap_err().exit_code(), 2);
}

#[test]
fn summary_statistics() {
    let s = summarize(&[0.7; 5]).unwrap();
    assert_eq!((s.min, s.median, s.max, s.stdev), (0.7, 0.7, 0.7, 0.0));
    let s = summarize(&[3.0, 1.0, 2.0, 10.0]).unwrap();
    assert_eq!((s.min, s.median, s.max), (1.0, 2.5, 10.0));
    assert!(summarize(&[]).is_none());
}

#[test]
fn report_is_a_method_by_task_table() {
    let base = tempfile::tempdir().unwrap();
    let a = base.path().join("std_keyword");
    let b = base.path().join("r3f_parity");
    cmd_finetune(&config(""), &pre(), &a).unwrap();
    cmd_finetune(&config("[method]\nname = \"r3f\"\n[task]\nname = \"parity\"\n"), &pre(), &b).unwrap();

    let out1 = base.path().join("report1");
    let cells = cmd_report(std::slice::from_ref(&a), &out1).unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0].seeds, 2);

    let out2 = base.path().join("report2");
    let out3 = base.path().join("report3");
    let cells = cmd_report(&[a.clone(), b.clone()], &out2).unwrap();
    cmd_report(&[b.clone(), a.clone()], &out3).unwrap();
    assert_eq!(cells.len(), 2);
    assert!(cells.iter().all(|c| c.max >= c.median));
    for name in ["report.csv", "report_cells.csv", "report.svg"] {
        assert_eq!(fs::read(out2.join(name)).unwrap(), fs::read(out3.join(name)).unwrap(), "{name}");
    }
    let (header, rows) = csv_rows(&out2.join("report.csv"));
    assert_eq!(header, ["method", "max:keyword_src", "max:parity", "median:keyword_src", "median:parity"]);
    assert_eq!(rows.len(), 2);
    Manifest::load(&out2).unwrap().verify(&out2).unwrap();

    let c = base.path().join("std_keyword_other_lr");
    cmd_finetune(&config("peak_lr = 1e-3\n"), &pre(), &c).unwrap();
    let err = cmd_report(&[a, c], &base.path().join("report4")).unwrap_err();
    assert!(err.to_string().contains("conflicting config hashes"), "{err}");
}

#[test]
fn collapse_commands_emit_one_row_per_probe() {
    let base = tempfile::tempdir().unwrap();
    let before = file_sha(&fixture().ckpt);
    let extra = "[task]\nchain = [\"order\", \"majority\"]\ncycle = [\"keyword_src\", \"parity\"]\n\
                 probe_tasks = [\"majority\", \"order\", \"parity\"]\n[method]\nmethods = [\"standard\", \"r3f\"]\n\
                 [probe]\nepochs = 2\n";
    let cfg = config(extra);

    cmd_chain(&cfg, &pre(), &base.path().join("chain")).unwrap();
    let (header, rows) = csv_rows(&base.path().join("chain/chain.csv"));
    assert_eq!(header, COLLAPSE_COLUMNS);
    assert_eq!(rows.len(), 2 * 2 * 3);
    assert!(rows.iter().all(|r| r[4] == "keyword_src"));

    cmd_cycle(&cfg, &pre(), &base.path().join("cycle")).unwrap();
    let (_, rows) = csv_rows(&base.path().join("cycle/cycle.csv"));
    assert_eq!(rows.len(), 2 * 2 * 2 * 2);

    cmd_probe_matrix(&cfg, &pre(), &base.path().join("pm")).unwrap();
    let (_, rows) = csv_rows(&base.path().join("pm/probe_matrix.csv"));
    assert_eq!(rows.len(), (2 + 1) * 2 * 3);
    assert_eq!(rows.iter().filter(|r| r[1] == "none" && r[3] == "none").count(), 2 * 3);
    let labels = legend_labels(&base.path().join("pm/probe_matrix.svg"));
    for m in ["none", "standard", "r3f"] {
        assert!(labels.iter().any(|l| l.contains(m)), "{labels:?}");
    }
    for d in ["chain", "cycle", "pm"] {
        Manifest::load(&base.path().join(d)).unwrap().verify(&base.path().join(d)).unwrap();
    }
    assert_eq!(file_sha(&fixture().ckpt), before);
}

#[test]
fn unknown_tasks_and_mismatched_encoders_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("[task]\nname = \"sentiment\"\n");
    assert_eq!(cmd_finetune(&cfg, &pre(), dir.path()).unwrap_err().exit_code(), 2);
    let mut cfg = config("");
    cfg.model.encoder.pooling = trusttune::model::Pooling::Mean;
    assert_eq!(cmd_finetune(&cfg, &pre(), dir.path()).unwrap_err().exit_code(), 2);
}

#[test]
fn theory_rejects_zero_trials_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let bad = ExperimentConfig::from_toml_str("[theory]\ntrials = 0\n");
    let err = bad.and_then(|c| cmd_theory(&c, dir.path()).map(|_| ())).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    let cfg = ExperimentConfig::from_toml_str("[theory]\ntrials = 20\n").unwrap();
    cmd_theory(&cfg, &dir.path().join("a")).unwrap();
    cmd_theory(&cfg, &dir.path().join("b")).unwrap();
    let a = fs::read(dir.path().join("a/theory.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/theory.csv")).unwrap());
    let (_, rows) = csv_rows(&dir.path().join("a/theory.csv"));
    assert!(rows.len() >= 20);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trusttune"))
}

#[test]
fn cli_creates_the_output_directory_and_maps_errors_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("theory.toml");
    fs::write(&cfg_path, "[theory]\ntrials = 10\n").unwrap();
    let out = dir.path().join("nested/theory");
    let status = cli()
        .args(["theory", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out)
        .env("RUST_LOG", "error")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("theory.csv").exists() && out.join("manifest.json").exists());

    fs::write(&cfg_path, "[theory]\ntrails = 10\n").unwrap();
    let res = cli().args(["theory", "--config"]).arg(&cfg_path).arg("--out").arg(&out).output().unwrap();
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("trails"));

    let res = cli()
        .args(["finetune", "--out"])
        .arg(dir.path().join("ft"))
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}
