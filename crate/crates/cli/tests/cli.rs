use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use skinbias_core::synthetic::{write_cohort, CohortSpec};

fn skinbias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skinbias"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.conf");
    fs::write(
        &path,
        "[paths]\nmetadata = cohort/metadata.csv\nimages = cohort/images\nmasks = cohort/masks\noutput = out\n\
         [run]\nseed = 3\nratios = 0.5\nreps = 1\ntestsets = 1\nper_category = 4\nworkers = 2\n\
         [lr]\nc_grid = 0.1, 1\nfolds = 3\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(skinbias(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(skinbias(&["all", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(skinbias(&[]).status.code(), Some(2));
    let help = skinbias(&["all", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.conf");
    fs::write(&bad, "[run]\nsed = 4\n").unwrap();
    assert_eq!(skinbias(&["all", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn help_lists_config_keys() {
    let out = skinbias(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["[paths]", "c_grid", "per_category", "SKINBIAS_OUTPUT"] {
        assert!(text.contains(key), "{key} missing from --help");
    }
}

#[test]
fn missing_inputs_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = skinbias(&["extract", "--metadata", tmp.path().join("nope.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn full_run_then_external_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    write_cohort(&tmp.path().join("cohort"), &CohortSpec::small(10, 21)).unwrap();
    let conf = write_config(tmp.path());

    let audit = skinbias(&["audit", "--config", &conf]);
    assert_eq!(audit.status.code(), Some(0), "{}", String::from_utf8_lossy(&audit.stderr));

    let all = skinbias(&["all", "--config", &conf]);
    assert_eq!(all.status.code(), Some(0), "{}", String::from_utf8_lossy(&all.stderr));
    let out = tmp.path().join("out");
    let pred = out.join("predictions/LR/0_0.50_1.csv");
    assert!(pred.exists());

    // the same file relabelled as another model, dropped in from outside
    let ext = tmp.path().join("external");
    fs::create_dir_all(&ext).unwrap();
    let text = fs::read_to_string(&pred).unwrap().replace(",LR,", ",CNN,");
    fs::write(ext.join("0_0.50_1.csv"), text).unwrap();
    let eval = skinbias(&["evaluate", "--config", &conf, "--predictions", ext.to_str().unwrap()]);
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lr: Vec<&str> = metrics.lines().filter(|l| l.starts_with("LR,")).collect();
    let cnn: Vec<&str> = metrics.lines().filter(|l| l.starts_with("CNN,")).collect();
    assert_eq!(lr.len(), 2);
    assert_eq!(cnn.len(), 2);
    for (a, b) in lr.iter().zip(&cnn) {
        assert_eq!(a[3..], b[4..]);
    }
    assert_eq!(skinbias(&["stats", "--config", &conf]).status.code(), Some(0));
    assert_eq!(skinbias(&["report", "--config", &conf]).status.code(), Some(0));
    assert!(out.join("plots/CNN_male_auroc.svg").exists());
}
