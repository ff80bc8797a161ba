use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use uap_sga::attack::{load_uap, save_uap, uap_to_bytes, PerturbationState};
use uap_sga::experiments::{RunManifest, SWEEP_CSV_HEADER};

const CONFIG: &str = "\
# tiny end-to-end run
seeds=0
data.source=synth-digits
data.size=12
data.train_n=300
data.pool_n=200
splits.attack=40
splits.eval=80
train.models=cnn-small,mlp-2
train.epochs=1
attack.models=out/models/cnn-small-s0.uapw
attack.variant=spgd,sga
attack.epochs=2
attack.large_batch=20
attack.small_batch=5
attack.k=2
eval.models=out/models/mlp-2-s0.uapw
sweep.axis=inner-batch
sweep.values=0,5,10
";

fn uap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uap-sga"))
        .args(args)
        .current_dir(dir)
        .env("UAP_WORKERS", "1")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes the config and runs train + attack into `dir/out`.
fn pipeline(dir: &Path) {
    fs::write(dir.join("exp.cfg"), CONFIG).unwrap();
    for cmd in ["train", "attack"] {
        let o = uap(&[cmd, "--config", "exp.cfg", "--out", "out"], dir);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn demo_vanishing_prints_both_update_rules() {
    let dir = tempfile::tempdir().unwrap();
    let o = uap(&["demo-vanishing", "--out", "."], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("[0, 2, 2, 0]"), "{text}");
    assert!(text.contains("[1, 1, 1, 1]"), "{text}");
    assert!(dir.path().join("vanishing.csv").exists());
}

#[test]
fn config_errors_exit_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "seeds=0\n\nattack.epsiIon=0.1\n").unwrap();
    let o = uap(&["attack", "--config", "bad.cfg"], dir.path());
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains(":3") && err.contains("epsiIon"), "{err}");

    fs::write(dir.path().join("bad.cfg"), "attack.epsilon=-1\n").unwrap();
    assert_eq!(code(&uap(&["attack", "--config", "bad.cfg"], dir.path())), 2);
    assert_eq!(code(&uap(&["attack"], dir.path())), 2);
}

#[test]
fn missing_files_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&uap(&["train", "--config", "nope.cfg"], dir.path())), 3);
    fs::write(dir.path().join("idx.cfg"), "data.source=idx\ndata.train_images=none\ndata.train_labels=none\ndata.test_images=none\ndata.test_labels=none\n").unwrap();
    assert_eq!(code(&uap(&["train", "--config", "idx.cfg"], dir.path())), 3);
}

#[test]
fn pipeline_artifacts_eval_and_guards() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root);
    let out = root.join("out");

    let manifest = RunManifest::load(&out.join("attack.json")).unwrap();
    assert_eq!(manifest.runs.len(), 2);
    for r in &manifest.runs {
        assert!(out.join(&r.delta).exists() && out.join(&r.metrics).exists() && out.join(&r.eval).exists());
        let delta = load_uap(&out.join(&r.delta)).unwrap();
        assert!(delta.delta.max_abs() <= delta.epsilon);
        assert!(out.join(&r.delta).with_extension("pgm").exists());
        assert!(r.transfer_fr.is_some());
    }
    let eval = fs::read_to_string(out.join("eval/sga-s0.csv")).unwrap();
    assert!(eval.starts_with("model,fr,clean_acc,n\n"), "{eval}");
    assert!(eval.contains("cnn-small-s0*,") && eval.contains("mlp-2-s0,"), "{eval}");
    let metrics = fs::read_to_string(out.join("metrics/sga-s0.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);

    // a second attack into the same directory needs --force
    let again = uap(&["attack", "--config", "exp.cfg", "--out", "out"], root);
    assert_eq!(code(&again), 2, "{}", stderr(&again));
    assert!(stderr(&again).contains("--force"));
    assert_eq!(code(&uap(&["attack", "--config", "exp.cfg", "--out", "out", "--force"], root)), 0);

    // an all-zero δ fools nobody
    let zero = PerturbationState::zeros(&[1, 12, 12], 10.0 / 255.0, 1.0 / 255.0);
    save_uap(&zero, &root.join("zero.uap")).unwrap();
    let o = uap(&["eval", "--config", "exp.cfg", "--out", "out", "--uap", "zero.uap"], root);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("0.000000")), "{text}");
    assert!(rows[0].starts_with("cnn-small-s0*"), "{text}");

    // a δ outside its ε-box is rejected as an integrity error
    let mut bad = zero.clone();
    bad.delta.data_mut()[7] = 0.5;
    fs::write(root.join("bad.uap"), uap_to_bytes(&bad)).unwrap();
    let o = uap(&["eval", "--config", "exp.cfg", "--out", "out", "--uap", "bad.uap"], root);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    // truncated weights are rejected too
    let w = out.join("models/mlp-2-s0.uapw");
    let bytes = fs::read(&w).unwrap();
    fs::write(root.join("cut.uapw"), &bytes[..bytes.len() - 3]).unwrap();
    let o = uap(&["eval", "--config", "exp.cfg", "--out", "out", "--uap", "zero.uap", "--model", "cut.uapw", "--force"], root);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    // δ with the wrong image shape is a shape error
    let wide = PerturbationState::zeros(&[1, 8, 8], 10.0 / 255.0, 1.0 / 255.0);
    save_uap(&wide, &root.join("wide.uap")).unwrap();
    let o = uap(&["eval", "--config", "exp.cfg", "--out", "out", "--uap", "wide.uap"], root);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn sweep_writes_one_row_per_grid_point_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("exp.cfg"), CONFIG).unwrap();
    assert_eq!(code(&uap(&["train", "--config", "exp.cfg", "--out", "out"], root)), 0);
    let o = uap(&["sweep", "--config", "exp.cfg", "--out", "out"], root);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(root.join("out/sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(SWEEP_CSV_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r[1]).collect::<Vec<_>>(), ["0", "5", "10"]);
    assert_eq!(rows[0][2], "spgd");
    assert!(rows[1..].iter().all(|r| r[2] == "sga"));
}

#[test]
fn seed_flag_overrides_the_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::write(root.join("exp.cfg"), CONFIG.replace("seeds=0", "seeds=0,1,2")).unwrap();
    assert_eq!(code(&uap(&["train", "--config", "exp.cfg", "--out", "out", "--seed", "0"], root)), 0);
    let o = uap(&["attack", "--config", "exp.cfg", "--out", "out", "--seed", "0"], root);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = RunManifest::load(&root.join("out/attack.json")).unwrap();
    assert!(m.runs.iter().all(|r| r.seed == 0));
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/digits.cfg");
    let cfg = uap_sga::experiments::ExperimentConfig::load(&path, None).unwrap();
    assert_eq!(cfg.seeds, [0, 1, 2, 3, 4]);
    assert_eq!(cfg.attack.variants.len(), 3);
}
