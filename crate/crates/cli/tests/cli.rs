use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "dataset=synthetic\ntrain_size=256\nval_size=64\nepochs=1\nseeds=1\nbatch_size=32\nanalysis_steps=0,2\nprobe_size=32\n";

fn natmode(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_natmode")).args(args).arg("--out").arg(out).output().expect("spawn natmode")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(dir: &TempDir, extra: &str) -> PathBuf {
    let p = dir.path().join("exp.cfg");
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p
}

#[test]
fn every_config_error_is_reported_with_exit_1() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "mu_conv=-1\nbogus=3\nvariant=NoSuchThing\n");
    let o = natmode(&["train", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for needle in ["bogus", "NoSuchThing"] {
        assert!(err.contains(needle), "{err}");
    }
    assert!(!dir.path().join("out/metrics.csv").exists());
}

#[test]
fn missing_mnist_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let o = natmode(&["train", "--dataset", "mnist", "--mnist-dir", "/nonexistent/mnist", "--epochs", "1"], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn aggregate_only_names_the_missing_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "variant=Baseline,BatchNorm\nseeds=1,2\n");
    let out = dir.path().join("out");
    let o = natmode(&["sweep", "--config", cfg.to_str().unwrap(), "--aggregate-only"], &out);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("BatchNorm") && err.contains("seed 2"), "{err}");
    assert!(!out.join("sweep.csv").exists());

    assert_eq!(natmode(&["sweep", "--config", cfg.to_str().unwrap()], &out).status.code(), Some(0));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert_eq!(natmode(&["sweep", "--config", cfg.to_str().unwrap(), "--aggregate-only"], &out).status.code(), Some(0));
    assert_eq!(fs::read_to_string(out.join("sweep.csv")).unwrap(), sweep);
}

#[test]
fn divergence_flag_sets_exit_3() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "");
    let out = dir.path().join("out");
    let args = ["train", "--config", cfg.to_str().unwrap(), "--mu-conv", "1000"];
    assert_eq!(natmode(&args, &out).status.code(), Some(0));
    let o = natmode(&[&args[..], &["--fail-on-divergence"]].concat(), &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("unstable"), "{}", stderr(&o));
}

#[test]
fn clean_noise_runs_match_plain_training() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "variant=BN_Prior,NLMS_L2\nmu_conv=1.0\nfreeze_fc=true\nnorm_convs=1\n");
    let (noisy, plain) = (dir.path().join("noise"), dir.path().join("train"));
    assert_eq!(natmode(&["noise", "--config", cfg.to_str().unwrap(), "--noise-alpha", "1"], &noisy).status.code(), Some(0));
    assert_eq!(natmode(&["train", "--config", cfg.to_str().unwrap()], &plain).status.code(), Some(0));
    for id in ["BN_Prior_mu1_s1", "NLMS_L2_mu1_s1"] {
        let a = fs::read(noisy.join("runs").join(id).join("metrics.csv")).unwrap();
        let b = fs::read(plain.join("runs").join(id).join("metrics.csv")).unwrap();
        assert_eq!(a, b, "{id}");
        let alt = fs::read(noisy.join("runs").join(format!("{id}_a1")).join("metrics.csv")).unwrap();
        assert_ne!(a, alt, "{id}: noise had no effect");
    }
    let noise = fs::read_to_string(noisy.join("noise.csv")).unwrap();
    assert_eq!(noise.lines().count(), 1 + 2 * 2);
}

#[test]
fn analyze_needs_checkpoints_and_reproduces_training_snapshots() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "variant=BN_Amplify\n");
    let out = dir.path().join("out");
    let run = out.join("runs/BN_Amplify_mu0.1_s1");

    assert_eq!(natmode(&["train", "--config", cfg.to_str().unwrap()], &out).status.code(), Some(0));
    let o = natmode(&["analyze", "--input", run.to_str().unwrap()], &dir.path().join("a0"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("save_checkpoints=true"), "{}", stderr(&o));

    assert_eq!(natmode(&["train", "--config", cfg.to_str().unwrap(), "--save-checkpoints"], &out).status.code(), Some(0));
    assert!(run.join("ckpt_step0.bin").exists() && run.join("ckpt_step2.bin").exists());
    let a = dir.path().join("a1");
    assert_eq!(natmode(&["analyze", "--input", run.to_str().unwrap()], &a).status.code(), Some(0));
    assert_eq!(fs::read_to_string(a.join("modal.csv")).unwrap(), fs::read_to_string(run.join("modal.csv")).unwrap());
    assert_eq!(fs::read_to_string(a.join("channels.csv")).unwrap(), fs::read_to_string(run.join("channels.csv")).unwrap());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "");
    let out = dir.path().join("out");
    assert_eq!(natmode(&["train", "--config", cfg.to_str().unwrap(), "--save-checkpoints"], &out).status.code(), Some(0));
    let ckpt = out.join("runs/Baseline_mu0.1_s1/ckpt_step2.bin");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&ckpt, bytes).unwrap();
    let o = natmode(&["analyze", "--input", ckpt.to_str().unwrap()], &dir.path().join("a"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn effective_and_source_configs_are_recorded() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "# comment kept verbatim\n");
    let out = dir.path().join("out");
    assert_eq!(natmode(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "2"], &out).status.code(), Some(0));
    assert_eq!(fs::read_to_string(out.join("config.source.txt")).unwrap(), fs::read_to_string(&cfg).unwrap());
    let eff = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(eff.lines().any(|l| l == "epochs=2"), "{eff}");
    assert!(eff.lines().any(|l| l == "dataset=synthetic"), "{eff}");
}
