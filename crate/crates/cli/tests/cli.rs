use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fovplan"))
}

fn workdir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

#[test]
fn selftest_lists_every_oracle() {
    let out = run(bin().arg("selftest"));
    for name in ["lsa_enumeration", "lsa_mutation_detected", "yaw_circle_search", "gradient_LSA", "gradient_RWTAr", "gradient_RWTAc"] {
        assert!(out.contains(&format!("[PASS] {name}")), "{out}");
    }
}

#[test]
fn demos_train_and_evaluate() {
    let dir = workdir("pipeline");
    let a = dir.join("a.jsonl");
    let b = dir.join("b.jsonl");
    for p in [&a, &b] {
        let out = run(bin().args(["--seed", "3", "--nruns", "3", "gen-demos", "--count", "4", "--out"]).arg(p));
        assert!(out.contains("wrote 4 demonstrations"));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 4);

    let ckpt = dir.join("policy.json");
    run(bin().args(["--seed", "3", "train", "--epochs", "5", "--variant", "rwtac", "--epsilon", "0.1", "--data"]).arg(&a).arg("--out").arg(&ckpt));
    assert!(ckpt.exists());
    let loss = std::fs::read_to_string(dir.join("policy.json.loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash: "));
    assert_eq!(lines.next().unwrap(), "epoch,loss");
    assert_eq!(lines.count(), 5);

    let grid = dir.join("grid.csv");
    let out = run(bin().args(["eval-static-grid", "--checkpoint"]).arg(&ckpt).arg("--out").arg(&grid));
    assert!(out.contains("/64"));
    let text = std::fs::read_to_string(&grid).unwrap();
    assert_eq!(text.lines().count(), 66);
    assert!(text.lines().nth(1).unwrap().starts_with("i_y,i_z,"));

    let mse = dir.join("mse.csv");
    run(bin().args(["--seed", "3", "eval-mse", "--data"]).arg(&a).arg("--checkpoint").arg(&ckpt).arg("--out").arg(&mse));
    assert!(std::fs::read_to_string(&mse).unwrap().contains("ratio_to_reference"));

    let mission = dir.join("m");
    let out = run(bin().args(["sim", "--world", "square", "--duration", "2", "--checkpoint"]).arg(&ckpt).arg("--out").arg(&mission));
    assert!(out.contains("replans"));
    let summary = std::fs::read_to_string(dir.join("m.summary.csv")).unwrap();
    let row: Vec<f64> = summary.lines().nth(2).unwrap().split(',').skip(2).take(3).map(|v| v.parse().unwrap()).collect();
    assert!((row.iter().sum::<f64>() - 100.0).abs() < 1e-9);
    assert!(std::fs::read_to_string(dir.join("m.path.csv")).unwrap().lines().nth(1).unwrap() == "t,x,y,z,psi");
}

#[test]
fn bad_flags_fail() {
    assert!(!bin().args(["train", "--data", "/nonexistent.jsonl"]).output().unwrap().status.success());
    assert!(!bin().args(["eval-static-grid"]).output().unwrap().status.success());
    assert!(!bin().args(["train", "--variant", "nope", "--data", "x"]).output().unwrap().status.success());
}
