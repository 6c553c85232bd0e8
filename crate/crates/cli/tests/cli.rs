use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hcn_core::checkpoint::load_checkpoint;
use hcn_core::nn::Parameterized;

fn hcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small synthetic dataset; returns the manifest path.
fn synth(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    let r = hcn(&[
        "synth", "--n", &n.to_string(), "--clusters", "3", "--dims", "6,8", "--sigma", "0.05", "--seed",
        &seed.to_string(), "--out", s(&out),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    out.join("manifest.toml")
}

const SMALL: [&str; 4] = ["--hidden", "16,16", "--d-out", "8"];

#[test]
fn synth_writes_manifest_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let r = hcn(&[
            "synth", "--n", "600", "--clusters", "4", "--dims", "20,30", "--sigma", "0.05", "--seed", "7", "--out",
            s(&out),
        ]);
        assert_eq!(code(&r), 0);
        out
    };
    let (a, b) = (run("a"), run("b"));
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["labels.csv", "manifest.toml", "view0.csv", "view1.csv"]);
    for name in &names {
        if name != "manifest.toml" {
            assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
        }
    }
}

#[test]
fn synth_rejects_single_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let r = hcn(&[
        "synth", "--n", "50", "--clusters", "1", "--dims", "4,4", "--out", s(&dir.path().join("x")),
    ]);
    assert_eq!(code(&r), 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&hcn(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&hcn(&[])), 1);
    assert_eq!(code(&hcn(&["--help"])), 0);
}

#[test]
fn preset_training_echoes_config_and_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 300, 1);
    let out = dir.path().join("run");
    let mut args = vec![
        "train", "--preset", "landuse-21", "--data", s(&data), "--epochs", "5", "--batch-size", "128", "--out",
        s(&out),
    ];
    args.extend(["--hidden", "16,16"]);
    let r = hcn(&args);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));

    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 5 * 300usize.div_ceil(128));

    let echoed: toml::Table = fs::read_to_string(out.join("config.toml")).unwrap().parse().unwrap();
    let weights = echoed["weights"].as_table().unwrap();
    let w = |k: &str| weights[k].as_float().unwrap();
    assert_eq!((w("alpha"), w("beta"), w("gamma"), w("lambda1"), w("lambda2")), (3.0, 3.6, 9.5, 0.01, 5.0));
    assert_eq!(echoed["rho"].as_float(), Some(0.08));
    assert_eq!(echoed["architecture"]["d_out"].as_integer(), Some(64));
    assert_eq!(echoed["epochs"].as_integer(), Some(5));
    assert!(out.join("model.ckpt").exists());
}

#[test]
fn overrides_win_over_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 80, 2);
    let config = dir.path().join("c.toml");
    fs::write(&config, "epochs = 4\nbatch_size = 40\n[architecture]\nhidden = [8]\nd_out = 6\n").unwrap();
    let out = dir.path().join("run");
    let r = hcn(&["train", "--config", s(&config), "--data", s(&data), "--epochs", "2", "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let history = fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 2 * 2);
    let echoed = fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(echoed.contains("batch_size = 40"));

    fs::write(&config, "epochs = 4\nbogus = 1\n").unwrap();
    let r = hcn(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(code(&r), 1);
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 60, 3);
    let train = |lr: &str, epochs: &str, name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--data", s(&data), "--epochs", epochs, "--lr", lr, "--out", s(&out)];
        args.extend(SMALL);
        assert_eq!(code(&hcn(&args)), 0);
        load_checkpoint(&out.join("model.ckpt")).unwrap().flat_params()
    };
    let frozen = train("0", "3", "frozen");
    let one_step_later = train("0", "1", "short");
    assert_eq!(frozen, one_step_later);
    assert_ne!(frozen, train("0.001", "1", "moving"));
}

#[test]
fn eval_writes_seed_rows_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 90, 4);
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--epochs", "2", "--out", s(&run)];
    args.extend(SMALL);
    assert_eq!(code(&hcn(&args)), 0);

    let out = dir.path().join("eval");
    let ckpt = run.join("model.ckpt");
    let r = hcn(&[
        "eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--raw-baseline", "--restarts", "3", "--out", s(&out),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    for stem in ["eval", "raw_eval"] {
        let csv = fs::read_to_string(out.join(format!("{stem}.csv"))).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "dataset,seed,acc,nmi,ari,inertia");
        let seeds: Vec<&str> = lines[1..6].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(seeds, ["0", "1", "2", "3", "4"]);
        assert!(lines[6].contains(",mean,") && lines[7].contains(",std,") && lines[8].contains(",best:"));
        for line in &lines[1..6] {
            let fields: Vec<f64> = line.split(',').skip(2).take(3).map(|f| f.parse().unwrap()).collect();
            assert!(fields[0] > 0.0 && fields[0] <= 1.0);
            assert!((0.0..=1.0).contains(&fields[1]));
            assert!((-1.0..=1.0).contains(&fields[2]));
        }
        assert!(out.join(format!("{stem}_seed0.json")).exists());
    }
}

#[test]
fn eval_failures_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 40, 5);
    let out = dir.path().join("eval");
    let missing = dir.path().join("none.ckpt");
    assert_eq!(code(&hcn(&["eval", "--data", s(&data), "--checkpoint", s(&missing), "--out", s(&out)])), 1);

    let corrupt = dir.path().join("bad.ckpt");
    fs::write(&corrupt, b"not a checkpoint").unwrap();
    assert_eq!(code(&hcn(&["eval", "--data", s(&data), "--checkpoint", s(&corrupt), "--out", s(&out)])), 1);

    let manifest = fs::read_to_string(&data).unwrap();
    let unlabeled = data.with_file_name("unlabeled.toml");
    let cut = manifest.find("[labels]").unwrap();
    fs::write(&unlabeled, &manifest[..cut]).unwrap();
    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&unlabeled), "--epochs", "1", "--out", s(&run)];
    args.extend(SMALL);
    assert_eq!(code(&hcn(&args)), 0);
    let ckpt = run.join("model.ckpt");
    assert_eq!(code(&hcn(&["eval", "--data", s(&unlabeled), "--checkpoint", s(&ckpt), "--out", s(&out)])), 1);
}

#[test]
fn ablate_emits_six_variants_and_full_matches_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 60, 6);
    let common = ["--epochs", "2", "--seed", "9"];
    let out = dir.path().join("ablate");
    let mut args = vec!["ablate", "--data", s(&data), "--seeds", "1", "--restarts", "2", "--out", s(&out)];
    args.extend(common);
    args.extend(SMALL);
    let r = hcn(&args);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let rows = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let variants: Vec<&str> = rows.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["full", "no-rec", "no-cls", "no-glb", "no-code", "no-da"]);
    let summary = fs::read_to_string(out.join("ablation_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 7);

    let run = dir.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run)];
    args.extend(common);
    args.extend(SMALL);
    assert_eq!(code(&hcn(&args)), 0);
    let ev = dir.path().join("eval");
    let ckpt = run.join("model.ckpt");
    let r = hcn(&[
        "eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--seeds", "1", "--seed", "9", "--restarts", "2",
        "--out", s(&ev),
    ]);
    assert_eq!(code(&r), 0);
    let eval_csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    let eval_metrics: Vec<&str> = eval_csv.lines().nth(1).unwrap().split(',').skip(2).take(3).collect();
    let full_metrics: Vec<&str> = rows.lines().nth(1).unwrap().split(',').skip(2).collect();
    assert_eq!(eval_metrics, full_metrics);
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let r = hcn(&["gradcheck"]);
    assert_eq!(code(&r), 0, "{}", stdout(&r));
    assert_eq!(stdout(&r).lines().filter(|l| l.starts_with("pass")).count(), 7);

    let r = hcn(&["gradcheck", "--term", "cls"]);
    assert_eq!(code(&r), 0);
    let text = stdout(&r);
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("cls"));

    assert_eq!(code(&hcn(&["gradcheck", "--term", "total", "--inject-wrong-sign"])), 2);
    assert_eq!(code(&hcn(&["gradcheck", "--term", "nope"])), 1);
}

#[test]
fn metrics_scores_label_files() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, labels: &[i64]| {
        let p = dir.path().join(name);
        let body: String = labels.iter().map(|l| format!("{l}\n")).collect();
        fs::write(&p, body).unwrap();
        p
    };
    let truth = write("truth.csv", &[0, 0, 1, 2]);
    let pred = write("pred.csv", &[0, 1, 1, 1]);
    let r = hcn(&["metrics", "--pred", s(&pred), "--truth", s(&truth)]);
    assert_eq!(code(&r), 0);
    assert!(stdout(&r).contains("acc 0.5\n"));

    let r = hcn(&["metrics", "--pred", s(&truth), "--truth", s(&truth)]);
    assert_eq!(stdout(&r), "acc 1\nnmi 1\nari 1\n");

    let short = write("short.csv", &[0, 1]);
    let r = hcn(&["metrics", "--pred", s(&short), "--truth", s(&truth)]);
    assert_eq!(code(&r), 1);
    assert!(!r.stderr.is_empty());
}
