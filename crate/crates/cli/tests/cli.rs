use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "tiny"
seed = 5
output_dir = "runs/tiny"

[dataset]
kind = "synthetic"
num_classes = 3
per_class = 30
test_per_class = 10
input_dim = 4

[partition]
num_clients = 6
alpha = 0.0

[model]
kind = "mlp"
hidden = [6]

[client]
optimizer = "sam"
lr = 0.05
rho = 0.05
batch_size = 8

[server]
rounds = 12
clients_per_round = 3

[swa]
cycle = 2
lr_max = 0.05
lr_min = 0.005

[probes]
lambda_max_every = 6
checkpoint_every = 4
"#;

fn fedflat(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedflat"))
        .args(args)
        .env("FEDFLAT_OUTPUT_ROOT", root)
        .current_dir(root)
        .output()
        .expect("binary runs")
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, config).unwrap();
    (dir, cfg)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn run_writes_run_directory_under_output_root() {
    let (dir, cfg) = setup(CONFIG);
    let out = fedflat(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("runs/tiny");
    for f in [
        "config.toml",
        "metrics.csv",
        "report.json",
        "checkpoints/round_000012.ckpt",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert_eq!(
        csv.lines().next().unwrap(),
        "round,lr,mean_client_train_loss,test_acc_sgd_line,test_acc_swa_line,lambda_max"
    );
}

#[test]
fn resume_reproduces_remaining_rounds() {
    let (dir, cfg) = setup(CONFIG);
    assert_eq!(code(&fedflat(dir.path(), &["run", cfg.to_str().unwrap()])), 0);
    let run = dir.path().join("runs/tiny");
    let full = fs::read(run.join("metrics.csv")).unwrap();
    let report = fs::read(run.join("report.json")).unwrap();
    fs::remove_file(run.join("checkpoints/round_000012.ckpt")).unwrap();
    fs::remove_file(run.join("checkpoints/round_000008.ckpt")).unwrap();
    let out = fedflat(dir.path(), &["run", cfg.to_str().unwrap(), "--resume"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), full);
    assert_eq!(fs::read(run.join("report.json")).unwrap(), report);
}

#[test]
fn resume_with_changed_config_is_config_error() {
    let (dir, cfg) = setup(CONFIG);
    assert_eq!(code(&fedflat(dir.path(), &["run", cfg.to_str().unwrap()])), 0);
    fs::write(&cfg, CONFIG.replace("lr = 0.05\nrho", "lr = 0.04\nrho")).unwrap();
    assert_eq!(
        code(&fedflat(dir.path(), &["run", cfg.to_str().unwrap(), "--resume"])),
        1
    );
}

#[test]
fn config_errors_exit_one_and_name_the_key() {
    let (dir, cfg) = setup(&CONFIG.replace("rounds = 12", "rounds = -3"));
    let out = fedflat(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rounds"));

    let (dir, cfg) = setup(&CONFIG.replace("[model]", "[model]\ndepth = 3"));
    let out = fedflat(dir.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("depth") && err.contains("line"), "{err}");

    assert_eq!(code(&fedflat(dir.path(), &["run", "missing.toml"])), 1);
    assert_eq!(code(&fedflat(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&fedflat(dir.path(), &["--help"])), 0);
}

#[test]
fn runtime_errors_exit_two() {
    let (dir, _) = setup(CONFIG);
    let bogus = dir.path().join("bad.ckpt");
    fs::write(&bogus, b"not a checkpoint\n").unwrap();
    fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
    let out = fedflat(dir.path(), &["analyze", "spectrum", bogus.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn analyze_verbs_write_exports() {
    let (dir, cfg) = setup(CONFIG);
    assert_eq!(code(&fedflat(dir.path(), &["run", cfg.to_str().unwrap()])), 0);
    let ck = |r: usize| {
        dir.path()
            .join(format!("runs/tiny/checkpoints/round_{r:06}.ckpt"))
            .to_string_lossy()
            .into_owned()
    };
    let out = fedflat(dir.path(), &["analyze", "spectrum", &ck(12), "--k", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = fedflat(
        dir.path(),
        &[
            "analyze",
            "plane",
            &ck(4),
            &ck(8),
            &ck(12),
            "--resolution",
            "5",
            "--line",
            "sgd",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let surf = dir.path().join("surf.json");
    let out = fedflat(
        dir.path(),
        &[
            "analyze",
            "surface",
            &ck(12),
            "--resolution",
            "3",
            "--metric",
            "error",
            "-o",
            surf.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let analysis = dir.path().join("runs/tiny/analysis");
    let spectrum: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(analysis.join("spectrum.json")).unwrap()).unwrap();
    assert_eq!(spectrum["kind"], "spectrum");
    assert_eq!(spectrum["meta"]["N"], 2);
    let plane: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(analysis.join("plane.json")).unwrap()).unwrap();
    assert_eq!(plane["meta"]["N"], 5);
    assert_eq!(plane["values"].as_array().unwrap().len(), 25);
    assert_eq!(plane["meta"]["extent"].as_array().unwrap().len(), 4);
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(surf).unwrap()).unwrap();
    assert_eq!(s["meta"]["metric"], "error");
    assert_eq!(s["meta"]["seed"], 0);
}

#[test]
fn swa_line_missing_is_reported() {
    let (dir, cfg) = setup(CONFIG);
    assert_eq!(code(&fedflat(dir.path(), &["run", cfg.to_str().unwrap()])), 0);
    let ck = dir.path().join("runs/tiny/checkpoints/round_000004.ckpt");
    let out = fedflat(
        dir.path(),
        &["analyze", "spectrum", ck.to_str().unwrap(), "--line", "swa"],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("SWA"));
}

#[test]
fn compare_prints_improvements() {
    let dir = tempfile::tempdir().unwrap();
    let report = |name: &str, acc: f64| {
        format!(
            r#"{{"name":"{name}","seed":0,"rounds":100,"metric":"test_accuracy","window":100,
               "final_accuracy":{acc},"final_accuracy_sgd":{acc},"final_accuracy_swa":null,
               "final_lambda_max":null,"n_models":0}}"#
        )
    };
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    fs::write(&a, report("fedavg", 40.43)).unwrap();
    fs::write(&b, report("fedsam", 44.73)).unwrap();
    let out = fedflat(dir.path(), &["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("+4.30") && text.contains("+10.64%"), "{text}");
    assert_eq!(code(&fedflat(dir.path(), &["compare", a.to_str().unwrap()])), 1);
}
