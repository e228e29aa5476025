use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use localpar::flops::{mlp_constants, ModelId};

fn localpar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_localpar"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let none = localpar(&[]);
    assert_eq!(none.status.code(), Some(1));
    assert!(stderr(&none).contains("Usage"));
    let bogus = localpar(&["flops", "--bogus"]);
    assert_eq!(bogus.status.code(), Some(1));
    assert!(stderr(&bogus).contains("--bogus"));
    assert_eq!(localpar(&["warp"]).status.code(), Some(1));
    assert_eq!(localpar(&["--help"]).status.code(), Some(0));
    let v = localpar(&["--version"]);
    assert_eq!(v.status.code(), Some(0));
    assert!(stdout(&v).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = localpar(&["simulate", "--config", path(&missing), "--out", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!stderr(&o).is_empty());
    let o = localpar(&["flops", "--model", "resnet18", "--method", "chunked20", "--batch", "1", "--steps", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flops_row_matches_formula() {
    let o = localpar(&["flops", "--model", "mlp4096", "--method", "greedy", "--batch", "256", "--steps", "1000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("model,method,batch,steps,cost_per_example,cost_flops,time_flops,parallelism")
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&row[..4], &["mlp4096", "greedy", "256", "1000"]);

    // Independent evaluation of the greedy formulas.
    let (fwd, aux, bm, l) = (32514176.0f64, 77884.0f64, 1.5f64, 8.0f64);
    let params = (3072.0 * 4096.0 + 4096.0) + 7.0 * (4096.0 * 4096.0 + 4096.0) + (4096.0 * 10.0 + 10.0);
    let cpe = (1.0 + bm) * ((fwd + aux) * l);
    let cost = cpe * 1000.0 * 256.0 + 1000.0 * 10.0 * params;
    let time = cost / (256.0 * l);
    let parse = |s: &str| s.parse::<f64>().unwrap();
    assert_eq!(parse(row[4]), cpe);
    assert_eq!(parse(row[5]), cost);
    assert_eq!(parse(row[6]), time);
    assert_eq!(parse(row[7]), l);
    assert_eq!(mlp_constants(4096, 8, 3072, 10).forward_cost, fwd);
    assert_eq!("mlp4096".parse::<ModelId>().unwrap(), ModelId::Mlp4096);

    let j = localpar(&[
        "flops", "--model", "resnet50", "--method", "backprop,last2", "--batch", "32", "--steps", "5", "--format",
        "json",
    ]);
    let v: serde_json::Value = serde_json::from_slice(&j.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}

#[test]
fn simulate_writes_report_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pipe.toml");
    fs::write(
        &cfg,
        r#"
mode = "pipelined_backprop"
num_stages = 4
microbatches = 8
forward_cycles = [1, 1, 1, 1]
backward_cycles = [1, 1, 1, 1]
aux_cycles = [0, 0, 0, 0]
boundary_activation_bytes = [12.3, 6.2, 3.1]
parameter_bytes = [1, 1, 1, 1]
aux_parameter_bytes = [1, 1, 1, 1]
input_bytes_per_microbatch = [1, 1, 1, 1]
activation_bytes_per_microbatch = [1, 1, 1, 1]
"#,
    )
    .unwrap();
    let out = dir.path().join("sim");
    let o = localpar(&["simulate", "--config", path(&cfg), "--emit-trace", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["total_cycles"], 22);
    let frac = report["steady_state_fraction"].as_f64().unwrap();
    assert!((frac - 8.0 / 11.0).abs() < 1e-12);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("time,stage,kind,microbatch,duration\n"));
    assert!(trace.lines().count() > 64);
    assert!(out.join("communication.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert!(manifest["version"].as_str().unwrap().contains('+'));
    assert!(manifest["outputs"].as_array().unwrap().len() >= 3);
}

#[test]
fn train_is_reproducible_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.toml");
    fs::write(
        &cfg,
        r#"
scheme = "chunked2"
batch_size = 32
steps = 40
[network]
hidden = 16
depth = 4
[data]
source = "synthetic"
n = 256
dim = 8
classes = 4
separation = 2.0
"#,
    )
    .unwrap();
    let first = dir.path().join("a");
    // The flag overrides the file's step count.
    let o = localpar(&[
        "--seed", "9", "train", "--config", path(&cfg), "--steps", "30", "--out", path(&first), "--pipeline",
        "lockstep", "--jobs", "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = fs::read_to_string(first.join("log.jsonl")).unwrap();
    assert!(log.lines().any(|l| l.contains("\"step\":30")));
    assert!(!log.lines().any(|l| l.contains("\"step\":31")));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["config"]["steps"], 30);

    let second = dir.path().join("b");
    let o = localpar(&[
        "replay", "--manifest", path(&first.join("manifest.json")), "--out", path(&second),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let strip = |text: String| -> Vec<serde_json::Value> {
        text.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wallclock_ms");
                v
            })
            .collect()
    };
    assert_eq!(strip(log), strip(fs::read_to_string(second.join("log.jsonl")).unwrap()));
    assert_eq!(
        fs::read(first.join("model.lpck")).unwrap(),
        fs::read(second.join("model.lpck")).unwrap()
    );

    let filters = dir.path().join("f");
    let o = localpar(&[
        "dump-filters", "--checkpoint", path(&first.join("model.lpck")), "--out", path(&filters),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(filters.join("filters.csv")).unwrap();
    assert_eq!(csv.lines().count(), 16);
    assert!(csv.lines().all(|l| l.split(',').count() == 8));
}

#[test]
fn sweep_then_pareto() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    fs::write(
        &cfg,
        r#"
schemes = ["backprop", "greedy"]
batch_sizes = [32, 64]
learning_rates = [3e-3]
budget_examples = 4096
eval_examples = 128
cutoffs = [1.2]
[network]
hidden = 16
depth = 2
[data]
source = "synthetic"
n = 512
dim = 8
classes = 4
separation = 3.0
"#,
    )
    .unwrap();
    let out = dir.path().join("sweep");
    let o = localpar(&["sweep", "--config", path(&cfg), "--out", path(&out), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("runs/backprop.jsonl").exists());
    assert!(out.join("runs/greedy.jsonl").exists());
    let frontier = fs::read_to_string(out.join("frontier.csv")).unwrap();
    assert!(frontier.starts_with("cutoff,scheme,batch,cost_flops,time_flops,steps\n"));

    let p = dir.path().join("pareto");
    let o = localpar(&["pareto", "--runs", path(&out), "--cutoff", "1.2,1.0", "--out", path(&p)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let again = fs::read_to_string(p.join("frontier.csv")).unwrap();
    let first_cutoff: Vec<&str> = again.lines().filter(|l| l.starts_with("1.2,")).collect();
    let from_sweep: Vec<&str> = frontier.lines().skip(1).collect();
    assert_eq!(first_cutoff, from_sweep);
}
