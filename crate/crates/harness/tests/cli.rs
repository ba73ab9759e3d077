use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

const CONFIG: &str = r#"
[dataset]
n = 400
held_out_n = 200

[train]
steps = 100
batch_size = 64
validation_size = 64
log_every = 0

[build.probe]
num_prompts = 8

[build.distill]
steps = 10
batch_size = 32
validation_size = 32
log_every = 0

[sweep]
k = [0, 12, 25]
sampling_seeds = 2
rows_per_seed = 20

[metrics]
projections = 8
"#;

fn hybridsd(dir: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hybridsd"));
    c.current_dir(dir)
        .env("HYBRIDSD_OUT_DIR", dir.join("out"))
        .env("HYBRIDSD_THREADS", "1")
        .env("RUST_LOG", "warn")
        .arg("--config")
        .arg(dir.join("config.toml"));
    c
}

fn ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn pipeline_from_training_to_client() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("config.toml"), CONFIG).unwrap();
    let out = dir.join("out");

    ok(hybridsd(dir).arg("train"));
    assert!(out.join("large.ckpt").exists() && out.join("large.log.json").exists());
    let scores = ok(hybridsd(dir).args(["score", "--large"]).arg(out.join("large.ckpt")));
    assert_eq!(scores.lines().count(), 6);
    ok(hybridsd(dir)
        .args(["prune", "--large"])
        .arg(out.join("large.ckpt"))
        .arg("--scores")
        .arg(out.join("scores.json")));
    assert!(out.join("pruned.plan.json").exists());
    ok(hybridsd(dir)
        .args(["distill", "--large"])
        .arg(out.join("large.ckpt"))
        .arg("--small")
        .arg(out.join("pruned.ckpt")));

    ok(hybridsd(dir)
        .args(["sample", "--k", "12", "--rows", "30", "--trace", "trace.jsonl", "--large"])
        .arg(out.join("large.ckpt"))
        .arg("--small")
        .arg(out.join("small.ckpt")));
    let samples = std::fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 31);
    assert_eq!(std::fs::read_to_string(dir.join("trace.jsonl")).unwrap().lines().count(), 25);

    let mut server = Killed(
        hybridsd(dir)
            .args(["serve", "--bind", "127.0.0.1:0", "--large"])
            .arg(out.join("large.ckpt"))
            .stdout(Stdio::piped())
            .spawn()
            .unwrap(),
    );
    let mut line = String::new();
    std::io::BufRead::read_line(&mut std::io::BufReader::new(server.0.stdout.as_mut().unwrap()), &mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let cost = ok(hybridsd(dir)
        .args(["client", "--k", "12", "--rows", "30", "--precision", "f32", "--server", &addr, "--small"])
        .arg(out.join("small.ckpt"))
        .args(["--out", "edge.csv"]));
    let report: serde_json::Value = serde_json::from_str(&cost).unwrap();
    assert!(report["payload_bytes"].as_u64().unwrap() > 0);
    assert_eq!(std::fs::read_to_string(dir.join("edge.csv")).unwrap(), samples);
    drop(server);

    let start = Instant::now();
    ok(hybridsd(dir).arg("experiment"));
    assert!(start.elapsed() < Duration::from_secs(120));
    let table = ok(hybridsd(dir).arg("report"));
    assert_eq!(table.lines().count(), 4);
    assert!(table.contains("small_only") && table.contains("large_only"));
}

#[test]
fn failures_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("config.toml"), "[sweep]\nk = []\n").unwrap();
    let out = hybridsd(dir).arg("experiment").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("k sweep is empty"));
    assert!(!dir.join("out").exists());

    let out = hybridsd(dir).args(["score", "--large", "nope.ckpt"]).output().unwrap();
    assert!(!out.status.success());

    let out = hybridsd(dir).arg("report").output().unwrap();
    assert!(!out.status.success());

    let out = hybridsd(dir).env("HYBRIDSD_THREADS", "zero").arg("report").output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("HYBRIDSD_THREADS"));
}
