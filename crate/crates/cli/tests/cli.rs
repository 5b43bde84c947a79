use std::path::Path;
use std::process::{Command, Output};

fn flowcaps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowcaps")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = flowcaps(&["params", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: usage: "), "{err}");
    assert!(stdout(&o).is_empty(), "nothing runs before argument validation");
}

#[test]
fn unknown_command_is_a_usage_error() {
    assert_eq!(flowcaps(&["train-everything"]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one_with_category() {
    let dir = tempfile::tempdir().unwrap();
    let o = flowcaps(&["eval-flow", "--ckpt", "/nonexistent/x.ckpt", "--data", "/nonexistent", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: io: "), "{err}");
}

#[test]
fn params_reports_reference_count_after_config_and_seed() {
    let o = flowcaps(&["params", "--preset", "flownets-ref", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("config {"));
    assert_eq!(lines.next().unwrap(), "seed 4");
    let total: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("flownets-ref params "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((total - 38.68e6).abs() / 38.68e6 < 0.02, "{total}");
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = flowcaps(&[
            "gen-data", "--spec", "default", "--seed", "1", "--n-train", "16", "--n-test", "4", "--out", p(d.path()),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &Path| std::fs::read(d.join("manifest.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(std::fs::read(a.path().join("flow/00003.flo")).unwrap(), std::fs::read(b.path().join("flow/00003.flo")).unwrap());
}

#[test]
fn config_file_sets_defaults_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# defaults\nn_train = 8\nn-test = 2\nspec = small\nseed = 3\n").unwrap();
    let out = dir.path().join("data");
    let o = flowcaps(&["gen-data", "--config", p(&cfg), "--n-test", "3", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("seed 3"));
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert_eq!(manifest.matches("\"split\"").count(), 11);

    std::fs::write(&cfg, "epochs = 3\n").unwrap();
    let o = flowcaps(&["gen-data", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: usage: "));
}

#[test]
fn train_predict_viz_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = flowcaps(&["gen-data", "--spec", "small", "--n-train", "8", "--n-test", "4", "--out", p(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = flowcaps(&["train-flow", "--data", p(&data), "--epochs", "1", "--batch", "4", "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epoch   1 train_loss"));
    let record = std::fs::read_to_string(run.join("record.csv")).unwrap();
    assert!(record.starts_with("epoch,train_loss,test_epe,seconds,seed\n1,"));

    let flo = dir.path().join("pred.flo");
    let o = flowcaps(&[
        "predict",
        "--ckpt",
        p(&run.join("best.ckpt")),
        "--pair",
        p(&data.join("frames/00000_1.ppm")),
        p(&data.join("frames/00000_2.ppm")),
        "--out",
        p(&flo),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&flo).unwrap().len(), 12 + 8 * 32 * 32);

    let ppm = dir.path().join("pred.ppm");
    let o = flowcaps(&["viz", p(&flo), "--out", p(&ppm)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = std::fs::read(&ppm).unwrap();
    assert!(bytes.starts_with(b"P6\n32 32\n255\n"));

    let o = flowcaps(&["eval-flow", "--ckpt", p(&run.join("best.ckpt")), "--data", p(&data), "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("mean EPE"));

    let o = flowcaps(&["train-flow", "--data", p(&data), "--epochs", "2", "--batch", "4", "--resume", p(&run.join("last.ckpt")), "--out", p(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("resuming"));
    assert!(stdout(&o).contains("epoch   2 train_loss"));
}

#[test]
fn bad_batch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(flowcaps(&["gen-data", "--spec", "small", "--n-train", "4", "--n-test", "2", "--out", p(&data)]).status.success());
    let o = flowcaps(&["train-flow", "--data", p(&data), "--batch", "1", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: config: "), "{}", stderr(&o));
}
