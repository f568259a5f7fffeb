use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vgnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vgnn")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_plate(dir: &Path, name: &str, grid: &str, sims: &str, seed: &str) -> String {
    let out = dir.join(name);
    ok(vgnn(&[
        "generate", "plate", "--grid", grid, "--sims", sims, "--seed", seed, "--out", p(&out),
    ]));
    p(&out).to_string()
}

#[test]
fn generation_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_plate(dir.path(), "a.json", "6", "3", "5");
    let b = small_plate(dir.path(), "b.json", "6", "3", "5");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = small_plate(dir.path(), "c.json", "6", "3", "6");
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn beam_generation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("beam.json");
    let o = ok(vgnn(&["generate", "beam", "--seed", "0", "--out", p(&out)]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("260"));
}

#[test]
fn unwritable_output_is_io_error() {
    let o = vgnn(&["generate", "plate", "--grid", "4", "--sims", "1", "--seed", "1", "--out", "/nonexistent/x/ds.json"]);
    assert_eq!(code(&o), 2);
    let o = vgnn(&["train", "--seed", "1", "--data", "/nonexistent/ds.json", "--out", "/tmp/never"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_with_schema_code() {
    assert_eq!(code(&vgnn(&["generate", "plate", "--bogus"])), 4);
    // the seed is mandatory
    assert_eq!(code(&vgnn(&["generate", "plate", "--out", "/tmp/x.json"])), 4);
    assert!(vgnn(&["--help"]).status.success());
}

#[test]
fn gradcheck_passes() {
    let o = ok(vgnn(&["gradcheck", "--seed", "3"]));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("PASS"));
    let o = vgnn(&["gradcheck", "--seed", "3", "--tolerance", "1e-30"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn train_infer_and_transfer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = small_plate(d, "plate.json", "6", "6", "2");
    ok(vgnn(&["split", "--seed", "4", "--data", &data, "--train", "4", "--out", p(&d.join("split"))]));
    let train = p(&d.join("split/train.json")).to_string();
    let test = p(&d.join("split/test.json")).to_string();

    let run = d.join("run");
    ok(vgnn(&[
        "train", "--seed", "7", "--preset", "smoke", "--data", &train, "--epochs", "20", "--out", p(&run),
    ]));
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 21);
    let ck = run.join("checkpoint.json");

    // minimal sampling
    let pred = d.join("pred");
    ok(vgnn(&[
        "infer", "--seed", "1", "--checkpoint", p(&ck), "--data", &test, "--samples", "2", "--out", p(&pred),
    ]));
    assert!(pred.join("pred_0000.csv").exists() && pred.join("pred_0001.csv").exists());
    let metrics = fs::read_to_string(pred.join("metrics.json")).unwrap();
    assert!(metrics.contains("\"coverage\""));
    assert!(vgnn(&["infer", "--seed", "1", "--checkpoint", p(&ck), "--data", &test, "--samples", "1", "--out", p(&pred)])
        .status
        .code()
        == Some(4));

    // trained on 6x6, inferred on 9x9
    let fine = small_plate(d, "fine.json", "9", "2", "8");
    let pred_fine = d.join("pred_fine");
    ok(vgnn(&["infer", "--seed", "1", "--checkpoint", p(&ck), "--data", &fine, "--out", p(&pred_fine)]));
    let rows = fs::read_to_string(pred_fine.join("pred_0000.csv")).unwrap().lines().count();
    assert_eq!(rows, 82);

    // a beam dataset has two target columns against the plate model's one
    let beam = d.join("beam.json");
    ok(vgnn(&["generate", "beam", "--seed", "0", "--out", p(&beam)]));
    let o = vgnn(&["infer", "--seed", "1", "--checkpoint", p(&ck), "--data", p(&beam), "--out", p(&d.join("x"))]);
    assert_eq!(code(&o), 4);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("126, 1") && err.contains("126, 2"), "{err}");
}

#[test]
fn pinned_seed_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = small_plate(d, "plate.json", "5", "4", "3");
    let mut outputs = Vec::new();
    for k in 0..2 {
        let run = d.join(format!("run{k}"));
        ok(vgnn(&["train", "--seed", "9", "--preset", "smoke", "--data", &data, "--epochs", "5", "--out", p(&run)]));
        let pred = d.join(format!("pred{k}"));
        ok(vgnn(&[
            "infer", "--seed", "2", "--checkpoint", p(&run.join("checkpoint.json")), "--data", &data, "--samples", "5",
            "--out", p(&pred),
        ]));
        outputs.push([
            fs::read(run.join("checkpoint.json")).unwrap(),
            fs::read(run.join("loss.csv")).unwrap(),
            fs::read(pred.join("pred_0003.csv")).unwrap(),
            fs::read(pred.join("metrics.json")).unwrap(),
        ]);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn config_file_values_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("gen.conf");
    let out = d.join("from_file.json");
    fs::write(&cfg, format!("# plate settings\ngrid = 4\nsims = 2\nseed = 11\nout = {}\n", p(&out))).unwrap();
    ok(vgnn(&["generate", "plate", "--config", p(&cfg)]));
    let text = fs::read_to_string(&out).unwrap();
    let flag = small_plate(d, "flags.json", "4", "2", "11");
    assert_eq!(text, fs::read_to_string(flag).unwrap());

    // the command line wins over the file
    let over = d.join("over.json");
    ok(vgnn(&["generate", "plate", "--config", p(&cfg), "--sims", "3", "--out", p(&over)]));
    let n = fs::read_to_string(&over).unwrap().matches("\"meta\"").count();
    assert_eq!(n, 3);

    fs::write(&cfg, "grid = 4\nseed = 1\ncolour = blue\n").unwrap();
    assert_eq!(code(&vgnn(&["generate", "plate", "--config", p(&cfg), "--out", p(&over)])), 4);
}

#[test]
fn divergent_training_reports_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = small_plate(d, "plate.json", "4", "2", "1");
    let o = vgnn(&[
        "train", "--seed", "1", "--preset", "smoke", "--data", &data, "--epochs", "50", "--lr", "1e200", "--out",
        p(&d.join("run")),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}
