use std::path::Path;
use std::process::{Command, Output};

fn pestvision(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pestvision"))
        .args(args)
        .env("PESTVISION_CACHE", cache)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cache: &Path) -> String {
    let out = pestvision(args, cache);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = r#"
learning_rate = 0.001
weight_decay = 0.0
batch_size = 8
max_epochs = 2
patience = 2
drop_rate = 0.0
short_side = 72
crop = 64
base_width = 4
blocks = [1, 1, 1, 1]
ran_modules = [1, 1, 1]
fpn_channels = 8
"#;

#[test]
fn commands_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let cache = dir.path().join("cache");

    ok(&["synth", "--out", &d("data"), "--classes", "3", "--per-class", "10", "--seed", "1"], &cache);
    let split = ok(&["split", "--root", &d("data"), "--ratios", "0.7,0.1,0.2", "--seed", "5", "--out", &d("splits")], &cache);
    assert!(split.contains("train: 21 images"), "{split}");
    let first = std::fs::read_to_string(dir.path().join("splits/test.txt")).unwrap();
    ok(&["split", "--root", &d("data"), "--seed", "5", "--out", &d("splits")], &cache);
    assert_eq!(std::fs::read_to_string(dir.path().join("splits/test.txt")).unwrap(), first);

    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let mut exports = Vec::new();
    for model in ["resnet50", "ran", "fpn"] {
        let out = ok(
            &["train", "--model", model, "--config", &d("tiny.toml"), "--data", &d("data"), "--splits", &d("splits")],
            &cache,
        );
        assert!(out.contains("best val accuracy"), "{out}");
        assert!(cache.join(model).join("best.safetensors").exists());
        let export = d(&format!("{model}.csv"));
        // relative checkpoint paths resolve under the cache directory
        let ckpt = format!("{model}/best.safetensors");
        let eval = ok(
            &[
                "eval", "--ckpt", &ckpt, "--data", &d("data"), "--splits", &d("splits"), "--split", "test", "--export",
                &export, "--ledger", &d("ledger.csv"), "--dataset", "shapes",
            ],
            &cache,
        );
        assert!(eval.contains("GM"), "{eval}");
        assert_eq!(std::fs::read_to_string(&export).unwrap().lines().count(), 7);
        exports.push(export);
    }

    let mut args = vec!["ensemble", "--in"];
    args.extend(exports.iter().map(String::as_str));
    let (out_csv, ledger) = (d("ens.csv"), d("ledger.csv"));
    args.extend(["--out", &out_csv, "--ledger", &ledger, "--dataset", "shapes"]);
    ok(&args, &cache);

    let report_args = [
        "report", "--ledger", &ledger, "--dataset", "shapes", "--probs", &out_csv, "--labels",
        &d("splits/labels.txt"), "--worst", "3",
    ];
    let a = ok(&report_args, &cache);
    let b = ok(&report_args, &cache);
    assert_eq!(a, b);
    assert!(a.contains("ensemble") && a.contains("00_disc"), "{a}");

    let image = std::fs::read_dir(dir.path().join("data/01_square")).unwrap().next().unwrap().unwrap().path();
    let png = d("cam.png");
    let cam = ok(
        &["gradcam", "--ckpt", "resnet50/best.safetensors", "--image", image.to_str().unwrap(), "--class", "1", "--out", &png],
        &cache,
    );
    assert!(cam.contains("class 1"), "{cam}");
    assert_eq!(image::image_dimensions(&png).unwrap(), (64, 64));
}

#[test]
fn failures_exit_nonzero_and_name_the_command() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = pestvision(&["report", "--ledger", missing.to_str().unwrap()], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("report failed"));

    let out = pestvision(&["split", "--root", dir.path().to_str().unwrap(), "--out", "x", "--ratios", "0.5,0.5"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("split failed"));
}
