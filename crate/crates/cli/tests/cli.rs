use std::fs;
use std::path::Path;

use sdbnn::data::{Dataset, DatasetKind, DatasetSource, Split};
use sdbnn_cli::{run, CHECKPOINT_FILE, CONFIG_FILE, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, METRICS_FILE, PACKED_FILE};

fn sdbnn(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("sdbnn").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

/// Ten-class MNIST-shaped fixture: class `k` lights row band `k`.
fn write_fixture(root: &Path, train: usize, test: usize) {
    for (split, n, salt) in [(Split::Train, train, 0usize), (Split::Test, test, 7)] {
        let mut pixels = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 10;
            for y in 0..28 {
                for x in 0..28 {
                    let lit = y / 3 == label || (y == 27 && label == 9);
                    let noise = ((i * 31 + y * 7 + x * 13 + salt) % 41) as u8;
                    pixels.push(if lit { 200 + noise } else { noise });
                }
            }
            labels.push(label as u8);
        }
        let ds = Dataset::from_raw(DatasetKind::Mnist, split, pixels, labels).unwrap();
        let src = DatasetSource::new(DatasetKind::Mnist, root, split);
        fs::create_dir_all(src.dir()).unwrap();
        for (path, bytes) in src.files().iter().zip(ds.to_raw_files().unwrap()) {
            fs::write(path, bytes).unwrap();
        }
    }
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
}

#[test]
fn help_exits_zero_and_lists_config_keys() {
    let (code, out, _) = sdbnn(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("gradcheck"));
    let (code, out, _) = sdbnn(&["train", "--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("norm_mean") && out.contains("weight_decay"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(sdbnn(&[]).0, EXIT_USAGE);
    assert_eq!(sdbnn(&["frobnicate"]).0, EXIT_USAGE);
    let (code, _, err) = sdbnn(&["train", "--set", "learning_rate=0.1"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("learning_rate"), "{err}");
    assert_eq!(sdbnn(&["train", "--set", "lr=-1"]).0, EXIT_USAGE);
    assert_eq!(sdbnn(&["train", "--set", "preset=cifar_net"]).0, EXIT_USAGE);
    assert_eq!(sdbnn(&["train", "--set", "preset=resnet20"]).0, EXIT_USAGE, "resnet20 needs cifar10 input");
    assert_eq!(sdbnn(&["eval", "--checkpoint", "a", "--packed", "b"]).0, EXIT_USAGE);
    assert_eq!(sdbnn(&["bench", "--case", "64x32"]).0, EXIT_USAGE);
}

#[test]
fn config_file_rejects_unknown_and_duplicate_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.txt");
    fs::write(&cfg, "# comment\npreset=lenet\nmomentun=0.9\n").unwrap();
    let (code, _, err) = sdbnn(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("momentun"), "{err}");
    fs::write(&cfg, "lr=0.1\nlr=0.2\n").unwrap();
    assert_eq!(sdbnn(&["train", "--config", cfg.to_str().unwrap()]).0, EXIT_USAGE);
    assert_eq!(sdbnn(&["train", "--config", dir.path().join("missing").to_str().unwrap()]).0, EXIT_USAGE);
}

#[test]
fn missing_dataset_is_a_runtime_error_naming_the_root() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let (code, _, err) = sdbnn(&["train", "--data-root", root, "--out", root]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(err.contains(root) && err.contains("SDBNN_DATA"), "{err}");
}

#[test]
fn gradcheck_passes_and_the_negative_control_fails() {
    let (code, out, _) = sdbnn(&["gradcheck", "--batch", "2"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.ends_with("overall=pass\n"));
    let (code, out, _) = sdbnn(&["gradcheck", "--batch", "2", "--wrong-ste", "approxsign"]);
    assert_eq!(code, EXIT_RUNTIME);
    assert!(out.contains("overall=fail"));
    assert_eq!(sdbnn(&["gradcheck", "--wrong-ste", "ede"]).0, EXIT_USAGE);
}

#[test]
fn stats_on_random_inputs_with_injection() {
    let (code, out, _) = sdbnn(&["stats", "--random", "--batch", "4", "--inject", "bconv2=10"]);
    assert_eq!(code, EXIT_OK);
    let lines: Vec<_> = out.lines().collect();
    assert_eq!(lines.len(), 4);
    for l in &lines {
        let expect = if field(l, "layer") == "bconv2" && field(l, "tensor") == "activation" { "true" } else { "false" };
        assert_eq!(field(l, "degenerate"), expect, "{l}");
    }
    let (code, out, _) = sdbnn(&["stats", "--random", "--batch", "4", "--layers", "bconv1"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.lines().all(|l| field(l, "layer") == "bconv1"));
    assert_eq!(sdbnn(&["stats", "--random", "--inject", "conv1=1"]).0, EXIT_USAGE);
    assert_eq!(sdbnn(&["stats", "--random", "--layers", "fc1"]).0, EXIT_USAGE);
}

#[test]
fn bench_prints_an_exact_report() {
    let (code, out, _) = sdbnn(&["bench", "--case", "1x8x6x6/8k3s1p1", "--repetitions", "2", "--warmup", "0"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(field(out.lines().next().unwrap(), "exact"), "true");
    assert!(out.contains("op=sd_bitconv") && out.contains("post_conv_muls=0"));
}

#[test]
fn train_eval_export_and_resume_on_a_fixture() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 400, 100);
    let root = dir.path().to_str().unwrap();
    let common = ["--data-root", root, "--no-verify", "--out", root];
    let set = ["--set", "epochs=2", "--set", "batch_size=50", "--set", "lr=0.005"];
    let train = |name: &str, extra: &[&str]| {
        let name_kv = format!("name={name}");
        let mut args = vec!["train", "--set", name_kv.as_str()];
        args.extend(common);
        args.extend(set);
        args.extend(extra);
        sdbnn(&args)
    };

    let (code, out, err) = train("full", &[]);
    assert_eq!(code, EXIT_OK, "{err}");
    let run = dir.path().join("full");
    for f in [CONFIG_FILE, METRICS_FILE, CHECKPOINT_FILE, PACKED_FILE] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let config = fs::read_to_string(run.join(CONFIG_FILE)).unwrap();
    assert!(config.lines().any(|l| l.starts_with("norm_mean=") && l.len() > "norm_mean=".len()));
    let metrics = fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.contains("train_loss=")).count(), 2);
    let final_acc: f64 = field(out.lines().last().unwrap(), "accuracy").parse().unwrap();
    assert!(final_acc > 50.0, "{out}");

    // The resolved config reproduces the run.
    let (code, _, err) =
        sdbnn(&["train", "--config", run.join(CONFIG_FILE).to_str().unwrap(), "--set", "name=again", "--data-root", root, "--no-verify", "--out", root]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(fs::read(run.join(CHECKPOINT_FILE)).unwrap(), fs::read(dir.path().join("again").join(CHECKPOINT_FILE)).unwrap());

    // Interrupted after one epoch and resumed: same bytes as uninterrupted.
    assert_eq!(train("split", &["--stop-after", "1"]).0, EXIT_OK);
    assert_eq!(train("split", &["--resume"]).0, EXIT_OK);
    assert_eq!(fs::read(run.join(CHECKPOINT_FILE)).unwrap(), fs::read(dir.path().join("split").join(CHECKPOINT_FILE)).unwrap());
    assert_eq!(train("split", &["--resume", "--set", "lr=0.1"]).0, EXIT_USAGE);

    let ck = run.join(CHECKPOINT_FILE);
    let ck = ck.to_str().unwrap();
    let eval = |args: &[&str]| {
        let mut a = vec!["eval", "--data-root", root, "--no-verify"];
        a.extend(args);
        let (code, out, err) = sdbnn(&a);
        assert_eq!(code, EXIT_OK, "{err}");
        out
    };
    let surrogate = eval(&["--checkpoint", ck]);
    let packed_path = eval(&["--checkpoint", ck, "--path", "packed"]);
    let exported = dir.path().join("m.sdbn");
    let (code, out, _) = sdbnn(&["export", "--checkpoint", ck, "--out", exported.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(fs::read(&exported).unwrap(), fs::read(run.join(PACKED_FILE)).unwrap());
    let ratio: f64 = field(&out, "ratio").parse().unwrap();
    assert!((ratio - 1.0 / 32.0).abs() < 0.002, "{out}");
    let file = eval(&["--packed", exported.to_str().unwrap(), "--path", "packed"]);
    for k in ["correct", "total", "accuracy"] {
        assert_eq!(field(&surrogate, k), field(&packed_path, k));
        assert_eq!(field(&surrogate, k), field(&file, k));
    }
    assert_eq!(field(&eval(&["--checkpoint", ck, "--limit", "30"]), "total"), "30");
    assert_eq!(sdbnn(&["eval", "--packed", exported.to_str().unwrap(), "--data-root", root, "--no-verify"]).0, EXIT_USAGE);

    let (code, out, _) = sdbnn(&["stats", "--checkpoint", ck, "--data-root", root, "--no-verify", "--batch", "20"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.lines().count(), 4);
    // Digests of real MNIST do not match the fixture.
    assert_eq!(sdbnn(&["eval", "--checkpoint", ck, "--data-root", root]).0, EXIT_RUNTIME);
}

#[test]
fn sweep_writes_one_run_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 100, 20);
    let root = dir.path().to_str().unwrap();
    let (code, out, err) = sdbnn(&[
        "train", "--data-root", root, "--no-verify", "--out", root, "--set", "name=grid", "--set", "epochs=1",
        "--set", "batch_size=50", "--sweep", "asd=off,sigmoid", "--sweep", "wsd=off,on",
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert_eq!(out.lines().filter(|l| l.contains(" dir=")).count(), 4);
    for d in ["asd=off,wsd=off", "asd=off,wsd=on", "asd=sigmoid,wsd=off", "asd=sigmoid,wsd=on"] {
        assert!(dir.path().join("grid").join(d).join(CHECKPOINT_FILE).exists(), "{d}");
    }
}
