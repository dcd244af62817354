use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use faq::datasets::{save_mnist_files, MNIST_TEST, MNIST_TRAIN};
use faq_core::data::{Dataset, Split};
use faq_core::rng::{stream, Purpose};
use rand::Rng;

fn faq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faq")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A learnable stand-in for MNIST: each class lights a different 6x6 patch.
fn synthetic_mnist(dir: &Path) {
    let mut rng = stream(3, Purpose::Synthetic, 0, 0);
    for (split, n, img, lab) in [
        (Split::Train, MNIST_TRAIN, "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        (Split::Test, MNIST_TEST, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ] {
        let mut images = vec![0u8; n * 784];
        let mut labels = vec![0u8; n];
        for i in 0..n {
            let k = rng.random_range(0..10u8);
            labels[i] = k;
            let (r0, c0) = (2 + 6 * (k as usize / 4), 2 + 6 * (k as usize % 4));
            for r in 0..28 {
                for c in 0..28 {
                    let on = (r0..r0 + 6).contains(&r) && (c0..c0 + 6).contains(&c);
                    let noise: u8 = rng.random_range(0..40);
                    images[i * 784 + r * 28 + c] = if on { 215 + noise } else { noise };
                }
            }
        }
        let d = Dataset::new(split, [28, 28, 1], 10, images, labels).unwrap();
        save_mnist_files(&d, &dir.join(img), &dir.join(lab)).unwrap();
    }
}

fn write_recipe(recipe: &str, data: &Path, out: &Path, extra: &[&str], path: &Path) {
    let mut args = vec!["init-config", recipe, "--data-dir", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = faq(&args);
    assert!(o.status.success());
    fs::write(path, o.stdout).unwrap();
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
}

#[test]
fn baseline_finetune_lower_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("mnist");
    fs::create_dir_all(&data).unwrap();
    synthetic_mnist(&data);
    let base_out = tmp.path().join("base");
    let base_cfg = tmp.path().join("base.toml");
    write_recipe("mnist-baseline", &data, &base_out, &[], &base_cfg);
    let o = faq(&["train-baseline", "--config", base_cfg.to_str().unwrap(), "--train-limit", "6000", "--epochs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt: PathBuf = base_out.join("checkpoint.safetensors");
    assert!(ckpt.exists() && base_out.join("metrics.csv").exists());

    let q_out = tmp.path().join("q4");
    let q_cfg = tmp.path().join("q4.toml");
    write_recipe("mnist-faq4", &data, &q_out, &["--baseline", ckpt.to_str().unwrap(), "--epochs", "1"], &q_cfg);
    let o = faq(&["faq", "--config", q_cfg.to_str().unwrap(), "--train-limit", "6000"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["calibration.jsonl", "metrics.csv", "checkpoint.safetensors", "model.faqi", "summary.json", "config.resolved.toml"] {
        assert!(q_out.join(f).exists(), "missing {f}");
    }

    // lowering again reproduces the integer model written by the run
    let relowered = tmp.path().join("again.faqi");
    let q_ckpt = q_out.join("checkpoint.safetensors");
    let o = faq(&["lower", "--checkpoint", q_ckpt.to_str().unwrap(), "--out", relowered.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&relowered).unwrap(), fs::read(q_out.join("model.faqi")).unwrap());

    let o = faq(&[
        "eval",
        "--checkpoint",
        q_ckpt.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--integer",
        relowered.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let sim = value(&text, "test_acc");
    let int = value(&text, "integer_test_acc");
    assert!(sim > 0.9, "{text}");
    assert!((sim - int).abs() < 0.005, "{text}");

    // rerunning into a populated directory needs --overwrite
    let o = faq(&["faq", "--config", q_cfg.to_str().unwrap(), "--train-limit", "6000"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn exit_codes_name_the_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    write_recipe("mnist-baseline", &tmp.path().join("absent"), &tmp.path().join("out"), &[], &cfg);

    let o = faq(&["train-baseline", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "missing data");

    let o = faq(&["train-baseline", "--config", cfg.to_str().unwrap(), "--bits", "1"]);
    assert_eq!(o.status.code(), Some(2), "unsupported bit width");

    let text = fs::read_to_string(&cfg).unwrap().replace("[plan]", "[plan]\nbogus = 1");
    fs::write(&cfg, text).unwrap();
    let o = faq(&["train-baseline", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "unknown key");
}
