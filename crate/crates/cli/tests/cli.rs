use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 14] = [
    "--model.backbone",
    "S3",
    "--model.channels",
    "8",
    "--model.width_multiplier",
    "0.125",
    "--model.image_size",
    "32",
    "--model.token_length",
    "2",
    "--data.patch_size",
    "32",
    "--train.batch_size",
    "4",
];

fn bitcd(dir: &Path, command: &str, extra: &[&str]) -> Output {
    let root = dir.join("data");
    let out = dir.join("run");
    let mut args = vec![command, "--data.root", root.to_str().unwrap(), "--output_dir", out.to_str().unwrap()];
    args.extend(TINY);
    args.extend(extra);
    let output = Command::new(env!("CARGO_BIN_EXE_bitcd"))
        .args(&args)
        .env_remove("BITCD_SEED")
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "bitcd {command} failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn count(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().count()
}

#[test]
fn synth_train_eval_infer_and_visualize() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    bitcd(dir, "synth", &["--synth.train", "8", "--synth.val", "4", "--synth.test", "4", "--synth.size", "32"]);
    for split in ["train", "val", "test"] {
        for sub in ["A", "B", "label"] {
            assert!(dir.join("data").join(split).join(sub).is_dir(), "{split}/{sub}");
        }
    }
    assert_eq!(count(&dir.join("data/train/A")), 8);

    bitcd(dir, "train", &["--train.epochs", "2"]);
    let run = dir.join("run");
    let log = fs::read_to_string(run.join("epochs.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(run.join("best").is_dir());
    assert!(run.join("config.txt").is_file());

    let eval = String::from_utf8(bitcd(dir, "eval", &[]).stdout).unwrap();
    for key in ["precision", "recall", "f1", "iou", "oa"] {
        assert!(eval.lines().any(|l| l.starts_with(&format!("{key} = "))), "{eval}");
    }
    assert!(run.join("eval.txt").is_file());

    bitcd(dir, "infer", &[]);
    assert_eq!(count(&run.join("masks")), 4);
    let mask = image::open(fs::read_dir(run.join("masks")).unwrap().next().unwrap().unwrap().path())
        .unwrap()
        .to_luma8();
    assert_eq!(mask.dimensions(), (32, 32));
    assert!(mask.pixels().all(|p| p[0] == 0 || p[0] == 255));

    let best = run.join("best");
    let best = best.to_str().unwrap();
    bitcd(dir, "vis-tokens", &["--checkpoint", best]);
    assert_eq!(count(&run.join("vis-tokens")), 4);
    bitcd(dir, "vis-features", &["--checkpoint", best, "--vis.channels", "2"]);
    assert_eq!(count(&run.join("vis-features")), 15);
}

#[test]
fn profile_prints_the_reference_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = String::from_utf8(bitcd(tmp.path(), "profile", &[]).stdout).unwrap();
    for name in ["Base_S5", "Base_S4", "Base_S3", "BIT_S4", "BIT_S3"] {
        assert!(out.contains(name), "{out}");
    }
    assert!(tmp.path().join("run/profile.txt").is_file());
}

#[test]
fn bad_configuration_names_the_key() {
    let output = Command::new(env!("CARGO_BIN_EXE_bitcd"))
        .args(["profile", "--model.token_length", "0"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("model.token_length"));
}
