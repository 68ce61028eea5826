use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use basisconv::data::{mnist_files, write_idx_images, write_idx_labels, Split};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_basisconv")).args(args).env_remove("BASISCONV_CACHE_DIR").output().unwrap()
}

fn tiny_mnist(dir: &Path) {
    let count = 40;
    let pixels: Vec<u8> = (0..count * 256).map(|i| ((i * 37 + i / 7) % 256) as u8).collect();
    let labels: Vec<u8> = (0..count).map(|i| (i % 10) as u8).collect();
    let [img, lab] = mnist_files(Split::Train);
    write_idx_images(&dir.join(img), count, 16, 16, &pixels).unwrap();
    write_idx_labels(&dir.join(lab), &labels).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_passes_on_a_fresh_checkout() {
    let out = run(&["verify"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(!text.contains("FAIL"));
    assert!(text.contains("0 failed"));
}

#[test]
fn rendered_partial_basis_repeats_quarter_turns() {
    let dir = tempfile::tempdir().unwrap();
    tiny_mnist(dir.path());
    let out_dir = dir.path().join("basis");
    let cfg = dir.path().join("pretrain.cfg");
    fs::write(&cfg, "partial = true\nepochs = 3\nbatch_size = 10 # small\n").unwrap();
    let out = run(&["pretrain-basis", "--config", s(&cfg), "--data-dir", s(dir.path()), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("pretrain-basis.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["partial"], "true");
    assert_eq!(manifest["config"]["epochs"], "3");
    assert!(manifest["outputs"].as_object().unwrap().keys().any(|k| k.ends_with("basis.bcb")));
    assert_eq!(fs::read_to_string(out_dir.join("pretrain_loss.csv")).unwrap().lines().count(), 4);

    let basis = out_dir.join("basis.bcb");
    let out = run(&["inspect-basis", "--basis", s(&basis), "--zoom", "2", "--out", s(&out_dir)]);
    assert!(out.status.success());
    let pgm = fs::read(out_dir.join("basis.pgm")).unwrap();
    let header = b"P5\n64 57\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    let px = &pgm[header.len()..];
    let (w, cell, side) = (64, 7, 6);
    let block = |r: usize, i: usize| -> Vec<Vec<u8>> {
        (0..side).map(|y| (0..side).map(|x| px[(r * cell + 1 + y) * w + i * cell + 1 + x]).collect()).collect()
    };
    let turn = |b: &Vec<Vec<u8>>| -> Vec<Vec<u8>> {
        (0..side).map(|i| (0..side).map(|j| b[j][side - 1 - i]).collect()).collect()
    };
    for r in 0..2 {
        for i in 0..9 {
            let mut expect = block(r, i);
            for q in 1..4 {
                expect = turn(&expect);
                assert_eq!(block(r + 2 * q, i), expect, "slot {} element {i}", r + 2 * q);
            }
        }
    }
}

#[test]
fn train_refuses_a_mismatched_basis() {
    let dir = tempfile::tempdir().unwrap();
    tiny_mnist(dir.path());
    let data = s(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let (basis_a, basis_b) = (a.join("basis.bcb"), b.join("basis.bcb"));
    assert!(run(&["pretrain-basis", "--baseline", "random", "--seed", "1", "--out", s(&a)]).status.success());
    assert!(run(&["pretrain-basis", "--baseline", "random", "--seed", "2", "--out", s(&b)]).status.success());
    let first = dir.path().join("first");
    let common = ["--data-dir", data, "--widths", "2,2", "--epochs", "1", "--batch-size", "20"];
    let mut args = vec!["train", "--basis", s(&basis_a), "--out", s(&first)];
    args.extend(common);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(first.join("checkpoint.bcm").exists());

    let second = dir.path().join("second");
    let ckpt = first.join("checkpoint.bcm");
    let mut args = vec!["train", "--basis", s(&basis_b), "--init-checkpoint", s(&ckpt)];
    args.extend(["--out", s(&second)]);
    args.extend(common);
    let out = run(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint_mismatch"));
    assert!(!second.join("checkpoint.bcm").exists());
}

#[test]
fn errors_exit_nonzero() {
    assert!(!run(&["train", "--no-such-flag"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["inspect-basis", "--basis", s(&dir.path().join("missing.bcb")), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing_file"));
    let out = run(&["train", "--model", "group", "--data-dir", s(dir.path())]);
    assert!(!out.status.success());
}
