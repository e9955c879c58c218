use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cipherpatch::blockcodec::format::{read_image, write_image};
use cipherpatch::blockcodec::ImageTensor;
use cipherpatch::vit::{init_params, save_params, ViTConfig};

fn cli(dir: &Path, args: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cipherpatch"))
        .args(args.split_whitespace())
        .current_dir(dir)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ViTConfig::default();
    let n = cfg.image_h * cfg.image_w * cfg.channels;
    let x = ImageTensor::new(
        cfg.image_h,
        cfg.image_w,
        cfg.channels,
        (0..n).map(|i| (i % 256) as f32 / 255.0).collect(),
    )
    .unwrap();
    write_image(&dir.path().join("img.ppm"), &x).unwrap();
    fs::create_dir(dir.path().join("images")).unwrap();
    write_image(&dir.path().join("images/a.ppm"), &x).unwrap();
    save_params(
        &dir.path().join("model.vitw"),
        &cfg,
        &init_params(&cfg, 1).unwrap(),
    )
    .unwrap();
    dir
}

#[test]
fn keygen_prints_two_decimal_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), "keygen --seed 0");
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], format!("k1={}", 0xE220_A839_7B1D_CDAFu64));
    assert!(lines[1].strip_prefix("k2=").unwrap().parse::<u64>().is_ok());
}

#[test]
fn encrypt_decrypt_round_trip_in_each_mode() {
    let dir = setup();
    let p = dir.path();
    for mode in ["block", "pixel", "both"] {
        let keys = format!("--k1 5 --k2 6 --block 8 --mode {mode}");
        assert!(cli(p, &format!("encrypt --in img.ppm --out e.ppm {keys}"))
            .status
            .success());
        assert!(cli(p, &format!("decrypt --in e.ppm --out d.ppm {keys}"))
            .status
            .success());
        assert_ne!(
            fs::read(p.join("e.ppm")).unwrap(),
            fs::read(p.join("img.ppm")).unwrap()
        );
        assert_eq!(
            fs::read(p.join("d.ppm")).unwrap(),
            fs::read(p.join("img.ppm")).unwrap()
        );
    }
}

#[test]
fn bad_block_size_is_an_error() {
    let dir = setup();
    let out = cli(
        dir.path(),
        "encrypt --in img.ppm --out e.ppm --k1 1 --k2 2 --block 5",
    );
    assert_eq!(out.status.code(), Some(2));
    let out = cli(
        dir.path(),
        "adapt --weights model.vitw --out a.vitw --k1 1 --k2 2 --block 4",
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("a.vitw").exists());
}

#[test]
fn adapted_model_on_encrypted_image_matches_source() {
    let dir = setup();
    let p = dir.path();
    let run = |base: &str| {
        let out = cli(p, &format!("{base} --k1 3 --k2 4 --block 8"));
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run("adapt --weights model.vitw --out a.vitw");
    run("encrypt --in img.ppm --out e.ppm");
    assert_eq!(
        fs::read_to_string(p.join("a.vitw.keys")).unwrap(),
        "k1=3\nk2=4\np=8\n"
    );
    let plain = cli(p, "infer --weights model.vitw --image img.ppm");
    let enc = cli(p, "infer --weights a.vitw --image e.ppm");
    let logits = |o: &Output| -> Vec<f32> {
        let text = String::from_utf8(o.stdout.clone()).unwrap();
        let line = text
            .lines()
            .find_map(|l| l.strip_prefix("logits "))
            .unwrap()
            .to_owned();
        line.split(' ').map(|v| v.parse().unwrap()).collect()
    };
    for (a, b) in logits(&plain).iter().zip(logits(&enc)) {
        assert!((a - b).abs() <= 1e-4);
    }
    let argmax = |o: &Output| {
        String::from_utf8(o.stdout.clone())
            .unwrap()
            .lines()
            .last()
            .unwrap()
            .to_owned()
    };
    assert_eq!(argmax(&plain), argmax(&enc));
    // decrypting recovers the pixels exactly
    run("decrypt --in e.ppm --out d.ppm");
    assert_eq!(
        read_image(&p.join("d.ppm")).unwrap(),
        read_image(&p.join("img.ppm")).unwrap()
    );
}

#[test]
fn verify_exit_code_reflects_key_match() {
    let dir = setup();
    let p = dir.path();
    let ok = cli(
        p,
        "verify --weights model.vitw --k1 1 --k2 2 --block 8 --images images --tol 1e-4",
    );
    assert_eq!(ok.status.code(), Some(0));
    let csv = String::from_utf8(ok.stdout).unwrap();
    assert!(csv.starts_with("image_id,max_abs_diff,pass\na.ppm,"));
    assert!(csv.trim_end().ends_with(",true"));

    assert!(cli(
        p,
        "adapt --weights model.vitw --out a.vitw --k1 1 --k2 2 --block 8"
    )
    .status
    .success());
    let wrong = cli(
        p,
        "verify --weights a.vitw --k1 1 --k2 3 --block 8 --images images --tol 1e-4",
    );
    assert_eq!(wrong.status.code(), Some(1));
    assert!(String::from_utf8(wrong.stdout)
        .unwrap()
        .trim_end()
        .ends_with(",false"));
}

#[test]
fn missing_weights_file_is_reported() {
    let dir = setup();
    let out = cli(dir.path(), "infer --weights nope.vitw --image img.ppm");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.vitw"));
}
