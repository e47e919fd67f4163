use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csasr::imaging::{load_image, save_image, ImageF32};

fn csasr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csasr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn pattern(size: usize, seed: usize) -> ImageF32 {
    let data = (0..3 * size * size)
        .map(|i| {
            let (c, y, x) = (i / (size * size), (i / size) % size, i % size);
            let v = 0.5 + 0.3 * ((x + seed) as f32 * 0.4 + c as f32).sin() * ((y * (seed + 1)) as f32 * 0.3).cos();
            v + if (x / 3 + y / 3 + seed) % 2 == 0 { 0.1 } else { -0.1 }
        })
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    ImageF32::new(3, size, size, data).unwrap()
}

/// Two classes of small PNG tiles laid out like the UCMerced archive.
fn dataset(root: &Path, per_class: usize, size: usize) -> PathBuf {
    let data = root.join("Images");
    for (ci, class) in ["beach", "forest"].iter().enumerate() {
        fs::create_dir_all(data.join(class)).unwrap();
        for i in 0..per_class {
            save_image(&data.join(class).join(format!("{class}{i:02}.png")), &pattern(size, ci * 7 + i)).unwrap();
        }
    }
    data
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&csasr(&["frobnicate"])), 1);
    assert_eq!(code(&csasr(&["selftest", "--set", "train.nonsense=3"])), 1);
    assert_eq!(code(&csasr(&["gradcheck", "--set", "model.scale=7", "--filter", "sigmoid"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    assert_eq!(code(&csasr(&["eval", "--baseline", "bicubic", "--config", s(&missing)])), 1);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    assert_eq!(code(&csasr(&["eval", "--baseline", "bicubic", "--data", s(&missing)])), 2);

    let junk = dir.path().join("junk.png");
    fs::write(&junk, b"definitely not a png").unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&csasr(&["degrade", s(&junk), "--out", s(&out)])), 2);

    let ckpt = dir.path().join("bad.ckpt");
    fs::write(&ckpt, b"garbage").unwrap();
    let img = dir.path().join("ok.png");
    save_image(&img, &pattern(16, 0)).unwrap();
    assert_eq!(code(&csasr(&["sr", "--checkpoint", s(&ckpt), "--out", s(&out), s(&img)])), 2);
}

#[test]
fn numerical_failures_exit_with_three() {
    let out = csasr(&["gradcheck", "--filter", "sigmoid", "--inject-fault", "1.01"]);
    assert_eq!(code(&out), 3);
    assert!(stdout(&out).contains("false"));
    let clean = csasr(&["gradcheck", "--filter", "sigmoid"]);
    assert_eq!(code(&clean), 0);
    let text = stdout(&clean);
    assert!(text.starts_with("case,max_rel_error,tol,coords,passed\n"));
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn degrade_writes_matching_hr_and_lr_trees() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    fs::create_dir_all(src.join("river")).unwrap();
    let original = src.join("river").join("river00.png");
    save_image(&original, &pattern(256, 3)).unwrap();
    let before = fs::read(&original).unwrap();
    let out = dir.path().join("pairs");

    let run = csasr(&["degrade", s(&src), "--out", s(&out), "--scale", "3"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let hr = load_image(&out.join("HR").join("river").join("river00.png")).unwrap();
    let lr = load_image(&out.join("LR_x3").join("river").join("river00.png")).unwrap();
    assert_eq!((hr.height, hr.width), (255, 255));
    assert_eq!((lr.height, lr.width), (85, 85));
    assert_eq!(fs::read(&original).unwrap(), before, "source must be left untouched");

    let nested = src.join("inside");
    assert_eq!(code(&csasr(&["degrade", s(&src), "--out", s(&nested)])), 1);
}

#[test]
fn bicubic_baseline_report_has_per_class_and_overall_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5, 48);
    let out = csasr(&["eval", "--baseline", "bicubic", "--data", s(&data), "--scale", "2", "--split", "test"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "class,count,psnr_mean,ssim_mean");
    assert_eq!(lines.len(), 4, "{text}");
    let overall: Vec<&str> = lines[3].split(',').collect();
    assert_eq!(overall[0], "overall");
    let per_class: usize = lines[1..3].iter().map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(overall[1].parse::<usize>().unwrap(), per_class);
    let psnr: f64 = overall[2].parse().unwrap();
    let ssim: f64 = overall[3].parse().unwrap();
    assert!(psnr > 10.0 && psnr.is_finite());
    assert!(ssim > 0.0 && ssim <= 1.0);
}

#[test]
fn train_eval_and_sr_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 5, 40);
    let run = dir.path().join("run");
    let common = [
        "--data",
        s(&data),
        "--scale",
        "2",
        "--seed",
        "3",
        "--set",
        "model.preset=toy",
        "--set",
        "train.epochs=2",
        "--set",
        "train.iters_per_epoch=3",
        "--set",
        "train.patch_hr=16",
        "--set",
        "train.batch=2",
    ];
    let mut args = vec!["train", "--out", s(&run)];
    args.extend_from_slice(&common);
    let out = csasr(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["last.ckpt", "best.ckpt", "split.txt", "config.txt", "train_log.csv"] {
        assert!(run.join(file).exists(), "{file} missing");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 6, "{log}");

    let ckpt = run.join("best.ckpt");
    let eval = csasr(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "val"]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(stdout(&eval).lines().last().unwrap().starts_with("overall,"));

    let input = data.join("beach").join("beach00.png");
    let sr_dir = dir.path().join("sr");
    let sr = csasr(&["sr", "--checkpoint", s(&ckpt), "--out", s(&sr_dir), s(&input)]);
    assert_eq!(code(&sr), 0, "{}", String::from_utf8_lossy(&sr.stderr));
    let up = load_image(&sr_dir.join("beach00_x2.png")).unwrap();
    assert_eq!((up.height, up.width), (80, 80));

    // a checkpoint cannot be resumed under a different architecture
    let bad = csasr(&["train", "--out", s(&run), "--checkpoint", s(&run.join("last.ckpt")), "--data", s(&data), "--scale", "3"]);
    assert_ne!(code(&bad), 0);
}

#[test]
fn selftest_passes() {
    let out = csasr(&["selftest"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.lines().count() > 10);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}
