use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ucmnet::data::{synthetic_circles, write_png_dataset};

fn ucmnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ucmnet")).args(args).output().expect("spawn ucmnet")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Ten synthetic 64×64 samples and a small-image config pointing at them.
fn fixture(dir: &Path, extra: &str) -> (PathBuf, PathBuf) {
    let manifest = write_png_dataset(&synthetic_circles(10, 64, 3), &dir.join("data")).unwrap();
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "image_size = 64\nbatch_size = 4\nmanifest = {}\noutput_dir = {}\n{extra}",
            manifest.display(),
            dir.join("out").display()
        ),
    )
    .unwrap();
    (cfg, manifest)
}

#[test]
fn train_override_and_eval_reproduce_logged_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = fixture(dir.path(), "");
    let o = ucmnet(&["-c", p(&cfg), "train", "--epochs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    let rows: Vec<&str> = history.lines().collect();
    assert_eq!(rows[0], "epoch,lr,train_loss,test_miou,test_mdice,test_miou_star,test_mdice_star");
    assert_eq!(rows.len(), 3);
    for f in ["final.ucmw", "best.ucmw", "checkpoint.ucmw", "config.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }

    // the final weights scored again on the test split give the last logged row exactly
    let metrics = dir.path().join("m.csv");
    for weights in ["final.ucmw", "checkpoint.ucmw"] {
        let o = ucmnet(&["-c", p(&cfg), "eval", "--weights", p(&out.join(weights)), "--out", p(&metrics)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let stdout = String::from_utf8_lossy(&o.stdout);
        for name in ["mIoU ", "mDice ", "mIoU* ", "mDice* "] {
            assert!(stdout.contains(name), "{stdout}");
        }
        let m = std::fs::read_to_string(&metrics).unwrap();
        let m_row: Vec<&str> = m.lines().nth(1).unwrap().split(',').collect();
        let h_row: Vec<&str> = rows[2].split(',').collect();
        assert_eq!(m_row[0], "test");
        assert_eq!(&m_row[2..6], &h_row[3..7], "{m}\n{history}");
    }
}

#[test]
fn missing_manifest_exits_3_naming_the_path() {
    let o = ucmnet(&["train", "--manifest", "/definitely/not/here.csv", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("/definitely/not/here.csv"));
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = fixture(dir.path(), "");
    std::fs::remove_file(manifest.parent().unwrap().join("masks/synth0004.png")).unwrap();
    let o = ucmnet(&["-c", p(&cfg), "train", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("synth0004.png"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["learning_rate = 1", "epochs = -1", "image_size = 65"] {
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, text).unwrap();
        let o = ucmnet(&["-c", p(&cfg), "profile"]);
        assert_eq!(o.status.code(), Some(2), "{text}: {}", stderr(&o));
    }
    let o = ucmnet(&["train", "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(2), "no manifest configured");
}

#[test]
fn empty_test_split_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = fixture(dir.path(), "split_ratio = 1.0\n");
    let o = ucmnet(&["-c", p(&cfg), "train", "--epochs", "1"]);
    assert!(o.status.success(), "training without a test split is allowed: {}", stderr(&o));
    let w = dir.path().join("out/final.ucmw");
    let o = ucmnet(&["-c", p(&cfg), "eval", "--weights", p(&w), "--out", p(&dir.path().join("m.csv"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("test"));
}

#[test]
fn architecture_mismatch_names_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = fixture(dir.path(), "");
    assert!(ucmnet(&["-c", p(&cfg), "train", "--epochs", "1"]).status.success());
    let other = dir.path().join("other.cfg");
    let text = std::fs::read_to_string(&cfg).unwrap() + "stage_channels = 8, 16, 24, 32, 48, 72\n";
    std::fs::write(&other, text).unwrap();
    let w = dir.path().join("out/final.ucmw");
    let o = ucmnet(&["-c", p(&other), "eval", "--weights", p(&w), "--out", p(&dir.path().join("m.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("file shape") && e.lines().count() > 2, "{e}");
    let o = ucmnet(&["-c", p(&cfg), "eval", "--weights", p(&cfg), "--out", p(&dir.path().join("m.csv"))]);
    assert_eq!(o.status.code(), Some(3), "not a weight file");
}

#[test]
fn predict_writes_binary_mask_at_original_size_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest) = fixture(dir.path(), "");
    assert!(ucmnet(&["-c", p(&cfg), "train", "--epochs", "1"]).status.success());
    let w = dir.path().join("out/final.ucmw");
    // a non-square input exercises the resize back to the source dimensions
    let src = image::open(manifest.parent().unwrap().join("images/synth0001.png")).unwrap();
    let odd = dir.path().join("odd.png");
    src.resize_exact(50, 37, image::imageops::FilterType::Triangle).save(&odd).unwrap();
    let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
    for out in [&a, &b] {
        let o = ucmnet(&["-c", p(&cfg), "predict", "--weights", p(&w), "--image", p(&odd), "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let mask = image::open(&a).unwrap();
    assert_eq!(mask.color(), image::ColorType::L8);
    let mask = mask.to_luma8();
    assert_eq!(mask.dimensions(), (50, 37));
    assert!(mask.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));

    let o = ucmnet(&["-c", p(&cfg), "predict", "--weights", p(&w), "--image", "/no/such.png", "--out", p(&a)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn split_assigns_and_preserves_paths() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest) = fixture(dir.path(), "");
    let out = dir.path().join("elsewhere/split.csv");
    std::fs::create_dir_all(out.parent().unwrap()).unwrap();
    let o = ucmnet(&["split", "--manifest", p(&manifest), "--out", p(&out), "--ratio", "0.7", "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = ucmnet::data::DatasetManifest::read_csv(&out).unwrap();
    assert_eq!(m.split(ucmnet::data::Split::Train).len(), 7);
    assert_eq!(m.split(ucmnet::data::Split::Test).len(), 3);
    assert!(m.records.iter().all(|r| m.resolve(&r.image).exists() && m.resolve(&r.mask).exists()));
    let again = dir.path().join("elsewhere/again.csv");
    ucmnet(&["split", "--manifest", p(&manifest), "--out", p(&again), "--ratio", "0.7", "--seed", "9"]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn profile_and_ablate_report_reference_rows() {
    let o = ucmnet(&["ablate"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("variant_a_doubleconv") && rows[0].contains("248531"));
    assert!(rows[1].starts_with("variant_b_conv1x1") && rows[1].contains("148157") && rows[1].contains("0.3700"));
    assert!(rows[2].starts_with("variant_c_ucm") && rows[2].contains("49932"));

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("p.csv");
    let o = ucmnet(&["profile", "--csv", p(&csv)]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("convention") && text.contains("vs reference"));
    assert!(std::fs::read_to_string(&csv).unwrap().lines().last().unwrap().starts_with("total"));
}
