use std::path::Path;
use std::process::{Command, Output};

use uplift_core::bench::{save_records, BenchRecord, Method};
use uplift_core::checkpoint::load_model;
use uplift_core::fmap::{load_fmap, save_fmap};
use uplift_core::training::{synthetic_image, LossTrace};
use uplift_core::FeatureMap;

fn uplift(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uplift"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn uplift")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = uplift(&["verify"], dir.path());
    let text = stdout(&out);
    assert!(out.status.success(), "{text}\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(text.contains("PASS attend == attend_reference"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn bench_writes_csv_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = uplift(
        &["bench", "--sizes", "4,9", "--out", "b.csv", "--patch", "4", "--feat-channels", "4", "--repeats", "2"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,tokens,repeat,ms,bytes"));
    assert_eq!(lines.count(), 4 * 2 * 2);
    // Outputs are seed-fixed: a second run reports the same digests.
    let again = uplift(
        &["bench", "--sizes", "4,9", "--out", "c.csv", "--patch", "4", "--feat-channels", "4", "--repeats", "1", "--warmup", "0"],
        dir.path(),
    );
    assert_eq!(stdout(&out), stdout(&again));
}

#[test]
fn slopes_of_exact_power_laws() {
    let dir = tempfile::tempdir().unwrap();
    for (name, method, power) in [("lin.csv", Method::Uplift, 1.0), ("quad.csv", Method::CrossAttn, 2.0)] {
        let recs: Vec<BenchRecord> = [1024usize, 2025, 4096, 8100, 16384]
            .iter()
            .flat_map(|&t| {
                (0..3).map(move |repeat| BenchRecord {
                    method,
                    tokens: t,
                    repeat,
                    ms: 1e-3 * (t as f64).powf(power),
                    bytes: t,
                })
            })
            .collect();
        save_records(dir.path().join(name), &recs).unwrap();
        let out = uplift(&["slopes", "--in", name], dir.path());
        assert!(out.status.success());
        let text = stdout(&out);
        let row = text.lines().find(|l| l.starts_with(method.name())).unwrap();
        let slope: f64 = row.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert_eq!(slope, power, "{text}");
    }
}

#[test]
fn train_eval_upsample() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("t.cfg"),
        "steps = 4\nbatch_size = 1\nimage_size = 16\ndepths = 1\n",
    )
    .unwrap();
    let out = uplift(&["train", "--config", "t.cfg", "--checkpoint", "m.ckpt", "--trace", "l.csv"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = LossTrace::load(dir.path().join("l.csv")).unwrap();
    assert_eq!(trace.rows.len(), 4);
    let model = load_model(dir.path().join("m.ckpt")).unwrap();

    let out = uplift(&["eval", "--model", "m.ckpt", "--config", "t.cfg", "--images", "3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().any(|l| l.split_whitespace().next() == Some("1")));

    let image = synthetic_image(9, 0, 32, 32);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let feats = FeatureMap::<f32>::random_uniform(4, 4, 16, 1.0, &mut rng);
    save_fmap(dir.path().join("img.fmap"), &image).unwrap();
    save_fmap(dir.path().join("f.fmap"), &feats).unwrap();
    let out = uplift(
        &["upsample", "--model", "m.ckpt", "--in", "f.fmap", "--image", "img.fmap", "--steps", "2", "--out", "o.fmap"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let got: FeatureMap = load_fmap(dir.path().join("o.fmap")).unwrap();
    assert_eq!(got, model.uplift_inference(&image, &feats, 2).unwrap());
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(uplift(&[], dir.path()).status.code(), Some(2));
    assert_eq!(uplift(&["train"], dir.path()).status.code(), Some(2));
    assert_eq!(uplift(&["bench", "--methods", "magic", "--out", "x"], dir.path()).status.code(), Some(2));
    assert_eq!(uplift(&["upsample", "--steps", "two"], dir.path()).status.code(), Some(2));
    let missing = uplift(&["eval", "--model", "missing.ckpt"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing.ckpt"));
    let bad_size = uplift(&["bench", "--sizes", "5", "--out", "x.csv"], dir.path());
    assert_eq!(bad_size.status.code(), Some(1));
    assert!(!dir.path().join("x.csv").exists());
}
