use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use gesture_core::animation::{Bvh, bvh_joint_positions};
use gesture_core::audio::{write_wav, AudioClip, SAMPLE_RATE};
use gesture_core::dataset::load_pose_file;
use gesture_core::skeleton::SkeletonTopology;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gesture(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gesture")).args(args).output().expect("run gesture")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn noise_wav(path: &Path, seconds: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let samples = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
    write_wav(path, &AudioClip::new(samples, SAMPLE_RATE).unwrap()).unwrap();
}

/// Ten-clip dataset plus a one-epoch checkpoint.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let o = gesture(&["--seed", "5", "synth-data", "--kind", "unimodal", "--n", "10", "--out", s(&data)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = dir.join("ck");
    let manifest = data.join("manifest.json");
    let o = gesture(&["train", "--manifest", s(&manifest), "--epochs", "1", "--checkpoint-dir", s(&ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    (manifest, ck.join("epoch_001.ckpt"))
}

#[test]
fn synth_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = gesture(&["--seed", "9", "synth-data", "--kind", "multimodal", "--n", "4", "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut files: Vec<_> = std::fs::read_dir(dir.path().join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.len(), 9);
    for f in files {
        let a = std::fs::read(dir.path().join("a").join(&f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&f)).unwrap();
        assert!(a == b, "{f:?} differs");
    }
}

#[test]
fn synth_data_io_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = gesture(&["synth-data", "--kind", "unimodal", "--n", "2", "--out", s(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn train_missing_manifest_exits_2() {
    let o = gesture(&["train", "--manifest", "/nonexistent/manifest.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/manifest.json"));
}

#[test]
fn train_one_epoch_writes_history_and_reports_pck() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gesture(&["synth-data", "--kind", "unimodal", "--n", "10", "--out", s(&data)]).status.success());
    let ck = dir.path().join("ck");
    let history = dir.path().join("h.csv");
    let start = Instant::now();
    let o = gesture(&[
        "train",
        "--manifest",
        s(&data.join("manifest.json")),
        "--epochs",
        "1",
        "--checkpoint-dir",
        s(&ck),
        "--history",
        s(&history),
    ]);
    assert!(start.elapsed() < Duration::from_secs(60));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("val PCK@0.2"));
    assert!(ck.join("epoch_001.ckpt").is_file());
    // 8 train clips at batch 16: one batch, one D step and one G step.
    let rows = std::fs::read_to_string(&history).unwrap().lines().count() - 1;
    assert_eq!(rows, 2);
}

#[test]
fn train_divergence_exits_nonzero_with_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gesture(&["synth-data", "--kind", "unimodal", "--n", "10", "--out", s(&data)]).status.success());
    let o = gesture(&[
        "train",
        "--manifest",
        s(&data.join("manifest.json")),
        "--epochs",
        "20",
        "--lr-g",
        "1e150",
        "--checkpoint-dir",
        s(&dir.path().join("ck")),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn train_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gesture(&["synth-data", "--kind", "unimodal", "--n", "4", "--out", s(&data)]).status.success());
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"train": {"batch_size": 0}}"#).unwrap();
    let o = gesture(&["train", "--manifest", s(&data.join("manifest.json")), "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn generate_pose_and_bvh() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(dir.path());
    let wav = dir.path().join("speech.wav");
    noise_wav(&wav, 8.0, 1);
    let run = |tag: &str, extra: &[&str]| {
        let pose = dir.path().join(format!("{tag}.pose"));
        let bvh = dir.path().join(format!("{tag}.bvh"));
        let mut args = vec!["generate", "--checkpoint", s(&ckpt), "--wav", s(&wav), "--out", s(&pose), "--bvh", s(&bvh)];
        args.extend_from_slice(extra);
        let o = gesture(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        (pose, bvh)
    };
    let (p1, b1) = run("a", &[]);
    let (p2, b2) = run("b", &[]);
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(std::fs::read(&b1).unwrap(), std::fs::read(&b2).unwrap());
    let poses = load_pose_file(&p1).unwrap();
    assert_eq!(poses.len(), 128);

    let (raw_pose, raw_bvh) = run("raw", &["--smooth-window", "1", "--no-finger-limits"]);
    let poses = load_pose_file(&raw_pose).unwrap();
    let bvh = Bvh::load(&raw_bvh).unwrap();
    assert_eq!(bvh.frames.len(), poses.len());
    let topo = SkeletonTopology::upper_body();
    let mut worst = 0.0f64;
    for t in 0..poses.len() {
        let fk = bvh_joint_positions(&bvh, t);
        let at = |name: &str| fk.iter().find(|(n, _)| n == name).unwrap().1;
        let frame = poses.frame(t);
        for bone in topo.bones() {
            let p = &topo.joints()[bone.parent].name;
            let c = &topo.joints()[bone.child].name;
            let want = unit(sub(frame[bone.child], frame[bone.parent]));
            let got = unit(sub(at(c), at(p)));
            worst = worst.max((0..3).map(|k| (want[k] - got[k]).abs()).fold(0.0, f64::max));
        }
    }
    assert!(worst < 1e-3, "direction error {worst}");
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

#[test]
fn generate_short_audio_is_explicit() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(dir.path());
    let wav = dir.path().join("short.wav");
    noise_wav(&wav, 1.5, 2);
    let o = gesture(&["generate", "--checkpoint", s(&ckpt), "--wav", s(&wav), "--out", s(&dir.path().join("x.pose"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("at least 4 s"), "{}", stderr(&o));
}

#[test]
fn generate_missing_wav_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(dir.path());
    let o = gesture(&["generate", "--checkpoint", s(&ckpt), "--wav", "/nonexistent.wav", "--out", "x.pose"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent.wav"));
}

#[test]
fn evaluate_ground_truth_and_bad_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, ckpt) = trained(dir.path());
    let out = dir.path().join("report.json");
    let o = gesture(&["evaluate", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--ground-truth", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["pck"], 1.0);
    assert_eq!(report["alpha"], 0.2);

    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"definitely not a checkpoint").unwrap();
    let o = gesture(&["evaluate", "--checkpoint", s(&bad), "--manifest", s(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let o = gesture(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for op in ["conv1d", "instance_norm", "gan_loss_d", "generator_objective"] {
        assert!(text.lines().any(|l| l.starts_with(op) && l.ends_with("pass")), "{op} missing");
    }
}
