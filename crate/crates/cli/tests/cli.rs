use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use fusionkit::audio::{log_floor, AudioClip};
use fusionkit::dataset::{write_annotations, write_wav, Manifest, Split, SyntheticSpec};
use fusionkit::model::{Head, Model, ModelConfig};
use fusionkit::sampling::{CapPolicy, FrameLabels, WindowKind};
use fusionkit_cli::*;
use tempfile::TempDir;

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        n_videos: 3,
        frames_per_video: 96,
        val_videos: 1,
        ..SyntheticSpec::default()
    }
}

fn corpus(spec: &SyntheticSpec, seed: u64) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    cmd_generate(spec, seed, dir.path(), &mut Vec::new()).unwrap();
    let manifest = dir.path().join("manifest.jsonl");
    (dir, manifest)
}

fn relabel(manifest: &Path, f: impl Fn(usize) -> i8) {
    let m = Manifest::load(manifest).unwrap();
    for e in &m.entries {
        let v = m.load_video(e).unwrap();
        let labels: Vec<i8> = (0..v.labels.len()).map(&f).collect();
        let path = m.resolve(&e.annotation_path);
        write_annotations(&path, &FrameLabels::new(e.video_id.clone(), labels).unwrap()).unwrap();
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        mlp_ratio: 2,
        n_encoder_layers: 1,
        n_fusion_layers: 1,
        ..ModelConfig::default()
    }
}

fn write_config(dir: &Path, config: &ModelConfig) -> PathBuf {
    let p = dir.join("toy.cfg");
    fs::write(&p, config.to_kv_string()).unwrap();
    p
}

fn run_config(manifest: &Path, config: &Path, out: &Path, epochs: usize) -> RunConfig {
    RunConfig {
        manifest: manifest.to_path_buf(),
        config: Some(config.to_path_buf()),
        seed: 3,
        epochs,
        batch_size: 8,
        cap: CapPolicy::Absolute(4),
        out: out.to_path_buf(),
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusionkit"))
}

#[test]
fn stats_match_generated_class_counts() {
    let spec = small_spec();
    let (dir, manifest) = corpus(&spec, 9);
    let mut text = Vec::new();
    let report = cmd_stats(&manifest, Some(dir.path()), &mut text).unwrap();

    let labels = spec.frame_labels(9);
    let n_train = spec.n_videos - spec.val_videos;
    for (split, videos) in [(Split::Train, &labels[..n_train]), (Split::Val, &labels[n_train..])] {
        let mut expected = [0u64; 8];
        for &l in videos.iter().flatten() {
            expected[l as usize] += 1;
        }
        let (_, got) = report.splits.iter().find(|(s, _)| *s == split).unwrap();
        assert_eq!(got.counts, expected, "{split:?}");
    }
    assert!(dir.path().join("stats.json").exists());
    assert!(fs::read_to_string(dir.path().join("stats.csv")).unwrap().lines().count() > 8);
    assert!(String::from_utf8(text).unwrap().contains("Neutral"));
}

#[test]
fn stats_on_empty_manifest_reports_no_data() {
    let dir = TempDir::new().unwrap();
    let manifest = dir.path().join("manifest.jsonl");
    fs::write(&manifest, "").unwrap();
    let mut text = Vec::new();
    let report = cmd_stats(&manifest, None, &mut text).unwrap();
    assert!(report.is_empty());
    assert!(String::from_utf8(text).unwrap().starts_with("no data"));

    let out = bin().args(["stats", "--manifest"]).arg(&manifest).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&out.stdout).contains("no data"));
}

#[test]
fn windows_keep_interior_centres_of_constant_labels() {
    let (dir, manifest) = corpus(&small_spec(), 1);
    relabel(&manifest, |_| 2);
    let csv = dir.path().join("windows.csv");
    let report = cmd_windows(&manifest, &csv, &mut Vec::new()).unwrap();
    let frames = 96i64;
    for r in &report.retention {
        // frames past either end count against the centre's label
        let spec = r.kind.spec();
        let kept = (0..frames)
            .filter(|&c| {
                let (lo, hi) = spec.range(c as usize);
                let inside = hi.min(frames - 1) - lo.max(0) + 1;
                inside as f64 / spec.size() as f64 >= spec.threshold
            })
            .count();
        assert_eq!(kept < frames as usize, r.kind != WindowKind::Long, "{}", r.kind);
        assert_eq!(r.valid, 3 * kept as u64, "{}", r.kind);
        assert_eq!(r.total, 3 * frames as u64);
    }
    assert!(dir.path().join("windows.summary.json").exists());
}

#[test]
fn windows_drop_short_and_medium_on_alternating_labels() {
    let (dir, manifest) = corpus(&small_spec(), 1);
    relabel(&manifest, |i| (i % 2) as i8);
    let csv = dir.path().join("windows.csv");
    let report = cmd_windows(&manifest, &csv, &mut Vec::new()).unwrap();
    // every window holds half of each label: below the short and medium
    // thresholds, exactly on the long one
    for r in &report.retention {
        match r.kind {
            WindowKind::Long => assert!(r.valid > 0),
            _ => assert_eq!(r.valid, 0, "{}", r.kind),
        }
    }
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count() as u64, 1 + report.windows as u64);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(2) == Some("long")));
}

#[test]
fn windows_csv_is_ordered_and_stable() {
    let (dir, manifest) = corpus(&small_spec(), 4);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    cmd_windows(&manifest, &a, &mut Vec::new()).unwrap();
    cmd_windows(&manifest, &b, &mut Vec::new()).unwrap();
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());

    let kinds = [WindowKind::Short, WindowKind::Medium, WindowKind::Long];
    let keys: Vec<(String, u32, usize)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let kind = kinds.iter().position(|k| k.to_string() == f[2]).unwrap();
            (f[0].to_string(), f[1].parse().unwrap(), kind)
        })
        .collect();
    assert!(!keys.is_empty());
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn spectrogram_of_one_second_tone() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("a4.wav");
    let samples: Vec<f32> = (0..16_000).map(|n| 0.5 * (2.0 * PI * 440.0 * n as f32 / 16_000.0).sin()).collect();
    write_wav(&wav, &AudioClip::new(samples, 16_000).unwrap()).unwrap();
    let text = dir.path().join("mel.txt");
    let mel = cmd_spectrogram(&wav, &dir.path().join("mel.tnsr"), Some(&text), &mut Vec::new()).unwrap();
    assert_eq!((mel.n_mels, mel.n_frames), (128, 14));
    assert_eq!(fs::read_to_string(&text).unwrap().lines().count(), 128);

    // band whose centre frequency lies closest to the tone
    let fb = fusionkit::audio::mel_filterbank(16_000, 2048, 128).unwrap();
    let near = (0..128)
        .min_by(|&a, &b| {
            let da = (fb.center_hz(a) - 440.0).abs();
            let db = (fb.center_hz(b) - 440.0).abs();
            da.total_cmp(&db)
        })
        .unwrap();
    for t in 0..mel.n_frames {
        let peak = (0..128).max_by(|&a, &b| mel.at(a, t).total_cmp(&mel.at(b, t))).unwrap();
        assert!(peak.abs_diff(near) <= 1, "frame {t}: band {peak}, expected near {near}");
    }
}

#[test]
fn spectrogram_of_silence_is_the_floor() {
    let dir = TempDir::new().unwrap();
    let wav = dir.path().join("silence.wav");
    write_wav(&wav, &AudioClip::new(vec![0.0; 16_000], 16_000).unwrap()).unwrap();
    let mel = cmd_spectrogram(&wav, &dir.path().join("mel.tnsr"), None, &mut Vec::new()).unwrap();
    assert!(mel.data.iter().all(|&v| v == log_floor()));
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let (dir, manifest) = corpus(&small_spec(), 2);
    let config = small_config();
    let cfg = write_config(dir.path(), &config);
    let out = dir.path().join("run");
    let summary = cmd_train(&run_config(&manifest, &cfg, &out, 0), &mut Vec::new()).unwrap();
    assert_eq!(summary.best_epoch, 0);
    assert_eq!(summary.logs.len(), 1);
    assert!(summary.logs[0].train_loss.is_none());

    let initial = Model::<f32>::new(config.clone(), 3).unwrap();
    let fresh = dir.path().join("initial.ckpt");
    initial.save(&fresh).unwrap();
    assert_eq!(fs::read(out.join(BEST_CHECKPOINT)).unwrap(), fs::read(&fresh).unwrap());
    assert_eq!(fs::read_to_string(out.join(MODEL_CONFIG)).unwrap(), config.to_kv_string());
    assert_eq!(fs::read_to_string(out.join(TRAIN_LOG)).unwrap().lines().count(), 1);
}

#[test]
fn evaluation_is_repeatable() {
    let (dir, manifest) = corpus(&small_spec(), 5);
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("run");
    cmd_train(&run_config(&manifest, &cfg, &out, 1), &mut Vec::new()).unwrap();

    let ckpt = out.join(BEST_CHECKPOINT);
    let args = EvalArgs {
        checkpoint: &ckpt,
        config: None,
        manifest: &manifest,
        heads: &Head::ALL,
        split: Some(Split::Val),
    };
    let a = cmd_eval(&args, Some(&dir.path().join("a.json")), &mut Vec::new()).unwrap();
    let b = cmd_eval(&args, Some(&dir.path().join("b.json")), &mut Vec::new()).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("a.json")).unwrap(),
        fs::read(dir.path().join("b.json")).unwrap()
    );
    assert!(a.points > 0);
    assert_eq!(a.heads.len(), 4);

    let csv = cmd_predict(&args, None, &mut Vec::new()).unwrap();
    assert_eq!(csv.lines().count(), a.points + 1);
}

#[test]
fn binary_exit_codes() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_OK));
    let out = bin().arg("stats").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    let out = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));

    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = bin().args(["stats", "--manifest"]).arg(&missing).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_DATA));

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"video_id\": \"x\"}\n").unwrap();
    let out = bin().args(["stats", "--manifest"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "d_model = 32\nwidth = 3\n").unwrap();
    let out = bin()
        .args(["train", "--seed", "0", "--manifest"])
        .arg(&bad)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}

#[test]
fn diverging_training_exits_with_numeric_error() {
    let (dir, manifest) = corpus(&small_spec(), 6);
    let config = ModelConfig {
        lr: 1e38,
        momentum: 0.0,
        ..small_config()
    };
    let cfg = write_config(dir.path(), &config);
    let out = dir.path().join("run");
    let status = bin()
        .args(["--workers", "1", "train", "--seed", "3", "--epochs", "3", "--batch-size", "8", "--cap", "4"])
        .arg("--manifest")
        .arg(&manifest)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_NUMERIC), "{}", String::from_utf8_lossy(&status.stderr));
    let dump = fs::read_to_string(out.join(NAN_DUMP)).unwrap();
    assert!(dump.contains("video_"), "{dump}");
}
