//! Subcommands of the `fusionkit` binary.
//!
//! Each command writes human-readable text to the supplied writer and, where
//! it produces data, a machine-readable JSON or CSV file next to it.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

use fusionkit::audio::{log_mel, MelSpectrogram};
use fusionkit::dataset::{generate_synthetic, load_annotations, load_wav, FeatureCache, Manifest, Split, SyntheticSpec};
use fusionkit::metrics::MetricsReport;
use fusionkit::model::{Head, Model, ModelConfig};
use fusionkit::sampling::{retention, windows_csv, CapPolicy, ClassCounts, FrameLabels, Retention, CLASS_NAMES, N_CLASSES};
use fusionkit::train::{evaluate, train, Corpus, EpochLog, Features, TrainOptions};
use fusionkit::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fusionkit::Error),
    #[error("writing output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(fusionkit::Error::Config(_)) => EXIT_USAGE,
            CliError::Core(fusionkit::Error::Numeric(_)) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| fusionkit::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| {
        fusionkit::Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize") + "\n"
}

pub fn load_config(path: Option<&Path>) -> CliResult<ModelConfig> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| fusionkit::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            ModelConfig::from_kv_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))
        }
    }
}

pub fn cmd_generate(spec: &SyntheticSpec, seed: u64, out: &Path, w: &mut dyn Write) -> CliResult<Manifest> {
    let m = generate_synthetic(spec, seed, out)?;
    let counts = spec.expected_class_counts(seed);
    writeln!(
        w,
        "wrote {} videos x {} frames to {}",
        spec.n_videos,
        spec.frames_per_video,
        out.display()
    )?;
    writeln!(w, "manifest: {}", out.join("manifest.jsonl").display())?;
    writeln!(w, "frames per class: {counts:?}")?;
    writeln!(w, "ambiguity pairs: {:?}", spec.ambiguity_pairs())?;
    write_file(&out.join("synthetic_spec.json"), to_json(&json!({ "seed": seed, "spec": spec })))?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsReport {
    pub splits: Vec<(Split, ClassCounts)>,
}

impl StatsReport {
    pub fn is_empty(&self) -> bool {
        self.splits.iter().all(|(_, c)| c.total == 0)
    }

    /// Class rows with a count and ratio column per split.
    pub fn table(&self) -> String {
        if self.is_empty() {
            return "no data: the manifest has no annotated frames\n".to_string();
        }
        let name = |s: Split| match s {
            Split::Train => "Train",
            Split::Val => "Val",
        };
        let mut out = format!("{:<10}", "Class");
        for (s, _) in &self.splits {
            out.push_str(&format!(" {:>10} {:>6}", name(*s), "Ratio"));
        }
        out.push('\n');
        for (c, class) in CLASS_NAMES.iter().enumerate() {
            out.push_str(&format!("{class:<10}"));
            for (_, counts) in &self.splits {
                out.push_str(&format!(" {:>10} {:>6.3}", counts.counts[c], counts.ratios[c]));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<10}", "Total"));
        for (_, counts) in &self.splits {
            out.push_str(&format!(" {:>10} {:>6.3}", counts.total, if counts.total > 0 { 1.0 } else { 0.0 }));
        }
        out.push('\n');
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,class,count,ratio\n");
        for (s, counts) in &self.splits {
            let split = serde_json::to_value(s).expect("split serializes");
            for (c, class) in CLASS_NAMES.iter().enumerate() {
                out.push_str(&format!(
                    "{},{class},{},{:.3}\n",
                    split.as_str().unwrap_or_default(),
                    counts.counts[c],
                    counts.ratios[c]
                ));
            }
        }
        out
    }
}

fn manifest_labels(m: &Manifest) -> CliResult<Vec<(Split, FrameLabels)>> {
    m.entries
        .iter()
        .map(|e| {
            let l = load_annotations(&m.resolve(&e.annotation_path))?;
            Ok((e.split, FrameLabels::new(e.video_id.clone(), l.labels().to_vec())?))
        })
        .collect()
}

/// Per-split frame counts of each class. Unannotated frames are skipped.
pub fn cmd_stats(manifest: &Path, out: Option<&Path>, w: &mut dyn Write) -> CliResult<StatsReport> {
    let m = Manifest::load(manifest)?;
    let labels = manifest_labels(&m)?;
    let mut splits = Vec::new();
    for split in [Split::Train, Split::Val] {
        let of_split: Vec<&FrameLabels> = labels.iter().filter(|(s, _)| *s == split).map(|(_, l)| l).collect();
        if of_split.is_empty() {
            continue;
        }
        let counts = ClassCounts::from_labels(
            of_split
                .iter()
                .flat_map(|l| l.labels().iter().filter(|&&x| x >= 0).map(|&x| x as u8)),
        );
        splits.push((split, counts));
    }
    let report = StatsReport { splits };
    w.write_all(report.table().as_bytes())?;
    if let Some(dir) = out {
        write_file(&dir.join("stats.json"), to_json(&report))?;
        write_file(&dir.join("stats.csv"), report.to_csv())?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WindowsReport {
    pub windows: usize,
    pub retention: Vec<Retention>,
}

/// Writes every valid window to `csv`, ordered by video, centre and kind,
/// and a `.summary.json` beside it.
pub fn cmd_windows(manifest: &Path, csv: &Path, w: &mut dyn Write) -> CliResult<WindowsReport> {
    let m = Manifest::load(manifest)?;
    let labels: Vec<FrameLabels> = manifest_labels(&m)?.into_iter().map(|(_, l)| l).collect();
    let samples: Vec<_> = labels.iter().flat_map(fusionkit::sampling::enumerate_windows).collect();
    write_file(csv, windows_csv(&samples))?;
    let report = WindowsReport {
        windows: samples.len(),
        retention: retention(&labels, &samples),
    };
    writeln!(w, "{:<8} {:>8} {:>8} {:>8}", "kind", "valid", "total", "kept")?;
    for r in &report.retention {
        let pct = if r.total == 0 { 0.0 } else { 100.0 * r.valid as f64 / r.total as f64 };
        writeln!(w, "{:<8} {:>8} {:>8} {:>7.1}%", r.kind, r.valid, r.total, pct)?;
    }
    writeln!(w, "{} windows written to {}", report.windows, csv.display())?;
    write_file(&csv.with_extension("summary.json"), to_json(&report))?;
    Ok(report)
}

/// Log-mel of a WAV file as a `[128 × T]` TNSR tensor, plus an optional
/// whitespace-separated text dump (one mel band per line).
pub fn cmd_spectrogram(wav: &Path, out: &Path, text: Option<&Path>, w: &mut dyn Write) -> CliResult<MelSpectrogram> {
    let clip = load_wav(wav)?;
    let mel = log_mel(&clip)?;
    let t = Tensor::new(vec![mel.n_mels, mel.n_frames], mel.data.clone())?;
    write_file(out, t.to_tnsr_bytes())?;
    if let Some(p) = text {
        let mut s = String::new();
        for row in mel.data.chunks(mel.n_frames) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        write_file(p, s)?;
    }
    writeln!(
        w,
        "{} samples at {} Hz -> {} x {} log-mel written to {}",
        clip.samples.len(),
        clip.sample_rate,
        mel.n_mels,
        mel.n_frames,
        out.display()
    )?;
    Ok(mel)
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cap: CapPolicy,
    pub out: PathBuf,
}

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const MODEL_CONFIG: &str = "model.cfg";
pub const RUN_METADATA: &str = "run.json";
pub const FINAL_METRICS: &str = "metrics.json";
pub const NAN_DUMP: &str = "nan_batch.txt";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub points: usize,
    pub heads: Vec<(Head, MetricsReport)>,
}

impl EvalReport {
    pub fn get(&self, head: Head) -> Option<&MetricsReport> {
        self.heads.iter().find(|(h, _)| *h == head).map(|(_, r)| r)
    }

    pub fn to_json(&self) -> String {
        let heads: serde_json::Map<String, serde_json::Value> = self
            .heads
            .iter()
            .map(|(h, r)| (h.to_string(), serde_json::to_value(r).expect("report serializes")))
            .collect();
        to_json(&json!({ "split": self.split, "points": self.points, "heads": heads }))
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<10} {:>12}\n", "Head", "Macro-F1 (%)");
        for (h, r) in &self.heads {
            out.push_str(&format!("{:<10} {:>12.2}\n", h.as_str(), r.macro_f1_percent));
        }
        out
    }
}

pub struct TrainSummary {
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub metrics: EvalReport,
    pub corpus_hash: String,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn split_name(s: Option<Split>) -> String {
    match s {
        Some(Split::Train) => "train".into(),
        Some(Split::Val) => "val".into(),
        None => "all".into(),
    }
}

pub fn cmd_train(run: &RunConfig, w: &mut dyn Write) -> CliResult<TrainSummary> {
    let config = load_config(run.config.as_deref())?;
    if run.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be positive".into()));
    }
    let started = unix_now();
    let m = Manifest::load(&run.manifest)?;
    let corpus_hash = m.content_hash()?;
    let corpus = Corpus::load(&m)?;
    fs::create_dir_all(&run.out).map_err(|e| fusionkit::Error::Io {
        path: run.out.clone(),
        source: e,
    })?;
    write_file(&run.out.join(MODEL_CONFIG), config.to_kv_string())?;

    let opts = TrainOptions {
        seed: run.seed,
        epochs: run.epochs,
        batch_size: run.batch_size,
        cap: run.cap,
        cache_dir: FeatureCache::resolve_dir(None),
    };
    let mut log_text = String::new();
    let mut echo_err = None;
    let result = train(&config, &corpus, &opts, |log| {
        let line = serde_json::to_string(log).expect("log serializes");
        log_text.push_str(&line);
        log_text.push('\n');
        let f = log.val_macro_f1;
        let loss = log.train_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
        if let Err(e) = writeln!(
            w,
            "epoch {:>3}  loss {loss:>8}  val macro-F1  image {:.4}  audio {:.4}  fusion {:.4}  ensemble {:.4}",
            log.epoch, f.image, f.audio, f.fusion, f.ensemble
        ) {
            echo_err.get_or_insert(e);
        }
    });
    write_file(&run.out.join(TRAIN_LOG), &log_text)?;
    let outcome = match result {
        Ok(o) => o,
        Err(fusionkit::Error::Numeric(msg)) => {
            write_file(&run.out.join(NAN_DUMP), format!("{msg}\n"))?;
            return Err(fusionkit::Error::Numeric(msg).into());
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(e) = echo_err {
        return Err(e.into());
    }
    outcome.best.save(&run.out.join(BEST_CHECKPOINT))?;
    outcome.last.save(&run.out.join(LAST_CHECKPOINT))?;

    let features = Features::new(&corpus, opts.cache_dir.clone(), config.audio_patch)?;
    let eval = evaluate(&outcome.best, &features, corpus.eval_points(outcome.validation_split))?;
    let metrics = EvalReport {
        split: split_name(outcome.validation_split),
        points: eval.points.len(),
        heads: Head::ALL.iter().map(|&h| (h, eval.report(h))).collect(),
    };
    write_file(&run.out.join(FINAL_METRICS), metrics.to_json())?;
    writeln!(w, "best epoch {} (validation on {} split)", outcome.best_epoch, metrics.split)?;
    w.write_all(metrics.table().as_bytes())?;

    let meta = json!({
        "seed": run.seed,
        "epochs": run.epochs,
        "batch_size": run.batch_size,
        "cap": match run.cap { CapPolicy::Absolute(n) => json!(n), CapPolicy::ThirdLargest => json!("third-largest") },
        "manifest": run.manifest,
        "corpus_hash": corpus_hash,
        "config": config.to_kv_string(),
        "best_epoch": outcome.best_epoch,
        "validation_split": metrics.split,
        "started_unix": started,
        "finished_unix": unix_now(),
    });
    write_file(&run.out.join(RUN_METADATA), to_json(&meta))?;
    Ok(TrainSummary {
        logs: outcome.logs,
        best_epoch: outcome.best_epoch,
        metrics,
        corpus_hash,
    })
}

/// Model config for a checkpoint: `--config` if given, else `model.cfg`
/// beside the checkpoint, else the defaults.
pub fn checkpoint_config(checkpoint: &Path, config: Option<&Path>) -> CliResult<ModelConfig> {
    if config.is_some() {
        return load_config(config);
    }
    let beside = checkpoint.with_file_name(MODEL_CONFIG);
    load_config(beside.exists().then_some(beside.as_path()))
}

pub fn parse_split(s: &str) -> Result<Option<Split>, String> {
    match s {
        "train" => Ok(Some(Split::Train)),
        "val" => Ok(Some(Split::Val)),
        "all" => Ok(None),
        other => Err(format!("unknown split {other:?}; choose one of train, val, all")),
    }
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub config: Option<&'a Path>,
    pub manifest: &'a Path,
    pub heads: &'a [Head],
    pub split: Option<Split>,
}

fn load_for_eval(args: &EvalArgs<'_>) -> CliResult<(Model<f32>, ModelConfig, Corpus)> {
    let config = checkpoint_config(args.checkpoint, args.config)?;
    let model = Model::<f32>::load(config.clone(), args.checkpoint)?;
    let m = Manifest::load(args.manifest)?;
    let corpus = Corpus::load(&m)?;
    Ok((model, config, corpus))
}

/// Scores the chosen heads over every centre frame with a valid window.
pub fn cmd_eval(args: &EvalArgs<'_>, out: Option<&Path>, w: &mut dyn Write) -> CliResult<EvalReport> {
    let (model, config, corpus) = load_for_eval(args)?;
    let features = Features::new(&corpus, FeatureCache::resolve_dir(None), config.audio_patch)?;
    let eval = evaluate(&model, &features, corpus.eval_points(args.split))?;
    let report = EvalReport {
        split: split_name(args.split),
        points: eval.points.len(),
        heads: args.heads.iter().map(|&h| (h, eval.report(h))).collect(),
    };
    w.write_all(report.table().as_bytes())?;
    if let Some(p) = out {
        write_file(p, report.to_json())?;
    }
    Ok(report)
}

/// One CSV row per evaluated centre frame with the head's predicted class.
pub fn cmd_predict(args: &EvalArgs<'_>, out: Option<&Path>, w: &mut dyn Write) -> CliResult<String> {
    let (model, config, corpus) = load_for_eval(args)?;
    let features = Features::new(&corpus, FeatureCache::resolve_dir(None), config.audio_patch)?;
    let eval = evaluate(&model, &features, corpus.eval_points(args.split))?;
    let mut csv = String::from("video_id,center,kind,label");
    for h in args.heads {
        csv.push_str(&format!(",{h}"));
    }
    csv.push('\n');
    for (p, pred) in eval.points.iter().zip(&eval.predictions) {
        csv.push_str(&format!("{},{},{},{}", p.video_id, p.center, p.kind, CLASS_NAMES[p.label as usize]));
        for h in args.heads {
            let i = Head::ALL.iter().position(|x| x == h).expect("known head");
            csv.push_str(&format!(",{}", CLASS_NAMES[pred[i]]));
        }
        csv.push('\n');
    }
    match out {
        Some(p) => {
            write_file(p, &csv)?;
            writeln!(w, "{} predictions written to {}", eval.points.len(), p.display())?;
        }
        None => w.write_all(csv.as_bytes())?,
    }
    debug_assert!(N_CLASSES == CLASS_NAMES.len());
    Ok(csv)
}
