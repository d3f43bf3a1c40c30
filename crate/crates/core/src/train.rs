//! Corpus loading, window features, the training loop and evaluation.

use std::collections::HashMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{clip_for_frames, LogMel, MelSpectrogram, HOP, N_FFT};
use crate::dataset::{FeatureCache, FeatureKey, Manifest, Split, Video};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{predict, Example, Head, Image, Model, ModelConfig, Sgd};
use crate::sampling::{enumerate_windows, CapPolicy, WindowSample};
use crate::tensor::Tensor;

/// A manifest's videos with every frame decoded.
pub struct Corpus {
    pub videos: Vec<Video>,
    pub frames: Vec<Vec<Image>>,
    index: HashMap<String, usize>,
    fronts: HashMap<u32, LogMel>,
}

impl Corpus {
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let loaded: Vec<(Video, Vec<Image>)> = manifest
            .entries
            .par_iter()
            .map(|e| {
                let v = manifest.load_video(e)?;
                let frames = (0..v.labels.len()).map(|t| v.load_frame(t)).collect::<Result<_>>()?;
                Ok((v, frames))
            })
            .collect::<Result<_>>()?;
        let mut fronts = HashMap::new();
        for (v, _) in &loaded {
            if let std::collections::hash_map::Entry::Vacant(slot) = fronts.entry(v.audio.sample_rate) {
                slot.insert(LogMel::new(v.audio.sample_rate)?);
            }
        }
        let (videos, frames): (Vec<_>, Vec<_>) = loaded.into_iter().unzip();
        let index = videos.iter().enumerate().map(|(i, v)| (v.video_id.clone(), i)).collect();
        Ok(Self {
            videos,
            frames,
            index,
            fronts,
        })
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.videos.iter().any(|v| v.split == split)
    }

    fn selected(&self, split: Option<Split>) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(move |v| split.is_none_or(|s| v.split == s))
    }

    /// All valid windows, ordered by video, centre and window kind.
    pub fn windows(&self, split: Option<Split>) -> Vec<WindowSample> {
        self.selected(split).flat_map(|v| enumerate_windows(&v.labels)).collect()
    }

    /// One window per centre frame that has any valid window: the shortest.
    pub fn eval_points(&self, split: Option<Split>) -> Vec<WindowSample> {
        let mut out: Vec<WindowSample> = Vec::new();
        for s in self.windows(split) {
            match out.last() {
                Some(p) if p.video_id == s.video_id && p.center == s.center => {}
                _ => out.push(s),
            }
        }
        out
    }

    pub fn video(&self, id: &str) -> Result<(usize, &Video)> {
        let &i = self
            .index
            .get(id)
            .ok_or_else(|| Error::invalid(format!("unknown video {id:?}")))?;
        Ok((i, &self.videos[i]))
    }

    pub fn image(&self, s: &WindowSample) -> Result<&Image> {
        let (i, _) = self.video(&s.video_id)?;
        Ok(&self.frames[i][s.center])
    }

    /// Log-mel of the window's audio, silent where the window leaves the clip.
    pub fn compute_mel(&self, s: &WindowSample) -> Result<MelSpectrogram> {
        let (_, v) = self.video(&s.video_id)?;
        let clip = clip_for_frames(&v.audio, v.fps, s.lo, s.hi)?.zero_padded();
        self.fronts[&v.audio.sample_rate].compute(&clip)
    }
}

/// Window log-mels, read through an optional on-disk cache.
pub struct Features<'a> {
    pub corpus: &'a Corpus,
    pub cache: Option<FeatureCache>,
    pub audio_patch: usize,
}

impl<'a> Features<'a> {
    pub fn new(corpus: &'a Corpus, cache_dir: Option<PathBuf>, audio_patch: usize) -> Result<Self> {
        let cache = cache_dir.map(FeatureCache::open).transpose()?;
        Ok(Self {
            corpus,
            cache,
            audio_patch,
        })
    }

    pub fn mel(&self, s: &WindowSample) -> Result<MelSpectrogram> {
        let mel = match &self.cache {
            None => self.corpus.compute_mel(s)?,
            Some(cache) => {
                let key = FeatureKey {
                    video_id: s.video_id.clone(),
                    center: s.center,
                    kind: s.kind,
                };
                let (_, v) = self.corpus.video(&s.video_id)?;
                match cache.get::<f32>(&key)? {
                    Some(t) if t.rank() == 2 => MelSpectrogram {
                        n_mels: t.shape()[0],
                        n_frames: t.shape()[1],
                        data: t.into_data(),
                        hop: HOP,
                        n_fft: N_FFT,
                        sample_rate: v.audio.sample_rate,
                    },
                    Some(t) => {
                        return Err(Error::Integrity {
                            path: cache.path(&key),
                            msg: format!("cached feature has shape {:?}", t.shape()),
                        })
                    }
                    None => {
                        let mel = self.corpus.compute_mel(s)?;
                        let t = Tensor::new(vec![mel.n_mels, mel.n_frames], mel.data.clone())?;
                        match cache.put(&key, &t) {
                            Ok(()) | Err(Error::Locked(_)) => {}
                            Err(e) => return Err(e),
                        }
                        mel
                    }
                }
            }
        };
        Ok(mel.pad_frames_to_multiple(self.audio_patch))
    }

    pub fn mels(&self, samples: &[WindowSample]) -> Result<Vec<MelSpectrogram>> {
        samples.par_iter().map(|s| self.mel(s)).collect()
    }
}

/// Confusion matrices of every head over one set of windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub points: Vec<WindowSample>,
    /// Predictions per point, in `Head::ALL` order.
    pub predictions: Vec<[usize; 4]>,
}

impl Evaluation {
    pub fn confusion(&self, head: Head, classes: Option<&[usize]>) -> ConfusionMatrix {
        let h = Head::ALL.iter().position(|&x| x == head).expect("known head");
        let mut cm = ConfusionMatrix::new();
        for (p, pred) in self.points.iter().zip(&self.predictions) {
            if classes.is_none_or(|c| c.contains(&(p.label as usize))) {
                cm.accumulate(p.label as usize, pred[h]).expect("labels in range");
            }
        }
        cm
    }

    pub fn report(&self, head: Head) -> MetricsReport {
        self.confusion(head, None).report()
    }

    /// Macro-F1 over `classes`, counting only points whose truth is among them.
    pub fn subset_macro_f1(&self, head: Head, classes: &[usize]) -> f64 {
        self.confusion(head, Some(classes)).report().subset_macro_f1(classes)
    }

    pub fn macro_f1(&self) -> HeadScores {
        HeadScores {
            image: self.report(Head::Image).macro_f1,
            audio: self.report(Head::Audio).macro_f1,
            fusion: self.report(Head::Fusion).macro_f1,
            ensemble: self.report(Head::Ensemble).macro_f1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScores {
    pub image: f64,
    pub audio: f64,
    pub fusion: f64,
    pub ensemble: f64,
}

pub fn evaluate(model: &Model<f32>, features: &Features<'_>, points: Vec<WindowSample>) -> Result<Evaluation> {
    let predictions = points
        .par_iter()
        .map(|s| {
            let mel = features.mel(s)?;
            let out = model.forward(features.corpus.image(s)?, &mel)?;
            Ok(Head::ALL.map(|h| predict(&out, h)))
        })
        .collect::<Result<_>>()?;
    Ok(Evaluation { points, predictions })
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub cap: CapPolicy,
    pub cache_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 16,
            cap: CapPolicy::ThirdLargest,
            cache_dir: None,
        }
    }
}

/// One line of the training log. Epoch 0 describes the initial model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub train_samples: usize,
    pub val_macro_f1: HeadScores,
}

pub struct TrainOutcome {
    pub best: Model<f32>,
    pub best_epoch: usize,
    pub last: Model<f32>,
    pub logs: Vec<EpochLog>,
    pub validation_split: Option<Split>,
}

/// Validation uses the `val` split when the manifest has one, otherwise the
/// training videos themselves.
pub fn train(config: &ModelConfig, corpus: &Corpus, opts: &TrainOptions, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let features = Features::new(corpus, opts.cache_dir.clone(), config.audio_patch)?;
    let train_split = if corpus.has_split(Split::Train) { Some(Split::Train) } else { None };
    let val_split = if corpus.has_split(Split::Val) { Some(Split::Val) } else { train_split };
    let pool = corpus.windows(train_split);
    let val_points = corpus.eval_points(val_split);
    if pool.is_empty() && opts.epochs > 0 {
        return Err(Error::invalid("no valid training windows in the corpus"));
    }

    let mut model: Model<f32> = Model::new(config.clone(), opts.seed)?;
    let mut opt = Sgd::new(config.momentum);
    let score = |m: &Model<f32>| -> Result<HeadScores> {
        Ok(evaluate(m, &features, val_points.clone())?.macro_f1())
    };

    let mut logs = Vec::with_capacity(opts.epochs + 1);
    let initial = EpochLog {
        epoch: 0,
        train_loss: None,
        train_samples: 0,
        val_macro_f1: score(&model)?,
    };
    on_epoch(&initial);
    let mut best = (model.clone(), 0, initial.val_macro_f1.ensemble);
    logs.push(initial);

    for epoch in 1..=opts.epochs {
        let mut samples = crate::sampling::resample_epoch(&pool, opts.cap, opts.seed, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_5eed);
        rng.set_stream(epoch as u64);
        samples.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in samples.chunks(opts.batch_size) {
            let mels = features.mels(batch)?;
            let examples: Vec<Example> = batch
                .iter()
                .zip(&mels)
                .map(|(s, mel)| {
                    Ok(Example {
                        image: corpus.image(s)?,
                        mel,
                        label: s.label as usize,
                    })
                })
                .collect::<Result<_>>()?;
            let loss = model.train_step(&mut opt, &examples, config.lr).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg} in epoch {epoch}, batch [{}]", batch_key(batch))),
                other => other,
            })?;
            loss_sum += loss as f64;
            n_batches += 1;
        }

        let log = EpochLog {
            epoch,
            train_loss: Some(if n_batches == 0 { 0.0 } else { loss_sum / n_batches as f64 }),
            train_samples: samples.len(),
            val_macro_f1: score(&model)?,
        };
        on_epoch(&log);
        if log.val_macro_f1.ensemble > best.2 {
            best = (model.clone(), epoch, log.val_macro_f1.ensemble);
        }
        logs.push(log);
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        last: model,
        logs,
        validation_split: val_split,
    })
}

/// `video@centre/kind` for each window, comma separated.
pub fn batch_key(batch: &[WindowSample]) -> String {
    batch
        .iter()
        .map(|s| format!("{}@{}/{}", s.video_id, s.center, s.kind))
        .collect::<Vec<_>>()
        .join(",")
}
