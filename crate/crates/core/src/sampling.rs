//! Dynamic three-window sampling and per-epoch majority-class subsampling.
//!
//! Around each annotated centre frame `t_c` three windows are considered:
//! short `[t_c-16, t_c+15]`, medium `[t_c-24, t_c+23]` and long
//! `[t_c-32, t_c+31]`. A window is kept only when the fraction of its frames
//! sharing the centre frame's label reaches the window's threshold. Frames
//! outside the video and unannotated frames (`-1`) never match.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CLASSES: usize = 8;
pub const CLASS_NAMES: [&str; N_CLASSES] = [
    "Neutral",
    "Anger",
    "Disgust",
    "Fear",
    "Happiness",
    "Sadness",
    "Surprise",
    "Other",
];
pub const UNLABELED: i8 = -1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLabels {
    pub video_id: String,
    labels: Vec<i8>,
}

impl FrameLabels {
    pub fn new(video_id: impl Into<String>, labels: Vec<i8>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("a video needs at least one frame label"));
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l < UNLABELED || l >= N_CLASSES as i8)
        {
            return Err(Error::invalid(format!("frame {i} has label {l} outside -1..=7")));
        }
        Ok(Self {
            video_id: video_id.into(),
            labels,
        })
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Label of frame `t`, or `None` when out of range or unannotated.
    pub fn class_at(&self, t: i64) -> Option<u8> {
        usize::try_from(t)
            .ok()
            .and_then(|i| self.labels.get(i))
            .and_then(|&l| (l >= 0).then_some(l as u8))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Short,
    Medium,
    Long,
}

impl WindowKind {
    pub const ALL: [WindowKind; 3] = [WindowKind::Short, WindowKind::Medium, WindowKind::Long];

    pub fn spec(self) -> WindowSpec {
        match self {
            WindowKind::Short => WindowSpec::new(self, 16, 15, 0.8),
            WindowKind::Medium => WindowSpec::new(self, 24, 23, 0.65),
            WindowKind::Long => WindowSpec::new(self, 32, 31, 0.5),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WindowKind::Short => "short",
            WindowKind::Medium => "medium",
            WindowKind::Long => "long",
        }
    }
}

impl fmt::Display for WindowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(WindowKind::Short),
            "medium" => Ok(WindowKind::Medium),
            "long" => Ok(WindowKind::Long),
            other => Err(Error::invalid(format!("unknown window kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub kind: WindowKind,
    pub half_lo: usize,
    pub half_hi: usize,
    pub threshold: f64,
}

impl WindowSpec {
    pub fn new(kind: WindowKind, half_lo: usize, half_hi: usize, threshold: f64) -> Self {
        Self {
            kind,
            half_lo,
            half_hi,
            threshold,
        }
    }

    pub fn size(&self) -> usize {
        self.half_lo + self.half_hi + 1
    }

    pub fn range(&self, center: usize) -> (i64, i64) {
        let c = center as i64;
        (c - self.half_lo as i64, c + self.half_hi as i64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSample {
    pub video_id: String,
    pub center: usize,
    pub kind: WindowKind,
    pub lo: i64,
    pub hi: i64,
    pub label: u8,
}

/// Fraction of the window's frames whose label equals the centre frame's.
pub fn window_agreement(labels: &FrameLabels, center: usize, spec: &WindowSpec) -> Result<f64> {
    let target = labels.class_at(center as i64).ok_or_else(|| {
        Error::invalid(format!(
            "centre frame {center} of {} is unannotated or out of range",
            labels.video_id
        ))
    })?;
    let (lo, hi) = spec.range(center);
    let matching = (lo..=hi).filter(|&t| labels.class_at(t) == Some(target)).count();
    Ok(matching as f64 / spec.size() as f64)
}

pub fn is_valid_window(ratio: f64, spec: &WindowSpec) -> bool {
    ratio >= spec.threshold
}

/// All windows passing their agreement threshold, ordered by centre frame
/// and then short, medium, long.
pub fn enumerate_windows(labels: &FrameLabels) -> Vec<WindowSample> {
    enumerate_windows_with(labels, &WindowKind::ALL.map(WindowKind::spec))
}

pub fn enumerate_windows_with(labels: &FrameLabels, specs: &[WindowSpec]) -> Vec<WindowSample> {
    // prefix[c][i] = frames with class c among the first i
    let n = labels.len();
    let mut prefix = vec![vec![0u32; n + 1]; N_CLASSES];
    for (i, &l) in labels.labels().iter().enumerate() {
        for (c, p) in prefix.iter_mut().enumerate() {
            p[i + 1] = p[i] + u32::from(l == c as i8);
        }
    }
    let count = |c: u8, lo: i64, hi: i64| {
        let a = lo.clamp(0, n as i64) as usize;
        let b = (hi + 1).clamp(0, n as i64) as usize;
        prefix[c as usize][b] - prefix[c as usize][a]
    };

    let mut out = Vec::new();
    for center in 0..n {
        let Some(label) = labels.class_at(center as i64) else {
            continue;
        };
        for spec in specs {
            let (lo, hi) = spec.range(center);
            let ratio = count(label, lo, hi) as f64 / spec.size() as f64;
            if is_valid_window(ratio, spec) {
                out.push(WindowSample {
                    video_id: labels.video_id.clone(),
                    center,
                    kind: spec.kind,
                    lo,
                    hi,
                    label,
                });
            }
        }
    }
    out
}

pub const WINDOW_CSV_HEADER: &str = "video_id,center,kind,lo,hi,label";

pub fn windows_csv(samples: &[WindowSample]) -> String {
    let mut out = String::from(WINDOW_CSV_HEADER);
    out.push('\n');
    for s in samples {
        out.push_str(&format!("{},{},{},{},{},{}\n", s.video_id, s.center, s.kind, s.lo, s.hi, s.label));
    }
    out
}

/// Valid windows of each kind against the number of annotated centre frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retention {
    pub kind: WindowKind,
    pub valid: u64,
    pub total: u64,
}

pub fn retention(labels: &[FrameLabels], samples: &[WindowSample]) -> Vec<Retention> {
    let centres = labels
        .iter()
        .map(|l| l.labels().iter().filter(|&&x| x != UNLABELED).count() as u64)
        .sum();
    WindowKind::ALL
        .iter()
        .map(|&k| Retention {
            kind: k,
            valid: samples.iter().filter(|s| s.kind == k).count() as u64,
            total: centres,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassCounts {
    pub counts: [u64; N_CLASSES],
    pub total: u64,
    /// `count / total` rounded to three decimals; all zero when empty.
    pub ratios: [f64; N_CLASSES],
}

impl ClassCounts {
    pub fn from_counts(counts: [u64; N_CLASSES]) -> Self {
        let total: u64 = counts.iter().sum();
        let ratios = counts.map(|c| {
            if total == 0 {
                0.0
            } else {
                (c as f64 / total as f64 * 1000.0).round() / 1000.0
            }
        });
        Self {
            counts,
            total,
            ratios,
        }
    }

    pub fn from_labels(labels: impl IntoIterator<Item = u8>) -> Self {
        let mut counts = [0u64; N_CLASSES];
        for l in labels {
            counts[l as usize] += 1;
        }
        Self::from_counts(counts)
    }
}

pub fn class_counts(samples: &[WindowSample]) -> ClassCounts {
    ClassCounts::from_labels(samples.iter().map(|s| s.label))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CapPolicy {
    /// Every class is cut to at most this many samples.
    Absolute(usize),
    /// Cap at the size of the largest class outside the two biggest.
    ThirdLargest,
}

impl Default for CapPolicy {
    fn default() -> Self {
        CapPolicy::ThirdLargest
    }
}

impl CapPolicy {
    pub fn cap(&self, counts: &[usize; N_CLASSES]) -> usize {
        match *self {
            CapPolicy::Absolute(cap) => cap,
            CapPolicy::ThirdLargest => {
                let mut sorted = *counts;
                sorted.sort_unstable_by(|a, b| b.cmp(a));
                sorted[2]
            }
        }
    }
}

impl FromStr for CapPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "third-largest" | "auto" => Ok(CapPolicy::ThirdLargest),
            n => n
                .parse()
                .map(CapPolicy::Absolute)
                .map_err(|_| Error::invalid(format!("cap must be a count or 'third-largest', got {n:?}"))),
        }
    }
}

/// Indices of the samples kept for one epoch, in their original order.
///
/// Classes at or below the cap are kept whole; larger classes are drawn
/// uniformly without replacement down to exactly the cap. The draw depends
/// only on `(seed, epoch)`.
pub fn resample_indices(labels: &[u8], policy: CapPolicy, seed: u64, epoch: u64) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let counts: [usize; N_CLASSES] = std::array::from_fn(|c| by_class[c].len());
    let cap = policy.cap(&counts);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut keep = vec![false; labels.len()];
    for members in &by_class {
        if members.len() <= cap {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            for j in index::sample(&mut rng, members.len(), cap) {
                keep[members[j]] = true;
            }
        }
    }
    keep.iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect()
}

pub fn resample_epoch(samples: &[WindowSample], policy: CapPolicy, seed: u64, epoch: u64) -> Vec<WindowSample> {
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    resample_indices(&labels, policy, seed, epoch)
        .into_iter()
        .map(|i| samples[i].clone())
        .collect()
}
