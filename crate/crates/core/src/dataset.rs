//! Annotation, WAV, PGM and manifest I/O, the synthetic corpus generator and
//! the on-disk feature cache.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::model::Image;
use crate::sampling::{FrameLabels, WindowKind, CLASS_NAMES, N_CLASSES, UNLABELED};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn annotation_header() -> String {
    CLASS_NAMES.join(",")
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Header line naming the eight classes in order, then one label per line;
/// every line ends with `\n`.
pub fn parse_annotations(video_id: &str, text: &str, path: &Path) -> Result<FrameLabels> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    // A newline-terminated file splits into a trailing empty piece.
    if lines.pop() != Some("") {
        return Err(parse_err(path, lines.len() + 1, "last line is not newline-terminated"));
    }
    let header = lines.first().copied().unwrap_or("");
    if header != annotation_header() {
        return Err(parse_err(path, 1, format!("expected header {:?}, found {header:?}", annotation_header())));
    }
    let body = &lines[1..];
    if body.is_empty() {
        return Err(parse_err(path, 2, "no frame labels after the header"));
    }
    let mut labels = Vec::with_capacity(body.len());
    for (i, line) in body.iter().enumerate() {
        let n = i + 2;
        let v: i64 = line
            .parse()
            .map_err(|_| parse_err(path, n, format!("{line:?} is not an integer")))?;
        if v < UNLABELED as i64 || v >= N_CLASSES as i64 {
            return Err(parse_err(path, n, format!("label {v} outside -1..=7")));
        }
        labels.push(v as i8);
    }
    FrameLabels::new(video_id, labels)
}

pub fn load_annotations(path: &Path) -> Result<FrameLabels> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    parse_annotations(id, &text, path)
}

pub fn format_annotations(labels: &FrameLabels) -> String {
    let mut out = annotation_header();
    out.push('\n');
    for l in labels.labels() {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    out
}

pub fn write_annotations(path: &Path, labels: &FrameLabels) -> Result<()> {
    fs::write(path, format_annotations(labels)).map_err(|e| Error::io(path, e))
}

fn wav_err(e: hound::Error) -> Error {
    let (chunk, msg) = match e {
        hound::Error::IoError(e) => ("data", e.to_string()),
        hound::Error::FormatError(m) => ("RIFF", m.to_string()),
        hound::Error::Unsupported => ("fmt", "unsupported sample encoding".to_string()),
        hound::Error::InvalidSampleFormat => ("fmt", "sample format does not match bit depth".to_string()),
        hound::Error::TooWide => ("fmt", "sample width above 32 bits".to_string()),
        other => ("data", other.to_string()),
    };
    Error::Wav { chunk, msg }
}

/// Integer PCM scaled by `2^(bits-1)` or 32-bit float; stereo is averaged.
pub fn read_wav<R: io::Read>(reader: R) -> Result<AudioClip> {
    let mut r = hound::WavReader::new(reader).map_err(wav_err)?;
    let spec = r.spec();
    if !(1..=2).contains(&spec.channels) {
        return Err(Error::Wav {
            chunk: "fmt",
            msg: format!("{} channels; only mono and stereo are supported", spec.channels),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, bits @ 8..=32) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            r.samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
        (hound::SampleFormat::Float, 32) => r
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (fmt, bits) => {
            return Err(Error::Wav {
                chunk: "fmt",
                msg: format!("unsupported encoding {fmt:?} with {bits} bits per sample"),
            })
        }
    };
    let samples = if spec.channels == 2 {
        interleaved.chunks_exact(2).map(|p| (p[0] + p[1]) * 0.5).collect()
    } else {
        interleaved
    };
    AudioClip::new(samples, spec.sample_rate)
}

pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_wav(io::BufReader::new(f))
}

/// Writes 16-bit mono PCM; samples are clamped to `[-1, 1]`.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Binary (P5) greymap with maxval up to 255.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |msg: &str| Error::Integrity {
        path: path.to_path_buf(),
        msg: format!("PGM: {msg}"),
    };
    let mut pos = 0;
    let mut token = || -> Option<String> {
        loop {
            match bytes.get(pos)? {
                b'#' => {
                    while *bytes.get(pos)? != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| !c.is_ascii_whitespace()) {
            pos += 1;
        }
        Some(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token().as_deref() != Some("P5") {
        return Err(bad("missing P5 magic"));
    }
    let mut num = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("bad {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(bad(&format!("unsupported {w}x{h} image with maxval {maxval}")));
    }
    let start = pos + 1;
    let pixels = bytes
        .get(start..start + w * h)
        .ok_or_else(|| bad(&format!("expected {} pixel bytes", w * h)))?;
    if bytes.len() != start + w * h {
        return Err(bad("trailing bytes after pixel data"));
    }
    let m = maxval as f32;
    Image::new(h, w, 1, pixels.iter().map(|&p| p as f32 / m).collect())
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

pub fn encode_pgm(image: &Image) -> Result<Vec<u8>> {
    if image.channels != 1 {
        return Err(Error::invalid(format!("PGM holds one channel, image has {}", image.channels)));
    }
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_pgm(image)?).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    pub annotation_path: PathBuf,
    pub audio_path: PathBuf,
    pub frames_dir: PathBuf,
    pub fps: f64,
    #[serde(default)]
    pub split: Split,
}

/// JSON-lines list of videos. Relative paths resolve against `base_dir`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry =
                serde_json::from_str(line).map_err(|err| parse_err(path, i + 1, err.to_string()))?;
            if !(e.fps > 0.0) || !e.fps.is_finite() {
                return Err(parse_err(path, i + 1, format!("fps must be positive, got {}", e.fps)));
            }
            if !seen.insert(e.video_id.clone()) {
                return Err(parse_err(path, i + 1, format!("duplicate video_id {:?}", e.video_id)));
            }
            entries.push(e);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { entries, base_dir })
    }

    /// Parses and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m = Self::parse(&text, path)?;
        for (i, e) in m.entries.iter().enumerate() {
            for p in [&e.annotation_path, &e.audio_path, &e.frames_dir] {
                let full = m.resolve(p);
                if !full.exists() {
                    return Err(parse_err(path, i + 1, format!("{} does not exist", full.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("manifest entries serialize") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load_video(&self, entry: &ManifestEntry) -> Result<Video> {
        let labels = load_annotations(&self.resolve(&entry.annotation_path))?;
        let labels = FrameLabels::new(entry.video_id.clone(), labels.labels().to_vec())?;
        let audio = load_wav(&self.resolve(&entry.audio_path))?;
        Ok(Video {
            video_id: entry.video_id.clone(),
            fps: entry.fps,
            split: entry.split,
            frames_dir: self.resolve(&entry.frames_dir),
            labels,
            audio,
        })
    }

    /// SHA-256 over the manifest text and every file it references, in order.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_jsonl().as_bytes());
        let base = self.base_dir.clone();
        let mut feed = |p: &Path| -> Result<()> {
            h.update(p.strip_prefix(&base).unwrap_or(p).to_string_lossy().as_bytes());
            h.update(fs::read(p).map_err(|e| Error::io(p, e))?);
            Ok(())
        };
        for e in &self.entries {
            feed(&self.resolve(&e.annotation_path))?;
            feed(&self.resolve(&e.audio_path))?;
            let dir = self.resolve(&e.frames_dir);
            let mut frames: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|err| Error::io(&dir, err))?
                .map(|d| d.map(|d| d.path()).map_err(|err| Error::io(&dir, err)))
                .collect::<Result<_>>()?;
            frames.sort();
            for f in &frames {
                feed(f)?;
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// One loaded manifest entry. Frames are read on demand.
#[derive(Clone, Debug)]
pub struct Video {
    pub video_id: String,
    pub fps: f64,
    pub split: Split,
    pub frames_dir: PathBuf,
    pub labels: FrameLabels,
    pub audio: AudioClip,
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:06}.pgm")
}

impl Video {
    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.frames_dir.join(frame_file_name(index))
    }

    pub fn load_frame(&self, index: usize) -> Result<Image> {
        read_pgm(&self.frame_path(index))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    pub pattern: usize,
    pub tone_hz: f64,
}

pub const N_PATTERNS: usize = 6;

/// Recipe for the synthetic corpus. Segment `k` of the corpus (counting
/// across videos in order) carries class `k mod 8`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub frames_per_video: usize,
    /// The last `val_videos` videos form the held-out split.
    pub val_videos: usize,
    pub fps: f64,
    pub sample_rate: u32,
    pub image_size: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    pub image_noise: f64,
    pub tone_amplitude: f64,
    pub audio_noise: f64,
    pub recipe: [ClassRecipe; N_CLASSES],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let patterns = [0, 1, 2, 3, 4, 1, 2, 5];
        let tones = [262.0, 330.0, 440.0, 523.0, 659.0, 784.0, 880.0, 1047.0];
        Self {
            n_videos: 12,
            frames_per_video: 256,
            val_videos: 4,
            fps: 30.0,
            sample_rate: 16_000,
            image_size: 16,
            min_segment: 64,
            max_segment: 80,
            image_noise: 0.15,
            tone_amplitude: 0.5,
            audio_noise: 0.05,
            recipe: std::array::from_fn(|c| ClassRecipe {
                pattern: patterns[c],
                tone_hz: tones[c],
            }),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_videos == 0 || self.val_videos > self.n_videos {
            return fail(format!("{} videos with {} held out", self.n_videos, self.val_videos));
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment || self.frames_per_video < self.min_segment {
            return fail(format!(
                "segments {}..={} do not fit {} frames",
                self.min_segment, self.max_segment, self.frames_per_video
            ));
        }
        if !(self.fps > 0.0) || self.sample_rate == 0 || self.image_size < 8 {
            return fail("fps, sample_rate and image_size (>= 8) must be positive".into());
        }
        if let Some(r) = self.recipe.iter().find(|r| r.pattern >= N_PATTERNS || !(r.tone_hz > 0.0)) {
            return fail(format!("bad class recipe {r:?}"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if self.recipe.iter().any(|r| r.tone_hz >= nyquist) {
            return fail(format!("tones must stay below {nyquist} Hz"));
        }
        if self.ambiguity_pairs().is_empty() {
            return fail("the recipe needs at least one pair of classes sharing an image pattern".into());
        }
        Ok(())
    }

    /// Class pairs with the same image pattern and different tones.
    pub fn ambiguity_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..N_CLASSES {
            for b in a + 1..N_CLASSES {
                let (ra, rb) = (self.recipe[a], self.recipe[b]);
                if ra.pattern == rb.pattern && ra.tone_hz != rb.tone_hz {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn ambiguous_classes(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.ambiguity_pairs().into_iter().flat_map(|(a, b)| [a, b]).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Segment lengths per video; a tail shorter than `min_segment` is
    /// merged into the preceding segment.
    pub fn segment_plan(&self, seed: u64) -> Vec<Vec<(usize, usize)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut k = 0usize;
        (0..self.n_videos)
            .map(|_| {
                let mut lens = Vec::new();
                let mut left = self.frames_per_video;
                while left > 0 {
                    let len = rng.random_range(self.min_segment..=self.max_segment).min(left);
                    left -= len;
                    if left < self.min_segment && left > 0 {
                        lens.push(len + left);
                        left = 0;
                    } else {
                        lens.push(len);
                    }
                }
                lens.into_iter()
                    .map(|len| {
                        let class = k % N_CLASSES;
                        k += 1;
                        (class, len)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn frame_labels(&self, seed: u64) -> Vec<Vec<i8>> {
        self.segment_plan(seed)
            .into_iter()
            .map(|segs| {
                segs.into_iter()
                    .flat_map(|(c, len)| std::iter::repeat_n(c as i8, len))
                    .collect()
            })
            .collect()
    }

    pub fn expected_class_counts(&self, seed: u64) -> [u64; N_CLASSES] {
        let mut counts = [0u64; N_CLASSES];
        for segs in self.segment_plan(seed) {
            for (c, len) in segs {
                counts[c] += len as u64;
            }
        }
        counts
    }

    pub fn video_id(&self, v: usize) -> String {
        format!("video_{v:03}")
    }
}

/// Noise-free intensity of `pattern` at `(y, x)` on an `n × n` grid.
pub fn pattern_value(pattern: usize, y: usize, x: usize, n: usize) -> f64 {
    let (lo, hi) = (0.2, 0.8);
    let on = match pattern {
        0 => (y / 2) % 2 == 0,
        1 => (x / 2) % 2 == 0,
        2 => (y / 4 + x / 4) % 2 == 0,
        3 => ((x + y) / 3) % 2 == 0,
        4 => {
            let q = n / 4;
            (q..n - q).contains(&y) && (q..n - q).contains(&x)
        }
        _ => {
            let b = n / 5;
            y < b || x < b || y >= n - b || x >= n - b
        }
    };
    if on {
        hi
    } else {
        lo
    }
}

/// Writes the corpus under `out_dir` and returns the manifest written to
/// `out_dir/manifest.jsonl`. Output is a pure function of `(spec, seed)`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(out_dir)?;
    let plan = spec.segment_plan(seed);
    let n = spec.image_size;
    let mut entries = Vec::with_capacity(spec.n_videos);
    for (v, segs) in plan.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(v as u64 + 1);
        let id = spec.video_id(v);
        let labels: Vec<i8> = segs
            .iter()
            .flat_map(|&(c, len)| std::iter::repeat_n(c as i8, len))
            .collect();
        let ann = PathBuf::from("annotations").join(format!("{id}.txt"));
        let wav = PathBuf::from("audio").join(format!("{id}.wav"));
        let frames = PathBuf::from("frames").join(&id);
        for p in [&ann, &wav] {
            mkdir(&out_dir.join(p.parent().expect("relative file path")))?;
        }
        mkdir(&out_dir.join(&frames))?;
        write_annotations(&out_dir.join(&ann), &FrameLabels::new(id.clone(), labels.clone())?)?;

        for (t, &c) in labels.iter().enumerate() {
            let pattern = spec.recipe[c as usize].pattern;
            let data = (0..n * n)
                .map(|i| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (pattern_value(pattern, i / n, i % n, n) + spec.image_noise * z).clamp(0.0, 1.0) as f32
                })
                .collect();
            write_pgm(&out_dir.join(&frames).join(frame_file_name(t)), &Image::new(n, n, 1, data)?)?;
        }

        let sr = spec.sample_rate as f64;
        let total = (labels.len() as f64 / spec.fps * sr).floor() as usize;
        let mut samples = Vec::with_capacity(total);
        let mut start_frame = 0usize;
        for &(c, len) in segs {
            let end = ((start_frame + len) as f64 / spec.fps * sr).floor() as usize;
            let begin = samples.len();
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let w = std::f64::consts::TAU * spec.recipe[c].tone_hz / sr;
            for i in begin..end.min(total) {
                let z: f64 = StandardNormal.sample(&mut rng);
                let s = spec.tone_amplitude * (w * (i - begin) as f64 + phase).sin() + spec.audio_noise * z;
                samples.push(s as f32);
            }
            start_frame += len;
        }
        write_wav(&out_dir.join(&wav), &AudioClip::new(samples, spec.sample_rate)?)?;

        entries.push(ManifestEntry {
            video_id: id,
            annotation_path: ann,
            audio_path: wav,
            frames_dir: frames,
            fps: spec.fps,
            split: if v >= spec.n_videos - spec.val_videos {
                Split::Val
            } else {
                Split::Train
            },
        });
    }
    let manifest = Manifest {
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FeatureKey {
    pub video_id: String,
    pub center: usize,
    pub kind: WindowKind,
}

impl FeatureKey {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.video_id.as_bytes());
        h.update([0]);
        h.update(self.center.to_le_bytes());
        h.update(self.kind.as_str().as_bytes());
        hex::encode(h.finalize())
    }
}

/// TNSR blobs under `root/ab/cd/<digest>.tnsr`.
///
/// Readers need no coordination. A writer holds `<digest>.lock` (created
/// exclusively) while it writes a temporary file and renames it into place,
/// so a second concurrent writer of the same key fails with
/// [`Error::Locked`] and readers never observe a partial blob.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    root: PathBuf,
}

pub const CACHE_ENV: &str = "FUSIONKIT_CACHE";

impl FeatureCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    /// `$FUSIONKIT_CACHE` if set, else `default`.
    pub fn resolve_dir(default: Option<PathBuf>) -> Option<PathBuf> {
        std::env::var_os(CACHE_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or(default)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, key: &FeatureKey) -> PathBuf {
        let d = key.digest();
        self.root.join(&d[..2]).join(&d[2..4]).join(format!("{d}.tnsr"))
    }

    /// `Ok(None)` when the key was never stored.
    pub fn get<S: Scalar>(&self, key: &FeatureKey) -> Result<Option<Tensor<S>>> {
        let path = self.path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let integrity = |msg: String| Error::Integrity {
            path: path.clone(),
            msg,
        };
        let (t, used) = Tensor::from_tnsr_bytes(&bytes).map_err(|e| integrity(e.to_string()))?;
        if used != bytes.len() {
            return Err(integrity(format!("{} trailing bytes", bytes.len() - used)));
        }
        Ok(Some(t))
    }

    pub fn put<S: Scalar>(&self, key: &FeatureKey, value: &Tensor<S>) -> Result<()> {
        let path = self.path(key);
        let dir = path.parent().expect("cache paths have a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = path.with_extension("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(Error::Locked(format!("{}/{}/{}", key.video_id, key.center, key.kind)))
            }
            Err(e) => return Err(Error::io(&lock, e)),
        }
        let tmp = path.with_extension("tmp");
        let res = (|| {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&value.to_tnsr_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
        })();
        let _ = fs::remove_file(&lock);
        res
    }
}
