//! Log-mel spectrograms: 2048-point FFT, hop 1024, 128 mel bands.
//!
//! Frames are Hann-windowed and lie entirely inside the signal (no centre
//! padding), so a clip of `N` samples yields `1 + (N - 2048) / 1024` frames.
//! The mel scale is Slaney's (linear below 1 kHz, logarithmic above),
//! expressed in units where 1 kHz maps to 1000 mel.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const N_FFT: usize = 2048;
pub const HOP: usize = 1024;
pub const N_MELS: usize = 128;
pub const POWER_FLOOR: f64 = 1e-10;

/// Natural log of [`POWER_FLOOR`], the value of every silent cell.
pub fn log_floor() -> f32 {
    POWER_FLOOR.ln() as f32
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

/// One-sided complex spectrum, stored frame-major: `frames × bins`.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub n_bins: usize,
    pub n_frames: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrum {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn power(&self, t: usize) -> Vec<f64> {
        self.frame(t).iter().map(|c| c.norm_sqr()).collect()
    }
}

pub fn num_frames(n_samples: usize, n_fft: usize, hop: usize) -> Option<usize> {
    (n_samples >= n_fft).then(|| 1 + (n_samples - n_fft) / hop)
}

pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize, window: Window) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Self {
            n_fft,
            hop,
            window: window.coefficients(n_fft),
            fft,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn process(&self, samples: &[f32]) -> Result<Spectrum> {
        let n_frames = num_frames(samples.len(), self.n_fft, self.hop).ok_or_else(|| {
            Error::invalid(format!(
                "clip of {} samples is shorter than one {}-point frame",
                samples.len(),
                self.n_fft
            ))
        })?;
        let n_bins = self.n_bins();
        let mut data = Vec::with_capacity(n_frames * n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let frame = &samples[t * self.hop..t * self.hop + self.n_fft];
            for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s as f64 * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..n_bins]);
        }
        Ok(Spectrum {
            n_bins,
            n_frames,
            data,
        })
    }
}

/// Hann-windowed STFT with 2048 points and hop 1024.
pub fn stft(clip: &AudioClip) -> Result<Spectrum> {
    Stft::new(N_FFT, HOP, Window::Hann).process(&clip.samples)
}

const MEL_BREAK_HZ: f64 = 1000.0;
/// Slaney's log step, ln(6.4) / 27 per 200/3 Hz.
const SLANEY_LOGSTEP: f64 = 0.068_751_777_420_949_12;
/// 15 Slaney mel = 1000 Hz; rescaled so the breakpoint reads 1000 mel.
const MEL_UNIT: f64 = 1000.0 / 15.0;

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MEL_BREAK_HZ {
        hz
    } else {
        MEL_BREAK_HZ + MEL_UNIT * (hz / MEL_BREAK_HZ).ln() / SLANEY_LOGSTEP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MEL_BREAK_HZ {
        mel
    } else {
        MEL_BREAK_HZ * ((mel - MEL_BREAK_HZ) / MEL_UNIT * SLANEY_LOGSTEP).exp()
    }
}

/// Triangular filters, `n_mels × n_bins`, area-normalised.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
    /// `n_mels + 2` band edges in Hz; filter `m` spans `edges[m]..edges[m + 2]`
    /// and peaks at `edges[m + 1]`.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        (0..self.n_mels)
            .map(|m| self.row(m).iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Result<MelFilterbank> {
    if sample_rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let n_bins = n_fft / 2 + 1;
    if n_mels == 0 || n_mels > n_bins {
        return Err(Error::invalid(format!(
            "{n_mels} mel bands cannot be resolved by {n_bins} FFT bins"
        )));
    }
    let f_max = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;

    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let norm = 2.0 / (hi - lo);
        let row = &mut weights[m * n_bins..(m + 1) * n_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rise = (f - lo) / (mid - lo);
            let fall = (hi - f) / (hi - mid);
            *w = norm * rise.min(fall).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid(format!(
                "mel band {m} ({lo:.1}-{hi:.1} Hz) contains no FFT bin; too many mel bands"
            )));
        }
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        weights,
        edges_hz,
    })
}

/// Log-power mel grid stored band-major: `n_mels × n_frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub data: Vec<f32>,
    pub hop: usize,
    pub n_fft: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.data[mel * self.n_frames + frame]
    }

    /// Extends the time axis with silent frames up to a multiple of `multiple`.
    pub fn pad_frames_to_multiple(&self, multiple: usize) -> Self {
        let target = self.n_frames.div_ceil(multiple) * multiple;
        if target == self.n_frames {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.n_mels * target);
        for row in self.data.chunks(self.n_frames) {
            data.extend_from_slice(row);
            data.extend(std::iter::repeat_n(log_floor(), target - self.n_frames));
        }
        Self {
            n_frames: target,
            data,
            ..self.clone()
        }
    }
}

/// Reusable log-mel front end for one sample rate.
pub struct LogMel {
    stft: Stft,
    filterbank: MelFilterbank,
    sample_rate: u32,
}

impl LogMel {
    pub fn new(sample_rate: u32) -> Result<Self> {
        Ok(Self {
            stft: Stft::new(N_FFT, HOP, Window::Hann),
            filterbank: mel_filterbank(sample_rate, N_FFT, N_MELS)?,
            sample_rate,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        if clip.sample_rate != self.sample_rate {
            return Err(Error::invalid(format!(
                "clip at {} Hz given to a {} Hz front end",
                clip.sample_rate, self.sample_rate
            )));
        }
        let spec = self.stft.process(&clip.samples)?;
        let n_frames = spec.n_frames;
        let mut data = vec![0.0f32; N_MELS * n_frames];
        for t in 0..n_frames {
            let mel = self.filterbank.apply(&spec.power(t));
            for (m, v) in mel.into_iter().enumerate() {
                data[m * n_frames + t] = v.max(POWER_FLOOR).ln() as f32;
            }
        }
        Ok(MelSpectrogram {
            n_mels: N_MELS,
            n_frames,
            data,
            hop: HOP,
            n_fft: N_FFT,
            sample_rate: self.sample_rate,
        })
    }
}

pub fn log_mel(clip: &AudioClip) -> Result<MelSpectrogram> {
    LogMel::new(clip.sample_rate)?.compute(clip)
}

/// Audio for a run of video frames, with a record of any clamping.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameClip {
    pub clip: AudioClip,
    /// Unclamped sample range `[start, end)`; may extend past either end.
    pub requested: (i64, i64),
    /// Samples cut off before the start and after the end of the audio.
    pub missing_before: usize,
    pub missing_after: usize,
}

impl FrameClip {
    pub fn was_clamped(&self) -> bool {
        self.missing_before > 0 || self.missing_after > 0
    }

    /// The requested span with clamped regions filled by silence, so every
    /// window of a given frame count has the same length.
    pub fn zero_padded(&self) -> AudioClip {
        let mut samples = vec![0.0; self.missing_before];
        samples.extend_from_slice(&self.clip.samples);
        samples.extend(std::iter::repeat_n(0.0, self.missing_after));
        AudioClip {
            samples,
            sample_rate: self.clip.sample_rate,
        }
    }
}

/// Samples `floor(lo / fps · sr)` up to `floor((hi + 1) / fps · sr)`, clamped
/// to the clip.
pub fn clip_for_frames(audio: &AudioClip, fps: f64, frame_lo: i64, frame_hi: i64) -> Result<FrameClip> {
    if !(fps > 0.0) {
        return Err(Error::invalid(format!("fps must be positive, got {fps}")));
    }
    if frame_lo > frame_hi {
        return Err(Error::invalid(format!(
            "frame range [{frame_lo}, {frame_hi}] is reversed"
        )));
    }
    let sr = audio.sample_rate as f64;
    let start = (frame_lo as f64 * sr / fps).floor() as i64;
    let end = ((frame_hi + 1) as f64 * sr / fps).floor() as i64;
    let n = audio.samples.len() as i64;
    let (lo, hi) = (start.clamp(0, n), end.clamp(0, n));
    if lo >= hi {
        return Err(Error::invalid(format!(
            "frames [{frame_lo}, {frame_hi}] (samples {start}..{end}) lie outside the {n}-sample clip"
        )));
    }
    Ok(FrameClip {
        clip: AudioClip {
            samples: audio.samples[lo as usize..hi as usize].to_vec(),
            sample_rate: audio.sample_rate,
        },
        requested: (start, end),
        missing_before: (lo - start) as usize,
        missing_after: (end - hi) as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, sr: u32, n: usize, amp: f64) -> AudioClip {
        let samples = (0..n)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / sr as f64).sin()) as f32)
            .collect();
        AudioClip::new(samples, sr).unwrap()
    }

    #[test]
    fn frame_count_formula() {
        let clip = AudioClip::new(vec![0.0; 4096], 16000).unwrap();
        assert_eq!(stft(&clip).unwrap().n_frames, 3);
        assert_eq!(stft(&clip).unwrap().n_bins, 1025);
        assert!(stft(&AudioClip::new(vec![0.0; 2047], 16000).unwrap()).is_err());
    }

    #[test]
    fn dc_energy_stays_at_bottom_bins() {
        let clip = AudioClip::new(vec![0.25; 2048], 16000).unwrap();
        let rect = Stft::new(N_FFT, HOP, Window::Rectangular).process(&clip.samples).unwrap();
        let p = rect.power(0);
        assert!(p[1..].iter().all(|&v| v <= 1e-6 * p[0]));

        // The Hann window's own spectrum occupies bins 0 and ±1.
        let p = stft(&clip).unwrap().power(0);
        assert!(p[0] > p[1] && p[1] > 0.0);
        assert!(p[2..].iter().all(|&v| v <= 1e-6 * p[0]));
    }

    #[test]
    fn bin_centred_sine_peaks_at_its_bin() {
        for k in [5usize, 40, 100, 333, 900] {
            let clip = sine(k as f64 * 16000.0 / 2048.0, 16000, 8192, 0.5);
            let spec = stft(&clip).unwrap();
            for t in 0..spec.n_frames {
                let p = spec.power(t);
                let argmax = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
                assert_eq!(argmax, k);
            }
        }
    }

    #[test]
    fn inverse_dft_recovers_windowed_frame() {
        let clip = sine(523.0, 16000, 4096, 0.7);
        let spec = stft(&clip).unwrap();
        let half = spec.frame(0);
        let n = N_FFT;
        let window = Window::Hann.coefficients(n);
        // Rebuild the full Hermitian spectrum and invert with a direct sum.
        let full: Vec<Complex<f64>> = (0..n)
            .map(|k| if k <= n / 2 { half[k] } else { half[n - k].conj() })
            .collect();
        for i in (0..n).step_by(37) {
            let x: f64 = full
                .iter()
                .enumerate()
                .map(|(k, c)| (c * Complex::from_polar(1.0, 2.0 * PI * (k * i) as f64 / n as f64)).re)
                .sum::<f64>()
                / n as f64;
            assert!((x - clip.samples[i] as f64 * window[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn mel_scale_is_linear_below_one_khz() {
        assert_eq!(hz_to_mel(1000.0), 1000.0);
        assert_eq!(hz_to_mel(440.0), 440.0);
        for hz in [50.0, 999.0, 1000.0, 1500.0, 4000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        // Slaney: 6.4 kHz is 27 Slaney steps above 1 kHz (15 -> 42 Slaney mel).
        assert!((hz_to_mel(6400.0) - 42.0 * MEL_UNIT).abs() < 1e-9);
    }

    #[test]
    fn filterbank_rows_are_triangles() {
        let fb = mel_filterbank(16000, N_FFT, N_MELS).unwrap();
        assert_eq!((fb.n_mels, fb.n_bins), (128, 1025));
        let bin_hz = 16000.0 / 2048.0;
        for m in 0..fb.n_mels {
            let row = fb.row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert!(row[..=peak].windows(2).all(|w| w[1] >= w[0]));
            assert!(row[peak..].windows(2).all(|w| w[1] <= w[0]));
            for (k, &w) in row.iter().enumerate() {
                let f = k as f64 * bin_hz;
                if f <= fb.edges_hz[m] || f >= fb.edges_hz[m + 2] {
                    assert_eq!(w, 0.0);
                }
            }
        }
        assert!((1..fb.n_mels).all(|m| fb.center_hz(m) > fb.center_hz(m - 1)));
        assert!((fb.edges_hz[129] - 8000.0).abs() < 1e-6);
    }

    #[test]
    fn too_many_mels_is_an_error() {
        assert!(mel_filterbank(16000, N_FFT, 2000).is_err());
        assert!(mel_filterbank(16000, 64, 128).is_err());
        assert!(mel_filterbank(0, N_FFT, 128).is_err());
    }

    #[test]
    fn silence_is_floor_and_shape_follows_formula() {
        let clip = AudioClip::new(vec![0.0; 16000], 16000).unwrap();
        let mel = log_mel(&clip).unwrap();
        assert_eq!((mel.n_mels, mel.n_frames), (128, 14));
        assert!(mel.data.iter().all(|&v| v == log_floor()));
        assert!((log_floor() as f64 - (-23.025850929940457)).abs() < 1e-5);
    }

    #[test]
    fn sine_lands_in_its_mel_band() {
        let fe = LogMel::new(16000).unwrap();
        for freq in [440.0, 1000.0, 2500.0] {
            let mel = fe.compute(&sine(freq, 16000, 16000, 0.5)).unwrap();
            let fb = fe.filterbank();
            // band of a frequency: the filter whose centre is nearest on the mel axis
            let expected = (0..fb.n_mels)
                .min_by(|&a, &b| {
                    let d = |m: usize| (hz_to_mel(fb.center_hz(m)) - hz_to_mel(freq)).abs();
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            let t = mel.n_frames / 2;
            let argmax = (0..128).max_by(|&a, &b| mel.at(a, t).total_cmp(&mel.at(b, t))).unwrap();
            assert_eq!(argmax, expected, "{freq} Hz");
        }
    }

    #[test]
    fn hop_delay_shifts_columns() {
        let base = sine(700.0, 16000, 12000, 0.3);
        let mut delayed = vec![0.0; HOP];
        delayed.extend_from_slice(&base.samples);
        let a = log_mel(&base).unwrap();
        let b = log_mel(&AudioClip::new(delayed, 16000).unwrap()).unwrap();
        assert_eq!(b.n_frames, a.n_frames + 1);
        for m in 0..128 {
            for t in 0..a.n_frames {
                assert!((a.at(m, t) - b.at(m, t + 1)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn louder_input_never_lowers_a_cell() {
        let clip = sine(300.0, 16000, 6000, 0.1);
        let loud = AudioClip::new(clip.samples.iter().map(|s| s * 3.0).collect(), 16000).unwrap();
        let (a, b) = (log_mel(&clip).unwrap(), log_mel(&loud).unwrap());
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| y >= x));
    }

    #[test]
    fn frame_clipping() {
        let audio = AudioClip::new(vec![0.1; 30000], 30000).unwrap();
        let fc = clip_for_frames(&audio, 30.0, 0, 0).unwrap();
        assert_eq!(fc.requested, (0, 1000));
        assert_eq!(fc.clip.samples.len(), 1000);
        assert!(!fc.was_clamped());

        assert!(clip_for_frames(&audio, 30.0, 40, 45).is_err());
        assert!(clip_for_frames(&audio, 30.0, 5, 4).is_err());
        assert!(clip_for_frames(&audio, 0.0, 0, 1).is_err());

        let tail = clip_for_frames(&audio, 30.0, 28, 31).unwrap();
        assert_eq!(tail.clip.samples.len(), 2000);
        assert_eq!(tail.missing_after, 2000);
        assert_eq!(tail.zero_padded().samples.len(), 4000);

        let head = clip_for_frames(&audio, 30.0, -2, 1).unwrap();
        assert_eq!(head.missing_before, 2000);
        assert_eq!(head.clip.samples.len(), 2000);
    }

    #[test]
    fn padding_extends_with_floor() {
        let clip = sine(440.0, 16000, 16000, 0.5);
        let mel = log_mel(&clip).unwrap().pad_frames_to_multiple(16);
        assert_eq!(mel.n_frames, 16);
        assert_eq!(mel.at(3, 15), log_floor());
        assert_ne!(mel.at(3, 0), log_floor());
    }
}
