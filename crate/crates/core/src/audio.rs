//! Speech front end: STFT, HTK Mel filterbank, log-Mel features, 4-second
//! segmentation and 16-bit PCM WAV I/O.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const SEGMENT_SECONDS: f64 = 4.0;
/// Power floor applied before the natural log.
pub const POWER_FLOOR: f64 = 1e-10;

/// 16-bit PCM full scale used for both reading and writing.
const PCM_SCALE: f64 = 32767.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Audio(format!(
                "sample rate {sample_rate} Hz not supported, expected {SAMPLE_RATE} Hz"
            )));
        }
        if let Some(i) = samples.iter().position(|s| !(s.is_finite() && s.abs() <= 1.0)) {
            return Err(Error::InvalidInput(format!(
                "sample {i} = {} outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> AudioClip {
        AudioClip {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Complex STFT, stored frame-major: `data[t * bins + f]`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub bins: usize,
    pub frames: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrum {
    pub fn at(&self, bin: usize, frame: usize) -> Complex<f64> {
        self.data[frame * self.bins + bin]
    }

    pub fn column(&self, frame: usize) -> &[Complex<f64>] {
        &self.data[frame * self.bins..(frame + 1) * self.bins]
    }
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Number of analysis frames for `samples` input samples: one frame per
/// full hop, reading zeros past the end of the clip.
pub fn frame_count(samples: usize, hop: usize) -> usize {
    samples / hop
}

/// Short-time Fourier transform. Frame `t` starts at `t * hop`, is
/// Hann-windowed over `frame_length` samples (zeros past the clip end) and
/// zero-padded to `fft_size`. Returns `fft_size / 2 + 1` bins per frame.
pub fn stft(clip: &AudioClip, frame_length: usize, hop: usize, fft_size: usize) -> Result<Spectrum> {
    if frame_length == 0 || frame_length > fft_size {
        return Err(Error::InvalidInput(format!(
            "frame length {frame_length} must be in 1..={fft_size}"
        )));
    }
    if hop == 0 {
        return Err(Error::InvalidInput("hop must be >= 1".into()));
    }
    let samples = clip.samples();
    if samples.len() < frame_length {
        return Err(Error::InsufficientAudio {
            needed: frame_length,
            got: samples.len(),
        });
    }
    let frames = frame_count(samples.len(), hop);
    let bins = fft_size / 2 + 1;
    let window = hann_window(frame_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);

    let mut data = Vec::with_capacity(frames * bins);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for t in 0..frames {
        let start = t * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            let x = if n < frame_length {
                samples.get(start + n).copied().unwrap_or(0.0) * window[n]
            } else {
                0.0
            };
            *slot = Complex::new(x, 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrum { bins, frames, data })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MelConfig {
    pub frame_length: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub mel_bins: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            frame_length: 400,
            hop: 160,
            fft_size: 512,
            mel_bins: 64,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank on the HTK Mel scale, `mel_bins x (fft_size/2 + 1)`
/// row-major. Filter `m` rises from edge `m` to its peak at edge `m + 1` and
/// falls to zero at edge `m + 2`, with edges equally spaced in Mel between
/// `f_min` and `f_max`.
pub fn mel_filterbank(config: &MelConfig, sample_rate: u32) -> Vec<f64> {
    let bins = config.fft_size / 2 + 1;
    let edges = mel_band_edges(config);
    let mut fb = vec![0.0; config.mel_bins * bins];
    for m in 0..config.mel_bins {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / config.fft_size as f64;
            let rise = (f - lo) / (center - lo);
            let fall = (hi - f) / (hi - center);
            fb[m * bins + k] = rise.min(fall).max(0.0);
        }
    }
    fb
}

/// The `mel_bins + 2` band edges in Hz.
pub fn mel_band_edges(config: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(config.f_min), hz_to_mel(config.f_max));
    let n = config.mel_bins + 1;
    (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect()
}

/// Log-Mel features, `mel_bins x frames`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Vec<f64>,
    pub mel_bins: usize,
    pub frames: usize,
    pub frame_hop: usize,
    pub frame_length: usize,
}

impl MelSpectrogram {
    pub fn log_floor() -> f64 {
        POWER_FLOOR.ln()
    }

    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    /// Repeats the last column until there are `frames` columns.
    pub fn pad_frames(&self, frames: usize) -> Result<MelSpectrogram> {
        if frames < self.frames {
            return Err(Error::Shape(format!(
                "cannot pad {} frames down to {frames}",
                self.frames
            )));
        }
        let mut values = Vec::with_capacity(self.mel_bins * frames);
        for b in 0..self.mel_bins {
            let row = &self.values[b * self.frames..(b + 1) * self.frames];
            values.extend_from_slice(row);
            let last = row[self.frames - 1];
            values.extend(std::iter::repeat(last).take(frames - self.frames));
        }
        Ok(MelSpectrogram {
            values,
            frames,
            ..*self
        })
    }
}

/// Computes natural-log Mel power features with the power floored at
/// [`POWER_FLOOR`].
pub fn mel_spectrogram(clip: &AudioClip, config: &MelConfig) -> Result<MelSpectrogram> {
    let spec = stft(clip, config.frame_length, config.hop, config.fft_size)?;
    let fb = mel_filterbank(config, clip.sample_rate());
    let bins = spec.bins;
    let mut values = vec![0.0; config.mel_bins * spec.frames];
    let mut power = vec![0.0; bins];
    for t in 0..spec.frames {
        for (p, c) in power.iter_mut().zip(spec.column(t)) {
            *p = c.norm_sqr();
        }
        for m in 0..config.mel_bins {
            let e: f64 = fb[m * bins..(m + 1) * bins]
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
            values[m * spec.frames + t] = e.max(POWER_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram {
        values,
        mel_bins: config.mel_bins,
        frames: spec.frames,
        frame_hop: config.hop,
        frame_length: config.frame_length,
    })
}

/// Splits into consecutive non-overlapping windows of `interval_seconds`,
/// dropping a shorter trailing remainder.
pub fn segment_clips(clip: &AudioClip, interval_seconds: f64) -> Vec<AudioClip> {
    let len = (interval_seconds * clip.sample_rate() as f64).round() as usize;
    if len == 0 {
        return Vec::new();
    }
    clip.samples()
        .chunks_exact(len)
        .map(|c| AudioClip {
            samples: c.to_vec(),
            sample_rate: clip.sample_rate(),
        })
        .collect()
}

/// Rounds every sample onto the 16-bit PCM grid used by [`write_wav`].
pub fn quantize_pcm16(x: f64) -> f64 {
    (x.clamp(-1.0, 1.0) * PCM_SCALE).round() / PCM_SCALE
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Audio(format!(
            "{}: expected 16-bit integer PCM",
            path.display()
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "{}: sample rate {} Hz not supported, expected {SAMPLE_RATE} Hz (no resampling)",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| (v as f64 / PCM_SCALE).clamp(-1.0, 1.0)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    AudioClip::new(samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in clip.samples() {
        writer
            .write_sample((s.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16)
            .map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// O(N^2) DFT of the same windowed, zero-padded frame.
    fn direct_dft(samples: &[f64], start: usize, cfg: &MelConfig) -> Vec<Complex<f64>> {
        let win = hann_window(cfg.frame_length);
        let n = cfg.fft_size;
        (0..n / 2 + 1)
            .map(|k| {
                let mut acc = Complex::new(0.0, 0.0);
                for i in 0..cfg.frame_length {
                    let x = samples.get(start + i).copied().unwrap_or(0.0) * win[i];
                    let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                    acc += Complex::new(x * ang.cos(), x * ang.sin());
                }
                acc
            })
            .collect()
    }

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip::new(samples, SAMPLE_RATE).unwrap()
    }

    fn sine(freq: f64, seconds: f64, amp: f64) -> AudioClip {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        clip((0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin())
            .collect())
    }

    #[test]
    fn rejects_other_rates_and_ranges() {
        assert!(matches!(AudioClip::new(vec![0.0], 44_100), Err(Error::Audio(_))));
        assert!(AudioClip::new(vec![1.5], SAMPLE_RATE).is_err());
        assert!(AudioClip::new(vec![f64::NAN], SAMPLE_RATE).is_err());
    }

    #[test]
    fn stft_of_silence_is_zero() {
        let cfg = MelConfig::default();
        let s = stft(&clip(vec![0.0; 1600]), cfg.frame_length, cfg.hop, cfg.fft_size).unwrap();
        assert_eq!(s.frames, 10);
        assert_eq!(s.bins, 257);
        assert!(s.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn stft_rejects_short_clip() {
        let err = stft(&clip(vec![0.0; 399]), 400, 160, 512).unwrap_err();
        assert!(matches!(err, Error::InsufficientAudio { needed: 400, got: 399 }));
    }

    #[test]
    fn stft_matches_direct_dft() {
        let cfg = MelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = stft(&clip(samples.clone()), cfg.frame_length, cfg.hop, cfg.fft_size).unwrap();
        let mut max_err: f64 = 0.0;
        for t in [0, 1, 7, s.frames - 1] {
            let oracle = direct_dft(&samples, t * cfg.hop, &cfg);
            for (a, b) in s.column(t).iter().zip(&oracle) {
                max_err = max_err.max((a - b).norm());
            }
        }
        assert!(max_err <= 1e-6, "max err {max_err}");
    }

    #[test]
    fn sine_peaks_at_nearest_bin() {
        let cfg = MelConfig::default();
        let s = stft(&sine(440.0, 0.5, 1.0), cfg.frame_length, cfg.hop, cfg.fft_size).unwrap();
        let expected = (440.0 / (SAMPLE_RATE as f64 / cfg.fft_size as f64)).round() as usize;
        for t in 0..s.frames - 3 {
            let col = s.column(t);
            let argmax = (0..s.bins)
                .max_by(|&a, &b| col[a].norm().total_cmp(&col[b].norm()))
                .unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn filterbank_rows_positive_and_cover_band() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(&cfg, SAMPLE_RATE);
        let bins = cfg.fft_size / 2 + 1;
        for m in 0..cfg.mel_bins {
            assert!(fb[m * bins..(m + 1) * bins].iter().sum::<f64>() > 0.0, "row {m}");
        }
        // every bin strictly inside (0, f_max); the Nyquist bin sits on the
        // last filter's upper edge
        for k in 1..bins - 1 {
            assert!((0..cfg.mel_bins).any(|m| fb[m * bins + k] > 0.0), "bin {k}");
        }
    }

    #[test]
    fn silence_is_log_floor() {
        let mel = mel_spectrogram(&clip(vec![0.0; 16000]), &MelConfig::default()).unwrap();
        assert_eq!(mel.frames, 100);
        assert!(mel.values.iter().all(|&v| v == MelSpectrogram::log_floor()));
    }

    #[test]
    fn tone_lands_in_bracketing_mel_bin() {
        let cfg = MelConfig::default();
        let mel = mel_spectrogram(&sine(440.0, 1.0, 0.8), &cfg).unwrap();
        let avg: Vec<f64> = (0..cfg.mel_bins)
            .map(|m| (0..mel.frames).map(|t| mel.at(m, t)).sum::<f64>() / mel.frames as f64)
            .collect();
        let argmax = (0..cfg.mel_bins).max_by(|&a, &b| avg[a].total_cmp(&avg[b])).unwrap();
        // oracle: filterbank applied to the direct DFT of one steady frame
        let samples = sine(440.0, 1.0, 0.8).samples().to_vec();
        let col = direct_dft(&samples, 20 * cfg.hop, &cfg);
        let fb = mel_filterbank(&cfg, SAMPLE_RATE);
        let bins = col.len();
        let oracle = (0..cfg.mel_bins)
            .max_by(|&a, &b| {
                let e = |m: usize| -> f64 {
                    (0..bins).map(|k| fb[m * bins + k] * col[k].norm_sqr()).sum()
                };
                e(a).total_cmp(&e(b))
            })
            .unwrap();
        assert_eq!(argmax, oracle);
        let edges = mel_band_edges(&cfg);
        assert!(edges[argmax] < 440.0 && 440.0 < edges[argmax + 2]);
    }

    #[test]
    fn doubling_amplitude_adds_ln4() {
        let cfg = MelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<f64> = (0..8000).map(|_| rng.gen_range(-0.4..0.4)).collect();
        let a = mel_spectrogram(&clip(samples.clone()), &cfg).unwrap();
        let b = mel_spectrogram(&clip(samples.iter().map(|s| 2.0 * s).collect()), &cfg).unwrap();
        let floor = MelSpectrogram::log_floor();
        for (x, y) in a.values.iter().zip(&b.values) {
            if *x > floor + 1.0 {
                assert!((y - x - 4f64.ln()).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn trailing_zeros_shorter_than_hop_are_ignored() {
        let cfg = MelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples: Vec<f64> = (0..3200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = mel_spectrogram(&clip(samples.clone()), &cfg).unwrap();
        let mut padded = samples;
        padded.extend(std::iter::repeat(0.0).take(cfg.hop - 1));
        let b = mel_spectrogram(&clip(padded), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn four_seconds_gives_400_frames_padded_to_512() {
        let mel = mel_spectrogram(&clip(vec![0.0; 64_000]), &MelConfig::default()).unwrap();
        assert_eq!(mel.frames, 400);
        let padded = mel.pad_frames(512).unwrap();
        assert_eq!(padded.frames, 512);
        for m in 0..padded.mel_bins {
            for t in 400..512 {
                assert_eq!(padded.at(m, t), mel.at(m, 399));
            }
        }
    }

    #[test]
    fn segmentation_examples() {
        let twelve = clip(vec![0.0; 12 * 16_000]);
        let segs = segment_clips(&twelve, SEGMENT_SECONDS);
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| s.len() == 64_000));

        assert!(segment_clips(&clip(vec![0.0; 62_400]), SEGMENT_SECONDS).is_empty());

        let ramp: Vec<f64> = (0..136_000).map(|i| i as f64 / 136_000.0).collect();
        let segs = segment_clips(&clip(ramp.clone()), SEGMENT_SECONDS);
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1].samples()[0], ramp[64_000]);
    }

    #[test]
    fn wav_round_trip_and_rate_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..100).map(|i| quantize_pcm16((i as f64 / 50.0) - 1.0)).collect();
        write_wav(&path, &clip(samples.clone())).unwrap();
        assert_eq!(read_wav(&path).unwrap().samples(), &samples[..]);

        let bad = dir.path().join("b.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22_050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&bad, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&bad), Err(Error::Audio(_))));
    }
}
