//! Speech/gesture pairs: pose text files, audio-pose alignment, JSON
//! manifests with seeded splits, and synthetic oracle datasets.
//!
//! Pose text format:
//!
//! ```text
//! K=<joints> FPS=<rate> TOPO=<name>
//! x0 y0 z0 x1 y1 z1 ...        (3K floats per frame, one frame per line)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip, MelConfig, MelSpectrogram, SAMPLE_RATE, SEGMENT_SECONDS};
use crate::error::{Error, Result};
use crate::skeleton::{root_normalize, PoseSequence, SkeletonTopology, Vec3};

pub const POSE_FPS: f64 = 16.0;
pub const POSE_FRAMES: usize = 64;
pub const MEL_FRAMES: usize = 512;
/// RMS analysis window of the synthetic gesture rule, seconds.
pub const SYNTH_RMS_WINDOW: f64 = 0.25;
/// Spacing of the synthetic envelope control points, seconds.
pub const SYNTH_ENVELOPE_STEP: f64 = 0.5;
/// Largest synthetic arm elevation, reached at full-scale RMS.
pub const SYNTH_MAX_ANGLE: f64 = std::f64::consts::FRAC_PI_3;
/// RMS that maps to the largest elevation: a full-scale envelope.
pub const SYNTH_RMS_MAX: f64 = 1.0;

const GRID_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GestureSample {
    pub speech: MelSpectrogram,
    pub gesture: PoseSequence,
    pub speaker_id: String,
    pub source_offset: f64,
}

// ---------------------------------------------------------------------------
// pose files

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFile {
    pub sequence: PoseSequence,
    pub topology: String,
}

pub fn load_pose_file(path: &Path) -> Result<PoseSequence> {
    read_pose_file(path).map(|f| f.sequence)
}

pub fn read_pose_file(path: &Path) -> Result<PoseFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_text(&text, &path.display().to_string())
}

pub fn parse_pose_text(text: &str, origin: &str) -> Result<PoseFile> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let mut k = None;
    let mut fps = None;
    let mut topo = None;
    for token in header.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| err(1, format!("malformed header token {token:?}")))?;
        match key {
            "K" => k = Some(value.parse::<usize>().map_err(|e| err(1, format!("K: {e}")))?),
            "FPS" => fps = Some(value.parse::<f64>().map_err(|e| err(1, format!("FPS: {e}")))?),
            "TOPO" => topo = Some(value.to_string()),
            _ => return Err(err(1, format!("unknown header key {key:?}"))),
        }
    }
    let (Some(k), Some(fps), Some(topo)) = (k, fps, topo) else {
        return Err(err(1, "header must define K, FPS and TOPO".into()));
    };
    if k == 0 {
        return Err(err(1, "K must be >= 1".into()));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(err(1, format!("FPS must be > 0, got {fps}")));
    }

    let mut body: Vec<(usize, &str)> = lines.collect();
    while body.last().is_some_and(|(_, l)| l.trim().is_empty()) {
        body.pop();
    }
    if body.is_empty() {
        return Err(err(2, "no frames".into()));
    }
    let mut frames = Vec::with_capacity(body.len());
    for (n, line) in body {
        let mut values = Vec::with_capacity(3 * k);
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| err(n, format!("not a number: {tok:?}")))?;
            if !v.is_finite() {
                return Err(err(n, format!("non-finite value {tok}")));
            }
            values.push(v);
        }
        if values.len() != 3 * k {
            return Err(err(n, format!("expected {} values, got {}", 3 * k, values.len())));
        }
        frames.push(values.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<Vec3>>());
    }
    Ok(PoseFile {
        sequence: PoseSequence::new(frames, fps)?,
        topology: topo,
    })
}

/// Canonical text: shortest round-trip decimal for every float.
pub fn pose_text(seq: &PoseSequence, topology: &str) -> String {
    let mut s = format!("K={} FPS={} TOPO={}\n", seq.joint_count(), seq.fps(), topology);
    for frame in seq.frames() {
        let mut first = true;
        for v in frame.iter().flatten() {
            if !first {
                s.push(' ');
            }
            first = false;
            write!(s, "{v}").expect("write to string");
        }
        s.push('\n');
    }
    s
}

pub fn write_pose_file(path: &Path, seq: &PoseSequence, topology: &str) -> Result<()> {
    if topology.is_empty() || topology.contains(char::is_whitespace) {
        return Err(Error::InvalidInput(format!("topology name {topology:?} must be a single token")));
    }
    std::fs::write(path, pose_text(seq, topology)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// alignment

/// Log-Mel features of a 4 s clip, edge-padded to [`MEL_FRAMES`] columns.
pub fn speech_features(clip: &AudioClip) -> Result<MelSpectrogram> {
    let mel = audio::mel_spectrogram(clip, &MelConfig::default())?;
    mel.pad_frames(MEL_FRAMES)
}

/// Resamples `poses` onto the 16 fps grid starting at `start_s` by linear
/// interpolation. Grid points that coincide with source frames copy them.
pub fn resample(poses: &PoseSequence, start_s: f64, frames: usize, fps: f64) -> Result<PoseSequence> {
    let last = poses.len() - 1;
    let out = (0..frames)
        .map(|i| {
            let mut u = (start_s + i as f64 / fps) * poses.fps();
            if (u - u.round()).abs() < GRID_EPS {
                u = u.round();
            }
            let u = u.clamp(0.0, last as f64);
            let lo = u.floor() as usize;
            let w = u - lo as f64;
            if w == 0.0 || lo == last {
                return poses.frame(lo).to_vec();
            }
            poses
                .frame(lo)
                .iter()
                .zip(poses.frame(lo + 1))
                .map(|(a, b)| [0, 1, 2].map(|c| a[c] + w * (b[c] - a[c])))
                .collect()
        })
        .collect();
    PoseSequence::new(out, fps)
}

pub fn align(
    audio: &AudioClip,
    poses: &PoseSequence,
    topo: &SkeletonTopology,
    start_s: f64,
    end_s: f64,
    speaker_id: &str,
) -> Result<GestureSample> {
    let bounds = |message: String| Error::Bounds {
        start_s,
        end_s,
        message,
    };
    if !(start_s.is_finite() && end_s.is_finite()) || start_s < 0.0 {
        return Err(bounds("window must be finite and start at >= 0".into()));
    }
    if ((end_s - start_s) - SEGMENT_SECONDS).abs() > GRID_EPS {
        return Err(bounds(format!("window must span {SEGMENT_SECONDS} s")));
    }
    if end_s > audio.duration_s() + GRID_EPS {
        return Err(bounds(format!("audio lasts {} s", audio.duration_s())));
    }
    let pose_duration = poses.len() as f64 / poses.fps();
    if end_s > pose_duration + GRID_EPS {
        return Err(bounds(format!("poses last {pose_duration} s")));
    }
    poses.validate(topo)?;

    let sr = SAMPLE_RATE as f64;
    let start = (start_s * sr).round() as usize;
    let len = (SEGMENT_SECONDS * sr).round() as usize;
    if start + len > audio.len() {
        return Err(bounds(format!("audio holds {} samples", audio.len())));
    }
    let speech = speech_features(&audio.slice(start, start + len))?;
    let gesture = root_normalize(&resample(poses, start_s, POSE_FRAMES, POSE_FPS)?, topo)?;
    Ok(GestureSample {
        speech,
        gesture,
        speaker_id: speaker_id.to_string(),
        source_offset: start_s,
    })
}

// ---------------------------------------------------------------------------
// synthetic oracle data

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Unimodal,
    Multimodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

/// Which arm moves and in which direction it swings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GestureMode {
    pub side: Side,
    pub forward: bool,
}

/// One 4 s synthetic recording before alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub audio: AudioClip,
    pub poses: PoseSequence,
    pub mode: GestureMode,
}

fn smoothstep(x: f64) -> f64 {
    x * x * (3.0 - 2.0 * x)
}

/// Envelope through `points` spaced [`SYNTH_ENVELOPE_STEP`] apart, eased
/// between neighbours.
pub fn envelope(points: &[f64], t: f64) -> f64 {
    let u = (t / SYNTH_ENVELOPE_STEP).max(0.0);
    let i = (u.floor() as usize).min(points.len() - 1);
    if i + 1 >= points.len() {
        return points[points.len() - 1];
    }
    let w = smoothstep(u - i as f64);
    points[i] + w * (points[i + 1] - points[i])
}

/// RMS of consecutive [`SYNTH_RMS_WINDOW`] windows.
pub fn window_rms(samples: &[f64]) -> Vec<f64> {
    let n = (SYNTH_RMS_WINDOW * SAMPLE_RATE as f64).round() as usize;
    samples
        .chunks_exact(n)
        .map(|w| (w.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt())
        .collect()
}

/// Arm elevation per pose frame: window RMS interpolated linearly between
/// window centres (held at the ends), scaled so full-scale RMS gives
/// [`SYNTH_MAX_ANGLE`].
pub fn elevation_angles(samples: &[f64], frames: usize, fps: f64) -> Vec<f64> {
    let rms = window_rms(samples);
    (0..frames)
        .map(|i| {
            let u = (i as f64 / fps) / SYNTH_RMS_WINDOW - 0.5;
            let r = if rms.is_empty() {
                0.0
            } else if u <= 0.0 {
                rms[0]
            } else if u >= (rms.len() - 1) as f64 {
                rms[rms.len() - 1]
            } else {
                let lo = u.floor() as usize;
                let w = u - lo as f64;
                rms[lo] + w * (rms[lo + 1] - rms[lo])
            };
            SYNTH_MAX_ANGLE * (r / SYNTH_RMS_MAX).min(1.0)
        })
        .collect()
}

/// Rest pose with the arm below `{side}_shoulder` swung about the shoulder
/// by `angle` around the lateral axis; positive angles raise the arm
/// forward when `forward` is set and backward otherwise.
pub fn arm_pose(topo: &SkeletonTopology, mode: GestureMode, angle: f64) -> Result<Vec<Vec3>> {
    let name = format!("{}_shoulder", mode.side.name());
    let shoulder = topo
        .joint_index(&name)
        .ok_or_else(|| Error::InvalidInput(format!("topology {} has no joint {name}", topo.name())))?;
    let mut pos = topo.rest_pose().positions;
    if angle == 0.0 {
        return Ok(pos);
    }
    let a = if mode.forward { -angle } else { angle };
    let (s, c) = a.sin_cos();
    let origin = pos[shoulder];
    let mut stack: Vec<usize> = topo.children(shoulder).to_vec();
    while let Some(j) = stack.pop() {
        let d = [pos[j][0] - origin[0], pos[j][1] - origin[1], pos[j][2] - origin[2]];
        pos[j] = [origin[0] + d[0], origin[1] + c * d[1] - s * d[2], origin[2] + s * d[1] + c * d[2]];
        stack.extend_from_slice(topo.children(j));
    }
    Ok(pos)
}

/// Gesture implied by `samples` under `mode`, on the 16 fps grid.
pub fn synth_gesture(topo: &SkeletonTopology, samples: &[f64], mode: GestureMode) -> Result<PoseSequence> {
    let angles = elevation_angles(samples, POSE_FRAMES, POSE_FPS);
    let frames = angles
        .iter()
        .map(|&a| arm_pose(topo, mode, a))
        .collect::<Result<Vec<_>>>()?;
    PoseSequence::new(frames, POSE_FPS)
}

/// Rademacher noise under a random envelope, on the 16-bit PCM grid.
pub fn synth_audio(rng: &mut ChaCha8Rng) -> Result<AudioClip> {
    let n_points = (SEGMENT_SECONDS / SYNTH_ENVELOPE_STEP).round() as usize + 1;
    let points: Vec<f64> = (0..n_points).map(|_| rng.gen::<f64>()).collect();
    let n = (SEGMENT_SECONDS * SAMPLE_RATE as f64).round() as usize;
    let samples = (0..n)
        .map(|i| {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            audio::quantize_pcm16(sign * envelope(&points, i as f64 / SAMPLE_RATE as f64))
        })
        .collect();
    AudioClip::new(samples, SAMPLE_RATE)
}

/// Raw synthetic recordings on the default upper-body topology. Unimodal
/// clips always swing the right arm forward; multimodal clips draw the arm
/// and the swing direction from two fair coins.
pub fn synth_clips(kind: SynthKind, n_clips: usize, seed: u64) -> Result<Vec<SynthClip>> {
    let topo = SkeletonTopology::upper_body();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_clips)
        .map(|_| {
            let audio = synth_audio(&mut rng)?;
            let mode = match kind {
                SynthKind::Unimodal => GestureMode {
                    side: Side::Right,
                    forward: true,
                },
                SynthKind::Multimodal => GestureMode {
                    side: if rng.gen::<bool>() { Side::Left } else { Side::Right },
                    forward: rng.gen::<bool>(),
                },
            };
            let poses = synth_gesture(&topo, audio.samples(), mode)?;
            Ok(SynthClip { audio, poses, mode })
        })
        .collect()
}

fn synth_samples(kind: SynthKind, n_clips: usize, seed: u64) -> Result<Vec<GestureSample>> {
    let topo = SkeletonTopology::upper_body();
    synth_clips(kind, n_clips, seed)?
        .iter()
        .map(|c| align(&c.audio, &c.poses, &topo, 0.0, SEGMENT_SECONDS, "synth"))
        .collect()
}

pub fn synth_unimodal(n_clips: usize, seed: u64) -> Result<Vec<GestureSample>> {
    if n_clips < 1 {
        return Err(Error::InvalidInput("n_clips must be >= 1".into()));
    }
    synth_samples(SynthKind::Unimodal, n_clips, seed)
}

pub fn synth_multimodal(n_clips: usize, seed: u64) -> Result<Vec<GestureSample>> {
    if n_clips < 2 {
        return Err(Error::InvalidInput("n_clips must be >= 2".into()));
    }
    synth_samples(SynthKind::Multimodal, n_clips, seed)
}

// ---------------------------------------------------------------------------
// manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio_path: PathBuf,
    pub pose_path: PathBuf,
    pub start_s: f64,
    pub end_s: f64,
    pub speaker_id: String,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Train
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Seed of the last [`split`]; not part of the file.
    pub seed: Option<u64>,
}

impl DatasetManifest {
    /// Reads a JSON array of entries. Relative paths are resolved against
    /// the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut entries {
            if e.audio_path.is_relative() {
                e.audio_path = base.join(&e.audio_path);
            }
            if e.pose_path.is_relative() {
                e.pose_path = base.join(&e.pose_path);
            }
        }
        Ok(Self { entries, seed: None })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Seeded per-speaker stratified split: each speaker contributes
/// `round(n * val_fraction)` of its entries to validation.
pub fn split(manifest: &DatasetManifest, val_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if manifest.entries.is_empty() {
        return Err(Error::InvalidInput("manifest has no entries".into()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        groups.entry(e.speaker_id.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = manifest.clone();
    for idx in groups.values_mut() {
        idx.shuffle(&mut rng);
        let n_val = ((idx.len() as f64 * val_fraction).round() as usize).min(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            out.entries[i].split = if k < n_val { Split::Val } else { Split::Train };
        }
    }
    out.seed = Some(seed);
    Ok(out)
}

/// Loads and aligns every entry of `split`, in manifest order.
pub fn load_samples(manifest: &DatasetManifest, which: Split, topo: &SkeletonTopology) -> Result<Vec<GestureSample>> {
    let mut audio_cache: BTreeMap<&Path, AudioClip> = BTreeMap::new();
    let mut pose_cache: BTreeMap<&Path, PoseSequence> = BTreeMap::new();
    let mut out = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == which) {
        if !audio_cache.contains_key(e.audio_path.as_path()) {
            audio_cache.insert(&e.audio_path, audio::read_wav(&e.audio_path)?);
        }
        if !pose_cache.contains_key(e.pose_path.as_path()) {
            let file = read_pose_file(&e.pose_path)?;
            if file.sequence.joint_count() != topo.joint_count() {
                return Err(Error::Compatibility(format!(
                    "{}: {} joints, topology {} has {}",
                    e.pose_path.display(),
                    file.sequence.joint_count(),
                    topo.name(),
                    topo.joint_count()
                )));
            }
            pose_cache.insert(&e.pose_path, file.sequence);
        }
        let a = &audio_cache[e.audio_path.as_path()];
        let p = &pose_cache[e.pose_path.as_path()];
        out.push(align(a, p, topo, e.start_s, e.end_s, &e.speaker_id)?);
    }
    Ok(out)
}

/// Writes `n` synthetic clips as `clip_XXXX.wav` / `clip_XXXX.pose` plus a
/// `manifest.json` with a seeded validation split.
pub fn write_synthetic_dataset(
    dir: &Path,
    kind: SynthKind,
    n: usize,
    seed: u64,
    val_fraction: f64,
) -> Result<DatasetManifest> {
    let minimum = match kind {
        SynthKind::Unimodal => 1,
        SynthKind::Multimodal => 2,
    };
    if n < minimum {
        return Err(Error::InvalidInput(format!("need at least {minimum} clips, got {n}")));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let topo = SkeletonTopology::upper_body();
    let mut entries = Vec::with_capacity(n);
    for (i, clip) in synth_clips(kind, n, seed)?.iter().enumerate() {
        let wav = format!("clip_{i:04}.wav");
        let pose = format!("clip_{i:04}.pose");
        audio::write_wav(&dir.join(&wav), &clip.audio)?;
        write_pose_file(&dir.join(&pose), &clip.poses, topo.name())?;
        entries.push(ManifestEntry {
            audio_path: wav.into(),
            pose_path: pose.into(),
            start_s: 0.0,
            end_s: SEGMENT_SECONDS,
            speaker_id: "synth".into(),
            split: Split::Train,
        });
    }
    let manifest = if n >= 2 {
        split(&DatasetManifest { entries, seed: None }, val_fraction, seed)?
    } else {
        DatasetManifest { entries, seed: None }
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{bone_lengths, Pose};

    fn tiny_seq() -> PoseSequence {
        PoseSequence::new(
            vec![
                vec![[0.0, 0.5, -1.25], [1e-3, 2.0, 3.0]],
                vec![[0.1, 0.2, 0.3], [-4.0, 5.5, 6.0e10]],
            ],
            30.0,
        )
        .unwrap()
    }

    #[test]
    fn pose_text_round_trip() {
        let seq = tiny_seq();
        let text = pose_text(&seq, "two");
        let back = parse_pose_text(&text, "mem").unwrap();
        assert_eq!(back.sequence, seq);
        assert_eq!(back.topology, "two");
        assert_eq!(back.sequence.to_flat(), vec![0.0, 0.5, -1.25, 1e-3, 2.0, 3.0, 0.1, 0.2, 0.3, -4.0, 5.5, 6.0e10]);
        assert_eq!(pose_text(&back.sequence, &back.topology), text);
    }

    #[test]
    fn pose_file_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pose");
        write_pose_file(&path, &tiny_seq(), "two").unwrap();
        let original = std::fs::read_to_string(&path).unwrap();
        let seq = load_pose_file(&path).unwrap();
        write_pose_file(&path, &seq, "two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), original);
    }

    fn line_of(text: &str) -> usize {
        match parse_pose_text(text, "x") {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_cite_lines() {
        let mut text = String::from("K=1 FPS=16 TOPO=t\n");
        for i in 0..5 {
            text.push_str(&format!("{i} 0 0\n"));
        }
        text.push_str("1 NaN 0\n");
        assert_eq!(line_of(&text), 7);
        assert_eq!(line_of("K=1 FPS=16 TOPO=t\n0 0 0\n0 0\n"), 3);
        assert_eq!(line_of("K=1 FPS=16 TOPO=t\n0 0 0\n0 0 x\n"), 3);
        assert_eq!(line_of("K=1 FPS=16\n0 0 0\n"), 1);
        assert_eq!(line_of("K=1 FPS=0 TOPO=t\n0 0 0\n"), 1);
        assert_eq!(line_of("K=a FPS=16 TOPO=t\n0 0 0\n"), 1);
        assert_eq!(line_of("K=1 FPS=16 TOPO=t\n"), 2);
        assert_eq!(line_of("K=1 FPS=16 TOPO=t\n0 0 inf\n"), 2);
    }

    fn two_joint_topo() -> SkeletonTopology {
        use crate::skeleton::Joint;
        SkeletonTopology::new(
            "pair",
            vec![
                Joint { name: "a".into(), parent: None },
                Joint { name: "b".into(), parent: Some(0) },
            ],
            vec![[0.0, 1.0, 0.0]],
            vec![1.0],
            0,
        )
        .unwrap()
    }

    fn silent(seconds: f64) -> AudioClip {
        AudioClip::new(vec![0.0; (seconds * 16000.0) as usize], SAMPLE_RATE).unwrap()
    }

    #[test]
    fn align_on_matching_grid_selects_frames() {
        let topo = two_joint_topo();
        let frames: Vec<Vec<Vec3>> = (0..96).map(|t| vec![[0.0; 3], [t as f64 * 0.37, (t as f64).sin(), 1.0]]).collect();
        let poses = PoseSequence::new(frames, 16.0).unwrap();
        let s = align(&silent(6.0), &poses, &topo, 1.0, 5.0, "spk").unwrap();
        assert_eq!(s.gesture.len(), 64);
        for i in 0..64 {
            assert_eq!(s.gesture.frame(i), poses.frame(16 + i));
        }
        assert_eq!((s.speech.mel_bins, s.speech.frames), (64, 512));
        assert_eq!(s.source_offset, 1.0);
    }

    #[test]
    fn align_interpolates_constant_and_linear() {
        let topo = two_joint_topo();
        let constant = PoseSequence::new(vec![vec![[0.0; 3], [0.3, -0.7, 1.1]]; 150], 30.0).unwrap();
        let s = align(&silent(5.0), &constant, &topo, 0.5, 4.5, "").unwrap();
        assert!(s.gesture.frames().iter().all(|f| f[1] == [0.3, -0.7, 1.1]));

        let dir = [0.2, -0.1, 0.05];
        let linear = PoseSequence::new(
            (0..150).map(|t| vec![[0.0; 3], dir.map(|d| d * t as f64)]).collect(),
            30.0,
        )
        .unwrap();
        let s = align(&silent(5.0), &linear, &topo, 0.3, 4.3, "").unwrap();
        for (i, f) in s.gesture.frames().iter().enumerate() {
            let u = (0.3 + i as f64 / 16.0) * 30.0;
            for c in 0..3 {
                assert!((f[1][c] - dir[c] * u).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn align_rejects_out_of_range_windows() {
        let topo = two_joint_topo();
        let poses = PoseSequence::new(vec![vec![[0.0; 3], [0.0, 1.0, 0.0]]; 64], 16.0).unwrap();
        for (a, b) in [(0.5, 4.5), (-1.0, 3.0), (0.0, 3.0)] {
            assert!(matches!(align(&silent(4.0), &poses, &topo, a, b, ""), Err(Error::Bounds { .. })));
        }
        assert!(matches!(align(&silent(3.0), &poses, &topo, 0.0, 4.0, ""), Err(Error::Bounds { .. })));
    }

    #[test]
    fn align_root_normalizes() {
        let topo = two_joint_topo();
        let poses = PoseSequence::new(vec![vec![[5.0, 5.0, 5.0], [5.0, 6.0, 5.0]]; 64], 16.0).unwrap();
        let s = align(&silent(4.0), &poses, &topo, 0.0, 4.0, "").unwrap();
        assert_eq!(s.gesture.frame(10), &[[0.0; 3], [0.0, 1.0, 0.0]]);
    }

    #[test]
    fn synthetic_extremes() {
        let topo = SkeletonTopology::upper_body();
        let rest = topo.rest_pose().positions;
        let mode = GestureMode { side: Side::Right, forward: true };
        let zero = synth_gesture(&topo, &vec![0.0; 64000], mode).unwrap();
        assert!(zero.frames().iter().all(|f| f == &rest));

        let full: Vec<f64> = (0..64000).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let up = synth_gesture(&topo, &full, mode).unwrap();
        let sh = topo.joint_index("right_shoulder").unwrap();
        let el = topo.joint_index("right_elbow").unwrap();
        for f in up.frames() {
            let d = [f[el][0] - f[sh][0], f[el][1] - f[sh][1], f[el][2] - f[sh][2]];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            // angle between the upper arm and straight down
            let angle = (-d[1] / r).acos();
            assert!((angle - SYNTH_MAX_ANGLE).abs() < 1e-12);
            assert!(d[2] > 0.0);
        }
    }

    #[test]
    fn synthetic_poses_follow_emitted_audio() {
        let topo = SkeletonTopology::upper_body();
        let clips = synth_clips(SynthKind::Unimodal, 3, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (i, c) in clips.iter().enumerate() {
            let path = dir.path().join(format!("{i}.wav"));
            audio::write_wav(&path, &c.audio).unwrap();
            let read = audio::read_wav(&path).unwrap();
            let angles = elevation_angles(read.samples(), 64, 16.0);
            let el = topo.joint_index("right_elbow").unwrap();
            let sh = topo.joint_index("right_shoulder").unwrap();
            for (f, a) in c.poses.frames().iter().zip(&angles) {
                let d = [f[el][0] - f[sh][0], f[el][1] - f[sh][1], f[el][2] - f[sh][2]];
                let r = (d[1] * d[1] + d[2] * d[2]).sqrt();
                assert!(((d[2] / r).atan2(-d[1] / r) - a).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn synthetic_generation_is_reproducible() {
        let a = synth_clips(SynthKind::Multimodal, 4, 5).unwrap();
        let b = synth_clips(SynthKind::Multimodal, 4, 5).unwrap();
        assert_eq!(a, b);
        let c = synth_clips(SynthKind::Multimodal, 4, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn multimodal_moves_exactly_one_arm_and_balances_sides() {
        let topo = SkeletonTopology::upper_body();
        let rest = topo.rest_pose().positions;
        let clips = synth_clips(SynthKind::Multimodal, 1000, 2024).unwrap();
        let left = clips.iter().filter(|c| c.mode.side == Side::Left).count();
        assert!((450..=550).contains(&left), "{left}");
        let forward = clips.iter().filter(|c| c.mode.forward).count();
        assert!((450..=550).contains(&forward), "{forward}");
        for c in clips.iter().take(50) {
            let moved = |side: &str| {
                let j = topo.joint_index(&format!("{side}_wrist")).unwrap();
                c.poses.frames().iter().any(|f| f[j] != rest[j])
            };
            assert_ne!(moved("left"), moved("right"));
            assert_eq!(moved(c.mode.side.name()), true);
        }
    }

    #[test]
    fn opposite_directions_average_to_a_fixed_depth() {
        // the two swing directions of one arm cancel front-to-back
        let topo = SkeletonTopology::upper_body();
        let w = topo.joint_index("right_wrist").unwrap();
        for a in [0.1, 0.5, 1.0] {
            let f = arm_pose(&topo, GestureMode { side: Side::Right, forward: true }, a).unwrap();
            let b = arm_pose(&topo, GestureMode { side: Side::Right, forward: false }, a).unwrap();
            let rest = topo.rest_pose().positions[w];
            // the shoulder sits at z = 0
            assert!((0.5 * (f[w][2] + b[w][2]) - rest[2] * a.cos()).abs() < 1e-12);
            assert_eq!(f[w][0], b[w][0]);
        }
    }

    #[test]
    fn synthetic_samples_are_valid_and_rigid() {
        let topo = SkeletonTopology::upper_body();
        for s in synth_multimodal(4, 3).unwrap() {
            s.gesture.validate(&topo).unwrap();
            assert_eq!(root_normalize(&s.gesture, &topo).unwrap(), s.gesture);
            let rest = bone_lengths(&topo.rest_pose(), &topo).unwrap();
            for t in 0..s.gesture.len() {
                let b = bone_lengths(&Pose { positions: s.gesture.frame(t).to_vec() }, &topo).unwrap();
                for (x, y) in b.iter().zip(&rest) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        assert!(synth_multimodal(1, 0).is_err());
        assert!(synth_unimodal(0, 0).is_err());
    }

    fn manifest(n: usize, speakers: usize) -> DatasetManifest {
        DatasetManifest {
            entries: (0..n)
                .map(|i| ManifestEntry {
                    audio_path: format!("{i}.wav").into(),
                    pose_path: format!("{i}.pose").into(),
                    start_s: 0.0,
                    end_s: 4.0,
                    speaker_id: format!("s{}", i % speakers),
                    split: Split::Train,
                })
                .collect(),
            seed: None,
        }
    }

    #[test]
    fn split_counts_and_determinism() {
        let m = split(&manifest(10, 1), 0.2, 1).unwrap();
        assert_eq!(m.split_entries(Split::Val).len(), 2);
        assert_eq!(m.split_entries(Split::Train).len(), 8);
        assert_eq!(m, split(&manifest(10, 1), 0.2, 1).unwrap());
        let a = split(&manifest(100, 1), 0.2, 1).unwrap();
        let b = split(&manifest(100, 1), 0.2, 2).unwrap();
        assert!(a.entries.iter().zip(&b.entries).any(|(x, y)| x.split != y.split));
        assert!(split(&manifest(0, 1), 0.2, 1).is_err());
        assert!(split(&manifest(4, 1), 1.0, 1).is_err());
    }

    #[test]
    fn split_is_stratified_by_speaker() {
        let m = split(&manifest(40, 4), 0.25, 9).unwrap();
        for s in 0..4 {
            let id = format!("s{s}");
            let val = m.entries.iter().filter(|e| e.speaker_id == id && e.split == Split::Val).count();
            // 10 * 0.25 rounds to 3
            assert_eq!(val, 3);
        }
    }

    #[test]
    fn synthetic_dataset_on_disk_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synthetic_dataset(dir.path(), SynthKind::Unimodal, 5, 4, 0.2).unwrap();
        assert_eq!(m.entries.len(), 5);
        let loaded = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        let topo = SkeletonTopology::upper_body();
        let train = load_samples(&loaded, Split::Train, &topo).unwrap();
        let val = load_samples(&loaded, Split::Val, &topo).unwrap();
        assert_eq!((train.len(), val.len()), (4, 1));
        let direct = synth_unimodal(5, 4).unwrap();
        let val_index = loaded.entries.iter().position(|e| e.split == Split::Val).unwrap();
        assert_eq!(val[0], direct[val_index]);
    }
}
