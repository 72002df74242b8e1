//! PCK and motion statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::dataset::{GestureSample, POSE_FPS};
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{generator_forward, ModelConfig, ModelParams, Tensor};
use crate::skeleton::{motion, norm3, sub3, PoseSequence, Vec3};

pub const DEFAULT_ALPHA: f64 = 0.2;

/// Largest extent over x, y and z of the keypoint bounding box.
pub fn reference_scale(frame: &[Vec3]) -> f64 {
    (0..3)
        .map(|c| {
            let (lo, hi) = frame
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p[c]), hi.max(p[c])));
            hi - lo
        })
        .fold(0.0, f64::max)
}

/// Per-joint correct counts over the non-degenerate frames of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PckCounts {
    pub correct: Vec<usize>,
    pub frames: usize,
    pub skipped: usize,
}

impl PckCounts {
    fn empty(joints: usize) -> Self {
        Self {
            correct: vec![0; joints],
            frames: 0,
            skipped: 0,
        }
    }

    fn merge(&mut self, other: &PckCounts) {
        for (a, b) in self.correct.iter_mut().zip(&other.correct) {
            *a += b;
        }
        self.frames += other.frames;
        self.skipped += other.skipped;
    }

    fn fraction(&self) -> Result<f64> {
        if self.frames == 0 {
            return Err(Error::UndefinedMetric(
                "every ground-truth frame is degenerate (zero extent)".into(),
            ));
        }
        let total: usize = self.correct.iter().sum();
        Ok(total as f64 / (self.frames * self.correct.len()) as f64)
    }
}

fn check_pair(pred: &PoseSequence, gt: &PoseSequence) -> Result<()> {
    if pred.len() != gt.len() || pred.joint_count() != gt.joint_count() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.len(),
            pred.joint_count(),
            gt.len(),
            gt.joint_count()
        )));
    }
    Ok(())
}

pub fn pck_counts(pred: &PoseSequence, gt: &PoseSequence, alpha: f64) -> Result<PckCounts> {
    check_pair(pred, gt)?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput(format!("alpha must be > 0, got {alpha}")));
    }
    let mut counts = PckCounts::empty(gt.joint_count());
    for (p, g) in pred.frames().iter().zip(gt.frames()) {
        let d = reference_scale(g);
        if d == 0.0 {
            counts.skipped += 1;
            continue;
        }
        counts.frames += 1;
        for (j, (a, b)) in p.iter().zip(g).enumerate() {
            if norm3(sub3(*a, *b)) < alpha * d {
                counts.correct[j] += 1;
            }
        }
    }
    Ok(counts)
}

/// Fraction of keypoints within `alpha` times the ground-truth frame extent.
pub fn pck(pred: &PoseSequence, gt: &PoseSequence, alpha: f64) -> Result<f64> {
    let counts = pck_counts(pred, gt, alpha)?;
    if counts.skipped > 0 {
        log::warn!("pck: skipped {} degenerate frames", counts.skipped);
    }
    counts.fraction()
}

/// Mean Euclidean norm of the frame-to-frame displacement of every joint.
pub fn motion_scale(seq: &PoseSequence) -> Result<f64> {
    let m = motion(seq)?;
    let n = (m.len() * seq.joint_count()) as f64;
    Ok(m.iter().flatten().map(|d| norm3(*d)).sum::<f64>() / n)
}

fn mean_motion(seqs: &[PoseSequence], what: &str) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::InvalidInput(format!("no {what} sequences")));
    }
    let mut sum = 0.0;
    for s in seqs {
        sum += motion_scale(s)?;
    }
    Ok(sum / seqs.len() as f64)
}

/// Mean motion of `outputs` relative to the mean motion of `dataset`.
pub fn collapse_ratio(outputs: &[PoseSequence], dataset: &[PoseSequence]) -> Result<f64> {
    let model = mean_motion(outputs, "model")?;
    let data = mean_motion(dataset, "dataset")?;
    if data == 0.0 {
        return Err(Error::UndefinedMetric("dataset gestures have no motion".into()));
    }
    Ok(model / data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pck: f64,
    pub alpha: f64,
    pub per_joint_pck: Vec<f64>,
    pub motion_scale: f64,
    pub dataset_motion_scale: f64,
    pub collapse_ratio: Option<f64>,
    pub n_sequences: usize,
    pub skipped_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRow {
    pub index: usize,
    pub pck: Option<f64>,
    pub motion_scale: f64,
}

pub fn sequence_csv(rows: &[SequenceRow]) -> String {
    let mut s = String::from("index,pck,motion_scale\n");
    for r in rows {
        let pck = r.pck.map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "{},{pck},{}", r.index, r.motion_scale).expect("write to string");
    }
    s
}

/// Scores `preds` against `gts` pairwise, pooling keypoint counts over all
/// sequences.
pub fn evaluate_predictions(
    preds: &[PoseSequence],
    gts: &[PoseSequence],
    alpha: f64,
) -> Result<(EvalReport, Vec<SequenceRow>)> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "need matching non-empty sets, got {} predictions and {} references",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = PckCounts::empty(gts[0].joint_count());
    let mut rows = Vec::with_capacity(preds.len());
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        let c = pck_counts(p, g, alpha)?;
        if c.correct.len() != total.correct.len() {
            return Err(Error::Shape("sequences differ in joint count".into()));
        }
        total.merge(&c);
        rows.push(SequenceRow {
            index: i,
            pck: c.fraction().ok(),
            motion_scale: motion_scale(p)?,
        });
    }
    if total.skipped > 0 {
        log::warn!("evaluate: skipped {} degenerate frames", total.skipped);
    }
    let pck = total.fraction()?;
    let per_joint_pck = total
        .correct
        .iter()
        .map(|c| *c as f64 / total.frames as f64)
        .collect();
    let motion_scale = mean_motion(preds, "model")?;
    let dataset_motion_scale = mean_motion(gts, "dataset")?;
    let collapse_ratio = (dataset_motion_scale > 0.0).then(|| motion_scale / dataset_motion_scale);
    Ok((
        EvalReport {
            pck,
            alpha,
            per_joint_pck,
            motion_scale,
            dataset_motion_scale,
            collapse_ratio,
            n_sequences: preds.len(),
            skipped_frames: total.skipped,
        },
        rows,
    ))
}

/// Generator output for one clip's features as a 16 fps pose sequence.
pub fn predict(params: &ModelParams, model: &ModelConfig, speech: &MelSpectrogram) -> Result<PoseSequence> {
    let g = &model.generator;
    if speech.mel_bins != g.mel_bins || speech.frames != g.audio_frames {
        return Err(Error::Shape(format!(
            "speech features are {}x{}, generator expects {}x{}",
            speech.mel_bins, speech.frames, g.mel_bins, g.audio_frames
        )));
    }
    let mel = Tensor::new(vec![speech.mel_bins, speech.frames], speech.values.clone())?;
    let out = generator_forward(params, g, &mel)?;
    PoseSequence::from_flat(out.values(), g.out_dims / 3, POSE_FPS)
}

/// Runs the checkpoint's generator on every sample and scores the result.
pub fn evaluate(checkpoint: &Checkpoint, samples: &[GestureSample], alpha: f64) -> Result<(EvalReport, Vec<SequenceRow>)> {
    let model = &checkpoint.header.model;
    let joints = checkpoint.header.topology.joints.len();
    for s in samples {
        if s.gesture.joint_count() != joints || s.gesture.joint_count() * 3 != model.generator.out_dims {
            return Err(Error::Compatibility(format!(
                "checkpoint expects {joints} joints ({} outputs), data has {}",
                model.generator.out_dims,
                s.gesture.joint_count()
            )));
        }
        if s.gesture.len() != model.generator.pose_frames {
            return Err(Error::Compatibility(format!(
                "checkpoint emits {} frames, data has {}",
                model.generator.pose_frames,
                s.gesture.len()
            )));
        }
    }
    let preds = samples
        .iter()
        .map(|s| predict(&checkpoint.params, model, &s.speech))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<PoseSequence> = samples.iter().map(|s| s.gesture.clone()).collect();
    evaluate_predictions(&preds, &gts, alpha)
}
