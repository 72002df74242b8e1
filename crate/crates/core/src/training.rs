//! Generator and adversarial objectives, Adam, and the alternating
//! discriminator/generator optimization loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::GestureSample;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Checkpoint, CheckpointHeader};
use crate::nn::model::{self, transpose2, ModelConfig, ModelParams, DISCRIMINATOR_PREFIX, GENERATOR_PREFIX};
use crate::nn::{Gradients, Tape, Tensor};
use crate::skeleton::{bone_lengths_unchecked, PoseSequence, SkeletonTopology};

/// Smallest argument passed to a log in the adversarial losses.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_bone: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub d_steps_per_g_step: usize,
    pub adversarial_weight: f64,
    /// Generator minimizes `log(1 - D(fake))` instead of `-log D(fake)`.
    pub saturating: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_bone: 0.1,
            lr_g: 1e-4,
            lr_d: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            d_steps_per_g_step: 1,
            adversarial_weight: 1.0,
            saturating: false,
        }
    }
}

impl TrainConfig {
    /// `lambda_bone = 0` is accepted for ablations.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("train config: {m}")));
        if !(0.0..1.0).contains(&self.lambda_bone) {
            return bad("lambda_bone must be in [0, 1)");
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        if self.batch_size < 1 || self.d_steps_per_g_step < 1 {
            return bad("batch_size and d_steps_per_g_step must be >= 1");
        }
        if !(self.adversarial_weight >= 0.0 && self.adversarial_weight.is_finite()) {
            return bad("adversarial_weight must be >= 0");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn adam(&self, lr: f64) -> AdamParams {
        AdamParams {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

// ---------------------------------------------------------------------------
// losses

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    pub bone: f64,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn generator_loss(
    pred: &PoseSequence,
    target: &PoseSequence,
    topo: &SkeletonTopology,
    lambda_bone: f64,
) -> Result<LossTerms> {
    if pred.len() != target.len() || pred.joint_count() != target.joint_count() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, target is {}x{}",
            pred.len(),
            pred.joint_count(),
            target.len(),
            target.joint_count()
        )));
    }
    pred.validate(topo)?;
    generator_loss_flat(&pred.to_flat(), &target.to_flat(), topo, lambda_bone).map(|(t, _)| t)
}

/// Loss terms and their gradient with respect to `pred`. Both buffers are
/// frame-major `[frames, joints * 3]`.
pub fn generator_loss_flat(
    pred: &[f64],
    target: &[f64],
    topo: &SkeletonTopology,
    lambda_bone: f64,
) -> Result<(LossTerms, Vec<f64>)> {
    let k3 = topo.joint_count() * 3;
    if pred.len() != target.len() || pred.len() % k3 != 0 {
        return Err(Error::Shape(format!(
            "prediction has {} values, target {}, frame size {k3}",
            pred.len(),
            target.len()
        )));
    }
    let frames = pred.len() / k3;
    if frames < 2 {
        return Err(Error::InsufficientFrames {
            needed: 2,
            got: frames,
        });
    }
    let n = pred.len() as f64;
    let mut grad = vec![0.0; pred.len()];
    let mut l1 = 0.0;
    for ((g, p), t) in grad.iter_mut().zip(pred).zip(target) {
        l1 += (p - t).abs();
        *g = sign(p - t) / n;
    }
    l1 /= n;

    let joint = |t: usize, j: usize| -> [f64; 3] {
        let o = t * k3 + 3 * j;
        [pred[o], pred[o + 1], pred[o + 2]]
    };
    let lengths: Vec<Vec<f64>> = (0..frames)
        .map(|t| {
            let pos: Vec<[f64; 3]> = (0..topo.joint_count()).map(|j| joint(t, j)).collect();
            bone_lengths_unchecked(&pos, topo)
        })
        .collect();
    // d|B_t - B_{t-1}| / dB_t, accumulated per frame and bone
    let steps = (frames - 1) as f64;
    let mut dlen = vec![vec![0.0; topo.bones().len()]; frames];
    let mut bone = 0.0;
    for t in 1..frames {
        for (b, (cur, prev)) in lengths[t].iter().zip(&lengths[t - 1]).enumerate() {
            let d = cur - prev;
            bone += d.abs();
            let s = sign(d) / steps;
            dlen[t][b] += s;
            dlen[t - 1][b] -= s;
        }
    }
    bone /= steps;

    if lambda_bone != 0.0 {
        for (t, row) in dlen.iter().enumerate() {
            for (b, (&g, bone_def)) in row.iter().zip(topo.bones()).enumerate() {
                let len = lengths[t][b];
                if g == 0.0 || len == 0.0 {
                    continue;
                }
                let pc = joint(t, bone_def.child);
                let pp = joint(t, bone_def.parent);
                for c in 0..3 {
                    let u = (pc[c] - pp[c]) / len;
                    grad[t * k3 + 3 * bone_def.child + c] += lambda_bone * g * u;
                    grad[t * k3 + 3 * bone_def.parent + c] -= lambda_bone * g * u;
                }
            }
        }
    }
    Ok((
        LossTerms {
            total: l1 + lambda_bone * bone,
            l1,
            bone,
        },
        grad,
    ))
}

fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_CLAMP).ln()
}

fn clamped_ln_grad(x: f64) -> f64 {
    if x > LOG_CLAMP {
        1.0 / x
    } else {
        0.0
    }
}

/// `-[ln d_real + ln(1 - d_fake)]`.
pub fn gan_loss_d(d_real: f64, d_fake: f64) -> f64 {
    -(clamped_ln(d_real) + clamped_ln(1.0 - d_fake))
}

/// Partial derivatives of [`gan_loss_d`] with respect to `(d_real, d_fake)`.
pub fn gan_loss_d_grad(d_real: f64, d_fake: f64) -> (f64, f64) {
    (-clamped_ln_grad(d_real), clamped_ln_grad(1.0 - d_fake))
}

/// Non-saturating generator loss `-ln d_fake`.
pub fn gan_loss_g(d_fake: f64) -> f64 {
    -clamped_ln(d_fake)
}

pub fn gan_loss_g_grad(d_fake: f64) -> f64 {
    -clamped_ln_grad(d_fake)
}

/// Literal minimax generator loss `ln(1 - d_fake)`.
pub fn gan_loss_g_saturating(d_fake: f64) -> f64 {
    clamped_ln(1.0 - d_fake)
}

pub fn gan_loss_g_saturating_grad(d_fake: f64) -> f64 {
    -clamped_ln_grad(1.0 - d_fake)
}

// ---------------------------------------------------------------------------
// optimizer

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update; `step` counts from 1.
pub fn adam_step(param: &mut [f64], m: &mut [f64], v: &mut [f64], grad: &[f64], hp: &AdamParams, step: u64) {
    debug_assert!(step >= 1);
    let c1 = 1.0 - hp.beta1.powf(step as f64);
    let c2 = 1.0 - hp.beta2.powf(step as f64);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
        v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= hp.lr * mh / (vh.sqrt() + hp.eps);
    }
}

// ---------------------------------------------------------------------------
// state

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    D,
    G,
}

/// One optimizer step. Generator rows leave `d_loss` empty and
/// discriminator rows leave the generator terms empty.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub step: u64,
    pub phase: Phase,
    pub l1: Option<f64>,
    pub bone: Option<f64>,
    pub adv_g: Option<f64>,
    pub d_loss: Option<f64>,
}

pub fn history_csv(history: &[HistoryRecord]) -> String {
    let mut s = String::from("step,phase,l1,bone,adv_g,d_loss\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        let phase = match r.phase {
            Phase::D => "d",
            Phase::G => "g",
        };
        writeln!(
            s,
            "{},{phase},{},{},{},{}",
            r.step,
            cell(r.l1),
            cell(r.bone),
            cell(r.adv_g),
            cell(r.d_loss)
        )
        .expect("write to string");
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingMeta {
    config: TrainConfig,
    g_step: u64,
    d_step: u64,
    epoch: u64,
    rng_seed: u64,
    rng_word_pos: u128,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub g_step: u64,
    pub d_step: u64,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<HistoryRecord>,
}

/// Stream of the batch-shuffling generator, distinct from initialization.
const SHUFFLE_STREAM: u64 = 1;

impl TrainState {
    pub fn new(model: &ModelConfig, seed: u64) -> Result<Self> {
        let params = model::init_params(model, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
            g_step: 0,
            d_step: 0,
            epoch: 0,
            rng,
            history: Vec::new(),
        })
    }

    pub fn total_steps(&self) -> u64 {
        self.g_step + self.d_step
    }

    pub fn to_checkpoint(&self, model: &ModelConfig, topo: &SkeletonTopology, config: &TrainConfig) -> Result<Checkpoint> {
        let meta = TrainingMeta {
            config: config.clone(),
            g_step: self.g_step,
            d_step: self.d_step,
            epoch: self.epoch,
            rng_seed: config.seed,
            rng_word_pos: self.rng.get_word_pos(),
        };
        Ok(Checkpoint {
            header: CheckpointHeader {
                model: model.clone(),
                topology: topo.to_file_repr(),
                init_seed: self.params.init_seed,
                training: Some(serde_json::to_value(meta)?),
            },
            params: self.params.clone(),
            moments: Some((self.m.clone(), self.v.clone())),
        })
    }
}

// ---------------------------------------------------------------------------
// steps

/// A sample in network layout.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    /// `[mel_bins, audio_frames]`
    pub mel: Tensor,
    /// Frame-major `[frames, joints * 3]`.
    pub target: Vec<f64>,
    /// Channel-major `[joints * 3, frames - 1]`.
    pub real_motion: Tensor,
}

pub fn prepare(sample: &GestureSample, model: &ModelConfig) -> Result<PreparedSample> {
    let g = &model.generator;
    let s = &sample.speech;
    if s.mel_bins != g.mel_bins || s.frames != g.audio_frames {
        return Err(Error::Compatibility(format!(
            "speech features are {}x{}, generator expects {}x{}",
            s.mel_bins, s.frames, g.mel_bins, g.audio_frames
        )));
    }
    let frames = sample.gesture.len();
    let dims = sample.gesture.joint_count() * 3;
    if frames != g.pose_frames || dims != g.out_dims {
        return Err(Error::Compatibility(format!(
            "gesture is {frames} frames x {dims} dims, generator emits {} x {}",
            g.pose_frames, g.out_dims
        )));
    }
    let target = sample.gesture.to_flat();
    let channels = transpose2(&target, frames, dims);
    let mut motion = Vec::with_capacity(dims * (frames - 1));
    for row in channels.chunks(frames) {
        motion.extend(row.windows(2).map(|w| w[1] - w[0]));
    }
    Ok(PreparedSample {
        mel: Tensor::new(vec![s.mel_bins, s.frames], s.values.clone())?,
        target,
        real_motion: Tensor::new(vec![dims, frames - 1], motion)?,
    })
}

/// Generator output for one sample, channel-major `[out_dims, frames]`.
fn generate_channels(params: &ModelParams, model: &ModelConfig, mel: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new(params);
    let x = tape.input(mel.clone())?;
    let out = model::generator_graph(&mut tape, &model.generator, x)?;
    Ok(tape.value(out).clone())
}

fn time_diff(t: &Tensor) -> Result<Tensor> {
    let (c, n) = t.dims2()?;
    let mut out = Vec::with_capacity(c * (n - 1));
    for row in t.values().chunks(n) {
        out.extend(row.windows(2).map(|w| w[1] - w[0]));
    }
    Tensor::new(vec![c, n - 1], out)
}

struct DSample {
    loss: f64,
    grads: Gradients,
}

fn discriminator_sample(params: &ModelParams, model: &ModelConfig, real: &Tensor, fake: &Tensor) -> Result<DSample> {
    let mut tape = Tape::new(params);
    let r = tape.input(real.clone())?;
    let f = tape.input(fake.clone())?;
    let pr = model::discriminator_graph(&mut tape, &model.discriminator, r)?;
    let pf = model::discriminator_graph(&mut tape, &model.discriminator, f)?;
    let (d_real, d_fake) = (tape.value(pr).values()[0], tape.value(pf).values()[0]);
    let (gr, gf) = gan_loss_d_grad(d_real, d_fake);
    let grads = tape.backward(&[(pr, &[gr]), (pf, &[gf])])?;
    Ok(DSample {
        loss: gan_loss_d(d_real, d_fake),
        grads,
    })
}

/// Per-sample generator objective and its gradient.
pub struct GSample {
    pub terms: LossTerms,
    pub adv_g: f64,
    pub objective: f64,
    pub grads: Gradients,
}

pub fn generator_sample(
    params: &ModelParams,
    model: &ModelConfig,
    sample: &PreparedSample,
    topo: &SkeletonTopology,
    config: &TrainConfig,
) -> Result<GSample> {
    let g = &model.generator;
    let mut tape = Tape::new(params);
    let x = tape.input(sample.mel.clone())?;
    let out = model::generator_graph(&mut tape, g, x)?;
    let mut pred = transpose2(tape.value(out).values(), g.out_dims, g.pose_frames);
    g.apply_offset(&mut pred);
    let (terms, grad_pred) = generator_loss_flat(&pred, &sample.target, topo, config.lambda_bone)?;
    let grad_out = transpose2(&grad_pred, g.pose_frames, g.out_dims);

    let mut adv_g = 0.0;
    let mut objective = terms.total;
    let grads = if config.adversarial_weight > 0.0 {
        let motion = tape.time_diff(out)?;
        let p = model::discriminator_graph(&mut tape, &model.discriminator, motion)?;
        let d_fake = tape.value(p).values()[0];
        let (loss, dl) = if config.saturating {
            (gan_loss_g_saturating(d_fake), gan_loss_g_saturating_grad(d_fake))
        } else {
            (gan_loss_g(d_fake), gan_loss_g_grad(d_fake))
        };
        adv_g = loss;
        objective += config.adversarial_weight * loss;
        tape.backward(&[(out, &grad_out), (p, &[config.adversarial_weight * dl])])?
    } else {
        tape.backward(&[(out, &grad_out)])?
    };
    Ok(GSample {
        terms,
        adv_g,
        objective,
        grads,
    })
}

/// Maps `f` over `items` on the rayon pool, handing results to `sink` in
/// index order so that reductions do not depend on the thread count.
fn ordered_map<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(&T) -> Result<R> + Sync,
    mut sink: impl FnMut(R),
) -> Result<()> {
    let width = rayon::current_num_threads().max(1);
    for chunk in items.chunks(width) {
        let results: Vec<Result<R>> = if width == 1 {
            chunk.iter().map(&f).collect()
        } else {
            chunk.par_iter().map(&f).collect()
        };
        for r in results {
            sink(r?);
        }
    }
    Ok(())
}

fn apply_adam(state: &mut TrainState, indices: &[usize], grads: &[Vec<f64>], hp: &AdamParams, step: u64) {
    for &i in indices {
        adam_step(
            state.params.tensor_mut(i).values_mut(),
            &mut state.m[i],
            &mut state.v[i],
            &grads[i],
            hp,
            step,
        );
    }
}

fn check_finite(value: f64, step: u64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            message: format!("{what} = {value}"),
        })
    }
}

/// One alternating update on `batch`: `d_steps_per_g_step` discriminator
/// steps on detached generator output, then one generator step. With
/// `adversarial_weight = 0` the discriminator is neither trained nor
/// consulted.
pub fn train_step(
    state: &mut TrainState,
    batch: &[PreparedSample],
    model: &ModelConfig,
    topo: &SkeletonTopology,
    config: &TrainConfig,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;

    if config.adversarial_weight > 0.0 {
        let d_idx = state.params.indices_with_prefix(DISCRIMINATOR_PREFIX);
        let mut fakes = Vec::with_capacity(batch.len());
        ordered_map(
            batch,
            |s| time_diff(&generate_channels(&state.params, model, &s.mel)?),
            |f| fakes.push(f),
        )?;
        let pairs: Vec<(&Tensor, &Tensor)> = batch.iter().map(|s| &s.real_motion).zip(&fakes).collect();
        for _ in 0..config.d_steps_per_g_step {
            let mut acc = state.params.zeros_like();
            let mut loss = 0.0;
            let params = &state.params;
            ordered_map(
                &pairs,
                |(r, f)| discriminator_sample(params, model, r, f),
                |d| {
                    loss += d.loss * scale;
                    d.grads.accumulate_params(&mut acc, scale);
                },
            )?;
            let step = state.total_steps() + 1;
            check_finite(loss, step, "discriminator loss")?;
            state.d_step += 1;
            let t = state.d_step;
            apply_adam(state, &d_idx, &acc, &config.adam(config.lr_d), t);
            state.history.push(HistoryRecord {
                step,
                phase: Phase::D,
                l1: None,
                bone: None,
                adv_g: None,
                d_loss: Some(loss),
            });
        }
    }

    let g_idx = state.params.indices_with_prefix(GENERATOR_PREFIX);
    let mut acc = state.params.zeros_like();
    let (mut l1, mut bone, mut adv, mut objective) = (0.0, 0.0, 0.0, 0.0);
    let params = &state.params;
    ordered_map(
        batch,
        |s| generator_sample(params, model, s, topo, config),
        |g| {
            l1 += g.terms.l1 * scale;
            bone += g.terms.bone * scale;
            adv += g.adv_g * scale;
            objective += g.objective * scale;
            g.grads.accumulate_params(&mut acc, scale);
        },
    )?;
    let step = state.total_steps() + 1;
    check_finite(objective, step, "generator objective")?;
    state.g_step += 1;
    let t = state.g_step;
    apply_adam(state, &g_idx, &acc, &config.adam(config.lr_g), t);
    state.history.push(HistoryRecord {
        step,
        phase: Phase::G,
        l1: Some(l1),
        bone: Some(bone),
        adv_g: Some(adv),
        d_loss: None,
    });
    Ok(())
}

/// Runs `config.epochs` epochs over seeded shuffles of `samples`. After
/// every epoch a checkpoint `epoch_NNN.ckpt` is written to `checkpoint_dir`
/// (when given) and `on_epoch` is called.
pub fn train(
    samples: &[GestureSample],
    topo: &SkeletonTopology,
    model: &ModelConfig,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    config.validate()?;
    model.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    if model.generator.out_dims != topo.joint_count() * 3 {
        return Err(Error::Compatibility(format!(
            "generator emits {} dims, topology {} needs {}",
            model.generator.out_dims,
            topo.name(),
            topo.joint_count() * 3
        )));
    }
    let prepared = samples.iter().map(|s| prepare(s, model)).collect::<Result<Vec<_>>>()?;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut state = TrainState::new(model, config.seed)?;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PreparedSample> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            train_step(&mut state, &batch, model, topo, config)?;
        }
        state.epoch += 1;
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("epoch_{:03}.ckpt", state.epoch));
            state.to_checkpoint(model, topo, config)?.save(&path)?;
        }
        log::info!(
            "epoch {} done after {} optimizer steps",
            state.epoch,
            state.total_steps()
        );
        on_epoch(&state)?;
    }
    Ok(state)
}
