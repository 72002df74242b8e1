use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::LEAKY_SLOPE;
use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::skeleton::SkeletonTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub mel_bins: usize,
    pub audio_frames: usize,
    pub pose_frames: usize,
    /// Output channels, `3 * joints`.
    pub out_dims: usize,
    /// Channels of the stride-2 audio encoder blocks.
    pub audio_channels: Vec<usize>,
    /// Channels of the UNet down blocks, one per level.
    pub enc_channels: Vec<usize>,
    /// Channels of the UNet up blocks, one per level (index 0 is the finest).
    pub dec_channels: Vec<usize>,
    pub depth: usize,
    /// Instance normalization in the audio encoder and UNet down blocks.
    pub instance_norm: bool,
    /// Constant added to every output frame, `out_dims` long or empty.
    /// Holds the rest pose so the network learns displacements from it.
    #[serde(default)]
    pub pose_offset: Vec<f64>,
}

impl GeneratorConfig {
    pub fn for_joints(joints: usize) -> Self {
        Self {
            mel_bins: 64,
            audio_frames: 512,
            pose_frames: 64,
            out_dims: 3 * joints,
            audio_channels: vec![64, 128, 256],
            enc_channels: vec![256; 4],
            dec_channels: vec![256; 4],
            depth: 4,
            instance_norm: true,
            pose_offset: Vec::new(),
        }
    }

    /// Default sizes for `topo`, offset by its rest pose.
    pub fn for_topology(topo: &SkeletonTopology) -> Self {
        Self {
            pose_offset: topo.rest_pose().positions.iter().flatten().copied().collect(),
            ..Self::for_joints(topo.joint_count())
        }
    }

    /// Adds the pose offset to frame-major `[frames, out_dims]` values.
    pub fn apply_offset(&self, frame_major: &mut [f64]) {
        if self.pose_offset.is_empty() {
            return;
        }
        for frame in frame_major.chunks_mut(self.out_dims) {
            for (v, o) in frame.iter_mut().zip(&self.pose_offset) {
                *v += o;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(format!("generator config: {m}")));
        if self.depth < 1 {
            return bad("depth must be >= 1".into());
        }
        if self.enc_channels.len() != self.depth || self.dec_channels.len() != self.depth {
            return bad(format!(
                "expected {} encoder and decoder channel entries, got {} and {}",
                self.depth,
                self.enc_channels.len(),
                self.dec_channels.len()
            ));
        }
        if self.audio_frames != self.pose_frames << self.audio_channels.len() {
            return bad(format!(
                "audio_frames {} / 2^{} != pose_frames {}",
                self.audio_frames,
                self.audio_channels.len(),
                self.pose_frames
            ));
        }
        if self.pose_frames % (1 << self.depth) != 0 {
            return bad(format!(
                "pose_frames {} not divisible by 2^depth",
                self.pose_frames
            ));
        }
        let all = self
            .audio_channels
            .iter()
            .chain(&self.enc_channels)
            .chain(&self.dec_channels);
        if !self.pose_offset.is_empty() && self.pose_offset.len() != self.out_dims {
            return bad(format!(
                "pose_offset has {} values, expected {}",
                self.pose_offset.len(),
                self.out_dims
            ));
        }
        if self.pose_offset.iter().any(|v| !v.is_finite()) {
            return bad("pose_offset must be finite".into());
        }
        if self.mel_bins == 0 || self.out_dims == 0 || all.clone().any(|c| *c == 0) {
            return bad("channel counts must be positive".into());
        }
        Ok(())
    }

    fn skip_channels(&self, level: usize) -> usize {
        if level == 0 {
            *self.audio_channels.last().unwrap_or(&self.mel_bins)
        } else {
            self.enc_channels[level - 1]
        }
    }

    /// `(name, c_out, c_in, width)` for every layer, in forward order.
    fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let mut layers = Vec::new();
        let mut c = self.mel_bins;
        for (i, &o) in self.audio_channels.iter().enumerate() {
            layers.push((format!("gen.audio.{i}"), o, c, 4));
            c = o;
        }
        for (i, &o) in self.enc_channels.iter().enumerate() {
            layers.push((format!("gen.down.{i}"), o, c, 4));
            c = o;
        }
        for i in (0..self.depth).rev() {
            let c_in = c + self.skip_channels(i);
            layers.push((format!("gen.up.{i}"), self.dec_channels[i], c_in, 3));
            c = self.dec_channels[i];
        }
        layers.push(("gen.out".into(), self.out_dims, c, 1));
        layers
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_dims: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
}

impl DiscriminatorConfig {
    pub fn for_joints(joints: usize) -> Self {
        Self {
            in_dims: 3 * joints,
            channels: vec![64, 128, 256],
            strides: vec![2, 2, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.strides.len() {
            return Err(Error::InvalidInput(format!(
                "discriminator config: {} channel entries but {} strides",
                self.channels.len(),
                self.strides.len()
            )));
        }
        if self.in_dims == 0 || self.channels.iter().any(|c| *c == 0) || self.strides.iter().any(|s| *s == 0) {
            return Err(Error::InvalidInput(
                "discriminator config: channels and strides must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Kernel width for a given stride; with padding 1 a stride-`s` layer
    /// maps `T` frames to `floor(T / s)`.
    fn width(stride: usize) -> usize {
        stride + 2
    }

    fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let mut layers = Vec::new();
        let mut c = self.in_dims;
        for (i, (&o, &s)) in self.channels.iter().zip(&self.strides).enumerate() {
            layers.push((format!("disc.conv.{i}"), o, c, Self::width(s)));
            c = o;
        }
        layers.push(("disc.head".into(), 1, c, 1));
        layers
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ModelConfig {
    pub fn for_joints(joints: usize) -> Self {
        Self {
            generator: GeneratorConfig::for_joints(joints),
            discriminator: DiscriminatorConfig::for_joints(joints),
        }
    }

    pub fn for_topology(topo: &SkeletonTopology) -> Self {
        Self {
            generator: GeneratorConfig::for_topology(topo),
            discriminator: DiscriminatorConfig::for_joints(topo.joint_count()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        if self.generator.out_dims != self.discriminator.in_dims {
            return Err(Error::InvalidInput(format!(
                "generator emits {} dims but discriminator expects {}",
                self.generator.out_dims, self.discriminator.in_dims
            )));
        }
        Ok(())
    }
}

/// Named weights of both networks, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    pub init_seed: u64,
}

impl ModelParams {
    pub fn from_named(named: Vec<(String, Tensor)>, init_seed: u64) -> Result<Self> {
        let mut index = HashMap::new();
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for (i, (name, t)) in named.into_iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate parameter name {name}")));
            }
            if !t.is_finite() {
                return Err(Error::InvalidInput(format!("parameter {name} is not finite")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            index,
            init_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Indices of the parameters whose names start with `prefix`.
    pub fn indices_with_prefix(&self, prefix: &str) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.names[i].starts_with(prefix)).collect()
    }

    pub fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.len()]).collect()
    }
}

pub const GENERATOR_PREFIX: &str = "gen.";
pub const DISCRIMINATOR_PREFIX: &str = "disc.";

/// He-uniform fan-in initialization of every kernel, zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut named = Vec::new();
    let layers = config.generator.layers().into_iter().chain(config.discriminator.layers());
    for (name, c_out, c_in, width) in layers {
        let fan_in = (c_in * width) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = (0..c_out * c_in * width).map(|_| rng.gen_range(-bound..bound)).collect();
        named.push((format!("{name}.weight"), Tensor::new(vec![c_out, c_in, width], w)?));
        named.push((format!("{name}.bias"), Tensor::zeros(vec![c_out])));
    }
    ModelParams::from_named(named, seed)
}

/// Records the generator on `tape`; `mel` is `[mel_bins, audio_frames]` and
/// the result is `[out_dims, pose_frames]`.
pub fn generator_graph(tape: &mut Tape<'_>, config: &GeneratorConfig, mel: NodeId) -> Result<NodeId> {
    let shape = tape.value(mel).shape();
    if shape != [config.mel_bins, config.audio_frames] {
        return Err(Error::Shape(format!(
            "generator expects mel [{}, {}], got {shape:?}",
            config.mel_bins, config.audio_frames
        )));
    }
    let mut x = mel;
    for i in 0..config.audio_channels.len() {
        let mut h = tape.conv_layer(x, &format!("gen.audio.{i}"), 2, 1)?;
        if config.instance_norm {
            h = tape.instance_norm(h);
        }
        x = tape.leaky_relu(h, LEAKY_SLOPE);
    }
    let mut skips = vec![x];
    for i in 0..config.depth {
        let mut h = tape.conv_layer(x, &format!("gen.down.{i}"), 2, 1)?;
        if config.instance_norm {
            h = tape.instance_norm(h);
        }
        x = tape.leaky_relu(h, LEAKY_SLOPE);
        skips.push(x);
    }
    for i in (0..config.depth).rev() {
        let up = tape.upsample(x, 2)?;
        let joined = tape.concat(up, skips[i])?;
        let h = tape.conv_layer(joined, &format!("gen.up.{i}"), 1, 1)?;
        x = tape.leaky_relu(h, LEAKY_SLOPE);
    }
    tape.conv_layer(x, "gen.out", 1, 0)
}

/// Records the discriminator on `tape`; `motion` is `[in_dims, frames - 1]`.
/// Returns the `[1, 1]` probability node.
pub fn discriminator_graph(tape: &mut Tape<'_>, config: &DiscriminatorConfig, motion: NodeId) -> Result<NodeId> {
    let shape = tape.value(motion).shape();
    if shape[0] != config.in_dims {
        return Err(Error::Shape(format!(
            "discriminator expects {} motion dims, got {}",
            config.in_dims, shape[0]
        )));
    }
    let mut x = motion;
    for (i, &s) in config.strides.iter().enumerate() {
        let h = tape.conv_layer(x, &format!("disc.conv.{i}"), s, 1)?;
        x = tape.leaky_relu(h, LEAKY_SLOPE);
    }
    let pooled = tape.mean_time(x);
    let logit = tape.conv_layer(pooled, "disc.head", 1, 0)?;
    Ok(tape.sigmoid(logit))
}

/// Transposes between frame-major `[frames, dims]` and channel-major
/// `[dims, frames]` layouts.
pub fn transpose2(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = values[r * cols + c];
        }
    }
    out
}

/// Runs the generator on `mel: [mel_bins, audio_frames]` and returns
/// frame-major keypoints `[pose_frames, out_dims]`.
pub fn generator_forward(params: &ModelParams, config: &GeneratorConfig, mel: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new(params);
    let input = tape.input(mel.clone())?;
    let out = generator_graph(&mut tape, config, input)?;
    let mut v = transpose2(tape.value(out).values(), config.out_dims, config.pose_frames);
    config.apply_offset(&mut v);
    Tensor::new(vec![config.pose_frames, config.out_dims], v)
}

/// Scores frame-major motion `[frames - 1, in_dims]`; returns a probability
/// strictly inside (0, 1) unless the logit saturates float64.
pub fn discriminator_forward(params: &ModelParams, config: &DiscriminatorConfig, motion: &Tensor) -> Result<f64> {
    let (rows, cols) = motion.dims2()?;
    if cols != config.in_dims {
        return Err(Error::Shape(format!(
            "discriminator expects {} motion dims, got {cols}",
            config.in_dims
        )));
    }
    let mut tape = Tape::new(params);
    let input = tape.input(Tensor::new(vec![cols, rows], transpose2(motion.values(), rows, cols))?)?;
    let p = discriminator_graph(&mut tape, config, input)?;
    Ok(tape.value(p).values()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            generator: GeneratorConfig {
                mel_bins: 3,
                audio_frames: 8,
                pose_frames: 4,
                out_dims: 6,
                audio_channels: vec![4],
                enc_channels: vec![4, 5],
                dec_channels: vec![3, 4],
                depth: 2,
                instance_norm: true,
                pose_offset: Vec::new(),
            },
            discriminator: DiscriminatorConfig {
                in_dims: 6,
                channels: vec![4, 3],
                strides: vec![2, 1],
            },
        }
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ModelConfig::for_joints(49);
        cfg.validate().unwrap();
        let mut bad = cfg.generator.clone();
        bad.audio_frames = 500;
        assert!(bad.validate().is_err());
        let mut bad = cfg.discriminator.clone();
        bad.strides.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = toy_config();
        let a = init_params(&cfg, 1).unwrap();
        assert_eq!(a, init_params(&cfg, 1).unwrap());
        let b = init_params(&cfg, 2).unwrap();
        assert!(a.iter().zip(b.iter()).any(|((_, x), (_, y))| x != y));
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.values().iter().all(|v| *v == 0.0));
            } else {
                let s = t.shape();
                let bound = (6.0 / (s[1] * s[2]) as f64).sqrt();
                assert!(t.values().iter().all(|v| v.abs() <= bound), "{name}");
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_pose_and_half_probability() {
        let cfg = toy_config();
        let mut params = init_params(&cfg, 3).unwrap();
        for i in 0..params.len() {
            params.tensor_mut(i).values_mut().fill(0.0);
        }
        let mel = Tensor::new(vec![3, 8], (0..24).map(|v| v as f64).collect()).unwrap();
        let out = generator_forward(&params, &cfg.generator, &mel).unwrap();
        assert_eq!(out.shape(), &[4, 6]);
        assert!(out.values().iter().all(|v| *v == 0.0));
        let motion = Tensor::new(vec![3, 6], vec![0.3; 18]).unwrap();
        assert_eq!(discriminator_forward(&params, &cfg.discriminator, &motion).unwrap(), 0.5);
    }

    #[test]
    fn generator_is_deterministic_and_shape_checked() {
        let cfg = toy_config();
        let params = init_params(&cfg, 5).unwrap();
        let mel = Tensor::new(vec![3, 8], (0..24).map(|v| (v as f64).sin()).collect()).unwrap();
        let a = generator_forward(&params, &cfg.generator, &mel).unwrap();
        let b = generator_forward(&params, &cfg.generator, &mel).unwrap();
        assert_eq!(a, b);
        let wrong = Tensor::new(vec![3, 9], vec![0.0; 27]).unwrap();
        assert!(matches!(generator_forward(&params, &cfg.generator, &wrong), Err(Error::Shape(_))));
        let wrong = Tensor::new(vec![3, 5], vec![0.0; 15]).unwrap();
        assert!(matches!(discriminator_forward(&params, &cfg.discriminator, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn default_generator_output_shape() {
        let cfg = ModelConfig::for_joints(49);
        let params = init_params(&cfg, 0).unwrap();
        let mel = Tensor::zeros(vec![64, 512]);
        let out = generator_forward(&params, &cfg.generator, &mel).unwrap();
        assert_eq!(out.shape(), &[64, 147]);
    }

    #[test]
    fn discriminator_stays_in_open_unit_interval() {
        use rand::{Rng, SeedableRng};
        let cfg = ModelConfig::for_joints(2);
        let params = init_params(&cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let motion = Tensor::new(vec![63, 6], (0..378).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let p = discriminator_forward(&params, &cfg.discriminator, &motion).unwrap();
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn skip_extents_match_at_every_level() {
        // a mismatched level would fail inside concat
        let cfg = ModelConfig::for_joints(49);
        for depth in 1..=6 {
            let mut g = cfg.generator.clone();
            g.depth = depth;
            g.enc_channels = vec![8; depth];
            g.dec_channels = vec![8; depth];
            g.audio_channels = vec![8, 8, 8];
            g.validate().unwrap();
            let mc = ModelConfig { generator: g.clone(), discriminator: cfg.discriminator.clone() };
            let params = init_params(&mc, 0).unwrap();
            let out = generator_forward(&params, &g, &Tensor::zeros(vec![64, 512])).unwrap();
            assert_eq!(out.shape(), &[64, 147]);
        }
    }
}
