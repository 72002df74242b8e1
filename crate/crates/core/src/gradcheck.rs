//! Central finite-difference checks of every differentiable operation and of
//! the full generator and discriminator objectives on a toy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::model::{discriminator_graph, init_params, DiscriminatorConfig, GeneratorConfig, GENERATOR_PREFIX};
use crate::nn::ops::LEAKY_SLOPE;
use crate::nn::{ModelConfig, ModelParams, NodeId, Tape, Tensor};
use crate::skeleton::{Joint, SkeletonTopology};
use crate::training::{
    gan_loss_d, gan_loss_d_grad, gan_loss_g, gan_loss_g_grad, gan_loss_g_saturating, gan_loss_g_saturating_grad,
    generator_loss_flat, generator_sample, PreparedSample, TrainConfig,
};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms; central
/// differences cannot resolve them relative to rounding noise.
pub const ERROR_FLOOR: f64 = 1e-4;

/// Every row reported by [`run_gradcheck`], in order.
pub const OPS: [&str; 15] = [
    "conv1d",
    "leaky_relu",
    "sigmoid",
    "upsample",
    "concat",
    "instance_norm",
    "time_diff",
    "mean_time",
    "generator_loss",
    "gan_loss_d",
    "gan_loss_g",
    "gan_loss_g_saturating",
    "generator_objective",
    "generator_objective_saturating",
    "discriminator_objective",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub op: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// A scalar function of flat inputs with its analytic gradient.
struct Check<'a> {
    op: &'static str,
    point: Vec<f64>,
    f: Box<dyn Fn(&[f64]) -> Result<f64> + 'a>,
    grad: Box<dyn Fn(&[f64]) -> Result<Vec<f64>> + 'a>,
}

impl Check<'_> {
    fn run(&self, perturb: Option<&str>) -> Result<GradcheckRow> {
        let mut analytic = (self.grad)(&self.point)?;
        if perturb == Some(self.op) {
            for g in &mut analytic {
                *g *= 1.001;
            }
        }
        let mut x = self.point.clone();
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let x0 = x[i];
            x[i] = x0 + STEP;
            let up = (self.f)(&x)?;
            x[i] = x0 - STEP;
            let down = (self.f)(&x)?;
            x[i] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        Ok(GradcheckRow { op: self.op.to_string(), max_rel_error: worst, checked: x.len() })
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values kept clear of the leaky ReLU kink so central differences never
/// straddle it.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Objective `sum(w * y)` with fixed random weights `w`.
fn weighted_sum(seed: u64) -> impl Fn(&[f64]) -> (f64, Vec<f64>) + Clone {
    move |y: &[f64]| {
        let w = random_vec(&mut ChaCha8Rng::seed_from_u64(seed), y.len());
        (y.iter().zip(&w).map(|(a, b)| a * b).sum(), w)
    }
}

/// Flat point = inputs, then every parameter of `params`; `head` maps the
/// graph output to the objective and its gradient.
fn graph_check<'a>(
    op: &'static str,
    params: ModelParams,
    inputs: Vec<Tensor>,
    head: impl Fn(&[f64]) -> (f64, Vec<f64>) + Clone + 'a,
    build: impl Fn(&mut Tape<'_>, &[NodeId]) -> Result<NodeId> + Clone + 'a,
) -> Check<'a> {
    let input_shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let mut point: Vec<f64> = inputs.iter().flat_map(|t| t.values().to_vec()).collect();
    point.extend(params.iter().flat_map(|(_, t)| t.values().to_vec()));

    let unpack = {
        let params = params.clone();
        let input_shapes = input_shapes.clone();
        move |x: &[f64]| -> Result<(ModelParams, Vec<Tensor>)> {
            let mut pos = 0;
            let mut ins = Vec::new();
            for s in &input_shapes {
                let n: usize = s.iter().product();
                ins.push(Tensor::new(s.clone(), x[pos..pos + n].to_vec())?);
                pos += n;
            }
            let mut p = params.clone();
            for i in 0..p.len() {
                let t = p.tensor_mut(i);
                let n = t.len();
                t.values_mut().copy_from_slice(&x[pos..pos + n]);
                pos += n;
            }
            Ok((p, ins))
        }
    };
    let f = {
        let unpack = unpack.clone();
        let build = build.clone();
        let head = head.clone();
        move |x: &[f64]| -> Result<f64> {
            let (p, ins) = unpack(x)?;
            let mut tape = Tape::new(&p);
            let nodes = ins.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>>>()?;
            let out = build(&mut tape, &nodes)?;
            Ok(head(tape.value(out).values()).0)
        }
    };
    let grad = move |x: &[f64]| -> Result<Vec<f64>> {
        let (p, ins) = unpack(x)?;
        let mut tape = Tape::new(&p);
        let nodes = ins.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &nodes)?;
        let (_, seed) = head(tape.value(out).values());
        let g = tape.backward(&[(out, &seed)])?;
        let mut flat = Vec::with_capacity(x.len());
        for (node, t) in nodes.iter().zip(&ins) {
            match g.node(*node) {
                Some(v) => flat.extend_from_slice(v),
                None => flat.extend(std::iter::repeat(0.0).take(t.len())),
            }
        }
        for i in 0..p.len() {
            flat.extend(g.param(i).unwrap_or_else(|| vec![0.0; p.tensor(i).len()]));
        }
        Ok(flat)
    };
    Check { op, point, f: Box::new(f), grad: Box::new(grad) }
}

/// Two joints, one bone.
pub fn toy_topology() -> SkeletonTopology {
    SkeletonTopology::new(
        "toy",
        vec![
            Joint { name: "root".into(), parent: None },
            Joint { name: "tip".into(), parent: Some(0) },
        ],
        vec![[0.0, 1.0, 0.0]],
        vec![0.5],
        0,
    )
    .expect("valid toy topology")
}

/// 4 pose frames, 2 joints, a 3 x 8 Mel input.
pub fn toy_model() -> ModelConfig {
    ModelConfig {
        generator: GeneratorConfig {
            mel_bins: 3,
            audio_frames: 8,
            pose_frames: 4,
            out_dims: 6,
            audio_channels: vec![4],
            enc_channels: vec![4, 4],
            dec_channels: vec![4, 4],
            depth: 2,
            instance_norm: true,
            pose_offset: vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.0],
        },
        discriminator: DiscriminatorConfig { in_dims: 6, channels: vec![4, 3], strides: vec![2, 1] },
    }
}

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, random_vec(rng, n)).expect("consistent shape")
}

fn single_conv_params(rng: &mut ChaCha8Rng) -> ModelParams {
    ModelParams::from_named(
        vec![
            ("k.weight".into(), tensor(rng, vec![2, 2, 3])),
            ("k.bias".into(), tensor(rng, vec![2])),
        ],
        0,
    )
    .expect("valid parameters")
}

fn empty_params() -> ModelParams {
    ModelParams::from_named(Vec::new(), 0).expect("empty parameter set")
}

fn checks<'a>(seed: u64, topo: &'a SkeletonTopology, model: &'a ModelConfig) -> Result<Vec<Check<'a>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ws = weighted_sum(seed.wrapping_add(1));
    let mut out = vec![
        graph_check("conv1d", single_conv_params(&mut rng), vec![tensor(&mut rng, vec![2, 7])], ws.clone(), |t, x| {
            t.conv_layer(x[0], "k", 2, 1)
        }),
        graph_check(
            "leaky_relu",
            empty_params(),
            vec![Tensor::new(vec![2, 5], off_kink(&mut rng, 10))?],
            ws.clone(),
            |t, x| Ok(t.leaky_relu(x[0], LEAKY_SLOPE)),
        ),
        graph_check("sigmoid", empty_params(), vec![tensor(&mut rng, vec![2, 4])], ws.clone(), |t, x| Ok(t.sigmoid(x[0]))),
        graph_check("upsample", empty_params(), vec![tensor(&mut rng, vec![2, 3])], ws.clone(), |t, x| t.upsample(x[0], 2)),
        graph_check(
            "concat",
            empty_params(),
            vec![tensor(&mut rng, vec![2, 3]), tensor(&mut rng, vec![1, 3])],
            ws.clone(),
            |t, x| t.concat(x[0], x[1]),
        ),
        graph_check("instance_norm", empty_params(), vec![tensor(&mut rng, vec![2, 5])], ws.clone(), |t, x| {
            Ok(t.instance_norm(x[0]))
        }),
        graph_check("time_diff", empty_params(), vec![tensor(&mut rng, vec![2, 5])], ws.clone(), |t, x| t.time_diff(x[0])),
        graph_check("mean_time", empty_params(), vec![tensor(&mut rng, vec![3, 4])], ws.clone(), |t, x| {
            Ok(t.mean_time(x[0]))
        }),
    ];

    let target = random_vec(&mut rng, 4 * 6);
    let pred = random_vec(&mut rng, 4 * 6);
    {
        let t1 = target.clone();
        let t2 = target;
        out.push(Check {
            op: "generator_loss",
            point: pred,
            f: Box::new(move |x| Ok(generator_loss_flat(x, &t1, topo, 0.3)?.0.total)),
            grad: Box::new(move |x| Ok(generator_loss_flat(x, &t2, topo, 0.3)?.1)),
        });
    }
    out.push(Check {
        op: "gan_loss_d",
        point: vec![rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
        f: Box::new(|x| Ok(gan_loss_d(x[0], x[1]))),
        grad: Box::new(|x| {
            let (a, b) = gan_loss_d_grad(x[0], x[1]);
            Ok(vec![a, b])
        }),
    });
    out.push(Check {
        op: "gan_loss_g",
        point: vec![rng.gen_range(0.1..0.9)],
        f: Box::new(|x| Ok(gan_loss_g(x[0]))),
        grad: Box::new(|x| Ok(vec![gan_loss_g_grad(x[0])])),
    });
    out.push(Check {
        op: "gan_loss_g_saturating",
        point: vec![rng.gen_range(0.1..0.9)],
        f: Box::new(|x| Ok(gan_loss_g_saturating(x[0]))),
        grad: Box::new(|x| Ok(vec![gan_loss_g_saturating_grad(x[0])])),
    });

    let params = init_params(model, seed)?;
    let sample = PreparedSample {
        mel: tensor(&mut rng, vec![3, 8]),
        target: random_vec(&mut rng, 4 * 6),
        real_motion: tensor(&mut rng, vec![6, 3]),
    };
    for (op, saturating) in [("generator_objective", false), ("generator_objective_saturating", true)] {
        out.push(objective_check(op, params.clone(), sample.clone(), topo, model, saturating));
    }
    out.push(discriminator_check(params, &mut rng, model));
    Ok(out)
}

fn generator_indices(params: &ModelParams) -> Vec<usize> {
    params.indices_with_prefix(GENERATOR_PREFIX)
}

fn write_indices(params: &mut ModelParams, indices: &[usize], x: &[f64]) {
    let mut pos = 0;
    for &i in indices {
        let t = params.tensor_mut(i);
        let n = t.len();
        t.values_mut().copy_from_slice(&x[pos..pos + n]);
        pos += n;
    }
}

/// L1 + bone + adversarial generator objective through D(M(G(s))), over
/// every generator parameter.
fn objective_check<'a>(
    op: &'static str,
    params: ModelParams,
    sample: PreparedSample,
    topo: &'a SkeletonTopology,
    model: &'a ModelConfig,
    saturating: bool,
) -> Check<'a> {
    let idx = generator_indices(&params);
    let point: Vec<f64> = idx.iter().flat_map(|&i| params.tensor(i).values().to_vec()).collect();
    let config = TrainConfig { lambda_bone: 0.3, adversarial_weight: 0.7, saturating, ..TrainConfig::default() };
    let eval = move |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut p = params.clone();
        write_indices(&mut p, &idx, x);
        let s = generator_sample(&p, model, &sample, topo, &config)?;
        let mut acc: Vec<Vec<f64>> = p.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        s.grads.accumulate_params(&mut acc, 1.0);
        let flat: Vec<f64> = idx.iter().flat_map(|&i| acc[i].clone()).collect();
        Ok((s.objective, flat))
    };
    let eval2 = eval.clone();
    Check { op, point, f: Box::new(move |x| Ok(eval(x)?.0)), grad: Box::new(move |x| Ok(eval2(x)?.1)) }
}

/// `gan_loss_d(D(real), D(fake))` over every discriminator parameter and
/// both motion inputs.
fn discriminator_check<'a>(params: ModelParams, rng: &mut ChaCha8Rng, model: &'a ModelConfig) -> Check<'a> {
    let d_params: Vec<(String, Tensor)> = params
        .iter()
        .filter(|(n, _)| !n.starts_with(GENERATOR_PREFIX))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let d_params = ModelParams::from_named(d_params, params.init_seed).expect("subset of valid parameters");
    let inputs = vec![tensor(rng, vec![6, 3]), tensor(rng, vec![6, 3])];
    let cfg = model.discriminator.clone();
    let head = |y: &[f64]| {
        let (a, b) = gan_loss_d_grad(y[0], y[1]);
        (gan_loss_d(y[0], y[1]), vec![a, b])
    };
    graph_check("discriminator_objective", d_params, inputs, head, move |t, x| {
        let r = discriminator_graph(t, &cfg, x[0])?;
        let f = discriminator_graph(t, &cfg, x[1])?;
        t.concat(r, f)
    })
}

/// One row per entry of [`OPS`]. `perturb` names an op whose analytic
/// gradient is scaled by 1.001 before comparison; it exists to show the
/// checker catches a broken backward pass.
pub fn run_gradcheck(seed: u64, perturb: Option<&str>) -> Result<Vec<GradcheckRow>> {
    let topo = toy_topology();
    let model = toy_model();
    model.validate()?;
    let rows = checks(seed, &topo, &model)?.iter().map(|c| c.run(perturb)).collect();
    rows
}
