//! Reverse-mode differentiation over an explicit tape of operation records.
//!
//! Every value is a 2-D `[channels, time]` tensor. Parameters are recorded
//! by index into a borrowed [`ModelParams`] so that building a tape never
//! copies weights. Gradients flow only into the nodes reachable backwards
//! from the seeds, which is how one network is frozen while the other is
//! updated: a detached input is just a fresh [`Tape::input`].

use super::model::ModelParams;
use super::ops::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Sigmoid {
        x: NodeId,
    },
    Upsample {
        x: NodeId,
        factor: usize,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    InstanceNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    TimeDiff {
        x: NodeId,
    },
    MeanTime {
        x: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` for parameters, whose values live in the parameter store.
    value: Option<Tensor>,
}

pub struct Tape<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by node.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    param_of_node: Vec<Option<usize>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].as_deref()
    }

    /// Adds `scale *` each parameter gradient into `acc`, indexed like the
    /// parameter store.
    pub fn accumulate_params(&self, acc: &mut [Vec<f64>], scale: f64) {
        for (g, p) in self.nodes.iter().zip(&self.param_of_node) {
            if let (Some(g), Some(p)) = (g, p) {
                for (a, v) in acc[*p].iter_mut().zip(g) {
                    *a += scale * v;
                }
            }
        }
    }

    pub fn param(&self, index: usize) -> Option<Vec<f64>> {
        let mut out: Option<Vec<f64>> = None;
        for (g, p) in self.nodes.iter().zip(&self.param_of_node) {
            if let (Some(g), Some(p)) = (g, p) {
                if *p == index {
                    match &mut out {
                        Some(o) => o.iter_mut().zip(g).for_each(|(a, v)| *a += v),
                        None => out = Some(g.clone()),
                    }
                }
            }
        }
        out
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(i)) => self.params.tensor(*i),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, op: Op, value: Option<Tensor>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let s = self.value(id).shape();
        (s[0], s[1])
    }

    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        value.dims2()?;
        Ok(self.push(Op::Input, Some(value)))
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let index = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))?;
        Ok(self.push(Op::Param(index), None))
    }

    /// Convolution with kernel `[c_out, c_in, width]` and bias `[c_out]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (c_in, t_in) = self.dims(x);
        let (c_out, kc, width) = match self.value(w).shape() {
            [o, i, k] => (*o, *i, *k),
            s => return Err(Error::Shape(format!("conv kernel must be 3-D, got {s:?}"))),
        };
        if kc != c_in {
            return Err(Error::Shape(format!("conv kernel expects {kc} input channels, got {c_in}")));
        }
        if self.value(b).len() != c_out {
            return Err(Error::Shape(format!("conv bias has {} entries, expected {c_out}", self.value(b).len())));
        }
        let geom = ConvGeometry::new(c_in, c_out, width, stride, padding, t_in)?;
        let (y, cols) = ops::conv1d_forward(
            self.value(x).values(),
            self.value(w).values(),
            self.value(b).values(),
            &geom,
        );
        let value = Tensor::new(vec![c_out, geom.t_out], y)?;
        Ok(self.push(Op::Conv1d { x, w, b, geom, cols }, Some(value)))
    }

    /// Convolution whose kernel and bias are the parameters `{prefix}.weight`
    /// and `{prefix}.bias`.
    pub fn conv_layer(&mut self, x: NodeId, prefix: &str, stride: usize, padding: usize) -> Result<NodeId> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        self.conv1d(x, w, b, stride, padding)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.value(x);
        let y = v.values().iter().map(|&a| ops::leaky_relu(a, slope)).collect();
        let value = Tensor::new(v.shape().to_vec(), y).expect("same shape");
        self.push(Op::LeakyRelu { x, slope }, Some(value))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let y = v.values().iter().map(|&a| ops::sigmoid(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), y).expect("same shape");
        self.push(Op::Sigmoid { x }, Some(value))
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let (c, t) = self.dims(x);
        let y = ops::nearest_upsample(self.value(x).values(), c, factor)?;
        let value = Tensor::new(vec![c, t * factor], y)?;
        Ok(self.push(Op::Upsample { x, factor }, Some(value)))
    }

    /// Channel-wise concatenation; time extents must match exactly.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, ta) = self.dims(a);
        let (cb, tb) = self.dims(b);
        if ta != tb {
            return Err(Error::Shape(format!("concat time extents differ: {ta} vs {tb}")));
        }
        let mut y = Vec::with_capacity((ca + cb) * ta);
        y.extend_from_slice(self.value(a).values());
        y.extend_from_slice(self.value(b).values());
        let value = Tensor::new(vec![ca + cb, ta], y)?;
        Ok(self.push(Op::Concat { a, b }, Some(value)))
    }

    pub fn instance_norm(&mut self, x: NodeId) -> NodeId {
        let (c, t) = self.dims(x);
        let (y, inv_std) = ops::instance_norm(self.value(x).values(), c);
        let value = Tensor::new(vec![c, t], y).expect("same shape");
        self.push(Op::InstanceNorm { x, inv_std }, Some(value))
    }

    /// Frame differences along time: `[C, T] -> [C, T - 1]`.
    pub fn time_diff(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, t) = self.dims(x);
        if t < 2 {
            return Err(Error::InsufficientFrames { needed: 2, got: t });
        }
        let v = self.value(x).values();
        let mut y = Vec::with_capacity(c * (t - 1));
        for row in v.chunks(t) {
            y.extend(row.windows(2).map(|w| w[1] - w[0]));
        }
        let value = Tensor::new(vec![c, t - 1], y)?;
        Ok(self.push(Op::TimeDiff { x }, Some(value)))
    }

    /// Mean over time: `[C, T] -> [C, 1]`.
    pub fn mean_time(&mut self, x: NodeId) -> NodeId {
        let (c, t) = self.dims(x);
        let y = self
            .value(x)
            .values()
            .chunks(t)
            .map(|r| r.iter().sum::<f64>() / t as f64)
            .collect();
        let value = Tensor::new(vec![c, 1], y).expect("shape");
        self.push(Op::MeanTime { x }, Some(value))
    }

    /// Propagates the seed gradients back through the tape.
    pub fn backward(&self, seeds: &[(NodeId, &[f64])]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.len() != self.value(*id).len() {
                return Err(Error::Shape(format!(
                    "seed gradient has {} entries, node holds {}",
                    g.len(),
                    self.value(*id).len()
                )));
            }
            add_into(&mut grads[id.0], g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input | Op::Param(_) => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Conv1d { x, w, b, geom, cols } => {
                    let cg = ops::conv1d_backward(&gy, cols, self.value(*w).values(), geom);
                    add_into(&mut grads[x.0], &cg.input);
                    add_into(&mut grads[w.0], &cg.kernel);
                    add_into(&mut grads[b.0], &cg.bias);
                }
                Op::LeakyRelu { x, slope } => {
                    let gx: Vec<f64> = self
                        .value(*x)
                        .values()
                        .iter()
                        .zip(&gy)
                        .map(|(v, g)| g * ops::leaky_relu_grad(*v, *slope))
                        .collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::Sigmoid { x } => {
                    let y = self.nodes[i].value.as_ref().expect("value").values();
                    let gx: Vec<f64> = y.iter().zip(&gy).map(|(s, g)| g * s * (1.0 - s)).collect();
                    add_into(&mut grads[x.0], &gx);
                }
                Op::Upsample { x, factor } => {
                    add_into(&mut grads[x.0], &ops::nearest_upsample_backward(&gy, *factor));
                }
                Op::Concat { a, b } => {
                    let na = self.value(*a).len();
                    add_into(&mut grads[a.0], &gy[..na]);
                    add_into(&mut grads[b.0], &gy[na..]);
                }
                Op::InstanceNorm { x, inv_std } => {
                    let y = self.nodes[i].value.as_ref().expect("value").values();
                    add_into(&mut grads[x.0], &ops::instance_norm_backward(&gy, y, inv_std));
                }
                Op::TimeDiff { x } => {
                    let t = self.value(*x).shape()[1];
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (row, g) in gx.chunks_mut(t).zip(gy.chunks(t - 1)) {
                        for (k, v) in g.iter().enumerate() {
                            row[k + 1] += v;
                            row[k] -= v;
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
                Op::MeanTime { x } => {
                    let t = self.value(*x).shape()[1];
                    let gx: Vec<f64> = gy
                        .iter()
                        .flat_map(|g| std::iter::repeat(g / t as f64).take(t))
                        .collect();
                    add_into(&mut grads[x.0], &gx);
                }
            }
        }
        let param_of_node = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(p) => Some(p),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            nodes: grads,
            param_of_node,
        })
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        None => *slot = Some(g.to_vec()),
    }
}
