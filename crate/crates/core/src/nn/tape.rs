//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for the adjoint sweep. Only nodes that depend on a
//! trainable leaf carry adjoints; constant subgraphs are skipped entirely.

use crate::error::{Error, Result};
use crate::nn::layers::{
    batch_dims, check_conv_operands, conv1d_backward_kernel, conv1d_kernel,
    upsample_backward_kernel, upsample_kernel, Activation, ConvDims, ConvLayerSpec,
};
use crate::nn::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        dims: ConvDims,
    },
    Activate {
        input: Var,
        activation: Activation,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    /// Concatenation along axis 1 of `[B, C_i, T]` operands.
    ConcatChannels {
        inputs: Vec<Var>,
    },
    /// `[B, F] x [O, F]^T + [O]`.
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape {
        input: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated adjoints of trainable leaves, indexed like `nodes`.
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a trainable leaf whose gradient will be tracked.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a leaf that gradients never flow into.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Accumulated gradient of a trainable leaf, zeros if it never received one.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        self.leaf_grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.node(v).value.len()])
    }

    /// Sign pattern of every kinked activation's pre-activation. Two
    /// evaluations with equal signatures lie on the same linear piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Activate { input, activation } = node.op {
                if activation.is_piecewise_linear() {
                    sig.extend(self.node(input).value.iter().map(|&x| x > 0.0));
                }
            }
        }
        sig
    }

    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, spec: &ConvLayerSpec) -> Result<Var> {
        spec.validate()?;
        let (batch, channels, frames) = batch_dims(self.shape(input), "conv1d")?;
        let wt = self.tensor(weight);
        let bt = self.tensor(bias);
        check_conv_operands(spec, channels, &wt, &bt)?;
        let dims = ConvDims {
            batch,
            in_channels: channels,
            out_channels: spec.out_channels,
            frames,
            kernel: spec.kernel_size,
            stride: spec.stride,
        };
        let out = conv1d_kernel(self.value(input), wt.data(), bt.data(), dims);
        let needs = self.needs(&[input, weight, bias]);
        let conv = self.push(
            vec![batch, spec.out_channels, dims.out_frames()],
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
                dims,
            },
            needs,
        );
        Ok(self.activate(conv, spec.activation))
    }

    pub fn activate(&mut self, input: Var, activation: Activation) -> Var {
        if activation == Activation::Identity {
            return input;
        }
        let out = self.value(input).iter().map(|&x| activation.apply(x)).collect();
        let needs = self.needs(&[input]);
        self.push(
            self.shape(input).to_vec(),
            out,
            Op::Activate { input, activation },
            needs,
        )
    }

    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (batch, channels, frames) = batch_dims(self.shape(input), "upsample")?;
        if frames < 2 {
            return Err(Error::DegenerateInput(format!(
                "linear upsampling needs at least 2 frames, got {frames}"
            )));
        }
        let out = upsample_kernel(self.value(input), batch * channels, frames, factor);
        let needs = self.needs(&[input]);
        Ok(self.push(
            vec![batch, channels, frames * factor],
            out,
            Op::Upsample { input, factor },
            needs,
        ))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = batch_dims(self.shape(inputs[0]), "concat")?;
        let mut total_c = 0;
        for &v in inputs {
            let (b, c, t) = batch_dims(self.shape(v), "concat")?;
            if b != first.0 {
                return Err(Error::Dimension {
                    context: "concat_channels",
                    axis: "batch",
                    expected: first.0,
                    actual: b,
                });
            }
            if t != first.2 {
                return Err(Error::Dimension {
                    context: "concat_channels",
                    axis: "frames",
                    expected: first.2,
                    actual: t,
                });
            }
            total_c += c;
        }
        let (batch, _, frames) = first;
        let mut out = Vec::with_capacity(batch * total_c * frames);
        for b in 0..batch {
            for &v in inputs {
                let (_, c, _) = batch_dims(self.shape(v), "concat")?;
                out.extend_from_slice(&self.value(v)[b * c * frames..][..c * frames]);
            }
        }
        let needs = self.needs(inputs);
        Ok(self.push(
            vec![batch, total_c, frames],
            out,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (batch, features) = match *self.shape(input) {
            [b, f] => (b, f),
            ref s => {
                return Err(Error::Dimension {
                    context: "linear",
                    axis: "rank",
                    expected: 2,
                    actual: s.len(),
                })
            }
        };
        let (outputs, wf) = match *self.shape(weight) {
            [o, f] => (o, f),
            ref s => {
                return Err(Error::Dimension {
                    context: "linear weights",
                    axis: "rank",
                    expected: 2,
                    actual: s.len(),
                })
            }
        };
        if wf != features {
            return Err(Error::Dimension {
                context: "linear",
                axis: "features",
                expected: wf,
                actual: features,
            });
        }
        if self.value(bias).len() != outputs {
            return Err(Error::Dimension {
                context: "linear bias",
                axis: "outputs",
                expected: outputs,
                actual: self.value(bias).len(),
            });
        }
        let x = self.value(input);
        let w = self.value(weight);
        let bv = self.value(bias);
        let mut out = vec![0.0; batch * outputs];
        for b in 0..batch {
            let xr = &x[b * features..][..features];
            for o in 0..outputs {
                let wr = &w[o * features..][..features];
                out[b * outputs + o] = bv[o] + xr.iter().zip(wr).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            vec![batch, outputs],
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != self.value(input).len() {
            return Err(Error::Dimension {
                context: "reshape",
                axis: "len",
                expected: self.value(input).len(),
                actual: len,
            });
        }
        let value = self.value(input).to_vec();
        let needs = self.needs(&[input]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { input }, needs))
    }

    fn check_same(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                context,
                axis: "shape",
                expected: la,
                actual: lb,
            });
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64, ctx: &'static str) -> Result<Var> {
        self.check_same(a, b, ctx)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let needs = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, op, needs)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let needs = self.needs(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(&[a]);
        self.push(vec![1], vec![m], Op::Mean(a), needs)
    }

    /// Runs the adjoint sweep from a scalar `loss`, adding `d loss / d leaf`
    /// into every trainable leaf's accumulator.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                Op::Conv1d {
                    input,
                    weight,
                    bias,
                    dims,
                } => {
                    let (input, weight, bias, dims) = (*input, *weight, *bias, *dims);
                    let mut dx = self.wants(input).then(|| vec![0.0; self.node(input).value.len()]);
                    let mut dw = self.wants(weight).then(|| vec![0.0; self.node(weight).value.len()]);
                    let mut db = self.wants(bias).then(|| vec![0.0; self.node(bias).value.len()]);
                    conv1d_backward_kernel(
                        self.value(input),
                        self.value(weight),
                        &g,
                        dims,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    for (v, d) in [(input, dx), (weight, dw), (bias, db)] {
                        if let Some(d) = d {
                            add_into(&mut adj, v, d);
                        }
                    }
                }
                Op::Activate { input, activation } => {
                    let (input, activation) = (*input, *activation);
                    let x = self.value(input);
                    let d: Vec<f64> = x
                        .iter()
                        .zip(&node.value)
                        .zip(&g)
                        .map(|((&x, &y), &gv)| gv * activation.derivative(x, y))
                        .collect();
                    add_into(&mut adj, input, d);
                }
                Op::Upsample { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    let (b, c, t) = batch_dims(self.shape(input), "upsample")?;
                    let mut d = vec![0.0; b * c * t];
                    upsample_backward_kernel(&g, b * c, t, factor, &mut d);
                    add_into(&mut adj, input, d);
                }
                Op::ConcatChannels { inputs } => {
                    let (batch, total_c, frames) = batch_dims(&node.shape, "concat")?;
                    let mut offset = 0;
                    for &v in inputs {
                        let (_, c, _) = batch_dims(self.shape(v), "concat")?;
                        if self.wants(v) {
                            let mut d = Vec::with_capacity(batch * c * frames);
                            for b in 0..batch {
                                d.extend_from_slice(&g[(b * total_c + offset) * frames..][..c * frames]);
                            }
                            add_into(&mut adj, v, d);
                        }
                        offset += c;
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let (batch, features) = (self.shape(input)[0], self.shape(input)[1]);
                    let outputs = self.shape(weight)[0];
                    let x = self.value(input);
                    let w = self.value(weight);
                    if self.wants(input) {
                        let mut dx = vec![0.0; batch * features];
                        for b in 0..batch {
                            for o in 0..outputs {
                                let go = g[b * outputs + o];
                                let wr = &w[o * features..][..features];
                                dx[b * features..][..features]
                                    .iter_mut()
                                    .zip(wr)
                                    .for_each(|(d, &wv)| *d += go * wv);
                            }
                        }
                        add_into(&mut adj, input, dx);
                    }
                    if self.wants(weight) {
                        let mut dw = vec![0.0; outputs * features];
                        for b in 0..batch {
                            for o in 0..outputs {
                                let go = g[b * outputs + o];
                                let xr = &x[b * features..][..features];
                                dw[o * features..][..features]
                                    .iter_mut()
                                    .zip(xr)
                                    .for_each(|(d, &xv)| *d += go * xv);
                            }
                        }
                        add_into(&mut adj, weight, dw);
                    }
                    if self.wants(bias) {
                        let mut db = vec![0.0; outputs];
                        for b in 0..batch {
                            for o in 0..outputs {
                                db[o] += g[b * outputs + o];
                            }
                        }
                        add_into(&mut adj, bias, db);
                    }
                }
                Op::Reshape { input } => add_into(&mut adj, *input, g),
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.wants(a) {
                        add_into(&mut adj, a, g.clone());
                    }
                    if self.wants(b) {
                        add_into(&mut adj, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.wants(a) {
                        add_into(&mut adj, a, g.clone());
                    }
                    if self.wants(b) {
                        add_into(&mut adj, b, g.into_iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.wants(a) {
                        let d = g.iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
                        add_into(&mut adj, a, d);
                    }
                    if self.wants(b) {
                        let d = g.iter().zip(self.value(a)).map(|(x, y)| x * y).collect();
                        add_into(&mut adj, b, d);
                    }
                }
                Op::Scale(a, k) => {
                    let (a, k) = (*a, *k);
                    add_into(&mut adj, a, g.into_iter().map(|v| v * k).collect());
                }
                Op::Abs(a) => {
                    let a = *a;
                    let d = g
                        .iter()
                        .zip(self.value(a))
                        .map(|(&gv, &x)| gv * sign(x))
                        .collect();
                    add_into(&mut adj, a, d);
                }
                Op::Square(a) => {
                    let a = *a;
                    let d = g
                        .iter()
                        .zip(self.value(a))
                        .map(|(&gv, &x)| 2.0 * gv * x)
                        .collect();
                    add_into(&mut adj, a, d);
                }
                Op::Sum(a) => {
                    let a = *a;
                    let n = self.value(a).len();
                    add_into(&mut adj, a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let a = *a;
                    let n = self.value(a).len();
                    add_into(&mut adj, a, vec![g[0] / n as f64; n]);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
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

fn add_into(adj: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}
