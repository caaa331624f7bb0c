//! Layer descriptions and the raw numeric kernels behind them.
//!
//! Every kernel works on batched `[batch, channels, frames]` buffers in
//! row-major order. Loops run in a fixed order so results are bitwise
//! reproducible.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            // not `x.max(0.0)`, which would turn NaN into 0
            Activation::Relu => {
                if x < 0.0 {
                    0.0
                } else {
                    x
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    /// Whether the activation has a kink at zero.
    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl ConvLayerSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = Self {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "conv layer needs positive channels and stride: {self:?}"
            )));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if let Activation::LeakyRelu(slope) = self.activation {
            if !(slope > 0.0 && slope < 1.0) {
                return Err(Error::Config(format!(
                    "leaky relu slope must lie in (0, 1), got {slope}"
                )));
            }
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels, self.kernel_size]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_size + self.out_channels
    }

    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }

    /// Uniform in `±sqrt(1 / (in_channels * kernel_size))`.
    pub fn init_bound(&self) -> f64 {
        (1.0 / (self.in_channels * self.kernel_size) as f64).sqrt()
    }
}

/// Draws a tensor uniformly from `[-bound, bound]`.
pub fn uniform_tensor<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape and data built together")
}

/// Shape of a conv1d problem, shared by the forward and backward kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub frames: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvDims {
    pub fn out_frames(&self) -> usize {
        self.frames.div_ceil(self.stride)
    }

    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Range of output frames whose tap `k` lands inside the input.
    fn valid_range(&self, k: usize) -> std::ops::Range<usize> {
        let pad = self.pad();
        let lo = if k >= pad {
            0
        } else {
            (pad - k).div_ceil(self.stride)
        };
        // to * stride + k - pad <= frames - 1
        let top = self.frames - 1 + pad;
        let hi = if top >= k {
            ((top - k) / self.stride + 1).min(self.out_frames())
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// Zero same-padded strided 1-D convolution without activation.
pub(crate) fn conv1d_kernel(x: &[f64], w: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
    let t_out = d.out_frames();
    let pad = d.pad();
    let mut out = vec![0.0; d.batch * d.out_channels * t_out];
    for bi in 0..d.batch {
        for co in 0..d.out_channels {
            let row = &mut out[(bi * d.out_channels + co) * t_out..][..t_out];
            row.iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..d.in_channels {
                let xrow = &x[(bi * d.in_channels + ci) * d.frames..][..d.frames];
                let wrow = &w[(co * d.in_channels + ci) * d.kernel..][..d.kernel];
                for (k, &wk) in wrow.iter().enumerate() {
                    for to in d.valid_range(k) {
                        row[to] += wk * xrow[to * d.stride + k - pad];
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv1d_kernel`] with respect to input, weight and bias.
/// Any of the outputs may be skipped by passing `None`.
pub(crate) fn conv1d_backward_kernel(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    d: ConvDims,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let t_out = d.out_frames();
    let pad = d.pad();
    for bi in 0..d.batch {
        for co in 0..d.out_channels {
            let grow = &dout[(bi * d.out_channels + co) * t_out..][..t_out];
            if let Some(db) = db.as_deref_mut() {
                db[co] += grow.iter().sum::<f64>();
            }
            for ci in 0..d.in_channels {
                let xoff = (bi * d.in_channels + ci) * d.frames;
                let woff = (co * d.in_channels + ci) * d.kernel;
                for k in 0..d.kernel {
                    let range = d.valid_range(k);
                    if let Some(dw) = dw.as_deref_mut() {
                        let xrow = &x[xoff..][..d.frames];
                        let mut acc = 0.0;
                        for to in range.clone() {
                            acc += grow[to] * xrow[to * d.stride + k - pad];
                        }
                        dw[woff + k] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wk = w[woff + k];
                        let dxrow = &mut dx[xoff..][..d.frames];
                        for to in range {
                            dxrow[to * d.stride + k - pad] += wk * grow[to];
                        }
                    }
                }
            }
        }
    }
}

/// Linear interpolation along the last axis of `[rows, frames]`; the final
/// segment repeats the last frame.
pub(crate) fn upsample_kernel(x: &[f64], rows: usize, frames: usize, factor: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * frames * factor);
    for r in 0..rows {
        let row = &x[r * frames..][..frames];
        for t in 0..frames {
            let a = row[t];
            let next = if t + 1 < frames { row[t + 1] } else { a };
            for s in 0..factor {
                let frac = s as f64 / factor as f64;
                out.push(a + frac * (next - a));
            }
        }
    }
    out
}

pub(crate) fn upsample_backward_kernel(
    dout: &[f64],
    rows: usize,
    frames: usize,
    factor: usize,
    dx: &mut [f64],
) {
    for r in 0..rows {
        let g = &dout[r * frames * factor..][..frames * factor];
        let dxrow = &mut dx[r * frames..][..frames];
        for t in 0..frames {
            for s in 0..factor {
                let gv = g[t * factor + s];
                if t + 1 < frames {
                    let frac = s as f64 / factor as f64;
                    dxrow[t] += (1.0 - frac) * gv;
                    dxrow[t + 1] += frac * gv;
                } else {
                    dxrow[t] += gv;
                }
            }
        }
    }
}

/// Splits a 2-D `[C, T]` or 3-D `[B, C, T]` shape into `(B, C, T)`.
pub(crate) fn batch_dims(shape: &[usize], context: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, t] => Ok((1, c, t)),
        [b, c, t] => Ok((b, c, t)),
        _ => Err(Error::Dimension {
            context,
            axis: "rank",
            expected: 3,
            actual: shape.len(),
        }),
    }
}

/// Convolution with activation on a `[C_in, T]` or `[B, C_in, T]` tensor.
pub fn conv1d_forward(
    input: &Tensor,
    spec: &ConvLayerSpec,
    weights: &Tensor,
    bias: &Tensor,
) -> Result<Tensor> {
    spec.validate()?;
    let (batch, channels, frames) = batch_dims(input.shape(), "conv1d_forward")?;
    check_conv_operands(spec, channels, weights, bias)?;
    let dims = ConvDims {
        batch,
        in_channels: channels,
        out_channels: spec.out_channels,
        frames,
        kernel: spec.kernel_size,
        stride: spec.stride,
    };
    let mut out = conv1d_kernel(input.data(), weights.data(), bias.data(), dims);
    out.iter_mut().for_each(|v| *v = spec.activation.apply(*v));
    let t_out = dims.out_frames();
    let shape: Vec<usize> = if input.shape().len() == 2 {
        vec![spec.out_channels, t_out]
    } else {
        vec![batch, spec.out_channels, t_out]
    };
    Tensor::new(&shape, out)
}

pub(crate) fn check_conv_operands(
    spec: &ConvLayerSpec,
    channels: usize,
    weights: &Tensor,
    bias: &Tensor,
) -> Result<()> {
    if channels != spec.in_channels {
        return Err(Error::Dimension {
            context: "conv1d",
            axis: "in_channels",
            expected: spec.in_channels,
            actual: channels,
        });
    }
    let ws = spec.weight_shape();
    if weights.shape() != ws {
        let axis_names = ["out_channels", "in_channels", "kernel_size"];
        let (axis, expected, actual) = if weights.shape().len() != 3 {
            ("weight_rank", 3, weights.shape().len())
        } else {
            let i = (0..3).find(|&i| weights.shape()[i] != ws[i]).unwrap();
            (axis_names[i], ws[i], weights.shape()[i])
        };
        return Err(Error::Dimension {
            context: "conv1d weights",
            axis,
            expected,
            actual,
        });
    }
    if bias.len() != spec.out_channels {
        return Err(Error::Dimension {
            context: "conv1d bias",
            axis: "out_channels",
            expected: spec.out_channels,
            actual: bias.len(),
        });
    }
    Ok(())
}

/// Piecewise-linear upsampling along time, `[C, T] -> [C, T * factor]`.
pub fn upsample_linear(input: &Tensor, factor: usize) -> Result<Tensor> {
    let (batch, channels, frames) = batch_dims(input.shape(), "upsample_linear")?;
    if frames < 2 {
        return Err(Error::DegenerateInput(format!(
            "linear upsampling needs at least 2 frames, got {frames}"
        )));
    }
    if factor == 0 {
        return Err(Error::Config("upsampling factor must be positive".into()));
    }
    let out = upsample_kernel(input.data(), batch * channels, frames, factor);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = frames * factor;
    Tensor::new(&shape, out)
}
