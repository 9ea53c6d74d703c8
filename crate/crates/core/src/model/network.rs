//! Feed-forward layer stacks with explicit reverse-mode gradients.
//!
//! Activations are `N × features` matrices. Convolutional layers interpret
//! each row as a channel-first `C×H×W` image.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// `y = x·W + b`, with `W` stored `inputs × outputs`.
    Dense {
        inputs: usize,
        outputs: usize,
        weight: usize,
        bias: usize,
    },
    /// 3×3 convolution, padding 1. Weight stored `out_c × (in_c·9)`.
    Conv3x3 {
        in_c: usize,
        out_c: usize,
        height: usize,
        width: usize,
        stride: usize,
        weight: usize,
        bias: usize,
    },
    Relu,
    /// Fixed `y = (x − mean) / std`; no parameters.
    Standardize {
        mean: f64,
        std: f64,
    },
    /// Mean over spatial positions of a `C×H×W` activation.
    GlobalAvgPool {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Layer {
    fn out_dim(&self, in_dim: usize) -> usize {
        match self {
            Layer::Dense { outputs, .. } => *outputs,
            Layer::Conv3x3 {
                out_c,
                height,
                width,
                stride,
                ..
            } => out_c * conv_out(*height, *stride) * conv_out(*width, *stride),
            Layer::Relu | Layer::Standardize { .. } => in_dim,
            Layer::GlobalAvgPool { channels, .. } => *channels,
        }
    }
}

fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    caches: Vec<Cache>,
}

#[derive(Debug, Clone)]
enum Cache {
    Input(Array2<f64>),
    Columns(Vec<Array2<f64>>),
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub params: ParamSet,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Incremental builder for [`Network`].
pub struct NetworkBuilder {
    name: String,
    layers: Vec<Layer>,
    params: ParamSet,
    in_dim: usize,
    dim: usize,
    rng: seed::Rng,
}

impl NetworkBuilder {
    pub fn new(name: &str, in_dim: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            layers: Vec::new(),
            params: ParamSet::default(),
            in_dim,
            dim: in_dim,
            rng: seed::rng(seed),
        }
    }

    fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect()
    }

    /// He-uniform weights, zero bias.
    pub fn dense(mut self, outputs: usize) -> Self {
        let idx = self.layers.len();
        let inputs = self.dim;
        let bound = (6.0 / inputs as f64).sqrt();
        let w = Tensor {
            name: format!("{}.{idx}.weight", self.name),
            shape: vec![inputs, outputs],
            data: self.uniform(inputs * outputs, bound),
        };
        let weight = self.params.push(w);
        let bias = self
            .params
            .push(Tensor::zeros(format!("{}.{idx}.bias", self.name), vec![outputs]));
        self.layers.push(Layer::Dense {
            inputs,
            outputs,
            weight,
            bias,
        });
        self.dim = outputs;
        self
    }

    pub fn conv3x3(mut self, in_c: usize, height: usize, width: usize, out_c: usize, stride: usize) -> Self {
        assert_eq!(in_c * height * width, self.dim, "conv input shape mismatch");
        let idx = self.layers.len();
        let fan_in = in_c * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor {
            name: format!("{}.{idx}.weight", self.name),
            shape: vec![out_c, fan_in],
            data: self.uniform(out_c * fan_in, bound),
        };
        let weight = self.params.push(w);
        let bias = self
            .params
            .push(Tensor::zeros(format!("{}.{idx}.bias", self.name), vec![out_c]));
        let layer = Layer::Conv3x3 {
            in_c,
            out_c,
            height,
            width,
            stride,
            weight,
            bias,
        };
        self.dim = layer.out_dim(self.dim);
        self.layers.push(layer);
        self
    }

    pub fn standardize(mut self, mean: f64, std: f64) -> Self {
        self.layers.push(Layer::Standardize { mean, std });
        self
    }

    pub fn relu(mut self) -> Self {
        self.layers.push(Layer::Relu);
        self
    }

    pub fn global_avg_pool(mut self, channels: usize, height: usize, width: usize) -> Self {
        assert_eq!(channels * height * width, self.dim, "pool input shape mismatch");
        self.layers.push(Layer::GlobalAvgPool {
            channels,
            height,
            width,
        });
        self.dim = channels;
        self
    }

    pub fn build(self) -> Network {
        Network {
            layers: self.layers,
            params: self.params,
            in_dim: self.in_dim,
            out_dim: self.dim,
        }
    }
}

impl Network {
    fn mat(&self, idx: usize) -> ArrayView2<'_, f64> {
        let t = &self.params.tensors[idx];
        ArrayView2::from_shape((t.shape[0], t.shape[1]), &t.data).expect("2-d tensor")
    }

    fn vector(&self, idx: usize) -> &[f64] {
        &self.params.tensors[idx].data
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim {
            return Err(Error::arg(format!(
                "network expects {} input features, got {}",
                self.in_dim,
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = self.layer_forward(layer, h, None);
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            h = self.layer_forward(layer, h, Some(&mut caches));
        }
        Ok((h, Tape { caches }))
    }

    fn layer_forward(
        &self,
        layer: &Layer,
        x: Array2<f64>,
        caches: Option<&mut Vec<Cache>>,
    ) -> Array2<f64> {
        match layer {
            Layer::Dense { weight, bias, .. } => {
                let mut y = x.dot(&self.mat(*weight));
                let b = self.vector(*bias);
                for mut row in y.rows_mut() {
                    row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
                }
                if let Some(c) = caches {
                    c.push(Cache::Input(x));
                }
                y
            }
            Layer::Standardize { mean, std } => {
                if let Some(c) = caches {
                    c.push(Cache::None);
                }
                x.mapv(|v| (v - mean) / std)
            }
            Layer::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                if let Some(c) = caches {
                    c.push(Cache::Input(x));
                }
                y
            }
            Layer::GlobalAvgPool {
                channels,
                height,
                width,
            } => {
                let hw = height * width;
                let n = x.nrows();
                let mut y = Array2::zeros((n, *channels));
                for i in 0..n {
                    for ch in 0..*channels {
                        y[[i, ch]] = x.slice(s![i, ch * hw..(ch + 1) * hw]).sum() / hw as f64;
                    }
                }
                if let Some(c) = caches {
                    c.push(Cache::None);
                }
                y
            }
            Layer::Conv3x3 {
                in_c,
                out_c,
                height,
                width,
                stride,
                weight,
                bias,
            } => {
                let (oh, ow) = (conv_out(*height, *stride), conv_out(*width, *stride));
                let w = self.mat(*weight);
                let b = self.vector(*bias);
                let n = x.nrows();
                let mut y = Array2::zeros((n, out_c * oh * ow));
                let mut cols_all = Vec::with_capacity(if caches.is_some() { n } else { 0 });
                for i in 0..n {
                    let cols = im2col(x.row(i).as_slice().expect("contiguous"), *in_c, *height, *width, *stride);
                    // (oh·ow × in_c·9) · (in_c·9 × out_c)
                    let out = cols.dot(&w.t());
                    let mut row = y.row_mut(i);
                    for p in 0..oh * ow {
                        for oc in 0..*out_c {
                            row[oc * oh * ow + p] = out[[p, oc]] + b[oc];
                        }
                    }
                    if caches.is_some() {
                        cols_all.push(cols);
                    }
                }
                if let Some(c) = caches {
                    c.push(Cache::Columns(cols_all));
                }
                y
            }
        }
    }

    /// Back-propagate `grad_out` through the recorded pass. Parameter
    /// gradients are accumulated into `param_grads` when given; the gradient
    /// with respect to the network input is returned.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_out: &Array2<f64>,
        mut param_grads: Option<&mut ParamSet>,
    ) -> Array2<f64> {
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter().zip(&tape.caches).rev() {
            g = match (layer, cache) {
                (Layer::Dense { weight, bias, .. }, Cache::Input(x)) => {
                    if let Some(pg) = param_grads.as_deref_mut() {
                        let dw = x.t().dot(&g);
                        pg.tensors[*weight]
                            .data
                            .iter_mut()
                            .zip(dw.iter())
                            .for_each(|(a, b)| *a += b);
                        let db = g.sum_axis(Axis(0));
                        pg.tensors[*bias]
                            .data
                            .iter_mut()
                            .zip(db.iter())
                            .for_each(|(a, b)| *a += b);
                    }
                    g.dot(&self.mat(*weight).t())
                }
                (Layer::Standardize { std, .. }, Cache::None) => g.mapv(|v| v / std),
                (Layer::Relu, Cache::Input(x)) => {
                    let mut g = g;
                    g.zip_mut_with(x, |gv, xv| {
                        if *xv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    g
                }
                (
                    Layer::GlobalAvgPool {
                        channels,
                        height,
                        width,
                    },
                    Cache::None,
                ) => {
                    let hw = height * width;
                    let n = g.nrows();
                    let mut dx = Array2::zeros((n, channels * hw));
                    for i in 0..n {
                        for ch in 0..*channels {
                            let v = g[[i, ch]] / hw as f64;
                            dx.slice_mut(s![i, ch * hw..(ch + 1) * hw]).fill(v);
                        }
                    }
                    dx
                }
                (
                    Layer::Conv3x3 {
                        in_c,
                        out_c,
                        height,
                        width,
                        stride,
                        weight,
                        bias,
                    },
                    Cache::Columns(cols_all),
                ) => {
                    let (oh, ow) = (conv_out(*height, *stride), conv_out(*width, *stride));
                    let w = self.mat(*weight);
                    let n = g.nrows();
                    let mut dx = Array2::zeros((n, in_c * height * width));
                    for i in 0..n {
                        // (oh·ow × out_c)
                        let go = g
                            .row(i)
                            .to_owned()
                            .into_shape_with_order((*out_c, oh * ow))
                            .expect("conv grad shape")
                            .reversed_axes();
                        if let Some(pg) = param_grads.as_deref_mut() {
                            let dw = go.t().dot(&cols_all[i]);
                            pg.tensors[*weight]
                                .data
                                .iter_mut()
                                .zip(dw.iter())
                                .for_each(|(a, b)| *a += b);
                            let db = go.sum_axis(Axis(0));
                            pg.tensors[*bias]
                                .data
                                .iter_mut()
                                .zip(db.iter())
                                .for_each(|(a, b)| *a += b);
                        }
                        let dcols = go.dot(&w);
                        col2im_add(
                            &dcols,
                            dx.row_mut(i).as_slice_mut().expect("contiguous"),
                            *in_c,
                            *height,
                            *width,
                            *stride,
                        );
                    }
                    dx
                }
                _ => unreachable!("tape does not match network"),
            };
        }
        g
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize) -> Array2<f64> {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let mut cols = Array2::zeros((oh * ow, c * 9));
    for orow in 0..oh {
        for ocol in 0..ow {
            let p = orow * ow + ocol;
            for ch in 0..c {
                for kr in 0..3 {
                    let r = (orow * stride + kr) as isize - 1;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for kc in 0..3 {
                        let cc = (ocol * stride + kc) as isize - 1;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        cols[[p, ch * 9 + kr * 3 + kc]] = x[ch * h * w + r as usize * w + cc as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &Array2<f64>, dx: &mut [f64], c: usize, h: usize, w: usize, stride: usize) {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    for orow in 0..oh {
        for ocol in 0..ow {
            let p = orow * ow + ocol;
            for ch in 0..c {
                for kr in 0..3 {
                    let r = (orow * stride + kr) as isize - 1;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for kc in 0..3 {
                        let cc = (ocol * stride + kc) as isize - 1;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        dx[ch * h * w + r as usize * w + cc as usize] += cols[[p, ch * 9 + kr * 3 + kc]];
                    }
                }
            }
        }
    }
}
