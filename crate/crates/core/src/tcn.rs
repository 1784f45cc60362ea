//! Temporal convolutional network over graph-embedding sequences.
//!
//! A stack of residual blocks with dilations `1, 2, 4, ...`. Each block
//! applies two weight-normalized causal convolutions, each followed by
//! ReLU and channel dropout, and adds the result to its (possibly
//! 1x1-projected) input before a final ReLU. A 1x1 head maps the last
//! block's channels back to the embedding width. Column `t` of the output
//! only depends on input columns `<= t`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcnConfig {
    pub levels: usize,
    pub kernel_size: usize,
    pub channels: usize,
    pub dropout: f64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            kernel_size: 3,
            channels: 64,
            dropout: 0.1,
        }
    }
}

impl TcnConfig {
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.levels).map(|i| 1usize << i).collect()
    }

    /// Input positions visible to one output position: two convolutions
    /// per block, `(f - 1) * d` history each.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.kernel_size - 1) * ((1usize << self.levels) - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.kernel_size == 0 || self.channels == 0 {
            return Err(Error::Config(
                "TCN levels, kernel_size and channels must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// A warning when sequences of `len` exceed the receptive field.
    pub fn receptive_field_warning(&self, len: usize) -> Option<String> {
        let rf = self.receptive_field();
        (len > rf).then(|| {
            format!("sequence length {len} exceeds the TCN receptive field {rf}; early context is truncated")
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightNormConv<T> {
    /// Direction, `[C_out, C_in, f]`.
    pub v: T,
    /// Per-output-channel magnitude, `[C_out]`.
    pub g: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T> {
    pub w: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlockParams<T> {
    pub conv1: WeightNormConv<T>,
    pub conv2: WeightNormConv<T>,
    /// Present iff input and output channel counts differ.
    pub projection: Option<Projection<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcnParams<T> {
    pub blocks: Vec<ResidualBlockParams<T>>,
    pub head: Projection<T>,
}

impl WeightNormConv<Tensor> {
    pub fn init(c_in: usize, c_out: usize, width: usize, rng: &mut impl Rng) -> Self {
        let v = Tensor::uniform(&[c_out, c_in, width], (1.0 / (c_in * width) as f64).sqrt(), rng);
        let g = v
            .data()
            .chunks(c_in * width)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Self {
            v,
            g: Tensor::vector(g).expect("non-empty"),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

impl Projection<Tensor> {
    pub fn init(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Tensor::uniform(&[c_out, c_in], (1.0 / c_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

impl ResidualBlockParams<Tensor> {
    pub fn init(c_in: usize, c_out: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: WeightNormConv::init(c_in, c_out, width, rng),
            conv2: WeightNormConv::init(c_out, c_out, width, rng),
            projection: (c_in != c_out).then(|| Projection::init(c_in, c_out, rng)),
        }
    }
}

impl TcnParams<Tensor> {
    pub fn init(embed_dim: usize, config: &TcnConfig, rng: &mut impl Rng) -> Self {
        let blocks = (0..config.levels)
            .map(|i| {
                let c_in = if i == 0 { embed_dim } else { config.channels };
                ResidualBlockParams::init(c_in, config.channels, config.kernel_size, rng)
            })
            .collect();
        Self {
            blocks,
            head: Projection::init(config.channels, embed_dim, rng),
        }
    }
}

impl<T> WeightNormConv<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> WeightNormConv<U> {
        WeightNormConv {
            v: f(&self.v),
            g: f(&self.g),
            bias: f(&self.bias),
        }
    }

    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.v"), &self.v);
        f(format!("{prefix}.g"), &self.g);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(format!("{prefix}.v"), &mut self.v);
        f(format!("{prefix}.g"), &mut self.g);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> Projection<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Projection<U> {
        Projection {
            w: f(&self.w),
            bias: f(&self.bias),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> ResidualBlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ResidualBlockParams<U> {
        ResidualBlockParams {
            conv1: self.conv1.map(f),
            conv2: self.conv2.map(f),
            projection: self.projection.as_ref().map(|p| p.map(f)),
        }
    }

    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.conv1.for_each(&format!("{prefix}.conv1"), f);
        self.conv2.for_each(&format!("{prefix}.conv2"), f);
        if let Some(p) = &self.projection {
            p.for_each(&format!("{prefix}.proj"), f);
        }
    }

    fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.conv1.for_each_mut(&format!("{prefix}.conv1"), f);
        self.conv2.for_each_mut(&format!("{prefix}.conv2"), f);
        if let Some(p) = &mut self.projection {
            p.for_each_mut(&format!("{prefix}.proj"), f);
        }
    }
}

impl<T> TcnParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> TcnParams<U> {
        TcnParams {
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            head: self.head.map(&mut f),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.for_each(&format!("{prefix}.block{i}"), f);
        }
        self.head.for_each(&format!("{prefix}.head"), f);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("{prefix}.block{i}"), f);
        }
        self.head.for_each_mut(&format!("{prefix}.head"), f);
    }
}

fn conv_layer(
    g: &mut Graph,
    x: Var,
    conv: &WeightNormConv<Var>,
    dilation: usize,
    dropout: f64,
    train: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let kernel = g.weight_norm(conv.v, conv.g)?;
    let y = g.conv1d_causal(x, kernel, dilation)?;
    let y = g.add_row_bias(y, conv.bias)?;
    let y = g.relu(y);
    g.dropout(y, dropout, train, rng)
}

fn pointwise(g: &mut Graph, x: Var, p: &Projection<Var>) -> Result<Var> {
    let y = g.matmul(p.w, x)?;
    g.add_row_bias(y, p.bias)
}

/// One residual block on a `[C_in, L]` input inside a graph.
pub fn residual_block_var(
    g: &mut Graph,
    x: Var,
    params: &ResidualBlockParams<Var>,
    dilation: usize,
    dropout: f64,
    train: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    let c_in = g.shape(x)[0];
    let c_out = g.shape(params.conv2.v)[0];
    let h = conv_layer(g, x, &params.conv1, dilation, dropout, train, rng)?;
    let h = conv_layer(g, h, &params.conv2, dilation, dropout, train, rng)?;
    let residual = match &params.projection {
        Some(p) => pointwise(g, x, p)?,
        None if c_in == c_out => x,
        None => {
            return Err(Error::Config(format!(
                "block maps {c_in} to {c_out} channels but has no projection"
            )))
        }
    };
    let sum = g.add(residual, h)?;
    Ok(g.relu(sum))
}

/// Full TCN on `[d_z, L]` inside a graph; returns `[d_z, L]` one-step-ahead
/// predictions.
pub fn tcn_forward_var(
    g: &mut Graph,
    input: Var,
    params: &TcnParams<Var>,
    config: &TcnConfig,
    train: bool,
    rng: &mut impl Rng,
) -> Result<Var> {
    if g.shape(input).get(1).copied().unwrap_or(0) == 0 {
        return Err(Error::dim("TCN input must be [d_z, L] with L >= 1"));
    }
    let mut x = input;
    for (block, dilation) in params.blocks.iter().zip(config.dilations()) {
        x = residual_block_var(g, x, block, dilation, config.dropout, train, rng)?;
    }
    pointwise(g, x, &params.head)
}

/// Evaluates one residual block on a plain tensor.
pub fn residual_block(
    x: &Tensor,
    params: &ResidualBlockParams<Tensor>,
    dilation: usize,
    dropout: f64,
    train: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let p = params.map(&mut |t: &Tensor| g.constant(t.clone()));
    let out = residual_block_var(&mut g, xv, &p, dilation, dropout, train, rng)?;
    Ok(g.value(out).clone())
}

/// Evaluates the TCN on a plain `[d_z, L]` tensor.
pub fn tcn_forward(
    input: &Tensor,
    config: &TcnConfig,
    params: &TcnParams<Tensor>,
    train: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if let Some(msg) = config.receptive_field_warning(input.shape().get(1).copied().unwrap_or(0)) {
        log::warn!("{msg}");
    }
    let mut g = Graph::new();
    let xv = g.constant(input.clone());
    let p = params.map(|t| g.constant(t.clone()));
    let out = tcn_forward_var(&mut g, xv, &p, config, train, rng)?;
    Ok(g.value(out).clone())
}
