//! Per-frame graph attention encoder.
//!
//! Each frame is a fully connected graph over its `K` agents, self-edges
//! included. For agent features `h_i`:
//!
//! ```text
//! z_i    = W h_i
//! e_ij   = LeakyReLU(a_src . z_i + a_dst . z_j)      (a = [a_src; a_dst])
//! alpha  = row-wise softmax of e                      (sum_j alpha_ij = 1)
//! h'_i   = act(sum_j alpha_ij z_j)
//! g      = sum_i h'_i
//! ```
//!
//! Summing over agents makes `g` invariant to the storage order of agents.
//! The uniform variant fixes `alpha_ij = 1/K`, which is what `a = 0`
//! produces as well.

use crate::autodiff::{Graph, Var};
use crate::data::FrameSnapshot;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Attention,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Attention => "attention",
            Aggregation::Uniform => "uniform",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Aggregation::Attention),
            "uniform" => Ok(Aggregation::Uniform),
            _ => Err(Error::Config(format!("unknown aggregation `{s}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            _ => Err(Error::Config(format!("unknown activation `{s}`"))),
        }
    }
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }

    pub fn eval(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialOptions {
    pub leaky_slope: f64,
    pub activation: Activation,
    pub aggregation: Aggregation,
    /// Append the per-agent displacement from the previous frame to the
    /// position features.
    pub velocity_features: bool,
}

impl Default for SpatialOptions {
    fn default() -> Self {
        Self {
            leaky_slope: 0.2,
            activation: Activation::Relu,
            aggregation: Aggregation::Attention,
            velocity_features: false,
        }
    }
}

impl SpatialOptions {
    pub fn input_width(&self) -> usize {
        if self.velocity_features {
            4
        } else {
            2
        }
    }
}

/// `w` maps agent features to embeddings (`[d_z, d_in]`); `a` scores
/// concatenated embedding pairs (`[2 d_z]`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialParams<T> {
    pub w: T,
    pub a: T,
}

impl SpatialParams<Tensor> {
    pub fn init(d_in: usize, d_z: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Tensor::uniform(&[d_z, d_in], (1.0 / d_in as f64).sqrt(), rng),
            a: Tensor::uniform(&[2 * d_z], (1.0 / (2 * d_z) as f64).sqrt(), rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w.shape()[1]
    }

    fn check(&self) -> Result<()> {
        let (d_z, _) = self.w.dims2()?;
        if self.a.shape() != [2 * d_z] {
            return Err(Error::param(format!(
                "attention vector {:?} does not fit embedding width {d_z}",
                self.a.shape()
            )));
        }
        Ok(())
    }
}

impl<T> SpatialParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> SpatialParams<U> {
        SpatialParams {
            w: f(&self.w),
            a: f(&self.a),
        }
    }

    pub fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.a"), &self.a);
    }

    pub fn for_each_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.a"), &mut self.a);
    }
}

/// Row-stochastic `K x K` attention coefficients of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    k: usize,
    coefficients: Vec<f64>,
}

impl AttentionMatrix {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (k, k2) = t.dims2()?;
        if k != k2 {
            return Err(Error::dim(format!("attention must be square, got {:?}", t.shape())));
        }
        Ok(Self {
            k,
            coefficients: t.data().to_vec(),
        })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    /// Weight of source agent `j` in agent `i`'s aggregate.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.coefficients[i * self.k + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.coefficients.chunks(self.k).map(|r| r.iter().sum()).collect()
    }
}

/// Parameters bound into a graph, pre-split for scoring.
#[derive(Debug, Clone, Copy)]
pub struct BoundSpatial {
    w_t: Var,
    a_src: Var,
    a_dst: Var,
}

impl BoundSpatial {
    pub fn new(g: &mut Graph, p: &SpatialParams<Var>) -> Result<Self> {
        let d_z = g.shape(p.w)[0];
        let w_t = g.transpose(p.w)?;
        let src = g.narrow(p.a, 0, d_z)?;
        let dst = g.narrow(p.a, d_z, d_z)?;
        Ok(Self {
            w_t,
            a_src: g.reshape(src, &[d_z, 1])?,
            a_dst: g.reshape(dst, &[d_z, 1])?,
        })
    }
}

/// Per-agent feature matrix `[K, d_in]` for `frame`.
pub fn frame_features(
    frame: &FrameSnapshot,
    previous: Option<&FrameSnapshot>,
    opts: &SpatialOptions,
) -> Result<Tensor> {
    let k = frame.num_agents();
    if k == 0 {
        return Err(Error::EmptyFrame);
    }
    if !opts.velocity_features {
        return Tensor::matrix(k, 2, frame.flat());
    }
    let prev = previous.unwrap_or(frame);
    if prev.num_agents() != k {
        return Err(Error::data("consecutive frames differ in agent count"));
    }
    let mut data = Vec::with_capacity(4 * k);
    for (s, p) in frame.states.iter().zip(&prev.states) {
        data.extend([s.x, s.y, s.x - p.x, s.y - p.y]);
    }
    Tensor::matrix(k, 4, data)
}

/// Encodes one frame inside a graph. `features` is `[K, d_in]`; returns
/// the pooled embedding `[d_z]` and the attention matrix `[K, K]`.
pub fn encode_frame_var(
    g: &mut Graph,
    features: Var,
    params: &BoundSpatial,
    opts: &SpatialOptions,
) -> Result<(Var, Var)> {
    let k = g.shape(features)[0];
    if k == 0 {
        return Err(Error::EmptyFrame);
    }
    let z = g.matmul(features, params.w_t)?;
    let alpha = match opts.aggregation {
        Aggregation::Uniform => g.constant(Tensor::full(&[k, k], 1.0 / k as f64)),
        Aggregation::Attention => {
            let src = g.matmul(z, params.a_src)?;
            let src = g.reshape(src, &[k])?;
            let dst = g.matmul(z, params.a_dst)?;
            let dst = g.reshape(dst, &[k])?;
            let scores = g.outer_sum(src, dst)?;
            let scores = g.leaky_relu(scores, opts.leaky_slope);
            g.softmax(scores)?
        }
    };
    let mixed = g.matmul(alpha, z)?;
    let nodes = opts.activation.apply(g, mixed);
    let pooled = g.sum_axis(nodes, 0)?;
    Ok((pooled, alpha))
}

/// Stacks per-frame embeddings `[d_z]` into a `[d_z, T]` matrix.
pub fn stack_columns(g: &mut Graph, columns: &[Var]) -> Result<Var> {
    let rows = columns
        .iter()
        .map(|&c| {
            let d = g.shape(c)[0];
            g.reshape(c, &[1, d])
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat(&rows, 0)?;
    g.transpose(stacked)
}

fn check_frame(frame: &FrameSnapshot, params: &SpatialParams<Tensor>, opts: &SpatialOptions) -> Result<()> {
    if frame.num_agents() == 0 {
        return Err(Error::EmptyFrame);
    }
    params.check()?;
    if params.input_dim() != opts.input_width() {
        return Err(Error::param(format!(
            "weight expects {} features per agent, options give {}",
            params.input_dim(),
            opts.input_width()
        )));
    }
    Ok(())
}

/// Pooled embedding and attention matrix of a single frame.
pub fn encode_frame(
    frame: &FrameSnapshot,
    params: &SpatialParams<Tensor>,
    opts: &SpatialOptions,
) -> Result<(Tensor, AttentionMatrix)> {
    encode_frame_after(frame, None, params, opts)
}

/// Like [`encode_frame`], with the previous frame supplying velocity
/// features when those are enabled.
pub fn encode_frame_after(
    frame: &FrameSnapshot,
    previous: Option<&FrameSnapshot>,
    params: &SpatialParams<Tensor>,
    opts: &SpatialOptions,
) -> Result<(Tensor, AttentionMatrix)> {
    check_frame(frame, params, opts)?;
    let mut g = Graph::new();
    let bound = params.map(|t| g.constant(t.clone()));
    let bound = BoundSpatial::new(&mut g, &bound)?;
    let h = g.constant(frame_features(frame, previous, opts)?);
    let (pooled, alpha) = encode_frame_var(&mut g, h, &bound, opts)?;
    Ok((g.value(pooled).clone(), AttentionMatrix::from_tensor(g.value(alpha))?))
}

/// Encodes every frame independently; column `t` of the `[d_z, T]` result
/// is the embedding of `frames[t]`.
pub fn encode_sequence(
    frames: &[FrameSnapshot],
    params: &SpatialParams<Tensor>,
    opts: &SpatialOptions,
) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::data("cannot encode an empty sequence"))?;
    let k = first.num_agents();
    if let Some(t) = frames.iter().position(|f| f.num_agents() != k) {
        return Err(Error::data(format!(
            "frame {t} has {} agents, frame 0 has {k}",
            frames[t].num_agents()
        )));
    }
    check_frame(first, params, opts)?;
    let mut g = Graph::new();
    let bound = params.map(|t| g.constant(t.clone()));
    let bound = BoundSpatial::new(&mut g, &bound)?;
    let mut cols = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let prev = t.checked_sub(1).map(|p| &frames[p]);
        let h = g.constant(frame_features(frame, prev, opts)?);
        cols.push(encode_frame_var(&mut g, h, &bound, opts)?.0);
    }
    let out = stack_columns(&mut g, &cols)?;
    Ok(g.value(out).clone())
}

/// Attention matrices for every frame of a sequence.
pub fn attention_maps(
    frames: &[FrameSnapshot],
    params: &SpatialParams<Tensor>,
    opts: &SpatialOptions,
) -> Result<Vec<AttentionMatrix>> {
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let prev = t.checked_sub(1).map(|p| &frames[p]);
            encode_frame_after(f, prev, params, opts).map(|(_, a)| a)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_frame(k: usize, rng: &mut impl Rng) -> FrameSnapshot {
        FrameSnapshot::new(
            (0..k)
                .map(|_| crate::data::AgentState::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        )
    }

    #[test]
    fn single_agent_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = SpatialParams::init(2, 5, &mut rng);
        let frame = random_frame(1, &mut rng);
        let (g, alpha) = encode_frame(&frame, &params, &SpatialOptions::default()).unwrap();
        assert_eq!(alpha.get(0, 0), 1.0);
        for d in 0..5 {
            let z = params.w.at2(d, 0) * frame.states[0].x + params.w.at2(d, 1) * frame.states[0].y;
            assert!((g.data()[d] - z.max(0.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_agents_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = SpatialParams::init(2, 4, &mut rng);
        let frame = FrameSnapshot::from_xy(&[[0.3, -0.2]; 3]);
        let (_, alpha) = encode_frame(&frame, &params, &SpatialOptions::default()).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((alpha.get(i, j) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_attention_vector_matches_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = SpatialParams::init(2, 6, &mut rng);
        params.a = Tensor::zeros(&[12]);
        let frame = random_frame(5, &mut rng);
        let attn = SpatialOptions::default();
        let uni = SpatialOptions {
            aggregation: Aggregation::Uniform,
            ..attn
        };
        let (ga, _) = encode_frame(&frame, &params, &attn).unwrap();
        let (gu, alpha) = encode_frame(&frame, &params, &uni).unwrap();
        assert!(ga.max_abs_diff(&gu) < 1e-14);
        assert!((alpha.get(2, 4) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = SpatialParams::init(2, 3, &mut rng);
        let opts = SpatialOptions::default();
        let empty = FrameSnapshot::new(vec![]);
        assert!(matches!(encode_frame(&empty, &params, &opts), Err(Error::EmptyFrame)));
        let vel = SpatialOptions {
            velocity_features: true,
            ..opts
        };
        let frame = random_frame(2, &mut rng);
        assert!(matches!(encode_frame(&frame, &params, &vel), Err(Error::Parameter(_))));
        let ragged = vec![random_frame(2, &mut rng), random_frame(3, &mut rng)];
        assert!(matches!(encode_sequence(&ragged, &params, &opts), Err(Error::Data(_))));
    }

    #[test]
    fn sequence_columns_match_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = SpatialParams::init(2, 4, &mut rng);
        let opts = SpatialOptions::default();
        let a = random_frame(4, &mut rng);
        let b = random_frame(4, &mut rng);
        let seq = encode_sequence(&[a.clone(), b.clone(), a.clone()], &params, &opts).unwrap();
        assert_eq!(seq.shape(), &[4, 3]);
        let (ga, _) = encode_frame(&a, &params, &opts).unwrap();
        assert_eq!(seq.column(0), ga.data());
        assert_eq!(seq.column(0), seq.column(2));
        let single = encode_sequence(std::slice::from_ref(&b), &params, &opts).unwrap();
        assert_eq!(single.column(0), encode_frame(&b, &params, &opts).unwrap().0.data());
    }
}
