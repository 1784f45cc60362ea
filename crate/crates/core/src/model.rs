//! End-to-end forecaster: spatial encoder, TCN, and a linear decoder from
//! the predicted graph embedding to every agent's next position.

use crate::autodiff::{Graph, Var};
use crate::data::{Demonstration, FrameSnapshot};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::kv::KvFile;
use crate::serialize;
use crate::spatial::{
    encode_frame_var, frame_features, stack_columns, Activation, Aggregation, AttentionMatrix,
    BoundSpatial, SpatialOptions, SpatialParams,
};
use crate::tcn::{tcn_forward_var, Projection, TcnConfig, TcnParams};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of agents `K`; the decoder emits `2K` values.
    pub agents: usize,
    pub embed_dim: usize,
    pub spatial: SpatialOptions,
    pub tcn: TcnConfig,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub teacher_forcing: bool,
    /// Observed prefix length used when training without teacher forcing.
    pub observed: usize,
    /// Agents whose positions enter the loss; `None` means all.
    pub modeled_agents: Option<Vec<usize>>,
    pub execution: Execution,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            agents: 11,
            embed_dim: 32,
            spatial: SpatialOptions::default(),
            tcn: TcnConfig::default(),
            learning_rate: 5e-4,
            lr_decay: 0.999,
            batch_size: 8,
            max_epochs: 300,
            patience: 20,
            seed: 0,
            teacher_forcing: true,
            observed: 30,
            modeled_agents: None,
            execution: Execution::Parallel,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.agents == 0 || self.embed_dim == 0 {
            return fail("agents and embed_dim must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.spatial.leaky_slope > 0.0 && self.spatial.leaky_slope < 1.0) {
            return fail("leaky_slope must lie in (0, 1)");
        }
        if self.observed == 0 {
            return fail("observed must be at least 1");
        }
        if let Some(m) = &self.modeled_agents {
            if m.is_empty() || m.iter().any(|&a| a >= self.agents) {
                return fail("modeled_agents must list valid agent indices");
            }
        }
        self.tcn.validate()
    }

    /// Same wiring with attention frozen at `1/K`.
    pub fn uniform_variant(&self) -> Self {
        let mut cfg = self.clone();
        cfg.spatial.aggregation = Aggregation::Uniform;
        cfg
    }

    /// Learning rate in effect during `epoch` (0-based).
    /// `learning_rate * lr_decay^epoch`, rounded once.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let (hi, lo) = dd_mul(dd_pow(self.lr_decay, epoch), (self.learning_rate, 0.0));
        hi + lo
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("agents", self.agents);
        kv.set("embed_dim", self.embed_dim);
        kv.set("aggregation", self.spatial.aggregation);
        kv.set("activation", self.spatial.activation);
        kv.set("leaky_slope", self.spatial.leaky_slope);
        kv.set("velocity_features", self.spatial.velocity_features);
        kv.set("levels", self.tcn.levels);
        kv.set("kernel_size", self.tcn.kernel_size);
        kv.set("channels", self.tcn.channels);
        kv.set("dropout", self.tcn.dropout);
        kv.set("learning_rate", self.learning_rate);
        kv.set("lr_decay", self.lr_decay);
        kv.set("batch_size", self.batch_size);
        kv.set("max_epochs", self.max_epochs);
        kv.set("patience", self.patience);
        kv.set("seed", self.seed);
        kv.set("teacher_forcing", self.teacher_forcing);
        kv.set("observed", self.observed);
        let modeled = match &self.modeled_agents {
            None => "all".to_string(),
            Some(list) => list.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(","),
        };
        kv.set("modeled_agents", modeled);
        kv.set("parallel", self.execution == Execution::Parallel);
        kv
    }

    /// Overrides fields from `kv`; unknown keys are rejected.
    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        for (key, value) in kv.iter() {
            let bad = |e: String| Error::Config(format!("bad value `{value}` for `{key}`: {e}"));
            macro_rules! parse {
                () => {
                    parse_field(key, value)?
                };
            }
            match key {
                "agents" => self.agents = parse!(),
                "embed_dim" | "d_z" => self.embed_dim = parse!(),
                "aggregation" => self.spatial.aggregation = value.parse::<Aggregation>()?,
                "activation" | "sigma" => self.spatial.activation = value.parse::<Activation>()?,
                "leaky_slope" => self.spatial.leaky_slope = parse!(),
                "velocity_features" => self.spatial.velocity_features = parse!(),
                "levels" => self.tcn.levels = parse!(),
                "kernel_size" => self.tcn.kernel_size = parse!(),
                "channels" => self.tcn.channels = parse!(),
                "dropout" => self.tcn.dropout = parse!(),
                "learning_rate" | "lr" => self.learning_rate = parse!(),
                "lr_decay" => self.lr_decay = parse!(),
                "batch_size" => self.batch_size = parse!(),
                "max_epochs" | "epochs" => self.max_epochs = parse!(),
                "patience" => self.patience = parse!(),
                "seed" => self.seed = parse!(),
                "teacher_forcing" => self.teacher_forcing = parse!(),
                "observed" | "t_obs" => self.observed = parse!(),
                "modeled_agents" => {
                    self.modeled_agents = if value == "all" {
                        None
                    } else {
                        Some(
                            value
                                .split(',')
                                .map(|s| s.trim().parse::<usize>().map_err(|e| bad(e.to_string())))
                                .collect::<Result<_>>()?,
                        )
                    }
                }
                "parallel" => {
                    let on: bool = parse!();
                    self.execution = if on { Execution::Parallel } else { Execution::Sequential };
                }
                other => return Err(Error::Config(format!("unknown config key `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(kv)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_field<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

/// Double-double product; keeps about 106 bits through long products.
fn dd_mul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let p = a.0 * b.0;
    let err = a.0.mul_add(b.0, -p) + (a.0 * b.1 + a.1 * b.0);
    let s = p + err;
    (s, err - (s - p))
}

fn dd_pow(base: f64, mut exp: usize) -> (f64, f64) {
    let mut acc = (1.0, 0.0);
    let mut sq = (base, 0.0);
    while exp > 0 {
        if exp & 1 == 1 {
            acc = dd_mul(acc, sq);
        }
        sq = dd_mul(sq, sq);
        exp >>= 1;
    }
    acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub spatial: SpatialParams<T>,
    pub tcn: TcnParams<T>,
    /// Linear map from embedding to `2K` coordinates.
    pub decoder: Projection<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            spatial: self.spatial.map(&mut f),
            tcn: self.tcn.map(&mut f),
            decoder: self.decoder.map(&mut f),
        }
    }

    /// Visits parameters in a fixed order with dotted names.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(String, &'a T)) {
        self.spatial.for_each("spatial", &mut f);
        self.tcn.for_each("tcn", &mut f);
        self.decoder.for_each("decoder", &mut f);
    }

    pub fn for_each_mut<'a>(&'a mut self, mut f: impl FnMut(String, &'a mut T)) {
        self.spatial.for_each_mut("spatial", &mut f);
        self.tcn.for_each_mut("tcn", &mut f);
        self.decoder.for_each_mut("decoder", &mut f);
    }
}

impl ModelParams<Tensor> {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut spatial = SpatialParams::init(config.spatial.input_width(), config.embed_dim, rng);
        if config.spatial.aggregation == Aggregation::Uniform {
            spatial.a = Tensor::zeros(&[2 * config.embed_dim]);
        }
        let tcn = TcnParams::init(config.embed_dim, &config.tcn, rng);
        let decoder = Projection::init(config.embed_dim, 2 * config.agents, rng);
        Self {
            spatial,
            tcn,
            decoder,
        }
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.is_finite());
        ok
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }
}

/// A future-prediction problem: observed frames, horizon, optional truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTask {
    pub observed: Vec<FrameSnapshot>,
    pub horizon: usize,
    pub ground_truth: Option<Vec<FrameSnapshot>>,
}

impl PredictionTask {
    /// First `t_obs` frames observed, the next `horizon` as truth.
    pub fn from_demo(demo: &Demonstration, t_obs: usize, horizon: usize) -> Result<Self> {
        if t_obs < 1 || horizon < 1 {
            return Err(Error::param("t_obs and horizon must be at least 1"));
        }
        if demo.len() < t_obs + horizon {
            return Err(Error::data(format!(
                "demo {} has {} frames, task needs {}",
                demo.id,
                demo.len(),
                t_obs + horizon
            )));
        }
        Ok(Self {
            observed: demo.frames[..t_obs].to_vec(),
            horizon,
            ground_truth: Some(demo.frames[t_obs..t_obs + horizon].to_vec()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

/// Graph-bound parameters plus the pre-split spatial view.
struct Bound {
    vars: ModelParams<Var>,
    spatial: BoundSpatial,
}

fn frame_var(g: &mut Graph, flat: Var, k: usize) -> Result<Var> {
    g.reshape(flat, &[k, 2])
}

/// Agent features for a frame held in the graph as `[K, 2]`.
fn features_var(g: &mut Graph, frame: Var, prev: Option<Var>, opts: &SpatialOptions) -> Result<Var> {
    if !opts.velocity_features {
        return Ok(frame);
    }
    let velocity = match prev {
        Some(p) => g.sub(frame, p)?,
        None => g.constant(Tensor::zeros(g.shape(frame))),
    };
    g.concat(&[frame, velocity], 1)
}

impl TrainedModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = ModelParams::init(&config, &mut rng);
        Ok(Self { config, params })
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Bound> {
        let vars = self.params.map(|t| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        });
        let spatial = BoundSpatial::new(g, &vars.spatial)?;
        Ok(Bound { vars, spatial })
    }

    fn check_agents(&self, k: usize) -> Result<()> {
        if k != self.config.agents {
            return Err(Error::Incompatible(format!(
                "model expects {} agents, data has {k}",
                self.config.agents
            )));
        }
        Ok(())
    }

    fn encode_truth(&self, g: &mut Graph, b: &Bound, frames: &[FrameSnapshot]) -> Result<Vec<Var>> {
        let opts = &self.config.spatial;
        frames
            .iter()
            .enumerate()
            .map(|(t, f)| {
                let prev = t.checked_sub(1).map(|p| &frames[p]);
                let h = g.constant(frame_features(f, prev, opts)?);
                encode_frame_var(g, h, &b.spatial, opts).map(|(e, _)| e)
            })
            .collect()
    }

    /// Decoded one-step predictions `[2K, L]` from embedding columns.
    fn predict_columns(
        &self,
        g: &mut Graph,
        b: &Bound,
        cols: &[Var],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let seq = stack_columns(g, cols)?;
        let next = tcn_forward_var(g, seq, &b.vars.tcn, &self.config.tcn, train, rng)?;
        let y = g.matmul(b.vars.decoder.w, next)?;
        g.add_row_bias(y, b.vars.decoder.bias)
    }

    /// Decoded prediction for the frame after the last column, `[2K]`.
    fn predict_last(
        &self,
        g: &mut Graph,
        b: &Bound,
        cols: &[Var],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let seq = stack_columns(g, cols)?;
        let next = tcn_forward_var(g, seq, &b.vars.tcn, &self.config.tcn, train, rng)?;
        let rows = g.transpose(next)?;
        let last = g.narrow(rows, cols.len() - 1, 1)?;
        let last = g.reshape(last, &[self.config.embed_dim, 1])?;
        let y = g.matmul(b.vars.decoder.w, last)?;
        let y = g.add_row_bias(y, b.vars.decoder.bias)?;
        g.reshape(y, &[2 * self.config.agents])
    }

    fn loss_mask(&self, steps: usize) -> Option<Tensor> {
        let modeled = self.config.modeled_agents.as_ref()?;
        let k = self.config.agents;
        let mut mask = vec![0.0; 2 * k * steps];
        for &a in modeled {
            for axis in 0..2 {
                let row = 2 * a + axis;
                mask[row * steps..(row + 1) * steps].fill(1.0);
            }
        }
        Some(Tensor::matrix(2 * k, steps, mask).expect("mask shape"))
    }

    fn loss_var(&self, g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
        let steps = g.shape(pred)[1];
        match self.loss_mask(steps) {
            None => g.mse(pred, target),
            Some(mask) => {
                let count = mask.data().iter().sum::<f64>();
                let diff = g.sub(pred, target)?;
                let diff = g.mul_const(diff, &mask)?;
                let sq = g.mul(diff, diff)?;
                let total = g.sum_all(sq);
                Ok(g.scale(total, 1.0 / count))
            }
        }
    }

    fn demo_loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        demo: &Demonstration,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let t_len = demo.len();
        if t_len < 2 {
            return Err(Error::data(format!(
                "demo {} needs at least 2 frames, has {t_len}",
                demo.id
            )));
        }
        self.check_agents(demo.num_agents())?;
        let k = self.config.agents;
        let steps = t_len - 1;
        let mut target = vec![0.0; 2 * k * steps];
        for (t, frame) in demo.frames[1..].iter().enumerate() {
            for (row, v) in frame.flat().into_iter().enumerate() {
                target[row * steps + t] = v;
            }
        }
        let target = g.constant(Tensor::matrix(2 * k, steps, target)?);

        let pred = if self.config.teacher_forcing {
            let cols = self.encode_truth(g, b, &demo.frames[..steps])?;
            self.predict_columns(g, b, &cols, train, rng)?
        } else {
            let observed = self.config.observed.min(steps);
            let mut cols = self.encode_truth(g, b, &demo.frames[..observed])?;
            let opts = self.config.spatial;
            let mut prev = {
                let last = g.constant(Tensor::matrix(k, 2, demo.frames[observed - 1].flat())?);
                Some(last)
            };
            while cols.len() < steps {
                let flat = self.predict_last(g, b, &cols, train, rng)?;
                let frame = frame_var(g, flat, k)?;
                let h = features_var(g, frame, prev, &opts)?;
                cols.push(encode_frame_var(g, h, &b.spatial, &opts)?.0);
                prev = Some(frame);
            }
            self.predict_columns(g, b, &cols, train, rng)?
        };
        self.loss_var(g, pred, target)
    }

    /// Mean squared error of the one-step predictions for frames `2..T`.
    pub fn forward_loss(&self, demo: &Demonstration, train: bool, rng: &mut impl Rng) -> Result<f64> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let loss = self.demo_loss(&mut g, &b, demo, train, rng)?;
        Ok(g.value(loss).item())
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        demo: &Demonstration,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<(f64, ModelParams<Tensor>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, true)?;
        let loss = self.demo_loss(&mut g, &b, demo, train, rng)?;
        let grads = g.backward(loss)?;
        Ok((g.value(loss).item(), b.vars.map(|v| grads.get_or_zeros(*v))))
    }

    /// Teacher-forced one-step predictions: column `t` of the `[2K, T]`
    /// result predicts the frame after `frames[t]`.
    pub fn predict_next(&self, frames: &[FrameSnapshot]) -> Result<Tensor> {
        let first = frames.first().ok_or_else(|| Error::param("no observed frames"))?;
        self.check_agents(first.num_agents())?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let cols = self.encode_truth(&mut g, &b, frames)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.predict_columns(&mut g, &b, &cols, false, &mut rng)?;
        Ok(g.value(out).clone())
    }

    /// Autoregressive forecast: each predicted frame is re-encoded and
    /// appended to the input before predicting the next one.
    pub fn rollout(&self, task: &PredictionTask) -> Result<Vec<FrameSnapshot>> {
        if task.horizon < 1 {
            return Err(Error::param("horizon must be at least 1"));
        }
        let first = task
            .observed
            .first()
            .ok_or_else(|| Error::param("no observed frames"))?;
        let k = first.num_agents();
        self.check_agents(k)?;
        let opts = self.config.spatial;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let mut cols = self.encode_truth(&mut g, &b, &task.observed)?;
        let last = task.observed.last().unwrap();
        let mut prev = Some(g.constant(Tensor::matrix(k, 2, last.flat())?));
        let mut out = Vec::with_capacity(task.horizon);
        for step in 0..task.horizon {
            let flat = self.predict_last(&mut g, &b, &cols, false, &mut rng)?;
            out.push(FrameSnapshot::from_flat(g.value(flat).data()));
            if step + 1 < task.horizon {
                let frame = frame_var(&mut g, flat, k)?;
                let h = features_var(&mut g, frame, prev, &opts)?;
                cols.push(encode_frame_var(&mut g, h, &b.spatial, &opts)?.0);
                prev = Some(frame);
            }
        }
        Ok(out)
    }

    pub fn attention_maps(&self, frames: &[FrameSnapshot]) -> Result<Vec<AttentionMatrix>> {
        crate::spatial::attention_maps(frames, &self.params.spatial, &self.config.spatial)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(std::fs::File::create(path)?);
        let mut named = Vec::new();
        self.params.for_each(|name, t| named.push((name, t)));
        serialize::write_params(file, named)?;
        std::fs::write(sidecar_path(path), self.config.to_kv().render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(sidecar_path(path))?;
        let config = ModelConfig::from_kv(&KvFile::parse(&text)?)?;
        let file = BufReader::new(std::fs::File::open(path)?);
        let mut stored: HashMap<String, Tensor> = serialize::read_params(file)?.into_iter().collect();
        let mut model = Self::init(config)?;
        let mut failure = None;
        model.params.for_each_mut(|name, slot| {
            if failure.is_some() {
                return;
            }
            match stored.remove(&name) {
                Some(t) if t.shape() == slot.shape() => *slot = t,
                Some(t) => {
                    failure = Some(format!(
                        "parameter {name} has shape {:?}, config implies {:?}",
                        t.shape(),
                        slot.shape()
                    ))
                }
                None => failure = Some(format!("checkpoint lacks parameter {name}")),
            }
        });
        if let Some(msg) = failure {
            return Err(Error::Incompatible(msg));
        }
        if let Some(name) = stored.keys().next() {
            return Err(Error::Incompatible(format!("unexpected parameter {name}")));
        }
        Ok(model)
    }
}

/// Path of the key-value config stored beside a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

/// Constant-velocity extrapolation from the last two observed frames.
pub fn velocity_baseline(task: &PredictionTask) -> Result<Vec<FrameSnapshot>> {
    let n = task.observed.len();
    if n < 2 {
        return Err(Error::data("velocity baseline needs at least 2 observed frames"));
    }
    let last = &task.observed[n - 1];
    let before = &task.observed[n - 2];
    if last.num_agents() != before.num_agents() {
        return Err(Error::data("observed frames differ in agent count"));
    }
    Ok((1..=task.horizon)
        .map(|i| {
            let step = i as f64;
            FrameSnapshot::new(
                last.states
                    .iter()
                    .zip(&before.states)
                    .map(|(p, q)| {
                        crate::data::AgentState::new(
                            p.x + step * (p.x - q.x),
                            p.y + step * (p.y - q.y),
                        )
                    })
                    .collect(),
            )
        })
        .collect())
}
