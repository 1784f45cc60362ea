//! Trajectory error metrics and the sampled evaluation protocol.

use crate::data::{Demonstration, FrameSnapshot, NormalizationSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::PredictionTask;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

fn check_shapes(pred: &[FrameSnapshot], truth: &[FrameSnapshot]) -> Result<()> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim(format!(
            "prediction has {} frames, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    for (t, (p, q)) in pred.iter().zip(truth).enumerate() {
        if p.num_agents() != q.num_agents() || p.num_agents() == 0 {
            return Err(Error::dim(format!(
                "frame {t}: prediction has {} agents, truth has {}",
                p.num_agents(),
                q.num_agents()
            )));
        }
    }
    Ok(())
}

/// Per-point Euclidean errors indexed `[t][k]`.
fn point_errors(pred: &[FrameSnapshot], truth: &[FrameSnapshot]) -> Result<Vec<Vec<f64>>> {
    check_shapes(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, q)| p.states.iter().zip(&q.states).map(|(a, b)| a.distance(b)).collect())
        .collect())
}

/// Mean Euclidean error over all agents and timesteps.
pub fn avg_l2_error(pred: &[FrameSnapshot], truth: &[FrameSnapshot]) -> Result<f64> {
    let err = point_errors(pred, truth)?;
    let n = (err.len() * err[0].len()) as f64;
    Ok(err.iter().flatten().sum::<f64>() / n)
}

/// Per-agent maximum error over time, averaged over agents.
pub fn max_error(pred: &[FrameSnapshot], truth: &[FrameSnapshot]) -> Result<f64> {
    let err = point_errors(pred, truth)?;
    let k = err[0].len();
    let total: f64 = (0..k)
        .map(|a| err.iter().map(|row| row[a]).fold(0.0, f64::max))
        .sum();
    Ok(total / k as f64)
}

/// Percentage of (agent, timestep) errors strictly above `threshold`.
pub fn miss_rate(pred: &[FrameSnapshot], truth: &[FrameSnapshot], threshold: f64) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::param(format!("miss threshold must be positive, got {threshold}")));
    }
    let err = point_errors(pred, truth)?;
    let n = err.len() * err[0].len();
    let misses = err.iter().flatten().filter(|&&e| e > threshold).count();
    Ok(100.0 * misses as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    pub name: String,
    pub t_obs: usize,
    pub horizon: usize,
    pub samples: usize,
    pub threshold: f64,
    pub unit: String,
    /// Maps model coordinates back to physical units before scoring.
    pub normalization: NormalizationSpec,
    pub seed: u64,
    pub execution: Execution,
}

impl EvalProtocol {
    pub fn basketball() -> Self {
        Self {
            name: "basketball".into(),
            t_obs: 30,
            horizon: 20,
            samples: 20,
            threshold: 3.0,
            unit: "ft".into(),
            normalization: NormalizationSpec::basketball(),
            seed: 0,
            execution: Execution::default(),
        }
    }

    pub fn soccer() -> Self {
        Self {
            name: "soccer".into(),
            threshold: 1.0,
            unit: "m".into(),
            normalization: NormalizationSpec::soccer(),
            ..Self::basketball()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "basketball" => Ok(Self::basketball()),
            "soccer" => Ok(Self::soccer()),
            other => Err(Error::Config(format!(
                "unknown protocol `{other}` (expected basketball or soccer)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    /// Standard deviation of the mean.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 {
            return Self { mean, sd: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            sd: (var / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub unit: String,
    pub threshold: f64,
    pub n_samples: usize,
    /// Set when the test set was smaller than the sample count.
    pub with_replacement: bool,
    pub seed: u64,
    pub avg_l2_error: MeanSd,
    pub max_error: MeanSd,
    /// Best (lowest) per-demo miss rate among the samples, percent.
    pub miss_rate: f64,
    pub sampled_ids: Vec<String>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "model,team,dataset,avg,avg_sd,max,max_sd,miss,seed";

    pub fn csv_row(&self, model: &str, team: &str, dataset: &str) -> String {
        format!(
            "{model},{team},{dataset},{:.6},{:.6},{:.6},{:.6},{:.4},{}",
            self.avg_l2_error.mean,
            self.avg_l2_error.sd,
            self.max_error.mean,
            self.max_error.sd,
            self.miss_rate,
            self.seed
        )
    }

    pub fn table(&self, model: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{model} on {} ({} samples{}, seed {})",
            self.protocol,
            self.n_samples,
            if self.with_replacement { ", with replacement" } else { "" },
            self.seed
        );
        let _ = writeln!(
            s,
            "  avg l2 error   {:>10.4} +- {:.4} {}",
            self.avg_l2_error.mean, self.avg_l2_error.sd, self.unit
        );
        let _ = writeln!(
            s,
            "  max error      {:>10.4} +- {:.4} {}",
            self.max_error.mean, self.max_error.sd, self.unit
        );
        let _ = writeln!(
            s,
            "  miss rate      {:>10.2} % (> {} {})",
            self.miss_rate, self.threshold, self.unit
        );
        s
    }
}

/// Indices of the demos to score; with replacement only when the pool is
/// smaller than `n`.
pub fn sample_indices(pool: usize, n: usize, rng: &mut impl Rng) -> (Vec<usize>, bool) {
    if pool >= n {
        (sample(rng, pool, n).into_vec(), false)
    } else {
        ((0..n).map(|_| rng.gen_range(0..pool)).collect(), true)
    }
}

/// Scores `predict` on sampled test demos. `predict` sees only the
/// observed prefix; its output and the truth are denormalized first.
pub fn evaluate<F>(predict: F, test: &[Demonstration], protocol: &EvalProtocol) -> Result<EvalReport>
where
    F: Fn(&PredictionTask) -> Result<Vec<FrameSnapshot>> + Sync,
{
    if test.is_empty() {
        return Err(Error::data("test set is empty"));
    }
    if protocol.samples == 0 {
        return Err(Error::param("sample count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let (picks, with_replacement) = sample_indices(test.len(), protocol.samples, &mut rng);
    if with_replacement {
        log::warn!(
            "test set has {} demos, sampling {} with replacement",
            test.len(),
            protocol.samples
        );
    }
    let norm = &protocol.normalization;
    let scored = protocol.execution.map(&picks, |&i| -> Result<(f64, f64, f64)> {
        let demo = &test[i];
        let task = PredictionTask::from_demo(demo, protocol.t_obs, protocol.horizon)?;
        let truth = task.ground_truth.clone().unwrap_or_default();
        let blind = PredictionTask {
            ground_truth: None,
            ..task
        };
        let pred = predict(&blind)?;
        let pred: Vec<_> = pred.iter().map(|f| norm.denormalize_frame(f)).collect();
        let truth: Vec<_> = truth.iter().map(|f| norm.denormalize_frame(f)).collect();
        Ok((
            avg_l2_error(&pred, &truth)?,
            max_error(&pred, &truth)?,
            miss_rate(&pred, &truth, protocol.threshold)?,
        ))
    });
    let (mut avg, mut max, mut miss) = (Vec::new(), Vec::new(), Vec::new());
    for r in scored {
        let (a, m, s) = r?;
        avg.push(a);
        max.push(m);
        miss.push(s);
    }
    Ok(EvalReport {
        protocol: protocol.name.clone(),
        unit: protocol.unit.clone(),
        threshold: protocol.threshold,
        n_samples: picks.len(),
        with_replacement,
        seed: protocol.seed,
        avg_l2_error: MeanSd::of(&avg),
        max_error: MeanSd::of(&max),
        miss_rate: miss.iter().copied().fold(f64::INFINITY, f64::min),
        sampled_ids: picks.iter().map(|&i| test[i].id.clone()).collect(),
    })
}
