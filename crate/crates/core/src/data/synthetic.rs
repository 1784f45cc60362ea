//! Synthetic coordinated-agent scenarios.
//!
//! Every scenario emits positions already normalized to `[-1, 1]`. The
//! structural randomness of a dataset (who follows whom, formation
//! offsets, orbit radii) is drawn once from the seed and shared by all its
//! demos; per-demo randomness covers starting states, paths and noise.

use super::{AgentRole, AgentState, Demonstration, FrameSnapshot};
use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::TAU;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// A leader on a smooth random path; every other agent chases a fixed
    /// offset from one designated agent; the ball shadows the leader.
    LeaderFollower,
    /// Agents orbit a drifting centre with fixed phase offsets.
    CircularPlay,
    /// Independent smoothed random walks with no inter-agent dependency.
    IndependentDrift,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::LeaderFollower => "leader_follower",
            Scenario::CircularPlay => "circular_play",
            Scenario::IndependentDrift => "independent_drift",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leader_follower" => Ok(Scenario::LeaderFollower),
            "circular_play" => Ok(Scenario::CircularPlay),
            "independent_drift" => Ok(Scenario::IndependentDrift),
            other => Err(Error::param(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub scenario: Scenario,
    pub n_demos: usize,
    pub agents: usize,
    pub frames: usize,
    pub sample_rate_hz: f64,
    pub seed: u64,
    /// Multiplier on every stochastic perturbation; 0 gives noiseless motion.
    pub noise: f64,
}

impl SyntheticSpec {
    /// Basketball-like preset: 10 players and a ball, 50 frames at 5 Hz.
    pub fn basketball(scenario: Scenario, n_demos: usize, seed: u64) -> Self {
        Self {
            scenario,
            n_demos,
            agents: 11,
            frames: 50,
            sample_rate_hz: 5.0,
            seed,
            noise: 1.0,
        }
    }

    /// Soccer-like preset: 22 players and a ball, 50 frames at 10 Hz.
    pub fn soccer(scenario: Scenario, n_demos: usize, seed: u64) -> Self {
        Self {
            agents: 23,
            sample_rate_hz: 10.0,
            ..Self::basketball(scenario, n_demos, seed)
        }
    }
}

/// Leader/follower structure shared by all demos of one dataset.
#[derive(Debug, Clone)]
struct Formation {
    /// `targets[i]` is the agent that agent `i` follows; the leader has none.
    targets: Vec<Option<usize>>,
    offsets: Vec<[f64; 2]>,
    ball: Option<usize>,
}

const WAYPOINT_SPACING: usize = 10;
const FOLLOW_MOMENTUM: f64 = 0.3;
const FOLLOW_GAIN: f64 = 0.8;
const BALL_GAIN: f64 = 0.7;

fn gauss(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Demonstration>> {
    if spec.agents == 0 {
        return Err(Error::param("need at least one agent"));
    }
    if spec.frames == 0 {
        return Err(Error::param("need at least one frame"));
    }
    if !(spec.noise >= 0.0) {
        return Err(Error::param("noise must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let formation = formation(spec.agents, &mut rng);
    let orbit = orbit_layout(spec.agents, &mut rng);
    let roles = roles(spec.agents, formation.ball);

    (0..spec.n_demos)
        .map(|i| {
            let frames = match spec.scenario {
                Scenario::LeaderFollower => leader_follower(spec, &formation, &mut rng),
                Scenario::CircularPlay => circular_play(spec, &orbit, &mut rng),
                Scenario::IndependentDrift => independent_drift(spec, &mut rng),
            };
            let mut demo = Demonstration::new(
                format!("{}_{i:05}", spec.scenario.name()),
                frames,
                spec.sample_rate_hz,
            );
            demo.roles = Some(roles.clone());
            Ok(demo)
        })
        .collect()
}

fn formation(k: usize, rng: &mut impl Rng) -> Formation {
    let ball = (k >= 3).then_some(k - 1);
    let mut targets = vec![None; k];
    let mut offsets = vec![[0.0; 2]; k];
    for i in 1..k {
        if Some(i) == ball {
            targets[i] = Some(0);
            continue;
        }
        targets[i] = Some(rng.gen_range(0..i));
        let angle = rng.gen_range(0.0..TAU);
        let radius = rng.gen_range(0.15..0.35);
        offsets[i] = [radius * angle.cos(), radius * angle.sin()];
    }
    Formation {
        targets,
        offsets,
        ball,
    }
}

fn roles(k: usize, ball: Option<usize>) -> Vec<AgentRole> {
    let players = if ball.is_some() { k - 1 } else { k };
    (0..k)
        .map(|i| {
            if Some(i) == ball {
                AgentRole::Ball
            } else if i < players.div_ceil(2) {
                AgentRole::Offense
            } else {
                AgentRole::Defense
            }
        })
        .collect()
}

fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, s: f64) -> f64 {
    let s2 = s * s;
    let s3 = s2 * s;
    0.5 * (2.0 * p1 + (-p0 + p2) * s + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * s2
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * s3)
}

fn leader_path(frames: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let n_way = frames / WAYPOINT_SPACING + 4;
    let way: Vec<[f64; 2]> = (0..n_way)
        .map(|_| [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)])
        .collect();
    (0..frames)
        .map(|t| {
            let seg = t / WAYPOINT_SPACING + 1;
            let s = (t % WAYPOINT_SPACING) as f64 / WAYPOINT_SPACING as f64;
            let c = |axis: usize| {
                clamp_unit(catmull_rom(
                    way[seg - 1][axis],
                    way[seg][axis],
                    way[seg + 1][axis],
                    way[seg + 2][axis],
                    s,
                ))
            };
            [c(0), c(1)]
        })
        .collect()
}

fn leader_follower(spec: &SyntheticSpec, f: &Formation, rng: &mut impl Rng) -> Vec<FrameSnapshot> {
    let (k, t_len) = (spec.agents, spec.frames);
    let noise = 0.01 * spec.noise;
    let path = leader_path(t_len, rng);
    let mut pos = vec![[0.0f64; 2]; k];
    let mut vel = vec![[0.0f64; 2]; k];
    pos[0] = path[0];
    for i in 1..k {
        let target = f.targets[i].unwrap();
        for a in 0..2 {
            pos[i][a] = clamp_unit(pos[target][a] + f.offsets[i][a] + noise * 5.0 * gauss(rng));
        }
    }

    let mut frames = Vec::with_capacity(t_len);
    frames.push(snapshot(&pos));
    for t in 1..t_len {
        pos[0] = path[t];
        for i in 1..k {
            let target = f.targets[i].unwrap();
            for a in 0..2 {
                if Some(i) == f.ball {
                    let step = BALL_GAIN * (pos[0][a] - pos[i][a]);
                    pos[i][a] = clamp_unit(pos[i][a] + step + 2.0 * noise * gauss(rng));
                } else {
                    let error = pos[target][a] + f.offsets[i][a] - pos[i][a];
                    vel[i][a] = FOLLOW_MOMENTUM * vel[i][a]
                        + (1.0 - FOLLOW_MOMENTUM) * FOLLOW_GAIN * error
                        + noise * gauss(rng);
                    pos[i][a] = clamp_unit(pos[i][a] + vel[i][a]);
                }
            }
        }
        frames.push(snapshot(&pos));
    }
    frames
}

#[derive(Debug, Clone)]
struct OrbitLayout {
    radii: Vec<f64>,
    phases: Vec<f64>,
}

fn orbit_layout(k: usize, rng: &mut impl Rng) -> OrbitLayout {
    OrbitLayout {
        radii: (0..k).map(|_| rng.gen_range(0.1..0.45)).collect(),
        phases: (0..k).map(|i| TAU * i as f64 / k as f64).collect(),
    }
}

fn circular_play(spec: &SyntheticSpec, layout: &OrbitLayout, rng: &mut impl Rng) -> Vec<FrameSnapshot> {
    let noise = 0.005 * spec.noise;
    let mut centre = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    let mut drift = [rng.gen_range(-0.005..0.005), rng.gen_range(-0.005..0.005)];
    let spin = rng.gen_range(0.05..0.15) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let rotation = rng.gen_range(0.0..TAU);
    (0..spec.frames)
        .map(|t| {
            let pos: Vec<[f64; 2]> = (0..spec.agents)
                .map(|i| {
                    let angle = spin * t as f64 + layout.phases[i] + rotation;
                    [
                        clamp_unit(centre[0] + layout.radii[i] * angle.cos() + noise * gauss(rng)),
                        clamp_unit(centre[1] + layout.radii[i] * angle.sin() + noise * gauss(rng)),
                    ]
                })
                .collect();
            for a in 0..2 {
                drift[a] = 0.95 * drift[a] + 0.0005 * spec.noise * gauss(rng);
                centre[a] = (centre[a] + drift[a]).clamp(-0.4, 0.4);
            }
            snapshot(&pos)
        })
        .collect()
}

fn independent_drift(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<FrameSnapshot> {
    let vmax = 0.5 / spec.frames as f64;
    let mut pos: Vec<[f64; 2]> = (0..spec.agents)
        .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
        .collect();
    let mut vel: Vec<[f64; 2]> = (0..spec.agents)
        .map(|_| [rng.gen_range(-vmax..vmax), rng.gen_range(-vmax..vmax)])
        .collect();
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        if t > 0 {
            for (p, v) in pos.iter_mut().zip(vel.iter_mut()) {
                for a in 0..2 {
                    if spec.noise > 0.0 {
                        v[a] = 0.9 * v[a] + 0.003 * spec.noise * gauss(rng);
                    }
                    p[a] = clamp_unit(p[a] + v[a]);
                }
            }
        }
        frames.push(snapshot(&pos));
    }
    frames
}

fn snapshot(pos: &[[f64; 2]]) -> FrameSnapshot {
    FrameSnapshot::new(pos.iter().map(|p| AgentState::new(p[0], p[1])).collect())
}

/// The agent each agent follows in a leader/follower dataset built from
/// `seed` with `agents` agents. Exposed for analysis and tests.
pub fn leader_follower_targets(agents: usize, seed: u64) -> Vec<Option<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    formation(agents, &mut rng).targets
}
