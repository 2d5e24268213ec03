//! Rollout evaluation: success rate, episode length, attention traces.
//!
//! Episodes are keyed by (seed, episode index) through the environment's
//! own stream, so two evaluations with the same seed face identical
//! spawns and stiffnesses no matter which actor is being scored. The
//! actor's sampling noise lives on a separate stream keyed by its label.

use std::collections::VecDeque;
use std::path::PathBuf;

use serde::Serialize;

use crate::fusion::{write_trace, TraceRecord};
use crate::policy::Policy;
use crate::rngstream::stream_rng;
use crate::sensing::net_force;

use super::expert::Expert;
use super::world::{EnvConfig, FlipEnv};
use super::SimError;

pub enum RolloutActor<'a> {
    /// Trained policy re-planned every `exec_horizon` steps.
    Policy(&'a Policy),
    /// Privileged scripted controller, one action per step.
    Expert,
}

impl RolloutActor<'_> {
    pub fn label(&self) -> String {
        match self {
            RolloutActor::Policy(p) => p.cfg.mode.as_str().to_string(),
            RolloutActor::Expert => "expert".to_string(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    /// Actions executed from each predicted chunk before re-planning.
    pub exec_horizon: usize,
    /// Write one attention trace CSV per policy episode into this
    /// directory. Expert rollouts have no attention and write none.
    pub trace_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            episodes: 50,
            seed: 7,
            exec_horizon: 4,
            trace_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeOutcome {
    pub episode: u64,
    pub success: bool,
    pub length: usize,
    /// Trace file name, relative to the trace directory.
    pub trace: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub actor: String,
    pub episodes: usize,
    pub success_rate: f64,
    /// Mean episode length; failures count at the step limit.
    pub avg_episode_length: f64,
    pub outcomes: Vec<EpisodeOutcome>,
}

pub fn evaluate(
    cfg: &EnvConfig,
    actor: &RolloutActor,
    opts: &EvalOptions,
) -> Result<EvalReport, SimError> {
    let label = actor.label();
    let mut outcomes = Vec::with_capacity(opts.episodes);
    for ep in 0..opts.episodes as u64 {
        let mut env = FlipEnv::new(cfg.clone(), opts.seed, ep);
        let trace = match actor {
            RolloutActor::Policy(policy) => {
                let rows = rollout_policy(&mut env, policy, &label, opts, ep)?;
                if let Some(dir) = &opts.trace_dir {
                    let name = format!("trace_{label}_{ep:04}.csv");
                    write_trace(dir.join(&name), &rows)?;
                    Some(name)
                } else {
                    None
                }
            }
            RolloutActor::Expert => {
                let mut expert = Expert::new();
                while !env.done() {
                    let a = expert.act(&env);
                    env.step(&a)?;
                }
                None
            }
        };
        outcomes.push(EpisodeOutcome {
            episode: ep,
            success: env.success(),
            length: env.steps(),
            trace,
        });
    }
    let n = outcomes.len().max(1) as f64;
    let success_rate = outcomes.iter().filter(|o| o.success).count() as f64 / n;
    let avg_episode_length = outcomes.iter().map(|o| o.length as f64).sum::<f64>() / n;
    Ok(EvalReport {
        actor: label,
        episodes: outcomes.len(),
        success_rate,
        avg_episode_length,
        outcomes,
    })
}

/// Receding-horizon rollout: observe, predict a chunk, execute a prefix,
/// repeat. Every executed step logs the weights of the prediction that
/// produced it together with the force felt when that prediction was made.
fn rollout_policy(
    env: &mut FlipEnv,
    policy: &Policy,
    label: &str,
    opts: &EvalOptions,
    ep: u64,
) -> Result<Vec<TraceRecord>, SimError> {
    let mut rng = stream_rng(opts.seed, &format!("eval/policy/{label}/{ep}"));
    let h = policy.cfg.history.max(1);
    let mut history: VecDeque<_> = VecDeque::with_capacity(h);
    let mut rows = Vec::new();
    while !env.done() {
        let obs = env.observe();
        let f_obs = net_force(&obs.tactile)
            .map_err(SimError::from)?
            .norm();
        if history.len() == h {
            history.pop_front();
        }
        history.push_back(obs);
        let pred = policy.predict(history.make_contiguous(), &mut rng)?;
        let take = opts.exec_horizon.clamp(1, pred.chunk.len().max(1));
        for a in pred.chunk.actions.iter().take(take) {
            if env.done() {
                break;
            }
            rows.push(TraceRecord {
                step: env.steps(),
                alpha_pc: pred.weights.alpha_pc,
                alpha_tac: pred.weights.alpha_tac,
                f_obs_norm: f_obs,
                phase: env.phase().label().to_string(),
            });
            env.step(a)?;
        }
    }
    Ok(rows)
}
