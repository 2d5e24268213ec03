//! Scripted demonstrator. It reads the full world state, including the
//! hidden stiffness, so it can hold the contact force in the rolling band
//! exactly: it extends the finger to meet the patch where the patch will
//! be after the advance, something a blind controller only learns from
//! touch. Its actions are deterministic given the world; all demo variety
//! comes from the episode draws.

use nalgebra::Matrix3;

use crate::sensing::{matrix_to_rot6d, Action};

use super::dataset::{DemoDataset, DemoEpisode, DemoStep};
use super::world::{wrap_angle, EnvConfig, FlipEnv};
use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Approach,
    Press,
    Drive,
    Back,
}

pub struct Expert {
    stage: Stage,
    /// Contact force held during the flip, centred in the rolling band.
    press_force: f64,
    /// Pad advance per step along the push direction.
    advance: f64,
}

impl Default for Expert {
    fn default() -> Self {
        Expert::new()
    }
}

impl Expert {
    pub fn new() -> Self {
        Expert {
            stage: Stage::Approach,
            press_force: 2.0,
            advance: 0.002,
        }
    }

    /// One control decision. Pure function of the environment state plus
    /// the internal stage latch.
    pub fn act(&mut self, env: &FlipEnv) -> Action {
        let cfg = &env.cfg;
        let w = env.world();
        let c = env.contact();
        let s = cfg.object_half;
        let h = cfg.object_height;
        let xi = -s / 3.0;
        let (st, ct) = w.theta.sin_cos();
        let (sp, cp) = w.phi.sin_cos();
        let k = w.stiffness;

        // Press-point target on the (rotated) top face, world frame.
        let x_c = s + (xi - s) * cp + h * sp;
        let target = [w.obj[0] + x_c * ct, w.obj[1] + x_c * st];
        let z_face = -(xi - s) * sp + h * cp;
        let pos_err = [target[0] - w.grip[0], target[1] - w.grip[1]];
        let pos_dist = (pos_err[0] * pos_err[0] + pos_err[1] * pos_err[1]).sqrt();
        let yaw_err = wrap_angle(w.theta - w.yaw);

        if w.phi >= cfg.phi_crit() {
            self.stage = Stage::Back;
        } else if self.stage == Stage::Drive && !c.active {
            self.stage = Stage::Approach;
        }
        if self.stage == Stage::Approach && pos_dist < 0.0015 && yaw_err.abs() < 0.02 {
            self.stage = Stage::Press;
        }
        if self.stage == Stage::Press && c.f_n >= 1.6 {
            self.stage = Stage::Drive;
        }

        // Goal targets, not increments: each stage names the pose and
        // finger extension it is driving at, and the executor's rate
        // limits turn that into the same gradual motion the old servo
        // produced. Press and drive goals reduce to tip_z0 - z_w + pen*,
        // the extension that holds pen* worth of penetration at the
        // current contact height.
        let xy;
        let q_t;
        match self.stage {
            Stage::Approach => {
                xy = target;
                q_t = cfg.tip_z0 - (z_face + 0.005);
            }
            Stage::Press => {
                let z_c = if c.active { c.z_w } else { z_face };
                xy = target;
                q_t = cfg.tip_z0 - z_c + self.press_force / k;
            }
            Stage::Drive => {
                // Throttle the advance as the face steepens so the finger
                // correction stays inside its per-step limit. The advance
                // lowers the patch by adv*tan(phi); the goal extension
                // meets it there and trims the force to the setpoint.
                let adv = self.advance.min(0.0015 / w.phi.tan().max(0.75));
                let u = env.push_dir();
                xy = [w.grip[0] + adv * u[0], w.grip[1] + adv * u[1]];
                q_t = cfg.tip_z0 - c.z_w + adv * w.phi.tan() + self.press_force / k;
            }
            Stage::Back => {
                // Lift clear first: retreating along the steep face would
                // drive the pads into it. Gravity owns the block now.
                q_t = 0.0;
                if c.active {
                    xy = [w.grip[0], w.grip[1]];
                } else {
                    let u = env.push_dir();
                    xy = [w.grip[0] - 0.04 * u[0], w.grip[1] - 0.04 * u[1]];
                }
            }
        }
        let mut act = Action::zero(cfg.joints());
        act.translation = [xy[0], xy[1], cfg.tip_z0 - q_t];
        act.joints[0] = q_t;
        act.joints[1] = w.spread;
        // Every stage keeps the wrist aligned with the block.
        let (sy, cy) = w.theta.sin_cos();
        let rot = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
        act.rotation6d = matrix_to_rot6d(&rot).expect("rotation about z is orthonormal");
        act
    }
}

/// A recorded demo set together with how many rollouts it cost.
#[derive(Debug)]
pub struct DemoBatch {
    pub dataset: DemoDataset,
    /// Episodes attempted, including the discarded failures.
    pub attempts: usize,
}

impl DemoBatch {
    /// Fraction of attempts the expert actually flipped.
    pub fn expert_success_rate(&self) -> f64 {
        self.dataset.episodes.len() as f64 / self.attempts.max(1) as f64
    }
}

/// Roll out the expert until `count` successful episodes are collected.
/// Failed attempts are discarded but still consume an attempt slot, so the
/// generator cannot loop forever on an impossible configuration. The
/// history and horizon the windows will later be cut with are echoed into
/// the dataset header.
pub fn generate_demos(
    cfg: &EnvConfig,
    count: usize,
    seed: u64,
    history: usize,
    horizon: usize,
) -> Result<DemoBatch, SimError> {
    let max_attempts = count * 10 + 10;
    let mut episodes = Vec::with_capacity(count);
    let mut attempt = 0u64;
    while episodes.len() < count {
        if attempt as usize >= max_attempts {
            return Err(SimError::ExpertExhausted {
                want: count,
                attempts: attempt as usize,
            });
        }
        let mut env = FlipEnv::new(cfg.clone(), seed, attempt);
        let mut expert = Expert::new();
        let mut steps = Vec::new();
        while !env.done() {
            let obs = env.observe();
            let phase = env.phase();
            let action = expert.act(&env);
            let info = env.step(&action)?;
            steps.push(DemoStep {
                obs,
                action,
                net_force: info.applied,
                phase,
            });
        }
        attempt += 1;
        if env.success() {
            episodes.push(DemoEpisode { steps });
        }
    }
    Ok(DemoBatch {
        dataset: DemoDataset {
            joints: cfg.joints(),
            sensors: cfg.sensors(),
            rows: cfg.sensor_rows,
            cols: cfg.sensor_cols,
            history,
            horizon,
            workspace: cfg.workspace.clone(),
            episodes,
        },
        attempts: attempt as usize,
    })
}
