//! The flip world. A block of half-width `s` and height `H` rests on a
//! table. A fingertip assembly (two taxel pads side by side) hovers over
//! it; the wrist moves in the table plane with a yaw, and a single finger
//! joint extends the pads downward. Pressing onto the top face loads a
//! penalty spring with a hidden per-episode stiffness, and dragging the
//! pressed pads toward the far edge rolls the block about that edge.
//!
//! The dynamics are quasi-static and phenomenological, with these rules:
//! - Normal force F_n = k * penetration, saturated at the sensor range.
//!   k is sampled per episode and is invisible to the camera; only touch
//!   reveals it.
//! - Rolling is kinematic when friction allows it: advancing the pad by
//!   `adv` rotates the block by adv / z_w (z_w = contact height), capped
//!   by a rate proportional to mu*F_n - F_req(phi). Below the friction
//!   threshold the pads slide across the face instead of rolling it.
//! - F_req(phi) is the edge force needed to lift the centre of mass,
//!   m g r cos(gamma + phi) / z_w; past phi_crit = pi/2 - gamma gravity
//!   completes the flip on its own.
//! - Pressing past `crush_force` crushes the sponge: rolling stalls until
//!   the force drops below `recover_force` (hysteresis).
//! - An unsupported partial flip settles back at a fixed rate.
//!
//! The contact patch stays fixed on the face exactly when the pad advances
//! at the rolling yield rate, so under-forced pushes walk the pads over the
//! front edge while the block stays put: both band edges have geometric
//! consequences, not just timers. The contact height also rises as the
//! block rolls, so a frozen finger joint ramps the force into the crush
//! zone at a rate set by the hidden stiffness.
//!
//! Actions carry targets, not increments: a wrist pose and joint
//! positions that `step` chases at rate-limited speed, as a 5 Hz
//! position-command interface would on real hardware. The overhead
//! camera renders the block, the table, and the pad tops, so one cloud
//! frame shows the hand and the scene together.
//!
//! All randomness (initial pose, stiffness, cloud noise) comes from one
//! seeded stream per episode; `step` itself draws nothing.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Normal;

use nalgebra::{Matrix3, Vector3};

use crate::rngstream::stream_rng;
use crate::sensing::{
    matrix_to_rot6d, rot6d_to_matrix, Action, Observation, PointCloud, SensorGrid, TactileFrame,
    TaxelReading, WorkspaceBox,
};

use super::SimError;

/// Episode phase, classified from world state alone so expert demos and
/// policy rollouts get labels from the same rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Reach,
    Press,
    Flip,
    Retreat,
}

impl Phase {
    pub fn label(&self) -> &'static str {
        match self {
            Phase::Reach => "reach",
            Phase::Press => "press",
            Phase::Flip => "flip",
            Phase::Retreat => "retreat",
        }
    }

    pub fn code(&self) -> u8 {
        match self {
            Phase::Reach => 0,
            Phase::Press => 1,
            Phase::Flip => 2,
            Phase::Retreat => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Phase> {
        match c {
            0 => Some(Phase::Reach),
            1 => Some(Phase::Press),
            2 => Some(Phase::Flip),
            3 => Some(Phase::Retreat),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub max_steps: usize,
    /// Control period in seconds (5 Hz).
    pub dt: f64,
    pub workspace: WorkspaceBox,
    /// Per-coordinate Gaussian noise on rendered cloud points, meters.
    pub cloud_noise: f64,
    /// Per-component noise on taxel forces, newtons. Zero by default so
    /// rendered frames reproduce the spring forces exactly.
    pub tactile_noise: f64,
    pub cloud_object_points: usize,
    pub cloud_table_points: usize,
    /// Camera samples on the pad tops, split between the two pads. The
    /// camera sees the hand as well as the scene, so the cloud carries the
    /// gripper's own pose the way a real overhead depth view would.
    pub cloud_gripper_points: usize,
    pub sensor_rows: usize,
    pub sensor_cols: usize,
    /// Hidden contact stiffness range, N/m, sampled uniformly per episode.
    pub stiffness: (f64, f64),
    /// Pad-face friction coefficient.
    pub friction: f64,
    /// Pressing harder than this crushes the sponge and stalls rolling.
    pub crush_force: f64,
    /// Crush clears once the force drops below this (hysteresis).
    pub recover_force: f64,
    pub force_saturation: f64,
    /// Rate cap gain for rolling, rad per (N s) of friction surplus.
    pub flip_rate: f64,
    /// Settle-back rate for an unsupported partial flip, rad/s.
    pub settle_rate: f64,
    /// Gravity-driven completion rate past the critical angle, rad/s.
    pub fall_rate: f64,
    /// Fraction of F_req that static friction must supply to hold phi.
    pub hold_fraction: f64,
    /// Block half-width along the push direction (and across), meters.
    pub object_half: f64,
    pub object_height: f64,
    pub object_mass: f64,
    pub max_translation: f64,
    pub max_yaw_step: f64,
    pub max_joint_step: f64,
    /// Pad tip height above the table at q = 0.
    pub tip_z0: f64,
    pub q_max: f64,
    /// Half-distance between the two pads at zero spread.
    pub pad_offset: f64,
    /// Spread joint range, plus/minus.
    pub spread_max: f64,
    /// Gaussian footprint radius for spreading contact force over taxels.
    pub footprint_sigma: f64,
    /// Object spawn range (same for x and y).
    pub spawn: (f64, f64),
    /// Gripper spawn range.
    pub gripper_spawn: (f64, f64),
    /// Object yaw range, plus/minus.
    pub theta_range: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            max_steps: 300,
            dt: 0.2,
            workspace: WorkspaceBox {
                min: [0.0, 0.0, -0.01],
                max: [0.35, 0.35, 0.12],
            },
            cloud_noise: 0.002,
            tactile_noise: 0.0,
            cloud_object_points: 176,
            cloud_table_points: 64,
            cloud_gripper_points: 48,
            sensor_rows: 3,
            sensor_cols: 5,
            stiffness: (500.0, 2500.0),
            friction: 0.6,
            crush_force: 3.5,
            recover_force: 2.5,
            force_saturation: 50.0,
            flip_rate: 2.0,
            settle_rate: 0.3,
            fall_rate: 1.2,
            hold_fraction: 0.8,
            object_half: 0.03,
            object_height: 0.04,
            object_mass: 0.08,
            max_translation: 0.005,
            max_yaw_step: 0.1,
            max_joint_step: 0.002,
            tip_z0: 0.09,
            q_max: 0.06,
            pad_offset: 0.012,
            spread_max: 0.004,
            footprint_sigma: 0.01,
            spawn: (0.12, 0.23),
            gripper_spawn: (0.05, 0.08),
            theta_range: 0.4,
        }
    }
}

impl EnvConfig {
    /// Finger extension plus pad spread.
    pub fn joints(&self) -> usize {
        2
    }

    pub fn sensors(&self) -> usize {
        2
    }

    /// Centre-of-mass lever arm from the hinge edge.
    fn com_radius(&self) -> f64 {
        let h2 = self.object_height / 2.0;
        (self.object_half * self.object_half + h2 * h2).sqrt()
    }

    fn com_angle(&self) -> f64 {
        (self.object_height / 2.0).atan2(self.object_half)
    }

    /// Angle past which the centre of mass is over the hinge and gravity
    /// finishes the flip.
    pub fn phi_crit(&self) -> f64 {
        std::f64::consts::FRAC_PI_2 - self.com_angle()
    }

    /// Edge force needed to keep the block rotating at angle phi when the
    /// push is applied at height z_w.
    pub fn f_req(&self, phi: f64, z_w: f64) -> f64 {
        let g = 9.81;
        let torque = self.object_mass * g * self.com_radius() * (self.com_angle() + phi).cos();
        (torque / z_w.max(0.01)).max(0.0)
    }
}

/// Mutable world state, fully visible to the privileged expert and tests.
#[derive(Debug, Clone)]
pub struct World {
    /// Block footprint centre on the table.
    pub obj: [f64; 2],
    /// Block yaw; the push direction is +x in this frame.
    pub theta: f64,
    /// Flip angle about the far bottom edge.
    pub phi: f64,
    pub grip: [f64; 2],
    pub yaw: f64,
    /// Finger extension; pad tip height = tip_z0 - q.
    pub q: f64,
    /// Pad spread offset from the resting half-distance.
    pub spread: f64,
    /// Hidden per-episode contact stiffness.
    pub stiffness: f64,
    pub crushed: bool,
    /// Tangential force transmitted on the most recent step.
    pub f_t: f64,
}

/// Contact snapshot used by both the dynamics and the tactile renderer.
#[derive(Debug, Clone, Copy, Default)]
pub struct Contact {
    pub active: bool,
    pub penetration: f64,
    pub f_n: f64,
    /// Contact height above the table.
    pub z_w: f64,
    /// Patch coordinate along the (rotated) top face, in block frame.
    pub x_l: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    /// World-frame reaction force on the pad assembly.
    pub applied: [f64; 3],
    pub f_n: f64,
    pub f_t: f64,
    pub phase: Phase,
    pub done: bool,
    pub success: bool,
}

pub struct FlipEnv {
    pub cfg: EnvConfig,
    world: World,
    contact: Contact,
    rng: ChaCha12Rng,
    steps: usize,
    success: bool,
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    if a < -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Pad footprint half-sizes in the pad frame, meters. Shared by the
/// camera render of the pad tops and the occlusion shadow they cast.
const PAD_HALF_X: f64 = 0.009;
const PAD_HALF_Y: f64 = 0.013;

/// Sensor-to-world rotation of a pad whose sensing axis points down:
/// sensor +z maps to world -z.
fn pad_rotation(yaw: f64) -> Matrix3<f64> {
    let flip = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0) * flip
}

/// Contact between the pad tips and the (possibly rotated) top face.
/// Requires yaw alignment and the patch to lie inside the face.
pub fn solve_contact(cfg: &EnvConfig, w: &World) -> Contact {
    let s = cfg.object_half;
    let h = cfg.object_height;
    let edge_margin = 0.004;
    if wrap_angle(w.yaw - w.theta).abs() > 0.25 || w.phi > 1.35 {
        return Contact::default();
    }
    let (st, ct) = w.theta.sin_cos();
    let rel = [w.grip[0] - w.obj[0], w.grip[1] - w.obj[1]];
    let x_c = rel[0] * ct + rel[1] * st;
    let y_l = -rel[0] * st + rel[1] * ct;
    if y_l.abs() > s - edge_margin {
        return Contact::default();
    }
    let (sp, cp) = w.phi.sin_cos();
    let x_rel_h = x_c - s;
    let x_l = s + (x_rel_h - h * sp) / cp;
    if x_l < -s + edge_margin || x_l > s - edge_margin {
        return Contact::default();
    }
    let z_w = -(x_l - s) * sp + h * cp;
    let pen = z_w - (cfg.tip_z0 - w.q);
    if pen <= 0.0 {
        return Contact::default();
    }
    Contact {
        active: true,
        penetration: pen,
        f_n: (w.stiffness * pen).min(cfg.force_saturation),
        z_w,
        x_l,
    }
}

impl FlipEnv {
    /// Fresh episode. The rng stream is keyed by (seed, episode) so shared
    /// seeds give identical initial conditions across modes.
    pub fn new(cfg: EnvConfig, seed: u64, episode: u64) -> Self {
        let mut rng = stream_rng(seed, &format!("env/{episode}"));
        let (lo, hi) = cfg.spawn;
        let obj = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
        let theta = rng.gen_range(-cfg.theta_range..cfg.theta_range);
        let (glo, ghi) = cfg.gripper_spawn;
        let grip = [rng.gen_range(glo..ghi), rng.gen_range(glo..ghi)];
        let stiffness = rng.gen_range(cfg.stiffness.0..cfg.stiffness.1);
        let world = World {
            obj,
            theta,
            phi: 0.0,
            grip,
            yaw: 0.0,
            q: 0.0,
            spread: 0.0,
            stiffness,
            crushed: false,
            f_t: 0.0,
        };
        let contact = solve_contact(&cfg, &world);
        FlipEnv {
            cfg,
            world,
            contact,
            rng,
            steps: 0,
            success: false,
        }
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    /// Teleport the scene to an arbitrary state and refresh the contact
    /// cache, bypassing action limits. For scripted probes and tests.
    pub fn place(&mut self, obj: [f64; 2], theta: f64, grip: [f64; 2], yaw: f64, q: f64) {
        self.world.obj = obj;
        self.world.theta = theta;
        self.world.grip = grip;
        self.world.yaw = yaw;
        self.world.q = q;
        self.contact = solve_contact(&self.cfg, &self.world);
    }

    pub fn contact(&self) -> &Contact {
        &self.contact
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn success(&self) -> bool {
        self.success
    }

    pub fn done(&self) -> bool {
        self.success || self.steps >= self.cfg.max_steps
    }

    /// World-frame reaction force currently carried by the pads.
    pub fn applied_force(&self) -> [f64; 3] {
        let u = self.push_dir();
        [
            -self.world.f_t * u[0],
            -self.world.f_t * u[1],
            self.contact.f_n,
        ]
    }

    /// Unit push direction (toward the hinge edge) in the world frame.
    pub fn push_dir(&self) -> [f64; 2] {
        [self.world.theta.cos(), self.world.theta.sin()]
    }

    pub fn phase(&self) -> Phase {
        if self.success || self.world.phi >= self.cfg.phi_crit() {
            Phase::Retreat
        } else if self.world.phi >= 0.03 {
            Phase::Flip
        } else if self.contact.f_n >= 0.15 {
            Phase::Press
        } else {
            Phase::Reach
        }
    }

    /// Render the camera cloud and tactile frame for the current state.
    /// Draw counts are fixed per call, so runs sharing a seed consume the
    /// stream identically regardless of what the controller does.
    pub fn observe(&mut self) -> Observation {
        let cloud = self.render_cloud();
        let tactile = self.render_tactile();
        Observation {
            cloud,
            tactile,
            step: self.steps,
        }
    }

    /// Servo one control period toward the commanded targets and integrate
    /// the quasi-static dynamics. Translation, yaw, and joints each move
    /// toward their target at a rate-limited step; the translation z
    /// component is ignored because pad height is the finger joint's job.
    pub fn step(&mut self, action: &Action) -> Result<StepInfo, SimError> {
        let flat = action.flatten();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(SimError::BadAction("non-finite component".into()));
        }
        if action.joints.len() != self.cfg.joints() {
            return Err(SimError::BadAction(format!(
                "expected {} joint values, got {}",
                self.cfg.joints(),
                action.joints.len()
            )));
        }
        let m = rot6d_to_matrix(&action.rotation6d)
            .map_err(|e| SimError::BadAction(format!("rotation: {e}")))?;
        let yaw_t = m[(1, 0)].atan2(m[(0, 0)]);
        let dyaw = wrap_angle(yaw_t - self.world.yaw)
            .clamp(-self.cfg.max_yaw_step, self.cfg.max_yaw_step);

        let c = self.cfg.max_translation;
        let dx = (action.translation[0] - self.world.grip[0]).clamp(-c, c);
        let dy = (action.translation[1] - self.world.grip[1]).clamp(-c, c);
        let jc = self.cfg.max_joint_step;
        let dq = (action.joints[0] - self.world.q).clamp(-jc, jc);
        let dspread = (action.joints[1] - self.world.spread).clamp(-jc, jc);

        self.world.grip[0] =
            (self.world.grip[0] + dx).clamp(self.cfg.workspace.min[0], self.cfg.workspace.max[0]);
        self.world.grip[1] =
            (self.world.grip[1] + dy).clamp(self.cfg.workspace.min[1], self.cfg.workspace.max[1]);
        self.world.yaw = wrap_angle(self.world.yaw + dyaw);
        self.world.q = (self.world.q + dq).clamp(0.0, self.cfg.q_max);
        self.world.spread =
            (self.world.spread + dspread).clamp(-self.cfg.spread_max, self.cfg.spread_max);

        let contact = solve_contact(&self.cfg, &self.world);
        if contact.f_n > self.cfg.crush_force {
            self.world.crushed = true;
        } else if self.world.crushed && contact.f_n < self.cfg.recover_force {
            self.world.crushed = false;
        }

        let u = self.push_dir();
        let adv = dx * u[0] + dy * u[1];
        let phi_crit = self.cfg.phi_crit();
        let mu = self.cfg.friction;
        let dt = self.cfg.dt;
        let mut f_t = 0.0;

        if self.world.phi >= phi_crit {
            self.world.phi += self.cfg.fall_rate * dt;
        } else if contact.active && !self.world.crushed {
            let f_req = self.cfg.f_req(self.world.phi, contact.z_w);
            let surplus = mu * contact.f_n - f_req;
            let cap = self.cfg.flip_rate * surplus.max(0.0) * dt;
            let kin = adv.max(0.0) / contact.z_w.max(0.02);
            let dphi = kin.min(cap);
            if dphi > 0.0 {
                self.world.phi += dphi;
                f_t = (mu * contact.f_n).min(f_req + 0.2);
            } else {
                if adv > 0.0 {
                    // Pushing without enough friction surplus: pads slide.
                    f_t = mu * contact.f_n;
                }
                if self.world.phi > 0.0 && mu * contact.f_n < self.cfg.hold_fraction * f_req {
                    self.world.phi -= self.cfg.settle_rate * dt;
                }
            }
        } else if self.world.phi > 0.0 {
            self.world.phi -= self.cfg.settle_rate * dt;
        }
        self.world.phi = self.world.phi.clamp(0.0, std::f64::consts::FRAC_PI_2);
        self.world.f_t = f_t;

        if self.world.phi >= std::f64::consts::FRAC_PI_2 - 1e-12 {
            self.success = true;
        }
        self.steps += 1;
        self.contact = solve_contact(&self.cfg, &self.world);

        Ok(StepInfo {
            applied: self.applied_force(),
            f_n: self.contact.f_n,
            f_t,
            phase: self.phase(),
            done: self.done(),
            success: self.success,
        })
    }

    /// Map a block-frame point through the flip rotation and yaw into the
    /// world frame.
    fn block_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let s = self.cfg.object_half;
        let (sp, cp) = self.world.phi.sin_cos();
        let rx = p[0] - s;
        let x = rx * cp + p[2] * sp + s;
        let z = -rx * sp + p[2] * cp;
        let (st, ct) = self.world.theta.sin_cos();
        [
            self.world.obj[0] + x * ct - p[1] * st,
            self.world.obj[1] + x * st + p[1] * ct,
            z,
        ]
    }

    fn pad_centers(&self) -> [[f64; 2]; 2] {
        let (sy, cy) = self.world.yaw.sin_cos();
        let off = self.cfg.pad_offset + self.world.spread;
        [
            [
                self.world.grip[0] - sy * off,
                self.world.grip[1] + cy * off,
            ],
            [
                self.world.grip[0] + sy * off,
                self.world.grip[1] - cy * off,
            ],
        ]
    }

    fn render_cloud(&mut self) -> PointCloud {
        let s = self.cfg.object_half;
        let h = self.cfg.object_height;
        let noise = Normal::new(0.0, self.cfg.cloud_noise.max(1e-12)).expect("sigma >= 0");
        let tip_z = self.cfg.tip_z0 - self.world.q;
        let pads = self.pad_centers();
        let (sy, cy) = self.world.yaw.sin_cos();

        // Face sample budget: the top face is largest, four sides share the
        // rest; the bottom is never visible.
        let n_obj = self.cfg.cloud_object_points;
        let n_top = n_obj * 4 / 11;
        let n_side = (n_obj - n_top) / 4;
        let mut locals = Vec::with_capacity(n_obj);
        for _ in 0..n_top {
            locals.push([self.rng.gen_range(-s..s), self.rng.gen_range(-s..s), h]);
        }
        for _ in 0..n_side {
            locals.push([s, self.rng.gen_range(-s..s), self.rng.gen_range(0.0..h)]);
        }
        for _ in 0..n_side {
            locals.push([-s, self.rng.gen_range(-s..s), self.rng.gen_range(0.0..h)]);
        }
        for _ in 0..n_side {
            locals.push([self.rng.gen_range(-s..s), s, self.rng.gen_range(0.0..h)]);
        }
        for _ in 0..n_side {
            locals.push([self.rng.gen_range(-s..s), -s, self.rng.gen_range(0.0..h)]);
        }

        let mut points = Vec::with_capacity(n_obj + self.cfg.cloud_table_points);
        for local in locals {
            let w = self.block_to_world(local);
            let n = [
                self.rng.sample(noise),
                self.rng.sample(noise),
                self.rng.sample(noise),
            ];
            // Pads occlude points directly beneath them once lowered.
            let mut occluded = false;
            if tip_z < w[2] + 0.02 {
                for pc in pads {
                    let rel = [w[0] - pc[0], w[1] - pc[1]];
                    let ax = rel[0] * cy + rel[1] * sy;
                    let ay = -rel[0] * sy + rel[1] * cy;
                    if ax.abs() <= PAD_HALF_X && ay.abs() <= PAD_HALF_Y {
                        occluded = true;
                        break;
                    }
                }
            }
            if !occluded {
                points.push([w[0] + n[0], w[1] + n[1], w[2] + n[2]]);
            }
        }

        let ws = self.cfg.workspace.clone();
        let (st, ct) = self.world.theta.sin_cos();
        for _ in 0..self.cfg.cloud_table_points {
            let x = self.rng.gen_range(ws.min[0]..ws.max[0]);
            let y = self.rng.gen_range(ws.min[1]..ws.max[1]);
            let n = [
                self.rng.sample(noise),
                self.rng.sample(noise),
                self.rng.sample(noise),
            ];
            // Table points under the block footprint are hidden.
            let rel = [x - self.world.obj[0], y - self.world.obj[1]];
            let lx = rel[0] * ct + rel[1] * st;
            let ly = -rel[0] * st + rel[1] * ct;
            if lx.abs() <= s && ly.abs() <= s {
                continue;
            }
            points.push([x + n[0], y + n[1], n[2]]);
        }

        // Pad tops, seen from above. Never occluded, so the draw count
        // stays fixed.
        let n_pad = self.cfg.cloud_gripper_points / 2;
        for pc in pads {
            for _ in 0..n_pad {
                let ax = self.rng.gen_range(-PAD_HALF_X..PAD_HALF_X);
                let ay = self.rng.gen_range(-PAD_HALF_Y..PAD_HALF_Y);
                let n = [
                    self.rng.sample(noise),
                    self.rng.sample(noise),
                    self.rng.sample(noise),
                ];
                points.push([
                    pc[0] + ax * cy - ay * sy + n[0],
                    pc[1] + ax * sy + ay * cy + n[1],
                    tip_z + n[2],
                ]);
            }
        }
        PointCloud::new(points)
    }

    fn render_tactile(&mut self) -> TactileFrame {
        let rows = self.cfg.sensor_rows;
        let cols = self.cfg.sensor_cols;
        let pitch = 0.004;
        let rot = pad_rotation(self.world.yaw);
        let rot6d = matrix_to_rot6d(&rot).expect("pad rotation is orthonormal");
        let pads = self.pad_centers();
        let tip_z = self.cfg.tip_z0 - self.world.q;
        let applied = self.applied_force();
        let f_world = Vector3::new(applied[0], applied[1], applied[2]);

        // Gaussian footprint weights over every taxel of both pads,
        // normalised to sum to one so the frame's net force reproduces the
        // applied force.
        let mut positions: Vec<[f64; 3]> = Vec::with_capacity(2 * rows * cols);
        for pc in pads {
            for r in 0..rows {
                for c in 0..cols {
                    let local = Vector3::new(
                        (r as f64 - (rows as f64 - 1.0) / 2.0) * pitch,
                        (c as f64 - (cols as f64 - 1.0) / 2.0) * pitch,
                        0.0,
                    );
                    let w = rot * local;
                    positions.push([pc[0] + w[0], pc[1] + w[1], tip_z]);
                }
            }
        }
        let centre = self.world.grip;
        let sigma2 = 2.0 * self.cfg.footprint_sigma * self.cfg.footprint_sigma;
        let raw: Vec<f64> = positions
            .iter()
            .map(|p| {
                let d2 = (p[0] - centre[0]).powi(2) + (p[1] - centre[1]).powi(2);
                (-d2 / sigma2).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();

        let noise = if self.cfg.tactile_noise > 0.0 {
            Some(Normal::new(0.0, self.cfg.tactile_noise).expect("sigma > 0"))
        } else {
            None
        };
        let mut sensors = Vec::with_capacity(2);
        let mut idx = 0;
        for _pad in 0..2 {
            let mut taxels = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let f_sensor = rot.transpose() * (f_world * (raw[idx] / total));
                let mut force = [f_sensor[0], f_sensor[1], f_sensor[2]];
                if let Some(n) = noise {
                    for v in &mut force {
                        *v += self.rng.sample(n);
                    }
                }
                taxels.push(TaxelReading {
                    force,
                    rot6d,
                    position: positions[idx],
                });
                idx += 1;
            }
            sensors.push(SensorGrid::new(rows, cols, taxels).expect("grid dims"));
        }
        TactileFrame::new(sensors).expect("uniform grids")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::net_force;

    /// Action whose targets equal the current state: the executor holds.
    fn hold(env: &FlipEnv) -> Action {
        let w = env.world();
        let mut a = Action::zero(2);
        a.translation = [w.grip[0], w.grip[1], env.cfg.tip_z0 - w.q];
        a.joints = vec![w.q, w.spread];
        let (sy, cy) = w.yaw.sin_cos();
        let rot = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
        a.rotation6d = matrix_to_rot6d(&rot).unwrap();
        a
    }

    /// Put the pads over the press point with a chosen penetration.
    fn engage(env: &mut FlipEnv, pen: f64) {
        let s = env.cfg.object_half;
        let (st, ct) = env.world.theta.sin_cos();
        let xi = -s / 3.0;
        env.world.grip = [env.world.obj[0] + xi * ct, env.world.obj[1] + xi * st];
        env.world.yaw = env.world.theta;
        env.world.q = env.cfg.tip_z0 - env.cfg.object_height + pen;
        env.contact = solve_contact(&env.cfg, &env.world);
    }

    #[test]
    fn resets_stay_inside_workspace_and_share_seeds() {
        for ep in 0..1000 {
            let env = FlipEnv::new(EnvConfig::default(), 5, ep);
            let w = env.world();
            assert!(w.obj[0] >= 0.0 && w.obj[0] <= 0.35);
            assert!(w.obj[1] >= 0.0 && w.obj[1] <= 0.35);
            assert!(w.stiffness >= 500.0 && w.stiffness < 2500.0);
            assert_eq!(w.phi, 0.0);
        }
        let mut a = FlipEnv::new(EnvConfig::default(), 9, 3);
        let mut b = FlipEnv::new(EnvConfig::default(), 9, 3);
        let oa = a.observe();
        let ob = b.observe();
        assert_eq!(oa.cloud.points, ob.cloud.points);
        assert_eq!(oa.tactile, ob.tactile);
    }

    #[test]
    fn holding_the_current_targets_changes_nothing() {
        let mut env = FlipEnv::new(EnvConfig::default(), 1, 0);
        let before = env.world().clone();
        let a = hold(&env);
        for _ in 0..5 {
            let info = env.step(&a).unwrap();
            assert_eq!(info.f_n, 0.0);
            assert!(!info.success);
        }
        assert_eq!(before.grip, env.world().grip);
        assert_eq!(before.q, env.world().q);
        assert_eq!(before.phi, env.world().phi);
        let obs = env.observe();
        assert_eq!(net_force(&obs.tactile).unwrap().norm(), 0.0);
        assert_eq!(env.phase(), Phase::Reach);
    }

    #[test]
    fn cloud_points_lie_on_block_table_or_pads() {
        let mut env = FlipEnv::new(EnvConfig::default(), 2, 1);
        env.world.phi = 0.5;
        env.world.q = 0.02;
        env.contact = solve_contact(&env.cfg, &env.world);
        let s = env.cfg.object_half;
        let h = env.cfg.object_height;
        let margin = 3.0 * env.cfg.cloud_noise + 1e-9;
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for xc in [-s, s] {
            for yc in [-s, s] {
                for zc in [0.0, h] {
                    let p = env.block_to_world([xc, yc, zc]);
                    for i in 0..3 {
                        lo[i] = lo[i].min(p[i] - margin);
                        hi[i] = hi[i].max(p[i] + margin);
                    }
                }
            }
        }
        let pads = env.pad_centers();
        let tip_z = env.cfg.tip_z0 - env.world.q;
        let (sy, cy) = env.world.yaw.sin_cos();
        let obs = env.observe();
        let mut pad_hits = 0;
        for p in &obs.cloud.points {
            let on_block = (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i]);
            let on_table = p[2].abs() <= margin;
            let on_pad = pads.iter().any(|pc| {
                let rel = [p[0] - pc[0], p[1] - pc[1]];
                let ax = rel[0] * cy + rel[1] * sy;
                let ay = -rel[0] * sy + rel[1] * cy;
                ax.abs() <= PAD_HALF_X + margin
                    && ay.abs() <= PAD_HALF_Y + margin
                    && (p[2] - tip_z).abs() <= margin
            });
            if on_pad {
                pad_hits += 1;
            }
            assert!(on_block || on_table || on_pad, "stray point {p:?}");
        }
        assert!(
            pad_hits >= env.cfg.cloud_gripper_points,
            "pads barely rendered: {pad_hits} points"
        );
    }

    #[test]
    fn pressing_matches_spring_law_and_net_force_is_exact() {
        let mut env = FlipEnv::new(EnvConfig::default(), 3, 2);
        engage(&mut env, 0.001);
        let k = env.world().stiffness;
        let c = *env.contact();
        assert!(c.active);
        assert!((c.f_n - k * 0.001).abs() < 1e-9);

        let obs = env.observe();
        let net = net_force(&obs.tactile).unwrap();
        let applied = env.applied_force();
        for i in 0..3 {
            assert!(
                (net[i] - applied[i]).abs() < 1e-9,
                "axis {i}: {} vs {}",
                net[i],
                applied[i]
            );
        }
        assert_eq!(env.phase(), Phase::Press);
    }

    #[test]
    fn force_saturates_at_sensor_range() {
        let mut env = FlipEnv::new(EnvConfig::default(), 3, 5);
        engage(&mut env, 0.12);
        assert_eq!(env.contact().f_n, 50.0);
    }

    #[test]
    fn advance_rolls_in_band_but_not_under_or_over_force() {
        // In band: hold the contact at 2 N by hand, advance, roll. The
        // advance itself drops the penetration by adv*tan(phi), so the
        // driver extends the finger to meet the patch where it will be.
        let mut env = FlipEnv::new(EnvConfig::default(), 4, 0);
        let k = env.world().stiffness;
        engage(&mut env, 2.0 / k);
        let u = env.push_dir();
        let adv = 0.002;
        let mut grew = false;
        for _ in 0..40 {
            assert!(
                env.contact().active,
                "driver lost contact at phi {}",
                env.world().phi
            );
            let z = env.contact().z_w;
            let drop = adv * env.world().phi.tan();
            env.world.q = env.cfg.tip_z0 - (z - drop) + 2.0 / k;
            let mut a = hold(&env);
            a.translation[0] = env.world().grip[0] + adv * u[0];
            a.translation[1] = env.world().grip[1] + adv * u[1];
            let before = env.world().phi;
            env.step(&a).unwrap();
            if env.world().phi > before {
                grew = true;
            }
            if env.world().phi >= env.cfg.phi_crit() {
                break;
            }
        }
        assert!(grew, "in-band advance never rolled the block");
        assert!(env.world().phi >= env.cfg.phi_crit());

        // Under force: friction cannot supply F_req, the block stays flat.
        let mut env = FlipEnv::new(EnvConfig::default(), 4, 1);
        let k = env.world().stiffness;
        engage(&mut env, 0.3 / k);
        let u = env.push_dir();
        for _ in 0..5 {
            let mut a = hold(&env);
            a.translation[0] = env.world().grip[0] + 0.003 * u[0];
            a.translation[1] = env.world().grip[1] + 0.003 * u[1];
            env.step(&a).unwrap();
        }
        assert_eq!(env.world().phi, 0.0);

        // Over force: crush latches and rolling stalls.
        let mut env = FlipEnv::new(EnvConfig::default(), 4, 2);
        let k = env.world().stiffness;
        engage(&mut env, 5.0 / k);
        let u = env.push_dir();
        let mut a = hold(&env);
        a.translation[0] = env.world().grip[0] + 0.003 * u[0];
        a.translation[1] = env.world().grip[1] + 0.003 * u[1];
        env.step(&a).unwrap();
        assert!(env.world().crushed);
        assert_eq!(env.world().phi, 0.0);
    }

    #[test]
    fn gravity_completes_past_critical_angle() {
        let mut env = FlipEnv::new(EnvConfig::default(), 6, 0);
        env.world.phi = env.cfg.phi_crit() + 0.01;
        env.contact = solve_contact(&env.cfg, &env.world);
        let a = hold(&env);
        let mut steps = 0;
        while !env.done() && steps < 10 {
            env.step(&a).unwrap();
            steps += 1;
        }
        assert!(env.success(), "fall never completed");
        assert!(env.world().phi >= std::f64::consts::FRAC_PI_2 - 1e-12);
    }

    #[test]
    fn unsupported_partial_flip_settles_back() {
        let mut env = FlipEnv::new(EnvConfig::default(), 6, 1);
        env.world.phi = 0.4;
        env.contact = solve_contact(&env.cfg, &env.world);
        let a = hold(&env);
        for _ in 0..12 {
            env.step(&a).unwrap();
        }
        assert_eq!(env.world().phi, 0.0);
    }

    #[test]
    fn rejects_bad_actions() {
        let mut env = FlipEnv::new(EnvConfig::default(), 7, 0);
        let mut a = hold(&env);
        a.translation[0] = f64::NAN;
        assert!(env.step(&a).is_err());
        assert!(env.step(&Action::zero(1)).is_err());
        assert!(env.step(&Action::zero(3)).is_err());
    }

    #[test]
    fn spread_joint_moves_taxels_apart_within_limits() {
        let mut env = FlipEnv::new(EnvConfig::default(), 8, 0);
        let gap = |env: &mut FlipEnv| {
            let obs = env.observe();
            let a = obs.tactile.sensors[0].taxels[0].position;
            let b = obs.tactile.sensors[1].taxels[0].position;
            (a[0] - b[0]).hypot(a[1] - b[1])
        };
        let g0 = gap(&mut env);
        // A target beyond the joint range walks the spread to its limit
        // one rate-limited step at a time, then saturates there.
        let mut a = hold(&env);
        a.joints[1] = 0.02;
        for _ in 0..10 {
            env.step(&a).unwrap();
        }
        let g1 = gap(&mut env);
        assert!(g1 > g0 + 0.003, "spread had no effect: {g0} -> {g1}");
        assert_eq!(env.world().spread, env.cfg.spread_max);
        for _ in 0..30 {
            env.step(&a).unwrap();
        }
        assert_eq!(env.world().spread, env.cfg.spread_max);
    }

    #[test]
    fn random_bounded_actions_keep_the_world_bounded() {
        use rand::Rng;
        let cfg = EnvConfig::default();
        let mut rng = crate::rngstream::stream_rng(13, "fuzz/world");
        let mut env = FlipEnv::new(cfg.clone(), 13, 0);
        for i in 0..10_000u64 {
            if env.done() {
                env = FlipEnv::new(cfg.clone(), 13, 1 + i);
            }
            // Targets deliberately wander outside every legal range.
            let mut a = Action::zero(2);
            a.translation = [
                rng.gen_range(-0.1..0.45),
                rng.gen_range(-0.1..0.45),
                rng.gen_range(-0.02..0.15),
            ];
            a.joints = vec![rng.gen_range(-0.03..0.09), rng.gen_range(-0.02..0.02)];
            let (s, c) = rng
                .gen_range(-std::f64::consts::PI..std::f64::consts::PI)
                .sin_cos();
            a.rotation6d = [c, s, 0.0, -s, c, 0.0];
            let info = env.step(&a).unwrap();
            let w = env.world();
            assert!(w.grip[0].is_finite() && w.grip[1].is_finite());
            assert!(w.grip[0] >= 0.0 && w.grip[0] <= 0.35);
            assert!(w.grip[1] >= 0.0 && w.grip[1] <= 0.35);
            assert!(w.phi >= 0.0 && w.phi <= std::f64::consts::FRAC_PI_2 + 1e-12);
            assert!(w.obj[0].is_finite() && w.obj[1].is_finite());
            assert!(info.f_n >= 0.0 && info.f_n <= cfg.force_saturation);
            // Coulomb cap: tangential never exceeds friction times normal.
            assert!(info.f_t.abs() <= cfg.friction * info.f_n + 1e-12);
        }
    }
}
