//! Imitation policy: diffusion action head conditioned on a fused
//! visuo-tactile feature, plus an auxiliary future-force diffusion head
//! whose samples feed the attention query. Four wiring variants cover the
//! ablations; `select_mode` is the single source of truth for them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diffusion::{epsilon_loss, p_sample_loop, Denoiser, DiffusionError, NoiseSchedule};
use crate::encoders::{encode_pointcloud, encode_tactile, project, project_force, EncoderConfig, Modality};
use crate::fusion::{build_guide_force, fgaf_multihead, AttentionWeights, FusionConfig};
use crate::numerics::{
    read_checkpoint, write_checkpoint, Graph, NodeId, NumericsError, OptimizerState, Params,
    Tensor,
};
use crate::numerics::AdamConfig;
use crate::sensing::{
    net_force_series, preprocess_cloud, rot6d_to_matrix, matrix_to_rot6d, Action, ActionChunk,
    Observation, SensingError, WorkspaceBox,
};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    InvalidConfig(String),
    #[error("empty training batch")]
    EmptyBatch,
    #[error("empty observation history")]
    EmptyHistory,
    #[error("checkpoint record {0} is missing")]
    MissingRecord(String),
    #[error("checkpoint record {0}: {1}")]
    BadRecord(String, String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Sensing(#[from] SensingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Force-guided attention with a future-force head feeding the query.
    Full,
    /// Attention stays, but the query sees observed forces only and the
    /// force head is gone.
    NoFfpg,
    /// No attention at all: modality features are concatenated.
    NoFgaf,
    /// Force head reconstructs the observed window instead of predicting
    /// the future; the query gets the reconstruction.
    OfpOfg,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Full,
        FusionMode::NoFfpg,
        FusionMode::NoFgaf,
        FusionMode::OfpOfg,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Full => "full",
            FusionMode::NoFfpg => "no_ffpg",
            FusionMode::NoFgaf => "no_fgaf",
            FusionMode::OfpOfg => "ofp_ofg",
        }
    }

    fn code(&self) -> f64 {
        match self {
            FusionMode::Full => 0.0,
            FusionMode::NoFfpg => 1.0,
            FusionMode::NoFgaf => 2.0,
            FusionMode::OfpOfg => 3.0,
        }
    }

    fn from_code(c: f64) -> Result<Self, PolicyError> {
        match c as i64 {
            0 => Ok(FusionMode::Full),
            1 => Ok(FusionMode::NoFfpg),
            2 => Ok(FusionMode::NoFgaf),
            3 => Ok(FusionMode::OfpOfg),
            other => Err(PolicyError::BadRecord(
                "cfg.mode".into(),
                format!("unknown code {other}"),
            )),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(FusionMode::Full),
            "no_ffpg" => Ok(FusionMode::NoFfpg),
            "no_fgaf" => Ok(FusionMode::NoFgaf),
            "ofp_ofg" => Ok(FusionMode::OfpOfg),
            other => Err(format!(
                "unknown mode {other:?}, expected full|no_ffpg|no_fgaf|ofp_ofg"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForceTarget {
    /// Predict the next `horizon` net forces.
    Future,
    /// Reconstruct the observed `history` net forces.
    Observed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    ObservedAndPredicted,
    ObservedOnly,
}

/// Resolved wiring for one mode: which heads exist and how the attention
/// query is assembled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeWiring {
    pub force_head: Option<ForceTarget>,
    pub query: Option<QuerySource>,
    pub attention: bool,
    pub effective_alpha: f64,
}

pub fn select_mode(mode: FusionMode, alpha: f64) -> ModeWiring {
    match mode {
        FusionMode::Full => ModeWiring {
            force_head: Some(ForceTarget::Future),
            query: Some(QuerySource::ObservedAndPredicted),
            attention: true,
            effective_alpha: alpha,
        },
        FusionMode::NoFfpg => ModeWiring {
            force_head: None,
            query: Some(QuerySource::ObservedOnly),
            attention: true,
            effective_alpha: 0.0,
        },
        FusionMode::NoFgaf => ModeWiring {
            force_head: None,
            query: None,
            attention: false,
            effective_alpha: 0.0,
        },
        FusionMode::OfpOfg => ModeWiring {
            force_head: Some(ForceTarget::Observed),
            query: Some(QuerySource::ObservedAndPredicted),
            attention: true,
            effective_alpha: alpha,
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyConfig {
    pub mode: FusionMode,
    /// Observation history length h.
    pub history: usize,
    /// Action chunk length n.
    pub horizon: usize,
    pub joints: usize,
    pub sensors: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Weight of the force-prediction loss in the combined objective.
    pub force_loss_weight: f64,
    /// During training, feed the ground-truth future forces (plus noise)
    /// into the query instead of sampling from the in-progress force head.
    pub teacher_forced: bool,
    /// Std-dev in newtons of the teacher-forcing noise.
    pub teacher_noise: f64,
    /// Concatenate the query embedding onto the fused feature for the
    /// action head.
    pub concat_query: bool,
    pub pc_point_widths: Vec<usize>,
    pub pc_feat: usize,
    pub tac_taxel_widths: Vec<usize>,
    pub tac_feat: usize,
    pub force_hidden: Vec<usize>,
    pub force_head_hidden: Vec<usize>,
    pub action_head_hidden: Vec<usize>,
    pub temb_dim: usize,
    /// Diffusion steps used for training.
    pub t_train: usize,
    /// Strided steps used at inference.
    pub t_infer: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub n_max_points: usize,
    pub voxel: f64,
    pub workspace: WorkspaceBox,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            mode: FusionMode::Full,
            history: 2,
            horizon: 8,
            joints: 2,
            sensors: 2,
            embed_dim: 32,
            heads: 1,
            force_loss_weight: 0.1,
            teacher_forced: true,
            teacher_noise: 0.05,
            concat_query: false,
            pc_point_widths: vec![32, 32],
            pc_feat: 32,
            tac_taxel_widths: vec![24, 24],
            tac_feat: 32,
            force_hidden: vec![32],
            force_head_hidden: vec![64, 64],
            action_head_hidden: vec![128, 128],
            temb_dim: 16,
            t_train: 50,
            t_infer: 8,
            // Betas sized for the short 50-step schedule (the familiar
            // 1e-4..0.02 range assumes ~1000 steps). Terminal alpha-bar must
            // land near zero; otherwise sampling starts from pure noise that
            // the forward process never reaches, and the denoiser learns to
            // read the answer out of x_t instead of the conditioning.
            beta_start: 0.002,
            beta_end: 0.4,
            n_max_points: 256,
            voxel: 0.005,
            // Crop floor sits above the table plane: table returns carry no
            // task signal but dominate a max-pool, drowning out the object.
            workspace: WorkspaceBox {
                min: [0.0, 0.0, 0.005],
                max: [0.35, 0.35, 0.12],
            },
        }
    }
}

impl PolicyConfig {
    pub fn wiring(&self) -> ModeWiring {
        select_mode(self.mode, self.force_loss_weight)
    }

    pub fn action_dim(&self) -> usize {
        Action::dim(self.joints)
    }

    pub fn chunk_dim(&self) -> usize {
        self.horizon * self.action_dim()
    }

    /// Flattened guide-force length for this mode, zero when no query exists.
    pub fn guide_len(&self) -> usize {
        match self.wiring().query {
            Some(QuerySource::ObservedAndPredicted) => match self.wiring().force_head {
                Some(ForceTarget::Future) => 3 * (self.history + self.horizon),
                Some(ForceTarget::Observed) => 3 * (2 * self.history),
                None => unreachable!("query with predicted slice requires a force head"),
            },
            Some(QuerySource::ObservedOnly) => 3 * self.history,
            None => 0,
        }
    }

    pub fn force_target_dim(&self) -> usize {
        match self.wiring().force_head {
            Some(ForceTarget::Future) => 3 * self.horizon,
            Some(ForceTarget::Observed) => 3 * self.history,
            None => 0,
        }
    }

    pub fn encoder_cfg(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            workspace: self.workspace.clone(),
            pc_point_widths: self.pc_point_widths.clone(),
            pc_feat: self.pc_feat,
            tac_taxel_widths: self.tac_taxel_widths.clone(),
            tac_feat: self.tac_feat,
            sensors: self.sensors,
            force_input_len: self.guide_len().max(1),
            force_hidden: self.force_hidden.clone(),
        }
    }

    pub fn fusion_cfg(&self) -> FusionConfig {
        FusionConfig {
            embed_dim: self.embed_dim,
            heads: self.heads,
        }
    }

    /// Conditioning width of the action head.
    pub fn action_cond_dim(&self) -> usize {
        if self.wiring().attention {
            self.embed_dim + if self.concat_query { self.embed_dim } else { 0 }
        } else {
            2 * self.embed_dim
        }
    }

    pub fn action_denoiser(&self) -> Denoiser {
        Denoiser {
            prefix: "head.action".into(),
            target_dim: self.chunk_dim(),
            cond_dim: self.action_cond_dim(),
            temb_dim: self.temb_dim,
            hidden: self.action_head_hidden.clone(),
        }
    }

    pub fn force_denoiser(&self) -> Option<Denoiser> {
        self.wiring().force_head.map(|_| Denoiser {
            prefix: "head.force".into(),
            target_dim: self.force_target_dim(),
            cond_dim: 2 * self.embed_dim,
            temb_dim: self.temb_dim,
            hidden: self.force_head_hidden.clone(),
        })
    }

    pub fn train_schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::linear(self.t_train, self.beta_start, self.beta_end)
    }

    pub fn infer_schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        self.train_schedule()?.strided(self.t_infer)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |msg: String| Err(PolicyError::InvalidConfig(msg));
        if self.history == 0 || self.horizon == 0 {
            return bad("history and horizon must be positive".into());
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.force_loss_weight < 0.0 {
            return bad("force_loss_weight must be non-negative".into());
        }
        if self.t_infer == 0 || self.t_infer > self.t_train {
            return bad(format!(
                "t_infer {} must be in 1..=t_train {}",
                self.t_infer, self.t_train
            ));
        }
        if self.pc_point_widths.is_empty() || self.tac_taxel_widths.is_empty() {
            return bad("encoder width lists must be non-empty".into());
        }
        if self.temb_dim < 2 || self.temb_dim % 2 != 0 {
            return bad("temb_dim must be even and at least 2".into());
        }
        self.train_schedule()?;
        Ok(())
    }
}

/// Per-dimension normalisation statistics for actions and net forces,
/// fitted on the training demonstrations and stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
    pub force_mean: [f64; 3],
    pub force_std: [f64; 3],
}

const STD_FLOOR: f64 = 1e-6;

impl Normalizer {
    pub fn identity(action_dim: usize) -> Self {
        Normalizer {
            action_mean: vec![0.0; action_dim],
            action_std: vec![1.0; action_dim],
            force_mean: [0.0; 3],
            force_std: [1.0; 3],
        }
    }

    /// Fit from flattened single actions and net-force triples. Constant
    /// dimensions get a floored std so normalisation stays invertible.
    pub fn fit<'a, A, F>(action_dim: usize, actions: A, forces: F) -> Self
    where
        A: Iterator<Item = &'a [f64]>,
        F: Iterator<Item = [f64; 3]>,
    {
        let mut a_sum = vec![0.0; action_dim];
        let mut a_sq = vec![0.0; action_dim];
        let mut a_n = 0usize;
        for a in actions {
            debug_assert_eq!(a.len(), action_dim);
            for (i, &v) in a.iter().enumerate() {
                a_sum[i] += v;
                a_sq[i] += v * v;
            }
            a_n += 1;
        }
        let mut f_sum = [0.0; 3];
        let mut f_sq = [0.0; 3];
        let mut f_n = 0usize;
        for f in forces {
            for i in 0..3 {
                f_sum[i] += f[i];
                f_sq[i] += f[i] * f[i];
            }
            f_n += 1;
        }
        let stats = |sum: f64, sq: f64, n: usize| -> (f64, f64) {
            if n == 0 {
                return (0.0, 1.0);
            }
            let mean = sum / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            (mean, var.sqrt().max(STD_FLOOR))
        };
        let mut out = Normalizer::identity(action_dim);
        for i in 0..action_dim {
            let (m, s) = stats(a_sum[i], a_sq[i], a_n);
            out.action_mean[i] = m;
            out.action_std[i] = s;
        }
        for i in 0..3 {
            let (m, s) = stats(f_sum[i], f_sq[i], f_n);
            out.force_mean[i] = m;
            out.force_std[i] = s;
        }
        out
    }

    pub fn action_dim(&self) -> usize {
        self.action_mean.len()
    }

    /// Normalise a flattened chunk (or single action) per action dimension.
    pub fn norm_chunk(&self, flat: &[f64]) -> Vec<f64> {
        let d = self.action_dim();
        flat.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.action_mean[i % d]) / self.action_std[i % d])
            .collect()
    }

    pub fn denorm_chunk(&self, flat: &[f64]) -> Vec<f64> {
        let d = self.action_dim();
        flat.iter()
            .enumerate()
            .map(|(i, &v)| v * self.action_std[i % d] + self.action_mean[i % d])
            .collect()
    }

    /// Normalise a flattened force sequence per axis.
    pub fn norm_force_flat(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter()
            .enumerate()
            .map(|(i, &v)| (v - self.force_mean[i % 3]) / self.force_std[i % 3])
            .collect()
    }

    pub fn denorm_force_flat(&self, flat: &[f64]) -> Vec<f64> {
        flat.iter()
            .enumerate()
            .map(|(i, &v)| v * self.force_std[i % 3] + self.force_mean[i % 3])
            .collect()
    }

    fn to_records(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert(
            "norm.action.mean".to_string(),
            Tensor::vector(self.action_mean.clone()),
        );
        out.insert(
            "norm.action.std".to_string(),
            Tensor::vector(self.action_std.clone()),
        );
        out.insert(
            "norm.force.mean".to_string(),
            Tensor::vector(self.force_mean.to_vec()),
        );
        out.insert(
            "norm.force.std".to_string(),
            Tensor::vector(self.force_std.to_vec()),
        );
        out
    }

    fn from_records(records: &BTreeMap<String, Tensor>) -> Result<Self, PolicyError> {
        let get = |name: &str| -> Result<Vec<f64>, PolicyError> {
            records
                .get(name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| PolicyError::MissingRecord(name.to_string()))
        };
        let fm = get("norm.force.mean")?;
        let fs = get("norm.force.std")?;
        if fm.len() != 3 || fs.len() != 3 {
            return Err(PolicyError::BadRecord(
                "norm.force.*".into(),
                "expected 3 entries".into(),
            ));
        }
        Ok(Normalizer {
            action_mean: get("norm.action.mean")?,
            action_std: get("norm.action.std")?,
            force_mean: [fm[0], fm[1], fm[2]],
            force_std: [fs[0], fs[1], fs[2]],
        })
    }
}

/// One training window: h observations, the next n expert actions, and the
/// n net forces measured right after each of those actions.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub history: Vec<Observation>,
    pub chunk: ActionChunk,
    pub future_forces: Vec<[f64; 3]>,
}

/// Loss values and parameter gradients for one batch.
#[derive(Debug)]
pub struct TrainOutput {
    pub loss: f64,
    pub loss_pi: f64,
    pub loss_ffp: f64,
    /// Mean tactile attention weight over the batch; the sentinel -1 when
    /// the mode has no attention.
    pub mean_alpha_tac: f64,
    pub grads: BTreeMap<String, Tensor>,
}

/// Action chunk plus diagnostics from one inference call.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub chunk: ActionChunk,
    pub weights: AttentionWeights,
    pub predicted_force: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub params: Params,
    pub norm: Normalizer,
}

impl Policy {
    /// Fresh policy with seeded initial weights. Initialisation order is
    /// fixed (encoders, fusion, force head, action head), so one rng state
    /// maps to exactly one parameter set.
    pub fn init(cfg: PolicyConfig, norm: Normalizer, rng: &mut impl Rng) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let wiring = cfg.wiring();
        let mut params = Params::new();
        cfg.encoder_cfg()
            .init_params(&mut params, rng, wiring.query.is_some());
        if wiring.attention {
            cfg.fusion_cfg().init_params(&mut params, rng);
        }
        if let Some(den) = cfg.force_denoiser() {
            den.init(&mut params, rng);
        }
        cfg.action_denoiser().init(&mut params, rng);
        Ok(Policy { cfg, params, norm })
    }

    /// Encode the newest observation into projected cloud and tactile
    /// embeddings.
    fn embed_latest(
        &self,
        g: &mut Graph,
        latest: &Observation,
    ) -> Result<(NodeId, NodeId), PolicyError> {
        let enc = self.cfg.encoder_cfg();
        let cloud = preprocess_cloud(
            &latest.cloud,
            &self.cfg.workspace,
            self.cfg.voxel,
            self.cfg.n_max_points,
        )?;
        let e_pc = encode_pointcloud(g, &self.params, &enc, &cloud)?;
        let e_pc = project(g, &self.params, &enc, Modality::Cloud, e_pc)?;
        let e_tac = encode_tactile(g, &self.params, &enc, &latest.tactile)?;
        let e_tac = project(g, &self.params, &enc, Modality::Tactile, e_tac)?;
        Ok((e_pc, e_tac))
    }

    /// Build the action-head conditioning node for one sample, returning
    /// the attention weights when the mode computes them.
    fn build_cond(
        &self,
        g: &mut Graph,
        e_pc: NodeId,
        e_tac: NodeId,
        history: &[Observation],
        predicted: &[[f64; 3]],
    ) -> Result<(NodeId, Option<AttentionWeights>), PolicyError> {
        let wiring = self.cfg.wiring();
        match wiring.query {
            None => {
                let cond = g.concat_cols(&[e_pc, e_tac])?;
                Ok((cond, None))
            }
            Some(src) => {
                let observed = net_force_series(history, self.cfg.history)?;
                let predicted_slice: &[[f64; 3]] = match src {
                    QuerySource::ObservedOnly => &[],
                    QuerySource::ObservedAndPredicted => predicted,
                };
                let guide = build_guide_force(&observed, predicted_slice);
                let flat = self.norm.norm_force_flat(&guide.flat());
                let q = project_force(g, &self.params, &self.cfg.encoder_cfg(), &flat)?;
                let fused = fgaf_multihead(g, &self.params, &self.cfg.fusion_cfg(), q, e_pc, e_tac)?;
                let cond = if self.cfg.concat_query {
                    g.concat_cols(&[fused.node, q])?
                } else {
                    fused.node
                };
                Ok((cond, Some(fused.weights)))
            }
        }
    }

    /// The force sequence fed into the query's predicted slice during
    /// training: ground truth plus noise under teacher forcing, otherwise a
    /// sample from the in-progress force head (no gradient through it).
    fn train_predicted_slice(
        &self,
        sample: &TrainSample,
        cond_value: &Tensor,
        sched: &NoiseSchedule,
        rng: &mut impl Rng,
    ) -> Result<Vec<[f64; 3]>, PolicyError> {
        let wiring = self.cfg.wiring();
        let Some(target) = wiring.force_head else {
            return Ok(Vec::new());
        };
        if self.cfg.teacher_forced {
            let gt: Vec<[f64; 3]> = match target {
                ForceTarget::Future => sample.future_forces.clone(),
                ForceTarget::Observed => {
                    net_force_series(&sample.history, self.cfg.history)?.forces
                }
            };
            Ok(gt
                .into_iter()
                .map(|f| {
                    let mut out = f;
                    for v in &mut out {
                        let z: f64 = rng.sample(StandardNormal);
                        *v += self.cfg.teacher_noise * z;
                    }
                    out
                })
                .collect())
        } else {
            let den = self.cfg.force_denoiser().expect("force head exists");
            let flat = p_sample_loop(
                &self.params,
                &den,
                cond_value,
                &sched.strided(self.cfg.t_infer)?,
                rng,
            )?;
            Ok(triples(&self.norm.denorm_force_flat(&flat)))
        }
    }

    /// Combined training pass over a batch: builds one graph, returns the
    /// loss breakdown and gradients. The combined loss node is literally
    /// add(L_pi, scale(L_ffp, alpha)), so the reported parts sum exactly.
    pub fn forward_train(
        &self,
        batch: &[&TrainSample],
        rng: &mut impl Rng,
    ) -> Result<TrainOutput, PolicyError> {
        if batch.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let wiring = self.cfg.wiring();
        let sched = self.cfg.train_schedule()?;
        let action_den = self.cfg.action_denoiser();
        let force_den = self.cfg.force_denoiser();

        let mut g = Graph::new();
        let mut pi_sum: Option<NodeId> = None;
        let mut ffp_sum: Option<NodeId> = None;
        let mut alpha_tac_sum = 0.0;
        let mut alpha_count = 0usize;

        for sample in batch {
            if sample.history.len() < self.cfg.history {
                return Err(PolicyError::Sensing(SensingError::HistoryTooShort {
                    need: self.cfg.history,
                    got: sample.history.len(),
                }));
            }
            let latest = sample.history.last().expect("non-empty history");
            let (e_pc, e_tac) = self.embed_latest(&mut g, latest)?;

            let mut ffp_term: Option<NodeId> = None;
            let mut force_cond_value: Option<Tensor> = None;
            if let (Some(target), Some(den)) = (wiring.force_head, force_den.as_ref()) {
                let cond_f = g.concat_cols(&[e_pc, e_tac])?;
                force_cond_value = Some(g.value(cond_f).clone());
                let target_flat: Vec<f64> = match target {
                    ForceTarget::Future => sample.future_forces.iter().flatten().copied().collect(),
                    ForceTarget::Observed => {
                        net_force_series(&sample.history, self.cfg.history)?.flat()
                    }
                };
                let x0 = self.norm.norm_force_flat(&target_flat);
                let (l, _t) = epsilon_loss(&mut g, &self.params, den, &x0, cond_f, &sched, rng)?;
                ffp_term = Some(l);
            }

            let predicted = self.train_predicted_slice(
                sample,
                force_cond_value.as_ref().unwrap_or(&Tensor::scalar(0.0)),
                &sched,
                rng,
            )?;
            let (cond_a, weights) =
                self.build_cond(&mut g, e_pc, e_tac, &sample.history, &predicted)?;
            if let Some(w) = weights {
                alpha_tac_sum += w.alpha_tac;
                alpha_count += 1;
            }

            let x0 = self.norm.norm_chunk(&sample.chunk.flatten());
            let (l_pi, _t) =
                epsilon_loss(&mut g, &self.params, &action_den, &x0, cond_a, &sched, rng)?;

            pi_sum = Some(match pi_sum {
                Some(acc) => g.add(acc, l_pi)?,
                None => l_pi,
            });
            if let Some(l) = ffp_term {
                ffp_sum = Some(match ffp_sum {
                    Some(acc) => g.add(acc, l)?,
                    None => l,
                });
            }
        }

        let inv_b = 1.0 / batch.len() as f64;
        let l_pi = g.scale(pi_sum.expect("at least one sample"), inv_b)?;
        let l_ffp = match ffp_sum {
            Some(acc) => g.scale(acc, inv_b)?,
            None => g.leaf(Tensor::scalar(0.0))?,
        };
        let weighted = g.scale(l_ffp, wiring.effective_alpha)?;
        let loss = g.add(l_pi, weighted)?;

        let grads = g.backward(loss)?;
        Ok(TrainOutput {
            loss: g.value(loss).item(),
            loss_pi: g.value(l_pi).item(),
            loss_ffp: g.value(l_ffp).item(),
            mean_alpha_tac: if alpha_count > 0 {
                alpha_tac_sum / alpha_count as f64
            } else {
                crate::fusion::ALPHA_SENTINEL
            },
            grads: grads.into_params(),
        })
    }

    /// Two-stage inference: sample the future forces (when the mode has a
    /// force head), assemble the guide query, fuse, then sample an action
    /// chunk. Histories shorter than h are padded by repeating the oldest
    /// frame.
    pub fn predict(
        &self,
        history: &[Observation],
        rng: &mut impl Rng,
    ) -> Result<Prediction, PolicyError> {
        if history.is_empty() {
            return Err(PolicyError::EmptyHistory);
        }
        let mut padded: Vec<Observation> = Vec::with_capacity(self.cfg.history);
        for _ in history.len()..self.cfg.history {
            padded.push(history[0].clone());
        }
        padded.extend_from_slice(history);
        let history = &padded[padded.len() - self.cfg.history..];

        let wiring = self.cfg.wiring();
        let infer_sched = self.cfg.infer_schedule()?;

        let mut g = Graph::new();
        let latest = history.last().expect("padded history");
        let (e_pc, e_tac) = self.embed_latest(&mut g, latest)?;

        let mut predicted_force: Option<Vec<[f64; 3]>> = None;
        if let (Some(_), Some(den)) = (wiring.force_head, self.cfg.force_denoiser()) {
            let cond_f = g.concat_cols(&[e_pc, e_tac])?;
            let cond_value = g.value(cond_f).clone();
            let flat = p_sample_loop(&self.params, &den, &cond_value, &infer_sched, rng)?;
            predicted_force = Some(triples(&self.norm.denorm_force_flat(&flat)));
        }

        let (cond_a, weights) = self.build_cond(
            &mut g,
            e_pc,
            e_tac,
            history,
            predicted_force.as_deref().unwrap_or(&[]),
        )?;
        let cond_value = g.value(cond_a).clone();
        let flat = p_sample_loop(
            &self.params,
            &self.cfg.action_denoiser(),
            &cond_value,
            &infer_sched,
            rng,
        )?;
        let chunk = ActionChunk::from_flat(
            &self.norm.denorm_chunk(&flat),
            self.cfg.horizon,
            self.cfg.joints,
        )?;
        let chunk = sanitize_chunk(chunk);

        Ok(Prediction {
            chunk,
            weights: weights.unwrap_or_else(AttentionWeights::sentinel),
            predicted_force,
        })
    }

    pub fn save(
        &self,
        path: impl AsRef<Path>,
        opt: Option<&OptimizerState>,
    ) -> Result<(), PolicyError> {
        let mut records = self.params.map().clone();
        records.extend(self.norm.to_records());
        records.extend(cfg_to_records(&self.cfg));
        if let Some(opt) = opt {
            records.extend(opt.to_records());
        }
        write_checkpoint(path, &records)?;
        Ok(())
    }

    /// Load a checkpoint written by `save`. Optimizer records (if present)
    /// are returned alongside so training can resume.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, Tensor>), PolicyError> {
        let records = read_checkpoint(path)?;
        let cfg = cfg_from_records(&records)?;
        let norm = Normalizer::from_records(&records)?;
        let mut params = Params::new();
        let mut opt_records = BTreeMap::new();
        for (name, t) in &records {
            if name.starts_with("cfg.") || name.starts_with("norm.") {
                continue;
            }
            if name.starts_with("opt.") {
                opt_records.insert(name.clone(), t.clone());
                continue;
            }
            params.insert(name.clone(), t.clone());
        }
        let policy = Policy { cfg, params, norm };
        policy.check_params()?;
        Ok((policy, opt_records))
    }

    /// Verify that every parameter the current wiring needs exists with the
    /// right shape (catches truncated or mismatched checkpoints early).
    pub fn check_params(&self) -> Result<(), PolicyError> {
        let mut rng = crate::rngstream::stream_rng(0, "policy/check");
        let reference = Policy::init(self.cfg.clone(), self.norm.clone(), &mut rng)?;
        for (name, t) in reference.params.iter() {
            let got = self
                .params
                .get(name)
                .map_err(|_| PolicyError::MissingRecord(name.clone()))?;
            if got.shape() != t.shape() {
                return Err(PolicyError::BadRecord(
                    name.clone(),
                    format!("shape {:?}, expected {:?}", got.shape(), t.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Group a flat xyz sequence into triples.
pub fn triples(flat: &[f64]) -> Vec<[f64; 3]> {
    flat.chunks(3)
        .filter(|c| c.len() == 3)
        .map(|c| [c[0], c[1], c[2]])
        .collect()
}

/// Replace any degenerate sampled rotation with identity and re-encode the
/// rest through Gram-Schmidt, so emitted actions always decode cleanly.
fn sanitize_chunk(mut chunk: ActionChunk) -> ActionChunk {
    for a in &mut chunk.actions {
        match rot6d_to_matrix(&a.rotation6d) {
            Ok(m) => {
                a.rotation6d = matrix_to_rot6d(&m).expect("gram-schmidt output is a rotation");
            }
            Err(_) => {
                a.rotation6d = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
            }
        }
    }
    chunk
}

fn usizes_to_tensor(v: &[usize]) -> Tensor {
    let mut data = vec![v.len() as f64];
    data.extend(v.iter().map(|&x| x as f64));
    Tensor::vector(data)
}

fn tensor_to_usizes(name: &str, t: &Tensor) -> Result<Vec<usize>, PolicyError> {
    let data = t.data();
    if data.is_empty() {
        return Err(PolicyError::BadRecord(name.into(), "empty".into()));
    }
    let count = data[0] as usize;
    if data.len() != count + 1 {
        return Err(PolicyError::BadRecord(
            name.into(),
            format!("count {count} does not match length {}", data.len() - 1),
        ));
    }
    Ok(data[1..].iter().map(|&v| v as usize).collect())
}

fn cfg_to_records(cfg: &PolicyConfig) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    let mut put = |k: &str, v: f64| {
        out.insert(format!("cfg.{k}"), Tensor::scalar(v));
    };
    put("mode", cfg.mode.code());
    put("history", cfg.history as f64);
    put("horizon", cfg.horizon as f64);
    put("joints", cfg.joints as f64);
    put("sensors", cfg.sensors as f64);
    put("embed_dim", cfg.embed_dim as f64);
    put("heads", cfg.heads as f64);
    put("force_loss_weight", cfg.force_loss_weight);
    put("teacher_forced", cfg.teacher_forced as i64 as f64);
    put("teacher_noise", cfg.teacher_noise);
    put("concat_query", cfg.concat_query as i64 as f64);
    put("pc_feat", cfg.pc_feat as f64);
    put("tac_feat", cfg.tac_feat as f64);
    put("temb_dim", cfg.temb_dim as f64);
    put("t_train", cfg.t_train as f64);
    put("t_infer", cfg.t_infer as f64);
    put("beta_start", cfg.beta_start);
    put("beta_end", cfg.beta_end);
    put("n_max_points", cfg.n_max_points as f64);
    put("voxel", cfg.voxel);
    out.insert(
        "cfg.pc_point_widths".into(),
        usizes_to_tensor(&cfg.pc_point_widths),
    );
    out.insert(
        "cfg.tac_taxel_widths".into(),
        usizes_to_tensor(&cfg.tac_taxel_widths),
    );
    out.insert("cfg.force_hidden".into(), usizes_to_tensor(&cfg.force_hidden));
    out.insert(
        "cfg.force_head_hidden".into(),
        usizes_to_tensor(&cfg.force_head_hidden),
    );
    out.insert(
        "cfg.action_head_hidden".into(),
        usizes_to_tensor(&cfg.action_head_hidden),
    );
    out.insert(
        "cfg.workspace_min".into(),
        Tensor::vector(cfg.workspace.min.to_vec()),
    );
    out.insert(
        "cfg.workspace_max".into(),
        Tensor::vector(cfg.workspace.max.to_vec()),
    );
    out
}

fn cfg_from_records(records: &BTreeMap<String, Tensor>) -> Result<PolicyConfig, PolicyError> {
    let get = |k: &str| -> Result<&Tensor, PolicyError> {
        records
            .get(&format!("cfg.{k}"))
            .ok_or_else(|| PolicyError::MissingRecord(format!("cfg.{k}")))
    };
    let scalar = |k: &str| -> Result<f64, PolicyError> {
        let t = get(k)?;
        if t.len() != 1 {
            return Err(PolicyError::BadRecord(
                format!("cfg.{k}"),
                "expected scalar".into(),
            ));
        }
        Ok(t.data()[0])
    };
    let us = |k: &str| -> Result<usize, PolicyError> {
        let v = scalar(k)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(PolicyError::BadRecord(
                format!("cfg.{k}"),
                format!("{v} is not a non-negative integer"),
            ));
        }
        Ok(v as usize)
    };
    let list = |k: &str| -> Result<Vec<usize>, PolicyError> {
        tensor_to_usizes(&format!("cfg.{k}"), get(k)?)
    };
    let vec3 = |k: &str| -> Result<[f64; 3], PolicyError> {
        let t = get(k)?;
        if t.len() != 3 {
            return Err(PolicyError::BadRecord(
                format!("cfg.{k}"),
                "expected 3 entries".into(),
            ));
        }
        Ok([t.data()[0], t.data()[1], t.data()[2]])
    };

    let cfg = PolicyConfig {
        mode: FusionMode::from_code(scalar("mode")?)?,
        history: us("history")?,
        horizon: us("horizon")?,
        joints: us("joints")?,
        sensors: us("sensors")?,
        embed_dim: us("embed_dim")?,
        heads: us("heads")?,
        force_loss_weight: scalar("force_loss_weight")?,
        teacher_forced: scalar("teacher_forced")? != 0.0,
        teacher_noise: scalar("teacher_noise")?,
        concat_query: scalar("concat_query")? != 0.0,
        pc_point_widths: list("pc_point_widths")?,
        pc_feat: us("pc_feat")?,
        tac_taxel_widths: list("tac_taxel_widths")?,
        tac_feat: us("tac_feat")?,
        force_hidden: list("force_hidden")?,
        force_head_hidden: list("force_head_hidden")?,
        action_head_hidden: list("action_head_hidden")?,
        temb_dim: us("temb_dim")?,
        t_train: us("t_train")?,
        t_infer: us("t_infer")?,
        beta_start: scalar("beta_start")?,
        beta_end: scalar("beta_end")?,
        n_max_points: us("n_max_points")?,
        voxel: scalar("voxel")?,
        workspace: WorkspaceBox {
            min: vec3("workspace_min")?,
            max: vec3("workspace_max")?,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Knobs for the behaviour-cloning loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 3000,
            batch: 16,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub loss: f64,
    pub loss_pi: f64,
    pub loss_ffp: f64,
    pub mean_alpha_tac: f64,
}

/// In-progress training run: policy, optimizer, batch rng and step counter.
/// Splitting `run` into several calls consumes the rng identically to one
/// long call, so callers may snapshot checkpoints between segments without
/// perturbing the result.
pub struct Trainer {
    pub policy: Policy,
    pub opt: OptimizerState,
    rng: rand_chacha::ChaCha12Rng,
    pub step: usize,
}

impl Trainer {
    /// Fresh run: fit the normalizer on the samples, init parameters from
    /// the `train/init` stream, batch from the `train/loop` stream.
    pub fn new(
        samples: &[TrainSample],
        cfg: PolicyConfig,
        opts: &TrainOptions,
        root_seed: u64,
    ) -> Result<Self, PolicyError> {
        if samples.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        let action_dim = cfg.action_dim();
        let flat_actions: Vec<Vec<f64>> = samples
            .iter()
            .flat_map(|s| s.chunk.actions.iter().map(|a| a.flatten()))
            .collect();
        let norm = Normalizer::fit(
            action_dim,
            flat_actions.iter().map(|v| v.as_slice()),
            samples.iter().flat_map(|s| s.future_forces.iter().copied()),
        );
        let mut init_rng = crate::rngstream::stream_rng(root_seed, "train/init");
        let policy = Policy::init(cfg, norm, &mut init_rng)?;
        let opt = OptimizerState::new(&policy.params, AdamConfig::with_lr(opts.lr));
        let rng = crate::rngstream::stream_rng(root_seed, "train/loop");
        Ok(Trainer {
            policy,
            opt,
            rng,
            step: 0,
        })
    }

    /// Continue from a loaded checkpoint. The step counter picks up where
    /// the optimizer left off; batching moves to a stream keyed by that
    /// step so resumed segments never replay batches the original saw.
    pub fn resume(
        policy: Policy,
        opt_records: &BTreeMap<String, Tensor>,
        opts: &TrainOptions,
        root_seed: u64,
    ) -> Self {
        let opt = OptimizerState::from_records(
            &policy.params,
            AdamConfig::with_lr(opts.lr),
            opt_records,
        );
        let step = opt.step as usize;
        let rng = crate::rngstream::stream_rng(root_seed, &format!("train/loop/{step}"));
        Trainer {
            policy,
            opt,
            rng,
            step,
        }
    }

    pub fn run(
        &mut self,
        samples: &[TrainSample],
        batch_size: usize,
        steps: usize,
        mut log_sink: impl FnMut(&TrainLogRow),
    ) -> Result<(), PolicyError> {
        if samples.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        for _ in 0..steps {
            let batch: Vec<&TrainSample> = (0..batch_size)
                .map(|_| &samples[self.rng.gen_range(0..samples.len())])
                .collect();
            let out = self.policy.forward_train(&batch, &mut self.rng)?;
            self.opt.step(&mut self.policy.params, &out.grads)?;
            log_sink(&TrainLogRow {
                step: self.step,
                loss: out.loss,
                loss_pi: out.loss_pi,
                loss_ffp: out.loss_ffp,
                mean_alpha_tac: out.mean_alpha_tac,
            });
            self.step += 1;
        }
        Ok(())
    }
}

/// Behaviour cloning over pre-cut windows. Init, batch order and every
/// stochastic draw come from streams of `root_seed`, so two runs with the
/// same inputs produce bit-identical policies.
pub fn train_policy(
    samples: &[TrainSample],
    cfg: PolicyConfig,
    opts: &TrainOptions,
    root_seed: u64,
    log_sink: impl FnMut(&TrainLogRow),
) -> Result<Policy, PolicyError> {
    let mut trainer = Trainer::new(samples, cfg, opts, root_seed)?;
    trainer.run(samples, opts.batch, opts.steps, log_sink)?;
    Ok(trainer.policy)
}
