//! Modality encoders: a PointNet-style cloud encoder, a per-taxel tactile
//! encoder, and projection heads that map every modality (including the
//! guide-force vector) into the shared embedding width used by fusion.

use rand::Rng;

use crate::numerics::{Graph, MlpSpec, NodeId, NumericsError, Params, Tensor};
use crate::sensing::{PointCloud, TactileFrame, WorkspaceBox};

/// Per-taxel input width: force xyz, pose rot6d, pose xyz.
pub const TAXEL_FEATURES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Cloud,
    Tactile,
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    /// Shared embedding width d; queries, keys and fused features use it.
    pub embed_dim: usize,
    /// Metric extent of the scene. Positions (cloud points, taxel poses)
    /// are mapped into this box's unit cube before any network sees them;
    /// raw meters are all small positive numbers on a desk, which leaves
    /// tanh features nearly constant across the workspace.
    pub workspace: WorkspaceBox,
    /// Per-point MLP widths after the xyz input.
    pub pc_point_widths: Vec<usize>,
    /// Cloud feature width after pooling and the head MLP.
    pub pc_feat: usize,
    /// Per-taxel MLP widths after the 12-dim input.
    pub tac_taxel_widths: Vec<usize>,
    /// Tactile feature width after per-sensor pooling and the head MLP.
    pub tac_feat: usize,
    pub sensors: usize,
    /// Flattened guide-force length fed to the force projection.
    pub force_input_len: usize,
    pub force_hidden: Vec<usize>,
}

impl EncoderConfig {
    /// Map a metric position into the workspace unit cube, [-1, 1] per
    /// axis. Degenerate axes collapse to zero instead of dividing by it.
    fn to_unit(&self, p: &[f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            let half = 0.5 * (self.workspace.max[i] - self.workspace.min[i]);
            let mid = 0.5 * (self.workspace.max[i] + self.workspace.min[i]);
            if half > 1e-12 {
                out[i] = (p[i] - mid) / half;
            }
        }
        out
    }

    fn pc_point(&self) -> MlpSpec {
        let mut dims = vec![3];
        dims.extend_from_slice(&self.pc_point_widths);
        MlpSpec::new("enc.pc.point", dims)
    }

    fn pc_head(&self) -> MlpSpec {
        // Input is the max pool and the mean pool side by side.
        MlpSpec::new(
            "enc.pc.head",
            vec![2 * *self.pc_point_widths.last().unwrap(), self.pc_feat],
        )
    }

    fn tac_taxel(&self) -> MlpSpec {
        let mut dims = vec![TAXEL_FEATURES];
        dims.extend_from_slice(&self.tac_taxel_widths);
        MlpSpec::new("enc.tac.taxel", dims)
    }

    fn tac_head(&self) -> MlpSpec {
        MlpSpec::new(
            "enc.tac.head",
            vec![
                self.sensors * self.tac_taxel_widths.last().unwrap(),
                self.tac_feat,
            ],
        )
    }

    fn proj(&self, which: Modality) -> MlpSpec {
        match which {
            Modality::Cloud => MlpSpec::new("proj.pc", vec![self.pc_feat, self.embed_dim]),
            Modality::Tactile => MlpSpec::new("proj.tac", vec![self.tac_feat, self.embed_dim]),
        }
    }

    fn proj_force(&self) -> MlpSpec {
        let mut dims = vec![self.force_input_len];
        dims.extend_from_slice(&self.force_hidden);
        dims.push(self.embed_dim);
        MlpSpec::new("proj.force", dims)
    }

    /// Initialise every encoder/projection parameter this config owns.
    /// `with_force` is off for variants that never build a force query.
    pub fn init_params(&self, params: &mut Params, rng: &mut impl Rng, with_force: bool) {
        self.pc_point().init(params, rng);
        self.pc_head().init(params, rng);
        self.tac_taxel().init(params, rng);
        self.tac_head().init(params, rng);
        self.proj(Modality::Cloud).init(params, rng);
        self.proj(Modality::Tactile).init(params, rng);
        if with_force {
            self.proj_force().init(params, rng);
        }
    }
}

/// Shared per-point MLP, then coordinate-wise max and mean pools over points
/// concatenated, then a head MLP. Both pools are permutation invariant. Max
/// alone hides where the bulk of the points sits: one extreme point can pin
/// a channel while the rest of the scene moves. The mean keeps a smooth
/// centroid readout alongside it.
pub fn encode_pointcloud(
    g: &mut Graph,
    params: &Params,
    cfg: &EncoderConfig,
    cloud: &PointCloud,
) -> Result<NodeId, NumericsError> {
    let n = cloud.len();
    let mut data = Vec::with_capacity(n * 3);
    for p in &cloud.points {
        data.extend_from_slice(&cfg.to_unit(p));
    }
    let x = g.leaf(Tensor::matrix(n, 3, data)?)?;
    let per_point = cfg.pc_point().forward(g, params, x)?;
    let per_point = g.tanh(per_point)?;
    let mx = g.col_max(per_point)?;
    let mn = g.col_mean(per_point)?;
    let pooled = g.concat_cols(&[mx, mn])?;
    cfg.pc_head().forward(g, params, pooled)
}

/// Shared per-taxel MLP, mean pool per sensor, sensor features concatenated
/// in pad order, then a head MLP. Sensor order is part of the signal (pad A
/// vs pad B), so no pooling across sensors.
pub fn encode_tactile(
    g: &mut Graph,
    params: &Params,
    cfg: &EncoderConfig,
    frame: &TactileFrame,
) -> Result<NodeId, NumericsError> {
    if frame.sensors.len() != cfg.sensors {
        return Err(NumericsError::ShapeMismatch {
            op: "encode_tactile",
            expected: format!("{} sensors", cfg.sensors),
            got: format!("{} sensors", frame.sensors.len()),
        });
    }
    let spec = cfg.tac_taxel();
    let mut pooled = Vec::with_capacity(frame.sensors.len());
    for sensor in &frame.sensors {
        let mut data = Vec::with_capacity(sensor.taxels.len() * TAXEL_FEATURES);
        for t in &sensor.taxels {
            data.extend_from_slice(&t.force);
            data.extend_from_slice(&t.rot6d);
            data.extend_from_slice(&cfg.to_unit(&t.position));
        }
        let x = g.leaf(Tensor::matrix(sensor.taxels.len(), TAXEL_FEATURES, data)?)?;
        let h = spec.forward(g, params, x)?;
        let h = g.tanh(h)?;
        pooled.push(g.col_mean(h)?);
    }
    let cat = g.concat_cols(&pooled)?;
    cfg.tac_head().forward(g, params, cat)
}

/// Map a raw modality feature into the shared embedding width.
pub fn project(
    g: &mut Graph,
    params: &Params,
    cfg: &EncoderConfig,
    which: Modality,
    feat: NodeId,
) -> Result<NodeId, NumericsError> {
    cfg.proj(which).forward(g, params, feat)
}

/// Project a flattened guide-force vector into the shared embedding width.
/// The caller normalises forces first; this is plain network plumbing.
pub fn project_force(
    g: &mut Graph,
    params: &Params,
    cfg: &EncoderConfig,
    guide: &[f64],
) -> Result<NodeId, NumericsError> {
    if guide.len() != cfg.force_input_len {
        return Err(NumericsError::ShapeMismatch {
            op: "project_force",
            expected: format!("guide force of length {}", cfg.force_input_len),
            got: format!("length {}", guide.len()),
        });
    }
    let x = g.leaf(Tensor::row(guide.to_vec()))?;
    cfg.proj_force().forward(g, params, x)
}
