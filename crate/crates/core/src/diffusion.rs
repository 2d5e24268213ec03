//! Denoising diffusion over flat vectors: linear beta schedule, forward
//! noising, epsilon-prediction training loss and ancestral sampling. An
//! evenly strided sub-schedule supports cheap inference while keeping the
//! original timestep indices for the sinusoidal embeddings.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numerics::{Graph, MlpSpec, NodeId, NumericsError, Params, Tensor};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("bad schedule: {0}")]
    BadSchedule(String),
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("length mismatch: x0 has {x0}, eps has {eps}")]
    LengthMismatch { x0: usize, eps: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Beta schedule with cached alpha products. `timesteps` holds the original
/// 1-based indices each entry corresponds to; for a freshly built schedule
/// that is just 1..=T, for a strided one the surviving indices.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alphas_cum: Vec<f64>,
    pub timesteps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn linear(t: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if t == 0 {
            return Err(DiffusionError::BadSchedule("zero steps".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::BadSchedule(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = if t == 1 {
            vec![beta_start]
        } else {
            (0..t)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
                .collect()
        };
        Ok(Self::from_betas(betas, (1..=t).collect()))
    }

    fn from_betas(betas: Vec<f64>, timesteps: Vec<usize>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alphas_cum = Vec::with_capacity(alphas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alphas_cum.push(prod);
        }
        NoiseSchedule {
            betas,
            alphas,
            alphas_cum,
            timesteps,
        }
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Signal retention at 1-based step t.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        if t == 0 || t > self.len() {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                max: self.len(),
            });
        }
        Ok(self.alphas_cum[t - 1])
    }

    /// Evenly strided sub-schedule with `k` steps, always keeping the final
    /// step. Effective betas are rebuilt from alpha-bar ratios so the
    /// forward process marginals at the surviving steps are unchanged.
    pub fn strided(&self, k: usize) -> Result<Self, DiffusionError> {
        if k == 0 || k > self.len() {
            return Err(DiffusionError::BadSchedule(format!(
                "strided steps {k} out of range 1..={}",
                self.len()
            )));
        }
        let t = self.len();
        let picks: Vec<usize> = (1..=k).map(|j| (j * t).div_ceil(k)).collect();
        let mut betas = Vec::with_capacity(k);
        let mut prev_bar = 1.0;
        let mut timesteps = Vec::with_capacity(k);
        for &idx in &picks {
            let bar = self.alphas_cum[idx - 1];
            betas.push(1.0 - bar / prev_bar);
            prev_bar = bar;
            timesteps.push(self.timesteps[idx - 1]);
        }
        Ok(Self::from_betas(betas, timesteps))
    }
}

/// Forward noising: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn q_sample(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    if x0.len() != eps.len() {
        return Err(DiffusionError::LengthMismatch {
            x0: x0.len(),
            eps: eps.len(),
        });
    }
    let abar = sched.alpha_bar(t)?;
    let (sa, sn) = (abar.sqrt(), (1.0 - abar).sqrt());
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| sa * x + sn * e)
        .collect())
}

/// Sinusoidal embedding of a (1-based) timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let x = t as f64 * freq;
        out.push(x.sin());
        out.push(x.cos());
    }
    out
}

/// Conditional epsilon-prediction network: an MLP over
/// [noisy sample | conditioning feature | timestep embedding].
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub prefix: String,
    pub target_dim: usize,
    pub cond_dim: usize,
    pub temb_dim: usize,
    pub hidden: Vec<usize>,
}

impl Denoiser {
    fn spec(&self) -> MlpSpec {
        let mut dims = vec![self.target_dim + self.cond_dim + self.temb_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.target_dim);
        MlpSpec::new(self.prefix.clone(), dims)
    }

    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        self.spec().init(params, rng);
    }

    pub fn param_names(&self) -> Vec<String> {
        self.spec().param_names()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        noisy: NodeId,
        t: usize,
        cond: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let temb = g.leaf(Tensor::row(timestep_embedding(t, self.temb_dim)))?;
        let cat = g.concat_cols(&[noisy, cond, temb])?;
        self.spec().forward(g, params, cat)
    }
}

/// Training loss at a sampled timestep: draw t and eps, noise x0, predict
/// eps from (x_t, cond, t) and return the mean squared error node.
/// Gradients flow into the conditioning feature and everything behind it.
pub fn epsilon_loss(
    g: &mut Graph,
    params: &Params,
    den: &Denoiser,
    x0: &[f64],
    cond: NodeId,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<(NodeId, usize), DiffusionError> {
    let t = rng.gen_range(1..=sched.len());
    let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let loss = epsilon_loss_at(g, params, den, x0, cond, sched, t, &eps)?;
    Ok((loss, t))
}

/// Deterministic flavour of `epsilon_loss` with caller-chosen t and eps,
/// used by gradient checks.
#[allow(clippy::too_many_arguments)]
pub fn epsilon_loss_at(
    g: &mut Graph,
    params: &Params,
    den: &Denoiser,
    x0: &[f64],
    cond: NodeId,
    sched: &NoiseSchedule,
    t: usize,
    eps: &[f64],
) -> Result<NodeId, DiffusionError> {
    let xt = q_sample(x0, t, eps, sched)?;
    let xt = g.leaf(Tensor::row(xt))?;
    let pred = den.forward(g, params, xt, t, cond)?;
    let eps_leaf = g.leaf(Tensor::row(eps.to_vec()))?;
    let diff = g.sub(pred, eps_leaf)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq)?)
}

/// Ancestral sampling driven by an arbitrary epsilon predictor. The
/// predictor receives the current sample and the original timestep index.
pub fn p_sample_loop_with<F>(
    mut eps_fn: F,
    dim: usize,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, DiffusionError>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>, DiffusionError>,
{
    if sched.is_empty() {
        return Err(DiffusionError::BadSchedule("empty schedule".into()));
    }
    let mut x: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    for j in (1..=sched.len()).rev() {
        let abar = sched.alphas_cum[j - 1];
        let alpha = sched.alphas[j - 1];
        let beta = sched.betas[j - 1];
        let eps_hat = eps_fn(&x, sched.timesteps[j - 1])?;
        if eps_hat.len() != dim {
            return Err(DiffusionError::LengthMismatch {
                x0: dim,
                eps: eps_hat.len(),
            });
        }
        let c = beta / (1.0 - abar).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        for (xi, ei) in x.iter_mut().zip(&eps_hat) {
            *xi = inv_sqrt_alpha * (*xi - c * ei);
        }
        if j > 1 {
            let abar_prev = sched.alphas_cum[j - 2];
            let sigma = (beta * (1.0 - abar_prev) / (1.0 - abar)).sqrt();
            for xi in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *xi += sigma * z;
            }
        }
    }
    Ok(x)
}

/// Ancestral sampling through a trained denoiser. The conditioning feature
/// is a fixed tensor here because each reverse step builds a fresh forward
/// graph; no gradients are involved at sampling time.
pub fn p_sample_loop(
    params: &Params,
    den: &Denoiser,
    cond: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, DiffusionError> {
    p_sample_loop_with(
        |x, t| {
            let mut g = Graph::new();
            let xt = g.leaf(Tensor::row(x.to_vec()))?;
            let c = g.leaf(cond.clone())?;
            let pred = den.forward(&mut g, params, xt, t, c)?;
            Ok(g.value(pred).data().to_vec())
        },
        den.target_dim,
        sched,
        rng,
    )
}
