//! Force-guided attention fusion. The guide-force embedding supplies the
//! query; cloud and tactile embeddings are the two tokens providing keys
//! and values. Softmax over the two scores yields per-modality weights and
//! the fused feature is their convex combination of values.
//!
//! Also hosts the attention trace format written during evaluation.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::numerics::{Graph, MlpSpec, NodeId, NumericsError, Params};
use crate::sensing::NetForceSeries;

/// Guide-force vector: observed net-force history followed by the predicted
/// (or reconstructed) future slice. Kept in newtons; normalisation happens
/// where training statistics live.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideForce {
    pub observed: Vec<[f64; 3]>,
    pub predicted: Vec<[f64; 3]>,
}

impl GuideForce {
    pub fn flat(&self) -> Vec<f64> {
        self.observed
            .iter()
            .chain(self.predicted.iter())
            .flatten()
            .copied()
            .collect()
    }

    pub fn len(&self) -> usize {
        3 * (self.observed.len() + self.predicted.len())
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty() && self.predicted.is_empty()
    }
}

/// Concatenate observed history with a predicted future force sequence.
/// The predicted slice may be empty for variants that only look backwards.
pub fn build_guide_force(observed: &NetForceSeries, predicted: &[[f64; 3]]) -> GuideForce {
    GuideForce {
        observed: observed.forces.clone(),
        predicted: predicted.to_vec(),
    }
}

/// Scalar attention weights over the two modality tokens. `SENTINEL` marks
/// records from variants that never compute attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionWeights {
    pub alpha_pc: f64,
    pub alpha_tac: f64,
}

pub const ALPHA_SENTINEL: f64 = -1.0;

impl AttentionWeights {
    pub fn sentinel() -> Self {
        AttentionWeights {
            alpha_pc: ALPHA_SENTINEL,
            alpha_tac: ALPHA_SENTINEL,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        self.alpha_pc == ALPHA_SENTINEL
    }
}

/// Fused feature node plus the attention weights that produced it
/// (averaged over heads when there are several).
#[derive(Debug, Clone, Copy)]
pub struct FusedFeature {
    pub node: NodeId,
    pub weights: AttentionWeights,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionConfig {
    pub embed_dim: usize,
    pub heads: usize,
}

impl FusionConfig {
    pub fn head_dim(&self) -> usize {
        assert!(
            self.heads > 0 && self.embed_dim % self.heads == 0,
            "embed_dim {} must divide evenly into {} heads",
            self.embed_dim,
            self.heads
        );
        self.embed_dim / self.heads
    }

    pub fn init_params(&self, params: &mut Params, rng: &mut impl Rng) {
        let dk = self.head_dim();
        for h in 0..self.heads {
            for mat in ["wq", "wk", "wv"] {
                // Reuse the MLP initialiser for a single weight matrix; the
                // zero bias it creates is unused and pruned right after.
                let spec = MlpSpec::new(format!("fgaf.h{h}.{mat}"), vec![self.embed_dim, dk]);
                spec.init(params, rng);
            }
        }
        let names: Vec<String> = params
            .names()
            .filter(|n| n.starts_with("fgaf.") && n.ends_with(".b"))
            .cloned()
            .collect();
        let mut map = params.clone().into_map();
        for n in names {
            map.remove(&n);
        }
        *params = Params::from_map(map);
    }
}

fn head_weight(g: &mut Graph, params: &Params, name: &str) -> Result<NodeId, NumericsError> {
    g.param(params, name)
}

fn fgaf_head(
    g: &mut Graph,
    params: &Params,
    head: usize,
    head_dim: usize,
    query: NodeId,
    e_pc: NodeId,
    e_tac: NodeId,
) -> Result<(NodeId, AttentionWeights), NumericsError> {
    let wq = head_weight(g, params, &format!("fgaf.h{head}.wq.0.w"))?;
    let wk = head_weight(g, params, &format!("fgaf.h{head}.wk.0.w"))?;
    let wv = head_weight(g, params, &format!("fgaf.h{head}.wv.0.w"))?;

    let q = g.matmul(query, wq)?;
    let tokens = g.stack_rows(&[e_pc, e_tac])?;
    let k = g.matmul(tokens, wk)?;
    let v = g.matmul(tokens, wv)?;

    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt())?;
    let alpha = g.softmax_rows(scores)?;
    let fused = g.matmul(alpha, v)?;

    let a = g.value(alpha).data();
    Ok((
        fused,
        AttentionWeights {
            alpha_pc: a[0],
            alpha_tac: a[1],
        },
    ))
}

/// Single-head force-guided attention over the two modality tokens.
pub fn fgaf(
    g: &mut Graph,
    params: &Params,
    cfg: &FusionConfig,
    query: NodeId,
    e_pc: NodeId,
    e_tac: NodeId,
) -> Result<FusedFeature, NumericsError> {
    let (node, weights) = fgaf_head(g, params, 0, cfg.embed_dim, query, e_pc, e_tac)?;
    Ok(FusedFeature { node, weights })
}

/// Multi-head variant: independent per-head projections, outputs
/// concatenated back to the embedding width, logged weights averaged over
/// heads. With one head this is exactly `fgaf`.
pub fn fgaf_multihead(
    g: &mut Graph,
    params: &Params,
    cfg: &FusionConfig,
    query: NodeId,
    e_pc: NodeId,
    e_tac: NodeId,
) -> Result<FusedFeature, NumericsError> {
    let dk = cfg.head_dim();
    let mut parts = Vec::with_capacity(cfg.heads);
    let mut sum_pc = 0.0;
    let mut sum_tac = 0.0;
    for h in 0..cfg.heads {
        let (node, w) = fgaf_head(g, params, h, dk, query, e_pc, e_tac)?;
        parts.push(node);
        sum_pc += w.alpha_pc;
        sum_tac += w.alpha_tac;
    }
    let node = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)?
    };
    Ok(FusedFeature {
        node,
        weights: AttentionWeights {
            alpha_pc: sum_pc / cfg.heads as f64,
            alpha_tac: sum_tac / cfg.heads as f64,
        },
    })
}

/// One evaluation-time attention sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: usize,
    pub alpha_pc: f64,
    pub alpha_tac: f64,
    pub f_obs_norm: f64,
    pub phase: String,
}

pub const TRACE_HEADER: &str = "step,alpha_pc,alpha_tac,f_obs_norm,phase";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace header must be \"{TRACE_HEADER}\"")]
    BadHeader,
    #[error("trace line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(32 * (records.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.alpha_pc, r.alpha_tac, r.f_obs_norm, r.phase
        ));
    }
    out
}

pub fn write_trace(path: impl AsRef<Path>, records: &[TraceRecord]) -> Result<(), TraceError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(format_trace(records).as_bytes())?;
    Ok(())
}

fn parse_alpha(s: &str, line: usize, what: &str) -> Result<f64, TraceError> {
    let v: f64 = s.parse().map_err(|_| TraceError::Malformed {
        line,
        msg: format!("{what} is not a number: {s:?}"),
    })?;
    let in_range = (0.0..=1.0).contains(&v) || v == ALPHA_SENTINEL;
    if !in_range {
        return Err(TraceError::Malformed {
            line,
            msg: format!("{what} {v} outside [0,1] and not the sentinel"),
        });
    }
    Ok(v)
}

/// Parse a trace written by `format_trace`. Strict: exact header, five
/// fields per row, finite in-range numbers, short alphanumeric phase label.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(TraceError::BadHeader);
    }
    let mut out = Vec::new();
    for (i, raw) in lines.enumerate() {
        let line = i + 2;
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 5 {
            return Err(TraceError::Malformed {
                line,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let step: usize = fields[0].parse().map_err(|_| TraceError::Malformed {
            line,
            msg: format!("bad step {:?}", fields[0]),
        })?;
        let alpha_pc = parse_alpha(fields[1], line, "alpha_pc")?;
        let alpha_tac = parse_alpha(fields[2], line, "alpha_tac")?;
        let f_obs_norm: f64 = fields[3].parse().map_err(|_| TraceError::Malformed {
            line,
            msg: format!("bad f_obs_norm {:?}", fields[3]),
        })?;
        if !f_obs_norm.is_finite() || f_obs_norm < 0.0 {
            return Err(TraceError::Malformed {
                line,
                msg: format!("f_obs_norm {f_obs_norm} must be finite and non-negative"),
            });
        }
        let phase = fields[4];
        let phase_ok = !phase.is_empty()
            && phase.len() <= 32
            && phase.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if !phase_ok {
            return Err(TraceError::Malformed {
                line,
                msg: format!("bad phase label {phase:?}"),
            });
        }
        out.push(TraceRecord {
            step,
            alpha_pc,
            alpha_tac,
            f_obs_norm,
            phase: phase.to_string(),
        });
    }
    Ok(out)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, TraceError> {
    let text = std::fs::read_to_string(path)?;
    parse_trace(&text)
}
