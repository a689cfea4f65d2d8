//! Consistency-driven gating and weighted pyramid fusion.

use super::Model;
use crate::error::{shape_err, CloeError, Result};
use crate::graph::{Graph, Var};
use crate::param::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

/// How fusion weights are produced. `Gated` is the trained path; the other
/// two are the ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// Learned gate on the consistency score pair.
    Gated,
    /// Softmax of the raw `u + v` scores, bypassing the gate network.
    RawScores,
    /// Fixed uniform weights over the available modalities.
    Uniform,
}

/// Availability-masked simplex weights over all M modalities: graph nodes
/// for the available ones (zero entries are structural, not computed) plus a
/// numeric snapshot for logging.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    vars: Vec<Option<Var>>,
    values: Vec<f64>,
}

impl FusionWeights {
    pub fn modalities(&self) -> usize {
        self.vars.len()
    }

    pub fn var(&self, m: usize) -> Option<Var> {
        self.vars[m]
    }

    /// Numeric weight per modality; exactly 0.0 for unavailable ones.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl Model {
    /// Reliability logit for one modality's `(u, v)` score pair. The scores
    /// enter as constants: the gate's parameters receive gradient through
    /// the fused segmentation loss, the score computation does not.
    pub fn gate_logit<T: Real>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        u: f64,
        v: f64,
    ) -> Result<Var> {
        let x = g.constant(Tensor::from_f64_slice(&[2], &[u, v])?);
        let w1 = g.leaf(params, self.gate.w1);
        let b1 = g.leaf(params, self.gate.b1);
        let w2 = g.leaf(params, self.gate.w2);
        let b2 = g.leaf(params, self.gate.b2);
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        g.linear(h, w2, b2)
    }
}

/// Softmax over the available modalities' logits; unavailable entries are
/// exactly zero. Stabilized by subtracting the (detached) maximum logit,
/// which leaves both values and gradients unchanged.
pub fn masked_softmax<T: Real>(
    g: &mut Graph<T>,
    logits: &[(usize, Var)],
    modalities: usize,
) -> Result<FusionWeights> {
    if logits.is_empty() {
        return Err(CloeError::EmptyMask);
    }
    for &(m, l) in logits {
        if m >= modalities {
            return Err(shape_err(format!("masked_softmax: modality {m} out of range")));
        }
        if g.numel(l) != 1 {
            return Err(shape_err("masked_softmax: logits must be scalars"));
        }
        if !g.value(l).is_finite() {
            return Err(CloeError::Numerical(format!("masked_softmax: non-finite logit for modality {m}")));
        }
    }
    let max_logit =
        logits.iter().map(|&(_, l)| g.value(l).to_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<(usize, Var)> = logits
        .iter()
        .map(|&(m, l)| {
            let shifted = g.add_const(l, -max_logit);
            (m, g.exp(shifted))
        })
        .collect();
    let mut denom = exps[0].1;
    for &(_, e) in &exps[1..] {
        denom = g.add(denom, e)?;
    }
    let mut vars = vec![None; modalities];
    let mut values = vec![0.0; modalities];
    for &(m, e) in &exps {
        let w = g.div(e, denom)?;
        vars[m] = Some(w);
        values[m] = g.value(w).to_f64();
    }
    Ok(FusionWeights { vars, values })
}

/// Fixed `1/|A|` weights (the "without weighted fusion" arm).
pub fn uniform_weights<T: Real>(
    g: &mut Graph<T>,
    avail: &[usize],
    modalities: usize,
) -> Result<FusionWeights> {
    if avail.is_empty() {
        return Err(CloeError::EmptyMask);
    }
    let w = 1.0 / avail.len() as f64;
    let mut vars = vec![None; modalities];
    let mut values = vec![0.0; modalities];
    for &m in avail {
        vars[m] = Some(g.scalar(w));
        values[m] = w;
    }
    Ok(FusionWeights { vars, values })
}

/// Weighted sum of the available pyramids, level by level:
/// `f_l = sum_m w_m * f_l^(m)`. The scalar weight broadcasts over the whole
/// feature volume; unavailable modalities contribute nothing.
pub fn fuse_pyramids<T: Real>(
    g: &mut Graph<T>,
    pyramids: &[&[Var]],
    avail: &[usize],
    weights: &FusionWeights,
) -> Result<Vec<Var>> {
    if pyramids.len() != avail.len() || pyramids.is_empty() {
        return Err(shape_err("fuse_pyramids: one pyramid per available modality required"));
    }
    let levels = pyramids[0].len();
    for p in pyramids {
        if p.len() != levels {
            return Err(shape_err("fuse_pyramids: pyramid depth mismatch"));
        }
    }
    let mut fused = Vec::with_capacity(levels);
    for l in 0..levels {
        let shape0 = g.shape(pyramids[0][l]).to_vec();
        let mut acc: Option<Var> = None;
        for (i, &m) in avail.iter().enumerate() {
            if g.shape(pyramids[i][l]) != shape0 {
                return Err(shape_err(format!("fuse_pyramids: level {l} shape mismatch")));
            }
            let w = weights
                .var(m)
                .ok_or_else(|| shape_err(format!("fuse_pyramids: no weight for modality {m}")))?;
            let term = g.mul(pyramids[i][l], w)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        fused.push(acc.expect("avail nonempty"));
    }
    Ok(fused)
}
