//! Expert agreement: cosine similarity, the global and region-focused
//! consistency losses, and per-expert consistency scores.
//!
//! Both losses average `1 - S` over all unordered pairs of available
//! experts, where `S` is the cosine similarity of the flattened prediction
//! volumes — globally for the first loss, reweighted by the region map
//! (broadcast across classes) for the second. A lone expert has no pairs:
//! the losses are vacuously zero and the expert counts as fully
//! self-consistent, which makes gating degenerate to weight 1 as it must.

use crate::error::{shape_err, CloeError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;

pub const DEFAULT_EPS: f64 = 1e-8;

/// Cosine similarity `u·v / (|u||v| + eps)` as a differentiable scalar node.
/// Strictly inside (-1, 1) for eps > 0; a zero vector yields 0, not NaN.
pub fn cosine_sim<T: Real>(g: &mut Graph<T>, u: Var, v: Var, eps: f64) -> Result<Var> {
    if g.shape(u) != g.shape(v) {
        return Err(shape_err(format!(
            "cosine_sim: {:?} vs {:?}",
            g.shape(u),
            g.shape(v)
        )));
    }
    if eps <= 0.0 {
        return Err(CloeError::Config("cosine_sim: eps must be positive".into()));
    }
    let nu = g.l2_norm(u)?;
    let nv = g.l2_norm(v)?;
    let d = g.dot(u, v)?;
    let nn = g.mul(nu, nv)?;
    let denom = g.add_const(nn, eps);
    g.div(d, denom)
}

/// Detached per-expert agreement: mean cosine similarity with every other
/// available expert, globally (`u`) and on region-weighted predictions (`v`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertScore {
    pub modality: usize,
    pub u: f64,
    pub v: f64,
}

/// All unordered pairs (by index into `preds`) with their similarity nodes.
struct PairSims {
    pairs: Vec<(usize, usize, Var)>,
}

fn pairwise_sims<T: Real>(
    g: &mut Graph<T>,
    preds: &[(usize, Var)],
    eps: f64,
) -> Result<PairSims> {
    let flats: Vec<Var> = preds.iter().map(|&(_, p)| g.flatten(p)).collect();
    let norms: Vec<Var> =
        flats.iter().map(|&f| g.l2_norm(f)).collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for i in 0..flats.len() {
        for j in (i + 1)..flats.len() {
            if g.shape(flats[i]) != g.shape(flats[j]) {
                return Err(shape_err("consistency: prediction shapes differ"));
            }
            let d = g.dot(flats[i], flats[j])?;
            let nn = g.mul(norms[i], norms[j])?;
            let denom = g.add_const(nn, eps);
            let s = g.div(d, denom)?;
            pairs.push((i, j, s));
        }
    }
    Ok(PairSims { pairs })
}

/// Mean of `1 - S` over the pair set; zero (vacuous) when |A| < 2.
fn disagreement<T: Real>(g: &mut Graph<T>, sims: &PairSims) -> (Var, bool) {
    if sims.pairs.is_empty() {
        return (g.scalar(0.0), true);
    }
    let mut acc = sims.pairs[0].2;
    for &(_, _, s) in &sims.pairs[1..] {
        acc = g.add(acc, s).expect("scalar nodes");
    }
    let mean = g.scale(acc, 1.0 / sims.pairs.len() as f64);
    let neg = g.neg(mean);
    (g.add_const(neg, 1.0), false)
}

/// Global consistency loss over available expert predictions. Returns the
/// loss node and whether it is vacuous (|A| < 2).
pub fn mec_loss<T: Real>(
    g: &mut Graph<T>,
    preds: &[(usize, Var)],
    eps: f64,
) -> Result<(Var, bool)> {
    if preds.is_empty() {
        return Err(CloeError::EmptyMask);
    }
    let sims = pairwise_sims(g, preds, eps)?;
    Ok(disagreement(g, &sims))
}

/// Region-weighted predictions: the region map broadcast across classes.
fn region_weighted<T: Real>(
    g: &mut Graph<T>,
    preds: &[(usize, Var)],
    region: Var,
) -> Result<Vec<(usize, Var)>> {
    preds
        .iter()
        .map(|&(m, p)| Ok((m, g.mul_channel_broadcast(p, region)?)))
        .collect()
}

/// Region-focused consistency loss: the same pair statistic on predictions
/// weighted voxelwise by the region map.
pub fn rec_loss<T: Real>(
    g: &mut Graph<T>,
    preds: &[(usize, Var)],
    region: Var,
    eps: f64,
) -> Result<(Var, bool)> {
    if preds.is_empty() {
        return Err(CloeError::EmptyMask);
    }
    let weighted = region_weighted(g, preds, region)?;
    let sims = pairwise_sims(g, &weighted, eps)?;
    Ok(disagreement(g, &sims))
}

fn scores_from_sims(
    preds: &[(usize, Var)],
    global: &[(usize, usize, f64)],
    regional: &[(usize, usize, f64)],
) -> Vec<ExpertScore> {
    let n = preds.len();
    if n == 1 {
        return vec![ExpertScore { modality: preds[0].0, u: 1.0, v: 1.0 }];
    }
    let mean_for = |sims: &[(usize, usize, f64)], i: usize| -> f64 {
        let vals: Vec<f64> = sims
            .iter()
            .filter(|&&(a, b, _)| a == i || b == i)
            .map(|&(_, _, s)| s)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    (0..n)
        .map(|i| ExpertScore {
            modality: preds[i].0,
            u: mean_for(global, i),
            v: mean_for(regional, i),
        })
        .collect()
}

/// Per-expert consistency scores, detached from the graph. A lone expert
/// scores (1, 1).
pub fn expert_scores<T: Real>(
    g: &mut Graph<T>,
    preds: &[(usize, Var)],
    region: Var,
    eps: f64,
) -> Result<Vec<ExpertScore>> {
    if preds.is_empty() {
        return Err(CloeError::EmptyMask);
    }
    let global = pairwise_sims(g, preds, eps)?;
    let weighted = region_weighted(g, preds, region)?;
    let regional = pairwise_sims(g, &weighted, eps)?;
    let gv: Vec<_> = global.pairs.iter().map(|&(a, b, s)| (a, b, g.value(s).to_f64())).collect();
    let rv: Vec<_> =
        regional.pairs.iter().map(|&(a, b, s)| (a, b, g.value(s).to_f64())).collect();
    Ok(scores_from_sims(preds, &gv, &rv))
}

/// Combined measurement sharing one set of pairwise similarities: both
/// losses as graph nodes plus detached scores.
pub struct Measurement {
    pub mec: Var,
    pub rec: Var,
    pub vacuous: bool,
    pub scores: Vec<ExpertScore>,
}

pub fn measure<T: Real>(
    g: &mut Graph<T>,
    preds: &[(usize, Var)],
    region: Var,
    eps: f64,
) -> Result<Measurement> {
    if preds.is_empty() {
        return Err(CloeError::EmptyMask);
    }
    let global = pairwise_sims(g, preds, eps)?;
    let weighted = region_weighted(g, preds, region)?;
    let regional = pairwise_sims(g, &weighted, eps)?;
    let (mec, vacuous) = disagreement(g, &global);
    let (rec, _) = disagreement(g, &regional);
    let gv: Vec<_> = global.pairs.iter().map(|&(a, b, s)| (a, b, g.value(s).to_f64())).collect();
    let rv: Vec<_> =
        regional.pairs.iter().map(|&(a, b, s)| (a, b, g.value(s).to_f64())).collect();
    let scores = scores_from_sims(preds, &gv, &rv);
    Ok(Measurement { mec, rec, vacuous, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamSet;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_of(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v)
    }

    #[test]
    fn cosine_self_similarity_is_eps_shy_of_one() {
        let mut g = Graph::<f64>::new();
        let u = g.constant_from(&[2], vec![3.0, 4.0]).unwrap();
        let s = cosine_sim(&mut g, u, u, 1e-8).unwrap();
        let expected = 25.0 / (25.0 + 1e-8);
        assert!((scalar_of(&g, s) - expected).abs() < 1e-12);
        assert!(scalar_of(&g, s) < 1.0);
    }

    #[test]
    fn cosine_orthogonal_is_zero() {
        let mut g = Graph::<f64>::new();
        let u = g.constant_from(&[2], vec![1.0, 0.0]).unwrap();
        let v = g.constant_from(&[2], vec![0.0, 1.0]).unwrap();
        let s = cosine_sim(&mut g, u, v, 1e-8).unwrap();
        assert_eq!(scalar_of(&g, s), 0.0);
    }

    #[test]
    fn cosine_hand_arithmetic() {
        // u=[1,2], v=[2,1]: dot 4, norms sqrt(5) each -> 4/5.
        let mut g = Graph::<f64>::new();
        let u = g.constant_from(&[2], vec![1.0, 2.0]).unwrap();
        let v = g.constant_from(&[2], vec![2.0, 1.0]).unwrap();
        let s = cosine_sim(&mut g, u, v, 1e-8).unwrap();
        assert!((scalar_of(&g, s) - 0.8).abs() < 1e-7);
    }

    #[test]
    fn cosine_rejects_length_mismatch_and_zero_is_safe() {
        let mut g = Graph::<f64>::new();
        let u = g.constant(Tensor::zeros(&[2]));
        let v = g.constant(Tensor::zeros(&[3]));
        assert!(cosine_sim(&mut g, u, v, 1e-8).is_err());
        let z = g.constant(Tensor::zeros(&[2]));
        let s = cosine_sim(&mut g, z, z, 1e-8).unwrap();
        assert_eq!(scalar_of(&g, s), 0.0);
    }

    /// Vectors with an exact pairwise cosine matrix, via a hand Cholesky of
    /// the Gram matrix [[1,.9,.8],[.9,1,.7],[.8,.7,1]].
    fn three_vectors_with_known_cosines() -> Vec<Vec<f64>> {
        let g = [[1.0, 0.9, 0.8], [0.9, 1.0, 0.7], [0.8, 0.7, 1.0]];
        let l11 = 1.0f64;
        let l21 = g[1][0] / l11;
        let l22 = (g[1][1] - l21 * l21).sqrt();
        let l31 = g[2][0] / l11;
        let l32 = (g[2][1] - l31 * l21) / l22;
        let l33 = (g[2][2] - l31 * l31 - l32 * l32).sqrt();
        vec![vec![l11, 0.0, 0.0], vec![l21, l22, 0.0], vec![l31, l32, l33]]
    }

    #[test]
    fn mec_of_identical_experts_is_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.constant_from(&[4], vec![0.2, 0.3, 0.4, 0.1]).unwrap();
        let q = g.constant_from(&[4], vec![0.2, 0.3, 0.4, 0.1]).unwrap();
        let (mec, vac) = mec_loss(&mut g, &[(0, p), (1, q)], 1e-8).unwrap();
        assert!(!vac);
        assert!(scalar_of(&g, mec).abs() <= 1e-6);
    }

    #[test]
    fn mec_single_expert_is_vacuous_zero() {
        let mut g = Graph::<f64>::new();
        let p = g.constant_from(&[4], vec![0.2, 0.3, 0.4, 0.1]).unwrap();
        let (mec, vac) = mec_loss(&mut g, &[(2, p)], 1e-8).unwrap();
        assert!(vac);
        assert_eq!(scalar_of(&g, mec), 0.0);
        assert!(mec_loss(&mut g, &[], 1e-8).is_err());
    }

    #[test]
    fn mec_mean_of_pairwise_disagreement_by_hand() {
        // pairwise S = {0.9, 0.8, 0.7} -> mean(1-S) = 0.2
        let vecs = three_vectors_with_known_cosines();
        let mut g = Graph::<f64>::new();
        let preds: Vec<(usize, Var)> = vecs
            .iter()
            .enumerate()
            .map(|(m, v)| (m, g.constant_from(&[3], v.clone()).unwrap()))
            .collect();
        let (mec, _) = mec_loss(&mut g, &preds, 1e-8).unwrap();
        assert!((scalar_of(&g, mec) - 0.2).abs() < 1e-7);
    }

    #[test]
    fn rec_with_unit_region_equals_mec() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let mk = |g: &mut Graph<f64>, r: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..16).map(|_| r.gen_range(0.01..1.0)).collect();
            g.constant_from(&[2, 2, 2, 2], data).unwrap()
        };
        let preds = vec![(0, mk(&mut g, &mut r)), (1, mk(&mut g, &mut r)), (2, mk(&mut g, &mut r))];
        let ones = g.constant(Tensor::filled(&[1, 2, 2, 2], 1.0));
        let (mec, _) = mec_loss(&mut g, &preds, 1e-8).unwrap();
        let (rec, _) = rec_loss(&mut g, &preds, ones, 1e-8).unwrap();
        assert!((scalar_of(&g, mec) - scalar_of(&g, rec)).abs() < 1e-12);

        // constant region of 0.5: cosine scale invariance cancels it
        let half = g.constant(Tensor::filled(&[1, 2, 2, 2], 0.5));
        let (rec_half, _) = rec_loss(&mut g, &preds, half, 1e-8).unwrap();
        assert!((scalar_of(&g, mec) - scalar_of(&g, rec_half)).abs() < 1e-6);
    }

    #[test]
    fn rec_isolates_region_agreement() {
        // Two experts agree inside the region, disagree outside; an
        // indicator region map makes the regional loss vanish while the
        // global one stays large.
        let mut g = Graph::<f64>::new();
        let a = vec![0.9, 0.8, 0.7, 0.6];
        let outside1 = vec![0.9, 0.05, 0.05, 0.05];
        let outside2 = vec![0.05, 0.9, 0.05, 0.9];
        let p1: Vec<f64> = a.iter().chain(&outside1).copied().collect();
        let p2: Vec<f64> = a.iter().chain(&outside2).copied().collect();
        let v1 = g.constant_from(&[1, 2, 2, 2], p1).unwrap();
        let v2 = g.constant_from(&[1, 2, 2, 2], p2).unwrap();
        let region = g
            .constant_from(&[1, 2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let preds = vec![(0, v1), (1, v2)];
        let (mec, _) = mec_loss(&mut g, &preds, 1e-8).unwrap();
        let (rec, _) = rec_loss(&mut g, &preds, region, 1e-8).unwrap();
        assert!(scalar_of(&g, mec) > 0.1, "global disagreement {}", scalar_of(&g, mec));
        assert!(scalar_of(&g, rec) < 1e-6, "regional disagreement {}", scalar_of(&g, rec));
    }

    #[test]
    fn scores_row_means_and_symmetries() {
        let vecs = three_vectors_with_known_cosines();
        let mut g = Graph::<f64>::new();
        let preds: Vec<(usize, Var)> = vecs
            .iter()
            .enumerate()
            .map(|(m, v)| (m, g.constant_from(&[3], v.clone()).unwrap()))
            .collect();
        let ones = g.constant(Tensor::filled(&[3], 1.0));
        // region map for rank-1 predictions: spatial size 3, single channel
        let region = g.reshape(ones, &[1, 3]).unwrap();
        let flat_region = g.flatten(region);
        let _ = flat_region;
        let scores = expert_scores(&mut g, &preds, flat_region, 1e-8).unwrap();
        // u_0 = (0.9+0.8)/2, u_1 = (0.9+0.7)/2, u_2 = (0.8+0.7)/2
        assert!((scores[0].u - 0.85).abs() < 1e-7);
        assert!((scores[1].u - 0.80).abs() < 1e-7);
        assert!((scores[2].u - 0.75).abs() < 1e-7);

        // two identical experts: u_1 = u_2 = 1 (up to eps)
        let mut g = Graph::<f64>::new();
        let p = g.constant_from(&[4], vec![0.3, 0.3, 0.2, 0.2]).unwrap();
        let q = g.constant_from(&[4], vec![0.3, 0.3, 0.2, 0.2]).unwrap();
        let ones = g.constant(Tensor::filled(&[4], 1.0));
        let scores = expert_scores(&mut g, &[(0, p), (1, q)], ones, 1e-8).unwrap();
        assert_eq!(scores[0].u, scores[1].u);
        assert!((scores[0].u - 1.0).abs() < 1e-6);

        // lone expert: (1, 1) by definition
        let mut g = Graph::<f64>::new();
        let p = g.constant_from(&[4], vec![0.3, 0.3, 0.2, 0.2]).unwrap();
        let ones = g.constant(Tensor::filled(&[4], 1.0));
        let scores = expert_scores(&mut g, &[(3, p)], ones, 1e-8).unwrap();
        assert_eq!(scores, vec![ExpertScore { modality: 3, u: 1.0, v: 1.0 }]);
    }

    #[test]
    fn scale_invariance_of_mec() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..8).map(|_| r.gen_range(0.01..1.0)).collect())
            .collect();
        let eval = |scales: &[f64]| -> f64 {
            let mut g = Graph::<f64>::new();
            let preds: Vec<(usize, Var)> = data
                .iter()
                .enumerate()
                .map(|(m, v)| {
                    let t = g.constant_from(&[8], v.clone()).unwrap();
                    (m, g.scale(t, scales[m]))
                })
                .collect();
            let (mec, _) = mec_loss(&mut g, &preds, 1e-8).unwrap();
            g.value(mec)
        };
        let base = eval(&[1.0, 1.0, 1.0]);
        let scaled = eval(&[3.0, 0.2, 17.0]);
        assert!((base - scaled).abs() < 1e-6, "{base} vs {scaled}");
    }

    #[test]
    fn bounds_and_permutation_invariance_on_random_sets() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = r.gen_range(2..5usize);
            let data: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..6).map(|_| r.gen_range(-1.0..1.0)).collect())
                .collect();
            let mut g = Graph::<f64>::new();
            let preds: Vec<(usize, Var)> = data
                .iter()
                .enumerate()
                .map(|(m, v)| (m, g.constant_from(&[6], v.clone()).unwrap()))
                .collect();
            let (mec, _) = mec_loss(&mut g, &preds, 1e-8).unwrap();
            let v = g.value(mec);
            assert!((0.0..=2.0).contains(&v), "mec {v} out of [0,2]");

            let mut rev = preds.clone();
            rev.reverse();
            let (mec_rev, _) = mec_loss(&mut g, &rev, 1e-8).unwrap();
            assert!((v - g.value(mec_rev)).abs() < 1e-12);
        }
    }

    #[test]
    fn mec_gradient_matches_finite_differences() {
        use crate::graph::check::{finite_diff_check, FdOptions};
        let mut r = ChaCha8Rng::seed_from_u64(33);
        let mut params = ParamSet::<f64>::new();
        let a = params
            .add("pa", Tensor::new(&[8], (0..8).map(|_| r.gen_range(0.05..1.0)).collect()).unwrap())
            .unwrap();
        let b = params
            .add("pb", Tensor::new(&[8], (0..8).map(|_| r.gen_range(0.05..1.0)).collect()).unwrap())
            .unwrap();
        let run = |ps: &ParamSet<f64>| -> crate::Result<f64> {
            let mut g = Graph::new();
            let pa = g.leaf(ps, a);
            let pb = g.leaf(ps, b);
            let (mec, _) = mec_loss(&mut g, &[(0, pa), (1, pb)], 1e-8)?;
            Ok(g.value(mec))
        };
        params.zero_grads();
        {
            let mut g = Graph::new();
            let pa = g.leaf(&params, a);
            let pb = g.leaf(&params, b);
            let (mec, _) = mec_loss(&mut g, &[(0, pa), (1, pb)], 1e-8).unwrap();
            g.backward(mec, &mut params).unwrap();
        }
        let report = finite_diff_check(run, &mut params, &FdOptions::default()).unwrap();
        assert!(report.pass, "{}", report.render());
    }
}
