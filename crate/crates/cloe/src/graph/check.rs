//! Central-difference verification of analytic gradients.
//!
//! The caller populates `params.grad` through a backward pass, then hands the
//! same loss as a re-evaluable closure. Each sampled coordinate is perturbed
//! by ±h and the quotient `(f(θ+h) - f(θ-h)) / 2h` is compared against the
//! stored gradient. Intended for f64; f32 round-off drowns the signal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CloeError, Result};
use crate::param::ParamSet;
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub rtol: f64,
    /// Coordinates sampled per parameter group (all coordinates if the group
    /// is smaller).
    pub max_coords_per_group: usize,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions { h: 1e-4, rtol: 1e-3, max_coords_per_group: 24, seed: 0x5eed }
    }
}

#[derive(Clone, Debug)]
pub struct CoordReport {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordReport>,
}

#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub rtol: f64,
    pub pass: bool,
}

impl FiniteDiffReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            let status = if g.max_rel_err <= self.rtol { "ok" } else { "FAIL" };
            s.push_str(&format!(
                "{status:4} {:40} max_rel_err {:10.3e}  ({} coords)",
                g.name, g.max_rel_err, g.checked
            ));
            if let Some(w) = &g.worst {
                s.push_str(&format!(
                    "  worst @{}: analytic {:.6e} vs numeric {:.6e}",
                    w.index, w.analytic, w.numeric
                ));
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "overall: max_rel_err {:.3e} vs rtol {:.1e} => {}\n",
            self.max_rel_err,
            self.rtol,
            if self.pass { "PASS" } else { "FAIL" }
        ));
        s
    }
}

/// Relative error with a floor that keeps finite-difference noise on
/// near-zero coordinates from registering as disagreement.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Compare `params.grad` (already populated) against central differences of
/// `f`. `f` must be a deterministic function of the parameter data.
pub fn finite_diff_check<T, F>(
    mut f: F,
    params: &mut ParamSet<T>,
    opts: &FdOptions,
) -> Result<FiniteDiffReport>
where
    T: Real,
    F: FnMut(&ParamSet<T>) -> Result<T>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut groups = Vec::new();
    let mut overall: f64 = 0.0;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let (name, numel) = {
            let e = params.get(id);
            (e.name.clone(), e.numel())
        };
        let coords: Vec<usize> = if numel <= opts.max_coords_per_group {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(&mut rng, numel, opts.max_coords_per_group).into_vec()
        };
        let mut worst: Option<CoordReport> = None;
        let mut group_max: f64 = 0.0;
        for &i in &coords {
            let orig = params.get(id).data[i];
            let h = T::from_f64(opts.h);

            params.get_mut(id).data[i] = orig + h;
            let plus = f(params)?.to_f64();
            params.get_mut(id).data[i] = orig - h;
            let minus = f(params)?.to_f64();
            params.get_mut(id).data[i] = orig;

            if !plus.is_finite() || !minus.is_finite() {
                return Err(CloeError::Numerical(format!(
                    "finite_diff_check: non-finite loss at {name}[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let analytic = params.get(id).grad[i].to_f64();
            let e = rel_err(analytic, numeric);
            if e > group_max {
                group_max = e;
                worst = Some(CoordReport { index: i, analytic, numeric });
            }
        }
        overall = overall.max(group_max);
        groups.push(GroupReport { name, checked: coords.len(), max_rel_err: group_max, worst });
    }
    Ok(FiniteDiffReport { groups, max_rel_err: overall, rtol: opts.rtol, pass: overall <= opts.rtol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    /// f(θ) = θ² at θ=3: analytic 6 vs central difference 6 ± O(h²).
    #[test]
    fn quadratic_matches() {
        let mut params = ParamSet::<f64>::new();
        let id = params.add("theta", Tensor::scalar(3.0)).unwrap();
        // analytic gradient via the graph
        let mut g = Graph::new();
        let th = g.leaf(&params, id);
        let loss = g.mul(th, th).unwrap();
        g.backward(loss, &mut params).unwrap();
        assert!((params.get(id).grad[0] - 6.0).abs() < 1e-12);

        let report = finite_diff_check(
            |ps: &ParamSet<f64>| {
                let mut g = Graph::new();
                let th = g.leaf(ps, id);
                let loss = g.mul(th, th).unwrap();
                Ok(g.value(loss))
            },
            &mut params,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(report.pass, "{}", report.render());
        assert!(report.max_rel_err < 1e-6);
    }

    /// Intentionally wrong gradient (+10%) must fail the check.
    #[test]
    fn corrupted_gradient_fails() {
        let mut params = ParamSet::<f64>::new();
        let id = params.add("theta", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let th = g.leaf(&params, id);
        let loss = g.mul(th, th).unwrap();
        g.backward(loss, &mut params).unwrap();
        params.get_mut(id).grad[0] *= 1.1;

        let report = finite_diff_check(
            |ps: &ParamSet<f64>| {
                let mut g = Graph::new();
                let th = g.leaf(ps, id);
                let loss = g.mul(th, th).unwrap();
                Ok(g.value(loss))
            },
            &mut params,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(!report.pass, "corrupted gradient slipped through: {}", report.render());
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut params = ParamSet::<f64>::new();
        let id = params.add("theta", Tensor::scalar(0.0)).unwrap();
        let r = finite_diff_check(
            |_ps: &ParamSet<f64>| Ok(f64::NAN),
            &mut params,
            &FdOptions::default(),
        );
        assert!(r.is_err());
        let _ = id;
    }
}
