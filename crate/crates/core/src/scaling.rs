//! Loss-vs-size scaling law `L(N) = (N/N_c)^(−α_N) + E_N`, its least-squares
//! fit, and Pareto sweeps of sub-networks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{selection_cost, CostTable};
use crate::model::{ElasticModel, Selection, TokenBatch};
use crate::rng::Rng;
use crate::routing::{route_static, StaticRouter};
use crate::training::{mean_loss, sample_selection};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub n_c: f64,
    pub alpha_n: f64,
    pub e_n: f64,
    pub rmse: f64,
    pub n_points: usize,
}

impl ScalingFit {
    pub fn law(n_c: f64, alpha_n: f64, e_n: f64) -> Self {
        Self {
            n_c,
            alpha_n,
            e_n,
            rmse: 0.0,
            n_points: 0,
        }
    }

    /// One header line and one row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["N_c", "alpha_N", "E_N", "rmse", "n_points"])?;
        w.write_record([
            format!("{:.12e}", self.n_c),
            format!("{:.12e}", self.alpha_n),
            format!("{:.12e}", self.e_n),
            format!("{:.12e}", self.rmse),
            self.n_points.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

pub fn eval_law(fit: &ScalingFit, n: f64) -> Result<f64> {
    if !(n > 0.0) {
        return Err(Error::Domain(format!("N must be positive, got {n}")));
    }
    Ok((n / fit.n_c).powf(-fit.alpha_n) + fit.e_n)
}

/// Sum of squared residuals at log-parameters `(ln N_c, ln α_N, ln E_N)`;
/// infinite where the law overflows.
fn sse(theta: &[f64; 3], points: &[(f64, f64)]) -> f64 {
    let (n_c, alpha, e) = (theta[0].exp(), theta[1].exp(), theta[2].exp());
    let mut s = 0.0;
    for &(n, l) in points {
        let r = (n / n_c).powf(-alpha) + e - l;
        s += r * r;
    }
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Nelder–Mead on a 3-vector. Returns the best vertex and its value.
fn nelder_mead(f: impl Fn(&[f64; 3]) -> f64, start: [f64; 3], step: f64, iters: usize) -> ([f64; 3], f64) {
    let mut simplex: Vec<([f64; 3], f64)> = (0..4)
        .map(|i| {
            let mut x = start;
            if i > 0 {
                x[i - 1] += step;
            }
            (x, f(&x))
        })
        .collect();
    for _ in 0..iters {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[3].1);
        if (worst - best).abs() <= 1e-30 + 1e-15 * best.abs() {
            let spread = (0..3)
                .map(|d| (simplex[3].0[d] - simplex[0].0[d]).abs())
                .fold(0.0, f64::max);
            if spread < 1e-12 {
                break;
            }
        }
        let mut centroid = [0.0; 3];
        for (x, _) in &simplex[..3] {
            for d in 0..3 {
                centroid[d] += x[d] / 3.0;
            }
        }
        let along = |t: f64| {
            let mut y = [0.0; 3];
            for d in 0..3 {
                y[d] = centroid[d] + t * (simplex[3].0[d] - centroid[d]);
            }
            y
        };
        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < simplex[0].1 {
            let xe = along(-2.0);
            let fe = f(&xe);
            simplex[3] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (xr, fr);
        } else {
            let xc = if fr < simplex[3].1 { along(-0.5) } else { along(0.5) };
            let fc = f(&xc);
            if fc < fr.min(simplex[3].1) {
                simplex[3] = (xc, fc);
            } else {
                let x0 = simplex[0].0;
                for v in simplex.iter_mut().skip(1) {
                    for d in 0..3 {
                        v.0[d] = x0[d] + 0.5 * (v.0[d] - x0[d]);
                    }
                    v.1 = f(&v.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0]
}

/// Multi-start simplex search over log-parameters; eight seeded starts, each
/// restarted from its own optimum until it stops improving.
pub fn fit_scaling_law(points: &[(f64, f64)]) -> Result<ScalingFit> {
    let mut ns: Vec<f64> = points.iter().map(|p| p.0).collect();
    ns.sort_by(f64::total_cmp);
    ns.dedup();
    if ns.len() < 4 {
        return Err(Error::Underdetermined {
            needed: 4,
            got: ns.len(),
        });
    }
    if points.iter().any(|&(n, l)| !(n > 0.0) || !l.is_finite()) {
        return Err(Error::Domain("points need N > 0 and finite L".into()));
    }
    let min_l = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let (lo, hi) = (ns[0].ln(), ns[ns.len() - 1].ln());
    let max_l = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let mut rng = Rng::stream(0, "scaling.starts");
    // A generous box keeps flat or degenerate data from drifting to overflow.
    let upper_e = max_l.abs().max(1e-3).ln() + 1.0;
    let f = |t: &[f64; 3]| {
        let inside = (lo - 25.0..=hi + 25.0).contains(&t[0])
            && (-12.0..=6.0).contains(&t[1])
            && (-30.0..=upper_e).contains(&t[2]);
        if inside {
            sse(t, points)
        } else {
            f64::INFINITY
        }
    };
    let mut best: Option<([f64; 3], f64)> = None;
    for _ in 0..8 {
        let start = [
            lo + (hi - lo) * rng.uniform() - 1.0,
            (0.05 + 2.0 * rng.uniform()).ln(),
            (min_l.abs().max(1e-3) * (0.1 + 0.9 * rng.uniform())).ln(),
        ];
        let mut cur = nelder_mead(f, start, 0.5, 4000);
        loop {
            let next = nelder_mead(f, cur.0, 0.05, 4000);
            if next.1 >= cur.1 * (1.0 - 1e-12) {
                break;
            }
            cur = next;
        }
        if best.map_or(true, |b| cur.1 < b.1) {
            best = Some(cur);
        }
    }
    let (theta, s) = best.expect("eight starts");
    if !s.is_finite() {
        return Err(Error::NonFinite("fit_scaling_law"));
    }
    Ok(ScalingFit {
        n_c: theta[0].exp(),
        alpha_n: theta[1].exp(),
        e_n: theta[2].exp(),
        rmse: (s / points.len() as f64).sqrt(),
        n_points: points.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    /// Requested normalized budget; for explicitly given or random
    /// selections, their own normalized cost.
    pub budget: f64,
    /// Non-embedding parameter count `N`.
    pub params: usize,
    /// Cost in the table's units.
    pub cost: f64,
    pub loss: f64,
    pub selection: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParetoSweep {
    pub points: Vec<ParetoPoint>,
    /// Uniformly sampled selections, for comparison against the routed set.
    pub cloud: Vec<ParetoPoint>,
}

/// Worker count: `ELASTRON_THREADS` if set, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("ELASTRON_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Evaluates `(budget, selection)` pairs on read-only workers; results keep input order.
pub fn evaluate_points(
    model: &ElasticModel,
    table: &CostTable,
    batches: &[TokenBatch],
    entries: &[(Option<f64>, Selection)],
) -> Result<Vec<ParetoPoint>> {
    let full = table.full_cost();
    let one = |(budget, sel): &(Option<f64>, Selection)| -> Result<ParetoPoint> {
        let cost = selection_cost(table, sel)?;
        let loss = mean_loss(model, batches, sel)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("pareto_sweep"));
        }
        Ok(ParetoPoint {
            budget: budget.unwrap_or(cost / full),
            params: model.count_params(sel)?,
            cost,
            loss,
            selection: sel.describe(),
        })
    };
    let workers = worker_count().min(entries.len()).max(1);
    if workers == 1 {
        return entries.iter().map(one).collect();
    }
    let chunk = entries.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(entries.len());
        for h in handles {
            out.extend(h.join().expect("sweep worker panicked")?);
        }
        Ok(out)
    })
}

/// Routed selection per budget, or `given` selections when there is no
/// router, plus `cloud` uniformly sampled selections.
pub fn pareto_sweep(
    model: &ElasticModel,
    router: Option<&StaticRouter>,
    table: &CostTable,
    batches: &[TokenBatch],
    budgets: &[f64],
    given: &[Selection],
    cloud: usize,
    rng: &mut Rng,
) -> Result<ParetoSweep> {
    if batches.is_empty() {
        return Err(Error::Data("pareto sweep needs validation batches".into()));
    }
    let mut entries: Vec<(Option<f64>, Selection)> = Vec::new();
    if let Some(r) = router {
        for &b in budgets {
            entries.push((Some(b), route_static(r, b)?.0));
        }
    }
    entries.extend(given.iter().map(|s| (None, s.clone())));
    let randoms: Vec<(Option<f64>, Selection)> = (0..cloud)
        .map(|_| (None, sample_selection(rng, &model.config)))
        .collect();
    Ok(ParetoSweep {
        points: sort_by_cost(evaluate_points(model, table, batches, &entries)?),
        cloud: sort_by_cost(evaluate_points(model, table, batches, &randoms)?),
    })
}

fn sort_by_cost(mut points: Vec<ParetoPoint>) -> Vec<ParetoPoint> {
    points.sort_by(|a, b| {
        a.cost
            .total_cmp(&b.cost)
            .then(a.budget.total_cmp(&b.budget))
            .then(a.selection.cmp(&b.selection))
    });
    points
}

/// Points not dominated in (cost, loss), by ascending cost.
pub fn frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let sorted = sort_by_cost(points.to_vec());
    let mut out: Vec<ParetoPoint> = Vec::new();
    for p in sorted {
        if out.last().map_or(true, |q| p.loss < q.loss) {
            out.push(p);
        }
    }
    out
}

/// Median loss of `cloud` points whose cost lies within `band` (relative) of `cost`.
pub fn band_median(cloud: &[ParetoPoint], cost: f64, band: f64) -> Option<f64> {
    let mut l: Vec<f64> = cloud
        .iter()
        .filter(|p| (p.cost - cost).abs() <= band * cost)
        .map(|p| p.loss)
        .collect();
    if l.is_empty() {
        return None;
    }
    l.sort_by(f64::total_cmp);
    let m = l.len() / 2;
    Some(if l.len() % 2 == 1 { l[m] } else { 0.5 * (l[m - 1] + l[m]) })
}

/// Header (budget, params, cost, loss, selection), rows by ascending cost.
pub fn write_pareto_csv(points: &[ParetoPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["budget", "params", "cost", "loss", "selection"])?;
    for p in sort_by_cost(points.to_vec()) {
        if !p.budget.is_finite() || !p.cost.is_finite() || !p.loss.is_finite() {
            return Err(Error::NonFinite("write_pareto_csv"));
        }
        w.write_record([
            format!("{:.6}", p.budget),
            p.params.to_string(),
            format!("{:.6}", p.cost),
            format!("{:.12}", p.loss),
            p.selection,
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(fit: &ScalingFit) -> Vec<(f64, f64)> {
        (0..8)
            .map(|i| {
                let n = 0.5 * 10f64.powf(i as f64 * 2.0 / 7.0);
                (n, eval_law(fit, n).unwrap())
            })
            .collect()
    }

    #[test]
    fn law_at_n_c_is_e_plus_one() {
        let f = ScalingFit::law(3.5, 0.7, 0.25);
        assert_eq!(eval_law(&f, 3.5).unwrap(), 1.25);
    }

    #[test]
    fn nonpositive_n_is_a_domain_error() {
        let f = ScalingFit::law(1.0, 1.0, 0.0);
        assert!(matches!(eval_law(&f, 0.0), Err(Error::Domain(_))));
        assert!(matches!(eval_law(&f, -2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn recovers_generating_parameters() {
        let truth = ScalingFit::law(2.0, 0.5, 1.7);
        let fit = fit_scaling_law(&synthetic(&truth)).unwrap();
        assert!((fit.n_c / 2.0 - 1.0).abs() < 1e-2, "{fit:?}");
        assert!((fit.alpha_n / 0.5 - 1.0).abs() < 1e-2, "{fit:?}");
        assert!((fit.e_n / 1.7 - 1.0).abs() < 1e-2, "{fit:?}");
        assert!(fit.rmse < 1e-6);
        assert_eq!(fit.n_points, 8);
    }

    #[test]
    fn three_points_are_underdetermined() {
        let pts = [(1.0, 2.0), (2.0, 1.5), (4.0, 1.2), (4.0, 1.1)];
        assert!(matches!(
            fit_scaling_law(&pts),
            Err(Error::Underdetermined { needed: 4, got: 3 })
        ));
    }

    #[test]
    fn frontier_drops_dominated_points() {
        let p = |cost: f64, loss: f64| ParetoPoint {
            budget: 0.0,
            params: 1,
            cost,
            loss,
            selection: String::new(),
        };
        let f = frontier(&[p(2.0, 1.0), p(1.0, 2.0), p(1.5, 2.5), p(3.0, 1.0)]);
        assert_eq!(f.iter().map(|x| x.cost).collect::<Vec<_>>(), vec![1.0, 2.0]);
        assert_eq!(band_median(&[p(1.0, 3.0), p(1.01, 1.0), p(2.0, 0.0)], 1.0, 0.02), Some(2.0));
    }
}
