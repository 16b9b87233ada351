//! Numerical certificates for the conditions that make recovery work.
//!
//! The pipeline's guarantees rest on conditions that are stated over a
//! continuum of points and can only be probed numerically: every node must be
//! intervened exactly once, each intervention must genuinely alter how a node
//! depends on every one of its parents, and the mechanisms must be nonlinear
//! enough that no fixed linear functional of the score survives an
//! intervention unchanged. This module turns each condition into an
//! executable check on randomly probed points. A recorded failure always
//! carries a concrete witness (a probe point or a rank deficit); a pass is
//! strong evidence at the probing resolution, not a proof, since rank can
//! only be underestimated from finitely many points.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::scm::{CombinationRule, EnvironmentSet, Mechanism, Scm};
use crate::seed::{self, Stream};

/// Finite-difference step for probing log-ratio derivatives.
const FD_STEP: f64 = 1e-5;

/// A derivative below this magnitude counts as "vanished" at a probe point.
const DERIVATIVE_FLOOR: f64 = 1e-8;

/// Relative tolerance for numerical rank decisions.
const RANK_REL_TOL: f64 = 1e-8;

/// Fraction of live probe points a node needs for its dependence check to
/// pass. Genuinely parent-dependent interventions probe at ≈ 1; a mechanism
/// that did not change probes at ≈ 0.
pub const REGULARITY_THRESHOLD: f64 = 0.99;

/// Default number of probe points for the parent-dependence check.
pub const DEFAULT_REGULARITY_PROBES: usize = 256;

/// Outcome of one per-node check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

/// An achieved numerical rank against the rank a condition demands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankCheck {
    pub achieved: usize,
    pub required: usize,
}

impl RankCheck {
    pub fn passes(self) -> bool {
        self.achieved >= self.required
    }
}

/// Per-node audit results for one set of environments.
///
/// Vectors are indexed by node; `None` marks a check that does not apply to
/// that node (no parents, wrong coupling, or wrong mechanism family).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Interventions cover every node exactly once, plus one observational
    /// environment.
    pub coverage_ok: bool,
    /// Minimum over parents of the fraction of probe points at which the
    /// intervened conditional's log-ratio visibly depends on that parent.
    pub regularity: Vec<Option<f64>>,
    /// Rank of the stacked gradient system against the `|Pa(i)| + 1` it must
    /// reach for score variations to be unhideable.
    pub vmatrix_ranks: Vec<Option<RankCheck>>,
    /// First-layer weight rank against `|Pa(i)|`, for neural mechanisms.
    pub nn_ranks: Vec<Option<RankCheck>>,
    /// Combined per-node outcome over the applicable checks.
    pub verdicts: Vec<Verdict>,
    /// For each failed node, what concretely went wrong.
    pub witnesses: Vec<Option<String>>,
}

impl AuditReport {
    /// True when coverage holds and no per-node check failed.
    pub fn all_pass(&self) -> bool {
        self.coverage_ok && self.verdicts.iter().all(|v| *v != Verdict::Fail)
    }

    pub fn n(&self) -> usize {
        self.verdicts.len()
    }
}

/// Check that `targets` intervene on each of `n` nodes exactly once and that
/// exactly one extra (observational) environment exists.
pub fn coverage_holds(env_count: usize, targets: &[usize], n: usize) -> bool {
    if env_count != n + 1 || targets.len() != n {
        return false;
    }
    let mut seen = vec![false; n];
    for &t in targets {
        if t >= n || seen[t] {
            return false;
        }
        seen[t] = true;
    }
    true
}

/// Coverage check for an assembled environment set.
pub fn audit_coverage(envs: &EnvironmentSet) -> bool {
    coverage_holds(envs.len(), envs.targets(), envs.n())
}

/// Probe how strongly the intervention on node `i` changes its dependence on
/// each parent.
///
/// At standard-normal probe points, the derivative of
/// `log q(z_i | pa) − log p(z_i | pa)` with respect to each parent coordinate
/// is estimated by central finite differences; a point is "live" for a parent
/// when that derivative exceeds [`DERIVATIVE_FLOOR`]. Returns the minimum
/// over parents of the live fraction, or `None` for a parentless node.
pub fn audit_regularity(
    observational: &Scm,
    intervened: &Scm,
    i: usize,
    probes: usize,
    seed: u64,
) -> Option<f64> {
    let parents = observational.dag().parents(i);
    if parents.is_empty() || probes == 0 {
        return None;
    }
    let n = observational.n();
    let mut rng = seed::rng(seed, Stream::AuditProbes, i as u64);
    let mut live = vec![0usize; parents.len()];
    for _ in 0..probes {
        let mut z = DVector::zeros(n);
        // Only node i and its parents enter the conditional; other
        // coordinates stay at zero.
        z[i] = rng.sample(StandardNormal);
        for &p in parents {
            z[p] = rng.sample(StandardNormal);
        }
        for (k, &p) in parents.iter().enumerate() {
            let mut hi = z.clone();
            hi[p] += FD_STEP;
            let mut lo = z.clone();
            lo[p] -= FD_STEP;
            let g = |point: &DVector<f64>| -> Option<f64> {
                let q = intervened.conditional_log_density(i, point).ok()?;
                let p0 = observational.conditional_log_density(i, point).ok()?;
                Some(q - p0)
            };
            if let (Some(a), Some(b)) = (g(&hi), g(&lo)) {
                if ((a - b) / (2.0 * FD_STEP)).abs() > DERIVATIVE_FLOOR {
                    live[k] += 1;
                }
            }
        }
    }
    live.iter()
        .map(|&c| c as f64 / probes as f64)
        .fold(None, |acc: Option<f64>, f| {
            Some(acc.map_or(f, |a| a.min(f)))
        })
}

/// Gradient of a mechanism with respect to all parent values, with constants
/// (roots and severed interventions) contributing zeros.
fn parent_gradient(mechanism: &Mechanism, phi: &[f64]) -> Vec<f64> {
    match mechanism {
        Mechanism::Constant { .. } => vec![0.0; phi.len()],
        other => other.grad(phi),
    }
}

/// Rank of the stacked gradient system for node `i` over `num_points` random
/// probe points.
///
/// Rows pair each mechanism gradient with a `−1`: a linear functional that
/// cannot be told apart before and after the intervention corresponds to a
/// nullspace vector of this matrix, so recovery demands full rank
/// `|Pa(i)| + 1`. Only defined for additive coupling, where the node's score
/// contribution is exactly the mechanism gradient; `None` otherwise.
pub fn audit_vmatrix(
    observational: &Scm,
    intervened: &Scm,
    i: usize,
    num_points: usize,
    seed: u64,
) -> Option<RankCheck> {
    if observational.combination() != CombinationRule::Additive {
        return None;
    }
    let arity = observational.dag().parents(i).len();
    let required = arity + 1;
    let mut rng = seed::rng(seed, Stream::AuditProbes, (i as u64) | (1 << 32));
    let mut v = DMatrix::zeros(2 * num_points, required);
    for t in 0..num_points {
        let phi: Vec<f64> = (0..arity).map(|_| rng.sample(StandardNormal)).collect();
        let gp = parent_gradient(observational.mechanism(i), &phi);
        let gq = parent_gradient(intervened.mechanism(i), &phi);
        for k in 0..arity {
            v[(2 * t, k)] = gp[k];
            v[(2 * t + 1, k)] = gq[k];
        }
        v[(2 * t, arity)] = -1.0;
        v[(2 * t + 1, arity)] = -1.0;
    }
    Some(RankCheck {
        achieved: linalg::rank(&v, RANK_REL_TOL),
        required,
    })
}

/// Default probe count for [`audit_vmatrix`]: rank `|Pa(i)| + 1` needs at
/// least that many rows, and a 4× oversample keeps the certificate stable.
pub fn default_vmatrix_probes(arity: usize) -> usize {
    4 * (arity + 1)
}

/// First-layer weight rank check for neural mechanisms at node `i`.
///
/// Passes when the first layer of the observational or the intervened
/// network (whichever is larger) has full rank `|Pa(i)|`. `None` when the
/// node has no parents or neither mechanism is a neural network.
pub fn audit_nn_rank(observational: &Scm, intervened: &Scm, i: usize) -> Option<RankCheck> {
    let arity = observational.dag().parents(i).len();
    if arity == 0 {
        return None;
    }
    let first_layer = |m: &Mechanism| -> Option<DMatrix<f64>> {
        match m {
            // Drop the built-in offset column: only dependence on actual
            // parent coordinates counts toward the rank.
            Mechanism::Nn { w, .. } => Some(w.columns(0, arity).into_owned()),
            _ => None,
        }
    };
    let ranks: Vec<usize> = [observational.mechanism(i), intervened.mechanism(i)]
        .into_iter()
        .filter_map(first_layer)
        .map(|w| linalg::rank(&w, RANK_REL_TOL))
        .collect();
    let achieved = ranks.into_iter().max()?;
    Some(RankCheck {
        achieved,
        required: arity,
    })
}

fn node_verdict(
    regularity: Option<f64>,
    vmatrix: Option<RankCheck>,
    nn: Option<RankCheck>,
) -> (Verdict, Option<String>) {
    let mut applicable = false;
    let mut problems = Vec::new();
    if let Some(f) = regularity {
        applicable = true;
        if f < REGULARITY_THRESHOLD {
            problems.push(format!(
                "log-ratio derivative vanished on {:.0}% of probe points for its weakest parent",
                100.0 * (1.0 - f)
            ));
        }
    }
    if let Some(rc) = vmatrix {
        applicable = true;
        if !rc.passes() {
            problems.push(format!(
                "gradient system rank {} < {}",
                rc.achieved, rc.required
            ));
        }
    }
    if let Some(rc) = nn {
        applicable = true;
        if !rc.passes() {
            problems.push(format!(
                "neural first-layer rank {} < {}",
                rc.achieved, rc.required
            ));
        }
    }
    if !applicable {
        (Verdict::NotApplicable, None)
    } else if problems.is_empty() {
        (Verdict::Pass, None)
    } else {
        (Verdict::Fail, Some(problems.join("; ")))
    }
}

/// Run every applicable check on each node of an environment set.
///
/// Per-node checks are independent and run in parallel; results are
/// deterministic for a fixed `seed` regardless of thread count.
pub fn audit_environments(envs: &EnvironmentSet, probes: usize, seed: u64) -> AuditReport {
    let n = envs.n();
    let observational = envs.observational();
    // Environment index intervening on each node; coverage guarantees
    // exactly one.
    let env_of: Vec<usize> = (0..n)
        .map(|i| (1..=n).find(|&m| envs.target(m) == i).unwrap_or(0))
        .collect();
    let rows: Vec<(Option<f64>, Option<RankCheck>, Option<RankCheck>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let intervened = envs.env(env_of[i]);
            let arity = observational.dag().parents(i).len();
            let reg = audit_regularity(observational, intervened, i, probes, seed);
            let vm = audit_vmatrix(
                observational,
                intervened,
                i,
                default_vmatrix_probes(arity),
                seed,
            );
            let nn = audit_nn_rank(observational, intervened, i);
            (reg, vm, nn)
        })
        .collect();
    let mut report = AuditReport {
        coverage_ok: audit_coverage(envs),
        regularity: Vec::with_capacity(n),
        vmatrix_ranks: Vec::with_capacity(n),
        nn_ranks: Vec::with_capacity(n),
        verdicts: Vec::with_capacity(n),
        witnesses: Vec::with_capacity(n),
    };
    for (reg, vm, nn) in rows {
        let (verdict, witness) = node_verdict(reg, vm, nn);
        report.regularity.push(reg);
        report.vmatrix_ranks.push(vm);
        report.nn_ranks.push(nn);
        report.verdicts.push(verdict);
        report.witnesses.push(witness);
    }
    report
}
