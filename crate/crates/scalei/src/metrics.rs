//! Fidelity measures for recovered latents and graphs.
//!
//! Exact recovery theory promises the estimates match the truth up to a
//! valid causal reordering, per-coordinate scaling, and — for nodes that are
//! surrounded — a fixed linear contamination from their surrounding nodes.
//! At finite sample sizes those identities can only be certified
//! statistically, so this module matches estimate columns to true nodes by
//! searching valid causal orders, scores the match by per-node correlation
//! magnitudes, and measures deviations from the allowed linear form through
//! a least-squares map whose disallowed entries should vanish. A generic
//! structural Hamming distance rounds out the graph-side scoring.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::graph::{valid_orders, CausalOrder, Dag, SurroundMap};
use crate::linalg;
use crate::stats;
use crate::{Error, Result};

/// Minimum matched per-node correlation for a trial to count as consistent.
pub const CORRELATION_THRESHOLD: f64 = 0.99;

/// Maximum relative magnitude of disallowed least-squares cross-terms.
pub const RESIDUAL_THRESHOLD: f64 = 1e-2;

/// How well estimated latents line up with the truth under the best valid
/// causal order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScore {
    /// The valid causal order pairing estimate column `j` with true node
    /// `matched_order[j]`.
    pub matched_order: CausalOrder,
    /// `|corr|` between each true node and its matched estimate column,
    /// indexed by true node.
    pub per_node_corr: Vec<f64>,
    /// Largest disallowed cross-term of the least-squares map from true to
    /// matched estimated latents, relative to the matching diagonal entry.
    pub mixing_residual: f64,
    /// The estimated graph, relabeled through the matched order, equals the
    /// true graph exactly.
    pub dag_exact: bool,
    /// Structural Hamming distance between the relabeled estimate and truth.
    pub shd: usize,
}

impl ConsistencyScore {
    /// Smallest matched per-node correlation.
    pub fn min_corr(&self) -> f64 {
        self.per_node_corr
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// The statistical pass criterion: every node tracked with correlation
    /// at least [`CORRELATION_THRESHOLD`] and no disallowed cross-term above
    /// [`RESIDUAL_THRESHOLD`].
    pub fn passes(&self) -> bool {
        self.min_corr() >= CORRELATION_THRESHOLD && self.mixing_residual <= RESIDUAL_THRESHOLD
    }
}

/// `|corr|` between every estimate column (row index) and every true column
/// (column index). A constant column anywhere is a domain error: correlation
/// against it is undefined.
fn correlation_table(z: &DMatrix<f64>, zhat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = z.ncols();
    let mut table = DMatrix::zeros(n, n);
    for j in 0..n {
        let est: Vec<f64> = zhat.column(j).iter().cloned().collect();
        for i in 0..n {
            let truth: Vec<f64> = z.column(i).iter().cloned().collect();
            let r = stats::pearson(&est, &truth).ok_or_else(|| {
                Error::Domain(format!(
                    "correlation undefined: estimate column {} or latent column {} is constant",
                    j + 1,
                    i + 1
                ))
            })?;
            table[(j, i)] = r.abs();
        }
    }
    Ok(table)
}

fn check_shapes(z: &DMatrix<f64>, zhat: &DMatrix<f64>, dag: &Dag) -> Result<()> {
    let n = dag.n();
    if z.ncols() != n || zhat.ncols() != n || z.nrows() != zhat.nrows() {
        return Err(Error::Shape(format!(
            "latent blocks {}×{} and {}×{} do not both match {} nodes",
            z.nrows(),
            z.ncols(),
            zhat.nrows(),
            zhat.ncols(),
            n
        )));
    }
    if z.nrows() < n + 1 {
        return Err(Error::Shape(format!(
            "need at least {} samples to fit an {n}×{n} map, got {}",
            n + 1,
            z.nrows()
        )));
    }
    Ok(())
}

/// Relabel `dag`'s nodes through a causal order: node `a` of `dag` becomes
/// node `order[a]` of the result.
pub fn relabel(dag: &Dag, order: &CausalOrder) -> Result<Dag> {
    let n = dag.n();
    if order.len() != n {
        return Err(Error::Shape(format!(
            "order over {} nodes cannot relabel a graph on {n}",
            order.len()
        )));
    }
    let seq = order.seq();
    let mut parents = vec![Vec::new(); n];
    for a in 0..n {
        for &p in dag.parents(a) {
            parents[seq[a]].push(seq[p]);
        }
    }
    for list in &mut parents {
        list.sort_unstable();
    }
    Dag::new(n, parents)
}

/// Structural Hamming distance between two directed graphs on the same
/// labeled node set: one count per pair that needs an edge added, removed,
/// or reversed.
pub fn shd(g1: &Dag, g2: &Dag) -> Result<usize> {
    if g1.n() != g2.n() {
        return Err(Error::Shape(format!(
            "cannot compare graphs on {} and {} nodes",
            g1.n(),
            g2.n()
        )));
    }
    let mut count = 0;
    for i in 0..g1.n() {
        for j in (i + 1)..g1.n() {
            let a = (g1.is_edge(i, j), g1.is_edge(j, i));
            let b = (g2.is_edge(i, j), g2.is_edge(j, i));
            if a != b {
                count += 1;
            }
        }
    }
    Ok(count)
}

/// Shared core: match, correlate, fit the linear map, and score its
/// disallowed entries. `exempt` lists, per true node, the true nodes whose
/// contamination the allowed form tolerates.
fn consistency(
    z: &DMatrix<f64>,
    zhat: &DMatrix<f64>,
    dag_hat: &Dag,
    dag: &Dag,
    exempt: impl Fn(usize) -> Vec<usize>,
) -> Result<ConsistencyScore> {
    check_shapes(z, zhat, dag)?;
    if dag_hat.n() != dag.n() {
        return Err(Error::Shape(format!(
            "estimated graph has {} nodes, truth has {}",
            dag_hat.n(),
            dag.n()
        )));
    }
    let n = dag.n();
    let table = correlation_table(z, zhat)?;
    let orders = valid_orders(dag);
    let mut best: Option<(f64, CausalOrder, Vec<usize>)> = None;
    for order in orders {
        let pos = order.positions();
        let score = (0..n)
            .map(|i| table[(pos[i], i)])
            .fold(f64::INFINITY, f64::min);
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, order, pos));
        }
    }
    let (_, matched_order, pos) =
        best.ok_or_else(|| Error::Structural("graph admits no causal order".into()))?;
    let per_node_corr: Vec<f64> = (0..n).map(|i| table[(pos[i], i)]).collect();

    // Estimate columns sorted into true-node labels, then expressed as a
    // linear map from the true latents: matched column i ≈ Σ_j M[i, j] Z_j.
    let mut matched = DMatrix::zeros(zhat.nrows(), n);
    for i in 0..n {
        matched.set_column(i, &zhat.column(pos[i]));
    }
    let coeffs = linalg::lstsq(z, &matched)?;
    let mut mixing_residual = 0.0_f64;
    for i in 0..n {
        let diag = coeffs[(i, i)].abs();
        let allowed = exempt(i);
        for j in 0..n {
            if j == i || allowed.contains(&j) {
                continue;
            }
            let cross = coeffs[(j, i)].abs();
            if cross > 0.0 {
                mixing_residual = mixing_residual.max(cross / diag);
            }
        }
    }

    let mapped = relabel(dag_hat, &matched_order)?;
    let dag_exact = mapped == *dag;
    let shd = shd(&mapped, dag)?;
    Ok(ConsistencyScore {
        matched_order,
        per_node_corr,
        mixing_residual,
        dag_exact,
        shd,
    })
}

/// Score recovery up to valid reordering and per-coordinate scaling: every
/// off-diagonal entry of the fitted map counts against the residual.
pub fn scaling_consistency(
    z: &DMatrix<f64>,
    zhat: &DMatrix<f64>,
    dag_hat: &Dag,
    dag: &Dag,
) -> Result<ConsistencyScore> {
    consistency(z, zhat, dag_hat, dag, |_| Vec::new())
}

/// Score recovery up to valid reordering, scaling, and contamination from
/// surrounding nodes: entries `(i, j)` with `j` surrounding `i` are exempt.
pub fn mixing_consistency(
    z: &DMatrix<f64>,
    zhat: &DMatrix<f64>,
    dag_hat: &Dag,
    dag: &Dag,
    surround: &SurroundMap,
) -> Result<ConsistencyScore> {
    consistency(z, zhat, dag_hat, dag, |i| surround.sur(i).to_vec())
}
