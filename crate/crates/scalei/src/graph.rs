//! Directed acyclic graphs over latent nodes, causal orders, and the
//! surrounded-node structure that bounds what soft interventions can recover.
//!
//! Nodes are `0..n` internally; the text format and all user-facing output
//! are 1-based.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed::{self, Stream};
use crate::{Error, Result};

/// Default cap on the node count for exhaustive order enumeration.
pub const DEFAULT_ORDER_CAP: usize = 10;
/// Hard cap on how many valid orders are materialized before enumeration
/// falls back to a single topological order.
pub const MAX_ENUMERATED_ORDERS: usize = 50_000;

/// A DAG stored as sorted parent lists per node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dag {
    n: usize,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
}

impl Dag {
    /// Build from parent lists; validates node ranges and acyclicity.
    pub fn new(n: usize, parents: Vec<Vec<usize>>) -> Result<Dag> {
        if parents.len() != n {
            return Err(Error::Structural(format!(
                "expected {} parent lists, got {}",
                n,
                parents.len()
            )));
        }
        let mut parents: Vec<Vec<usize>> = parents;
        for (i, ps) in parents.iter_mut().enumerate() {
            ps.sort_unstable();
            ps.dedup();
            for &p in ps.iter() {
                if p >= n {
                    return Err(Error::Structural(format!(
                        "node {} has out-of-range parent {}",
                        i + 1,
                        p + 1
                    )));
                }
                if p == i {
                    return Err(Error::Structural(format!("self-loop at node {}", i + 1)));
                }
            }
        }
        let mut children = vec![Vec::new(); n];
        for (i, ps) in parents.iter().enumerate() {
            for &p in ps {
                children[p].push(i);
            }
        }
        for ch in children.iter_mut() {
            ch.sort_unstable();
        }
        let dag = Dag {
            n,
            parents,
            children,
        };
        dag.topological_order()?;
        Ok(dag)
    }

    /// Chain `1 -> 2 -> ... -> n`.
    pub fn chain(n: usize) -> Dag {
        let parents = (0..n).map(|i| if i == 0 { vec![] } else { vec![i - 1] }).collect();
        Dag::new(n, parents).expect("chain is acyclic")
    }

    /// Diamond on four nodes: `1 -> 2, 1 -> 3, 2 -> 4, 3 -> 4`.
    pub fn diamond() -> Dag {
        Dag::new(4, vec![vec![], vec![0], vec![0], vec![1, 2]]).expect("diamond is acyclic")
    }

    /// Triangle on three nodes: `1 -> 2, 1 -> 3, 2 -> 3`.
    pub fn triangle() -> Dag {
        Dag::new(3, vec![vec![], vec![0], vec![0, 1]]).expect("triangle is acyclic")
    }

    /// Graph with no edges.
    pub fn empty(n: usize) -> Dag {
        Dag::new(n, vec![vec![]; n]).expect("empty graph is acyclic")
    }

    /// Random DAG: each edge `i -> j` for `i < j` is included independently
    /// with probability `edge_prob`, so the identity order is always valid.
    pub fn random(n: usize, edge_prob: f64, seed: u64) -> Dag {
        let mut rng = seed::rng(seed, Stream::Graph, 0);
        let mut parents = vec![Vec::new(); n];
        for j in 1..n {
            for i in 0..j {
                if rng.gen::<f64>() < edge_prob {
                    parents[j].push(i);
                }
            }
        }
        Dag::new(n, parents).expect("upper-triangular adjacency is acyclic")
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    #[inline]
    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn is_edge(&self, from: usize, to: usize) -> bool {
        self.parents[to].binary_search(&from).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }

    pub fn max_in_degree(&self) -> usize {
        self.parents.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Closed parent set `Pa(i) ∪ {i}`, sorted.
    pub fn pa_bar(&self, i: usize) -> Vec<usize> {
        let mut out = self.parents[i].to_vec();
        out.push(i);
        out.sort_unstable();
        out
    }

    /// Closed child set `Ch(i) ∪ {i}`, sorted.
    pub fn ch_bar(&self, i: usize) -> Vec<usize> {
        let mut out = self.children[i].to_vec();
        out.push(i);
        out.sort_unstable();
        out
    }

    /// One topological order (parents before children), or a cycle error.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let mut in_deg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: Vec<usize> = (0..self.n).filter(|&i| in_deg[i] == 0).collect();
        ready.reverse(); // pop from the back keeps ascending node order
        let mut order = Vec::with_capacity(self.n);
        while let Some(i) = ready.pop() {
            order.push(i);
            for &c in &self.children[i] {
                in_deg[c] -= 1;
                if in_deg[c] == 0 {
                    // Insert keeping `ready` descending so pops ascend.
                    let pos = ready.partition_point(|&x| x > c);
                    ready.insert(pos, c);
                }
            }
        }
        if order.len() != self.n {
            return Err(Error::Structural("cycle detected".into()));
        }
        Ok(order)
    }

    /// Nodes with no children.
    pub fn sinks(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.children[i].is_empty()).collect()
    }
}

/// A permutation of the nodes interpreted as a causal order: position `k`
/// holds the `k`-th node of the sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalOrder {
    seq: Vec<usize>,
}

impl CausalOrder {
    pub fn new(seq: Vec<usize>) -> Result<CausalOrder> {
        let n = seq.len();
        let mut seen = vec![false; n];
        for &v in &seq {
            if v >= n || seen[v] {
                return Err(Error::Structural(format!(
                    "sequence {:?} is not a permutation",
                    seq
                )));
            }
            seen[v] = true;
        }
        Ok(CausalOrder { seq })
    }

    pub fn identity(n: usize) -> CausalOrder {
        CausalOrder {
            seq: (0..n).collect(),
        }
    }

    #[inline]
    pub fn seq(&self) -> &[usize] {
        &self.seq
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    /// Position of each node in the sequence (inverse permutation).
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.seq.len()];
        for (k, &v) in self.seq.iter().enumerate() {
            pos[v] = k;
        }
        pos
    }

    /// 0/1 permutation matrix `P` with `P[k, seq[k]] = 1`, so `P z` lists the
    /// coordinates of `z` in sequence order.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.seq.len();
        let mut p = DMatrix::zeros(n, n);
        for (k, &v) in self.seq.iter().enumerate() {
            p[(k, v)] = 1.0;
        }
        p
    }

    /// A sequence is valid for a DAG when every parent appears before each of
    /// its children.
    pub fn is_valid_for(&self, dag: &Dag) -> bool {
        if self.seq.len() != dag.n() {
            return false;
        }
        let pos = self.positions();
        (0..dag.n()).all(|child| dag.parents(child).iter().all(|&p| pos[p] < pos[child]))
    }
}

/// All valid causal orders under the default caps; see
/// [`valid_orders_with_cap`].
pub fn valid_orders(dag: &Dag) -> Vec<CausalOrder> {
    valid_orders_with_cap(dag, DEFAULT_ORDER_CAP, MAX_ENUMERATED_ORDERS)
}

/// Enumerate valid causal orders by backtracking. Beyond `node_cap` nodes, or
/// once `max_orders` sequences have been produced, enumeration stops and
/// (for the node cap) a single topological order is returned instead.
pub fn valid_orders_with_cap(dag: &Dag, node_cap: usize, max_orders: usize) -> Vec<CausalOrder> {
    if dag.n() > node_cap {
        return vec![CausalOrder {
            seq: dag.topological_order().expect("constructed DAGs are acyclic"),
        }];
    }
    let n = dag.n();
    let mut in_deg: Vec<usize> = (0..n).map(|i| dag.parents(i).len()).collect();
    let mut used = vec![false; n];
    let mut prefix = Vec::with_capacity(n);
    let mut out = Vec::new();
    fn recurse(
        dag: &Dag,
        in_deg: &mut [usize],
        used: &mut [bool],
        prefix: &mut Vec<usize>,
        out: &mut Vec<CausalOrder>,
        max_orders: usize,
    ) {
        if out.len() >= max_orders {
            return;
        }
        if prefix.len() == dag.n() {
            out.push(CausalOrder { seq: prefix.clone() });
            return;
        }
        for i in 0..dag.n() {
            if !used[i] && in_deg[i] == 0 {
                used[i] = true;
                prefix.push(i);
                for &c in dag.children(i) {
                    in_deg[c] -= 1;
                }
                recurse(dag, in_deg, used, prefix, out, max_orders);
                for &c in dag.children(i) {
                    in_deg[c] += 1;
                }
                prefix.pop();
                used[i] = false;
            }
        }
    }
    recurse(dag, &mut in_deg, &mut used, &mut prefix, &mut out, max_orders);
    out
}

/// For each node `i`, the nodes `j ≠ i` whose child set covers `i`'s closed
/// child set: `ch̄(i) ⊆ Ch(j)`. A node with a nonempty entry is *surrounded*;
/// its latent estimate is only identifiable up to mixing with its
/// surrounding nodes under soft interventions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurroundMap {
    sur: Vec<Vec<usize>>,
}

impl SurroundMap {
    /// Surrounding nodes of `i`, sorted.
    #[inline]
    pub fn sur(&self, i: usize) -> &[usize] {
        &self.sur[i]
    }

    /// Sorted list of surrounded nodes.
    pub fn surrounded(&self) -> Vec<usize> {
        (0..self.sur.len()).filter(|&i| !self.sur[i].is_empty()).collect()
    }

    pub fn n(&self) -> usize {
        self.sur.len()
    }
}

/// Compute the surround map by direct set inclusion.
pub fn surround_map(dag: &Dag) -> SurroundMap {
    let n = dag.n();
    let mut sur = vec![Vec::new(); n];
    for i in 0..n {
        let chbar = dag.ch_bar(i);
        for j in 0..n {
            if j != i && chbar.iter().all(|&c| dag.is_edge(j, c)) {
                sur[i].push(j);
            }
        }
    }
    SurroundMap { sur }
}

/// Binary mask `Σ` with `Σ[i, j] = 1` iff `ch̄(j) ⊆ Ch(i)`, i.e. iff `i`
/// surrounds `j`. Rows of the score-transformation matrix relating a
/// recovered decoder to the truth are supported on `I + Σ`; its transpose
/// bounds where latent estimates may mix.
pub fn sigma_mask(dag: &Dag) -> DMatrix<u8> {
    let n = dag.n();
    let sur = surround_map(dag);
    let mut sigma = DMatrix::zeros(n, n);
    for j in 0..n {
        for &i in sur.sur(j) {
            sigma[(i, j)] = 1;
        }
    }
    sigma
}

/// Do two DAGs on the same node count coincide after relabeling by `order`?
/// Node `order[i]` of `g2` is matched with node `i` of `g1`.
pub fn dag_equal_up_to_order(g1: &Dag, g2: &Dag, order: &CausalOrder) -> Result<bool> {
    if g1.n() != g2.n() || order.len() != g1.n() {
        return Err(Error::Shape(format!(
            "node counts differ: {} vs {} (order {})",
            g1.n(),
            g2.n(),
            order.len()
        )));
    }
    let map = order.seq();
    for j in 0..g1.n() {
        for i in 0..g1.n() {
            if g1.is_edge(i, j) != g2.is_edge(map[i], map[j]) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Render in the text format: a header `n=<count>`, then one line
/// `i <- p1,p2,...` per node with parents, 1-based, ascending.
pub fn format_dag(dag: &Dag) -> String {
    let mut out = format!("n={}", dag.n());
    for i in 0..dag.n() {
        if !dag.parents(i).is_empty() {
            let ps: Vec<String> = dag.parents(i).iter().map(|p| (p + 1).to_string()).collect();
            out.push_str(&format!("\n{} <- {}", i + 1, ps.join(",")));
        }
    }
    out.push('\n');
    out
}

/// Parse the text format produced by [`format_dag`]. Blank lines and `#`
/// comments are ignored.
pub fn parse_dag(text: &str) -> Result<Dag> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Structural("empty graph text".into()))?;
    let n: usize = header
        .strip_prefix("n=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Structural(format!("bad header {header:?}, expected n=<count>")))?;
    let mut parents = vec![Vec::new(); n];
    for line in lines {
        let (lhs, rhs) = line
            .split_once("<-")
            .ok_or_else(|| Error::Structural(format!("bad edge line {line:?}")))?;
        let child: usize = lhs
            .trim()
            .parse()
            .map_err(|_| Error::Structural(format!("bad node id in {line:?}")))?;
        if child == 0 || child > n {
            return Err(Error::Structural(format!(
                "node id {child} out of range 1..={n}"
            )));
        }
        for tok in rhs.split(',') {
            let p: usize = tok
                .trim()
                .parse()
                .map_err(|_| Error::Structural(format!("bad parent id in {line:?}")))?;
            if p == 0 || p > n {
                return Err(Error::Structural(format!(
                    "parent id {p} out of range 1..={n}"
                )));
            }
            parents[child - 1].push(p - 1);
        }
    }
    Dag::new(n, parents)
}
