//! Mapping PE instances onto workers so that few connections cross workers.
//!
//! Greedy edge contraction builds clusters under the load limit, clusters are
//! placed on workers largest-first, then single-node moves and pairwise swaps
//! polish the cut. Passes in the style of Fiduccia and Mattheyses follow,
//! which may walk through non-improving moves to reach a smaller cut. The
//! result is never worse than round-robin.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EnactError;
use crate::graph::WorkflowGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExecutionPlan {
    pub partition_of: BTreeMap<String, usize>,
    pub worker_count: usize,
    pub cut_edges: usize,
    pub load_of: BTreeMap<usize, f64>,
}

impl ExecutionPlan {
    /// Build a plan from an assignment, computing cut and loads.
    pub fn from_assignment(
        graph: &WorkflowGraph,
        worker_count: usize,
        partition_of: BTreeMap<String, usize>,
        weights: &BTreeMap<String, f64>,
    ) -> Self {
        let cut_edges = cut_of(graph, &partition_of);
        let load_of = loads(&partition_of, worker_count, weights);
        ExecutionPlan { partition_of, worker_count, cut_edges, load_of }
    }

    /// Everything on worker 0.
    pub fn single(graph: &WorkflowGraph) -> Self {
        let part = graph.nodes().keys().map(|k| (k.clone(), 0)).collect();
        Self::from_assignment(graph, 1, part, &unit_weights(graph))
    }

    /// Node `i` (in id order) on worker `i mod worker_count`.
    pub fn round_robin(graph: &WorkflowGraph, worker_count: usize) -> Self {
        let part = graph.nodes().keys().enumerate().map(|(i, k)| (k.clone(), i % worker_count.max(1))).collect();
        Self::from_assignment(graph, worker_count.max(1), part, &unit_weights(graph))
    }

    /// Check the plan covers `graph` and its stored cut and loads recount.
    pub fn check(&self, graph: &WorkflowGraph, weights: &BTreeMap<String, f64>) -> Result<(), EnactError> {
        if self.worker_count == 0 {
            return Err(EnactError::BadPlan("workerCount must be positive".into()));
        }
        for id in graph.nodes().keys() {
            match self.partition_of.get(id) {
                None => return Err(EnactError::BadPlan(format!("node {id} is not assigned"))),
                Some(&w) if w >= self.worker_count => {
                    return Err(EnactError::BadPlan(format!("node {id} assigned to worker {w} of {}", self.worker_count)))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.partition_of.keys().find(|k| graph.node(k).is_none()) {
            return Err(EnactError::BadPlan(format!("plan assigns unknown node {extra}")));
        }
        if self.cut_edges != cut_of(graph, &self.partition_of) {
            return Err(EnactError::BadPlan("cutEdges does not match the assignment".into()));
        }
        if self.load_of != loads(&self.partition_of, self.worker_count, weights) {
            return Err(EnactError::BadPlan("loadOf does not match the assignment".into()));
        }
        Ok(())
    }
}

pub fn unit_weights(graph: &WorkflowGraph) -> BTreeMap<String, f64> {
    graph.nodes().keys().map(|k| (k.clone(), 1.0)).collect()
}

pub fn cut_of(graph: &WorkflowGraph, part: &BTreeMap<String, usize>) -> usize {
    graph.edges().iter().filter(|e| part.get(&e.from.instance) != part.get(&e.to.instance)).count()
}

fn loads(part: &BTreeMap<String, usize>, k: usize, weights: &BTreeMap<String, f64>) -> BTreeMap<usize, f64> {
    let mut out: BTreeMap<usize, f64> = (0..k).map(|w| (w, 0.0)).collect();
    for (id, w) in part {
        *out.entry(*w).or_default() += weights.get(id).copied().unwrap_or(1.0);
    }
    out
}

/// Indexed view used by the search.
struct Problem {
    ids: Vec<String>,
    weight: Vec<f64>,
    /// Undirected adjacency with multiplicity: (neighbour, connection count).
    adj: Vec<Vec<(usize, usize)>>,
    edges: Vec<(usize, usize)>,
    k: usize,
    max_load: f64,
}

impl Problem {
    fn cut(&self, a: &[usize]) -> usize {
        self.edges.iter().filter(|(u, v)| a[*u] != a[*v]).count()
    }

    fn load(&self, a: &[usize]) -> Vec<f64> {
        let mut l = vec![0.0; self.k];
        for (i, w) in a.iter().enumerate() {
            l[*w] += self.weight[i];
        }
        l
    }

    fn fits(&self, load: f64) -> bool {
        load <= self.max_load + 1e-9
    }

    /// Connections from node `i` into worker `w`.
    fn links(&self, a: &[usize], i: usize, w: usize) -> usize {
        self.adj[i].iter().filter(|(j, _)| a[*j] == w).map(|(_, m)| m).sum()
    }
}

pub fn partition_graph(
    graph: &WorkflowGraph,
    worker_count: usize,
    node_weights: &BTreeMap<String, f64>,
    max_load_per_worker: f64,
) -> Result<ExecutionPlan, EnactError> {
    if graph.is_empty() {
        return Err(EnactError::EmptyGraph);
    }
    if worker_count == 0 {
        return Err(EnactError::BadPlan("workerCount must be positive".into()));
    }
    let ids: Vec<String> = graph.nodes().keys().cloned().collect();
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let weight: Vec<f64> = ids.iter().map(|id| node_weights.get(id).copied().unwrap_or(1.0)).collect();
    let mut adj = vec![BTreeMap::<usize, usize>::new(); ids.len()];
    let mut edges = Vec::new();
    for e in graph.edges() {
        let (u, v) = (index[e.from.instance.as_str()], index[e.to.instance.as_str()]);
        edges.push((u, v));
        if u != v {
            *adj[u].entry(v).or_default() += 1;
            *adj[v].entry(u).or_default() += 1;
        }
    }
    let p = Problem {
        adj: adj.into_iter().map(|m| m.into_iter().collect()).collect(),
        ids,
        weight,
        edges,
        k: worker_count,
        max_load: max_load_per_worker,
    };
    let total: f64 = p.weight.iter().sum();
    if p.weight.iter().any(|w| !(*w >= 0.0)) {
        return Err(EnactError::InfeasibleLoad("node weights must be non-negative".into()));
    }
    if let Some(i) = p.weight.iter().position(|w| !p.fits(*w)) {
        return Err(EnactError::InfeasibleLoad(format!(
            "node {} weighs {} > maxLoad {}",
            p.ids[i], p.weight[i], max_load_per_worker
        )));
    }
    if !p.fits(total / worker_count as f64) {
        return Err(EnactError::InfeasibleLoad(format!(
            "total weight {total} exceeds {worker_count} x {max_load_per_worker}"
        )));
    }

    let mut best = place(&p, &contract(&p)).or_else(|| place_nodes(&p)).ok_or_else(|| {
        EnactError::InfeasibleLoad(format!("no placement of {} nodes fits {worker_count} workers", p.ids.len()))
    })?;
    refine(&p, &mut best);
    while fm_pass(&p, &mut best) {}
    let rr: Vec<usize> = (0..p.ids.len()).map(|i| i % p.k).collect();
    if p.load(&rr).iter().all(|l| p.fits(*l)) && p.cut(&rr) < p.cut(&best) {
        best = rr;
    }
    let part = p.ids.iter().cloned().zip(best).collect();
    let weights = p.ids.iter().cloned().zip(p.weight.iter().copied()).collect();
    Ok(ExecutionPlan::from_assignment(graph, worker_count, part, &weights))
}

/// Greedy contraction: merge the heaviest connected cluster pair that still fits.
fn contract(p: &Problem) -> Vec<Vec<usize>> {
    let mut cluster_of: Vec<usize> = (0..p.ids.len()).collect();
    let mut members: Vec<Vec<usize>> = (0..p.ids.len()).map(|i| vec![i]).collect();
    let mut cw = p.weight.clone();
    loop {
        // pair weights between distinct live clusters, keyed by (lo, hi) cluster index
        let mut between: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for &(u, v) in &p.edges {
            let (a, b) = (cluster_of[u], cluster_of[v]);
            if a != b {
                *between.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        // cluster index order is node-id order of the cluster's first member,
        // so the first maximum in key order is the lexicographic tie-break
        let pick = between
            .iter()
            .filter(|((a, b), _)| p.fits(cw[*a] + cw[*b]))
            .fold(None::<((usize, usize), usize)>, |acc, (k, w)| match acc {
                Some((_, bw)) if bw >= *w => acc,
                _ => Some((*k, *w)),
            });
        let Some(((a, b), _)) = pick else { break };
        let moved = std::mem::take(&mut members[b]);
        for &n in &moved {
            cluster_of[n] = a;
        }
        members[a].extend(moved);
        members[a].sort_unstable();
        cw[a] += cw[b];
        cw[b] = 0.0;
    }
    members.into_iter().filter(|m| !m.is_empty()).collect()
}

/// Largest-first placement of clusters; each goes where it has the most links,
/// then the lightest load, then the lowest index.
fn place(p: &Problem, clusters: &[Vec<usize>]) -> Option<Vec<usize>> {
    let mut order: Vec<&Vec<usize>> = clusters.iter().collect();
    let cw = |c: &Vec<usize>| c.iter().map(|i| p.weight[*i]).sum::<f64>();
    order.sort_by(|a, b| cw(b).total_cmp(&cw(a)).then(a[0].cmp(&b[0])));
    let unassigned = usize::MAX;
    let mut a = vec![unassigned; p.ids.len()];
    let mut load = vec![0.0; p.k];
    for c in order {
        let w = cw(c);
        let target = (0..p.k)
            .filter(|t| p.fits(load[*t] + w))
            .max_by(|x, y| {
                let lx: usize = c.iter().map(|i| p.links(&a, *i, *x)).sum();
                let ly: usize = c.iter().map(|i| p.links(&a, *i, *y)).sum();
                lx.cmp(&ly).then(load[*y].total_cmp(&load[*x])).then(y.cmp(x))
            })?;
        for &i in c {
            a[i] = target;
        }
        load[target] += w;
    }
    Some(a)
}

/// Fallback: first-fit decreasing on single nodes.
fn place_nodes(p: &Problem) -> Option<Vec<usize>> {
    let singles: Vec<Vec<usize>> = (0..p.ids.len()).map(|i| vec![i]).collect();
    place(p, &singles)
}

/// Accept cut-reducing moves and swaps until none is left.
fn refine(p: &Problem, a: &mut [usize]) {
    let mut load = p.load(a);
    loop {
        let mut improved = false;
        for i in 0..a.len() {
            let from = a[i];
            let here = p.links(a, i, from) as i64;
            let best = (0..p.k)
                .filter(|t| *t != from && p.fits(load[*t] + p.weight[i]))
                .map(|t| (p.links(a, i, t) as i64 - here, t))
                .filter(|(gain, _)| *gain > 0)
                .max_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)));
            if let Some((_, t)) = best {
                load[from] -= p.weight[i];
                load[t] += p.weight[i];
                a[i] = t;
                improved = true;
            }
        }
        if !improved {
            'swaps: for i in 0..a.len() {
                for j in i + 1..a.len() {
                    let (wi, wj) = (a[i], a[j]);
                    if wi == wj {
                        continue;
                    }
                    let (li, lj) = (load[wi] - p.weight[i] + p.weight[j], load[wj] - p.weight[j] + p.weight[i]);
                    if !p.fits(li) || !p.fits(lj) {
                        continue;
                    }
                    let before = p.cut(a);
                    a.swap(i, j);
                    if p.cut(a) < before {
                        load[wi] = li;
                        load[wj] = lj;
                        improved = true;
                        break 'swaps;
                    }
                    a.swap(i, j);
                }
            }
        }
        if !improved {
            return;
        }
    }
}

/// Above this node count passes only consider single moves.
const SWAP_LIMIT: usize = 256;

#[derive(Clone, Copy)]
enum Op {
    Move(usize, usize),
    Swap(usize, usize),
}

/// One pass of tentative moves and swaps, each touching only unlocked nodes.
/// Keeps the prefix with the best cumulative gain; true if the cut shrank.
fn fm_pass(p: &Problem, a: &mut [usize]) -> bool {
    let n = a.len();
    let mut load = p.load(a);
    let mut links = vec![vec![0i64; p.k]; n];
    for (i, row) in links.iter_mut().enumerate() {
        for &(j, m) in &p.adj[i] {
            row[a[j]] += m as i64;
        }
    }
    let between = |i: usize, j: usize| p.adj[i].iter().find(|(x, _)| *x == j).map_or(0, |(_, m)| *m as i64);
    let shift = |links: &mut Vec<Vec<i64>>, a: &mut [usize], i: usize, to: usize| {
        for &(j, m) in &p.adj[i] {
            links[j][a[i]] -= m as i64;
            links[j][to] += m as i64;
        }
        a[i] = to;
    };
    let mut locked = vec![false; n];
    let mut history = Vec::new();
    let (mut total, mut best, mut best_len) = (0i64, 0i64, 0usize);
    for _ in 0..n {
        let mut pick: Option<(i64, Op)> = None;
        let mut consider = |gain: i64, op: Op| {
            if pick.is_none_or(|(g, _)| gain > g) {
                pick = Some((gain, op));
            }
        };
        for i in (0..n).filter(|i| !locked[*i]) {
            for t in (0..p.k).filter(|t| *t != a[i] && p.fits(load[*t] + p.weight[i])) {
                consider(links[i][t] - links[i][a[i]], Op::Move(i, t));
            }
        }
        if n <= SWAP_LIMIT {
            for i in (0..n).filter(|i| !locked[*i]) {
                for j in (i + 1..n).filter(|j| !locked[*j] && a[*j] != a[i]) {
                    let (wi, wj) = (a[i], a[j]);
                    if !p.fits(load[wi] - p.weight[i] + p.weight[j]) || !p.fits(load[wj] - p.weight[j] + p.weight[i]) {
                        continue;
                    }
                    let gain = links[i][wj] - links[i][wi] + links[j][wi] - links[j][wj] - 2 * between(i, j);
                    consider(gain, Op::Swap(i, j));
                }
            }
        }
        let Some((gain, op)) = pick else { break };
        match op {
            Op::Move(i, t) => {
                history.push(Op::Move(i, a[i]));
                load[a[i]] -= p.weight[i];
                load[t] += p.weight[i];
                shift(&mut links, a, i, t);
                locked[i] = true;
            }
            Op::Swap(i, j) => {
                history.push(op);
                let (wi, wj) = (a[i], a[j]);
                load[wi] += p.weight[j] - p.weight[i];
                load[wj] += p.weight[i] - p.weight[j];
                shift(&mut links, a, i, wj);
                shift(&mut links, a, j, wi);
                locked[i] = true;
                locked[j] = true;
            }
        }
        total += gain;
        if total > best {
            best = total;
            best_len = history.len();
        }
    }
    while history.len() > best_len {
        match history.pop().unwrap() {
            Op::Move(i, back) => a[i] = back,
            Op::Swap(i, j) => a.swap(i, j),
        }
    }
    best > 0
}

/// Smallest cut over all load-feasible assignments; exponential, for checks on tiny graphs.
pub fn exhaustive_min_cut(
    graph: &WorkflowGraph,
    worker_count: usize,
    node_weights: &BTreeMap<String, f64>,
    max_load: f64,
) -> Option<usize> {
    let ids: Vec<&String> = graph.nodes().keys().collect();
    let n = ids.len();
    let idx: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let edges: Vec<(usize, usize)> =
        graph.edges().iter().map(|e| (idx[e.from.instance.as_str()], idx[e.to.instance.as_str()])).collect();
    let w: Vec<f64> = ids.iter().map(|id| node_weights.get(*id).copied().unwrap_or(1.0)).collect();
    let mut a = vec![0usize; n];
    let mut best = None;
    loop {
        let mut load = vec![0.0; worker_count];
        for i in 0..n {
            load[a[i]] += w[i];
        }
        if load.iter().all(|l| *l <= max_load + 1e-9) {
            let cut = edges.iter().filter(|(u, v)| a[*u] != a[*v]).count();
            best = Some(best.map_or(cut, |b: usize| b.min(cut)));
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            a[i] += 1;
            if a[i] < worker_count {
                break;
            }
            a[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::graph::{GraphBuilder, PeDescriptor};
    use crate::value::Metadata;

    fn graph(nodes: &[&str], edges: &[(&str, &str)]) -> WorkflowGraph {
        let d = Arc::new(PeDescriptor::atomic("p", "identity", &["i"], &["o"]));
        let mut b = GraphBuilder::new();
        for n in nodes {
            b.node(n, d.clone(), Metadata::new());
        }
        for (f, t) in edges {
            b.connect(&format!("{f}.o"), &format!("{t}.i"));
        }
        b.build().unwrap()
    }

    #[test]
    fn chain_of_four_on_two_workers() {
        let g = graph(&["A", "B", "C", "D"], &[("A", "B"), ("B", "C"), ("C", "D")]);
        let plan = partition_graph(&g, 2, &unit_weights(&g), 2.0).unwrap();
        assert_eq!(plan.cut_edges, 1);
        assert_eq!(exhaustive_min_cut(&g, 2, &unit_weights(&g), 2.0), Some(1));
        plan.check(&g, &unit_weights(&g)).unwrap();
    }

    #[test]
    fn fan_out_reaches_two() {
        let g = graph(&["A", "B", "C", "D"], &[("A", "B"), ("A", "C"), ("A", "D")]);
        let plan = partition_graph(&g, 2, &unit_weights(&g), 2.0).unwrap();
        assert_eq!(plan.cut_edges, 2);
        assert_eq!(exhaustive_min_cut(&g, 2, &unit_weights(&g), 2.0), Some(2));
    }

    #[test]
    fn tight_tree_needs_a_non_improving_move() {
        let g = graph(&["A", "B", "C", "D"], &[("A", "B"), ("A", "C"), ("B", "D")]);
        let plan = partition_graph(&g, 3, &unit_weights(&g), 2.0).unwrap();
        assert_eq!(exhaustive_min_cut(&g, 3, &unit_weights(&g), 2.0), Some(1));
        assert_eq!(plan.cut_edges, 1);
        plan.check(&g, &unit_weights(&g)).unwrap();
    }

    #[test]
    fn one_worker_and_infeasible() {
        let g = graph(&["A", "B", "C"], &[("A", "B"), ("B", "C")]);
        let plan = partition_graph(&g, 1, &unit_weights(&g), 3.0).unwrap();
        assert_eq!(plan.cut_edges, 0);
        assert!(plan.partition_of.values().all(|w| *w == 0));
        assert!(matches!(partition_graph(&g, 1, &unit_weights(&g), 2.0), Err(EnactError::InfeasibleLoad(_))));
    }

    #[test]
    fn check_detects_tampering() {
        let g = graph(&["A", "B"], &[("A", "B")]);
        let mut plan = ExecutionPlan::round_robin(&g, 2);
        plan.check(&g, &unit_weights(&g)).unwrap();
        plan.cut_edges = 0;
        assert!(plan.check(&g, &unit_weights(&g)).is_err());
    }
}
