//! Exact graph edit distance for small graphs and labelled pair files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Corpus, GraphInstance};

pub const DEFAULT_SIZE_CAP: usize = 8;

/// Edit costs. Node labels are attribute vectors compared bitwise; graphs
/// without attributes have a single label. Edge weights are ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditCostModel {
    pub node_insert: f64,
    pub node_delete: f64,
    pub node_substitute: f64,
    pub edge_insert: f64,
    pub edge_delete: f64,
}

impl Default for EditCostModel {
    fn default() -> Self {
        EditCostModel {
            node_insert: 1.0,
            node_delete: 1.0,
            node_substitute: 1.0,
            edge_insert: 1.0,
            edge_delete: 1.0,
        }
    }
}

impl EditCostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.node_insert,
            self.node_delete,
            self.node_substitute,
            self.edge_insert,
            self.edge_delete,
        ];
        if all.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::InvalidArgument(format!("edit costs must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Graph reduced to what edit costs can see.
struct Skeleton {
    n: usize,
    labels: Vec<u32>,
    adj: Vec<Vec<bool>>,
    degree: Vec<usize>,
}

fn skeletons(g1: &GraphInstance, g2: &GraphInstance) -> (Skeleton, Skeleton) {
    let mut label_ids: BTreeMap<Vec<u64>, u32> = BTreeMap::new();
    let mut labels_of = |g: &GraphInstance| -> Vec<u32> {
        (0..g.node_count())
            .map(|v| {
                let key: Vec<u64> = g
                    .attributes()
                    .map(|a| a[v].iter().map(|x| x.to_bits()).collect())
                    .unwrap_or_default();
                let next = label_ids.len() as u32;
                *label_ids.entry(key).or_insert(next)
            })
            .collect()
    };
    let l1 = labels_of(g1);
    let l2 = labels_of(g2);
    let build = |g: &GraphInstance, labels: Vec<u32>| {
        let n = g.node_count();
        let mut adj = vec![vec![false; n]; n];
        for (u, v, _) in g.edges() {
            adj[u][v] = true;
            adj[v][u] = true;
        }
        Skeleton {
            n,
            labels,
            degree: (0..n).map(|v| g.degree(v)).collect(),
            adj,
        }
    };
    (build(g1, l1), build(g2, l2))
}

struct Search<'a> {
    g1: &'a Skeleton,
    g2: &'a Skeleton,
    costs: EditCostModel,
    /// Order in which `g1` nodes are assigned.
    order: Vec<usize>,
    /// `g1` node to `g2` node, `None` for deletion.
    mapping: Vec<Option<usize>>,
    used: Vec<bool>,
    best: f64,
}

impl Search<'_> {
    /// Cost of assigning `order[depth]` given the assignments before it.
    fn step_cost(&self, depth: usize, target: Option<usize>) -> f64 {
        let u = self.order[depth];
        let c = &self.costs;
        let mut cost = match target {
            None => c.node_delete,
            Some(v) if self.g1.labels[u] == self.g2.labels[v] => 0.0,
            Some(_) => c.node_substitute,
        };
        for &w in &self.order[..depth] {
            let e1 = self.g1.adj[u][w];
            let e2 = match (target, self.mapping[w]) {
                (Some(v), Some(x)) => self.g2.adj[v][x],
                _ => false,
            };
            if e1 && !e2 {
                cost += c.edge_delete;
            } else if e2 && !e1 {
                cost += c.edge_insert;
            }
        }
        cost
    }

    /// Insertion of every unused `g2` node and the edges touching them.
    fn completion_cost(&self) -> f64 {
        let mut cost = 0.0;
        for v in 0..self.g2.n {
            if self.used[v] {
                continue;
            }
            cost += self.costs.node_insert;
            for x in 0..self.g2.n {
                if self.g2.adj[v][x] && (self.used[x] || x > v) {
                    cost += self.costs.edge_insert;
                }
            }
        }
        cost
    }

    /// Admissible bound for the nodes from `depth` on: label multiset
    /// mismatch plus the difference in untouched edge counts.
    fn lower_bound(&self, depth: usize) -> f64 {
        let c = &self.costs;
        let rest1 = &self.order[depth..];
        let rest2: Vec<usize> = (0..self.g2.n).filter(|&v| !self.used[v]).collect();
        let mut counts: BTreeMap<u32, i64> = BTreeMap::new();
        for &u in rest1 {
            *counts.entry(self.g1.labels[u]).or_default() += 1;
        }
        let mut common = 0usize;
        for &v in &rest2 {
            if let Some(n) = counts.get_mut(&self.g2.labels[v]) {
                if *n > 0 {
                    *n -= 1;
                    common += 1;
                }
            }
        }
        let (n1, n2) = (rest1.len(), rest2.len());
        let paired = n1.min(n2);
        let mut bound = (paired - common) as f64 * c.node_substitute.min(c.node_delete + c.node_insert);
        bound += n1.saturating_sub(n2) as f64 * c.node_delete + n2.saturating_sub(n1) as f64 * c.node_insert;

        let mut in_rest1 = vec![false; self.g1.n];
        rest1.iter().for_each(|&u| in_rest1[u] = true);
        let edges1 = count_edges_touching(self.g1, &in_rest1);
        let unused: Vec<bool> = self.used.iter().map(|u| !u).collect();
        let edges2 = count_edges_touching(self.g2, &unused);
        bound += edges1.saturating_sub(edges2) as f64 * c.edge_delete;
        bound += edges2.saturating_sub(edges1) as f64 * c.edge_insert;
        bound
    }

    fn explore(&mut self, depth: usize, cost: f64) {
        if depth == self.order.len() {
            let total = cost + self.completion_cost();
            if total < self.best {
                self.best = total;
            }
            return;
        }
        if cost + self.lower_bound(depth) >= self.best {
            return;
        }
        let u = self.order[depth];
        let mut candidates: Vec<Option<usize>> = (0..self.g2.n).filter(|&v| !self.used[v]).map(Some).collect();
        candidates.sort_by_key(|t| {
            let v = t.expect("only mapped candidates so far");
            (
                self.g1.labels[u] != self.g2.labels[v],
                self.g1.degree[u].abs_diff(self.g2.degree[v]),
                v,
            )
        });
        candidates.push(None);
        for target in candidates {
            let step = self.step_cost(depth, target);
            if cost + step >= self.best {
                continue;
            }
            self.mapping[u] = target;
            if let Some(v) = target {
                self.used[v] = true;
            }
            self.explore(depth + 1, cost + step);
            if let Some(v) = target {
                self.used[v] = false;
            }
            self.mapping[u] = None;
        }
    }
}

fn count_edges_touching(g: &Skeleton, touched: &[bool]) -> usize {
    let mut count = 0;
    for a in 0..g.n {
        for b in a + 1..g.n {
            if g.adj[a][b] && (touched[a] || touched[b]) {
                count += 1;
            }
        }
    }
    count
}

/// Minimum edit cost over all node mappings, by depth-first branch and bound.
pub fn exact_ged(g1: &GraphInstance, g2: &GraphInstance, costs: &EditCostModel, size_cap: usize) -> Result<f64> {
    costs.validate()?;
    for g in [g1, g2] {
        if g.node_count() > size_cap {
            return Err(Error::InvalidArgument(format!(
                "graph {} has {} nodes, above the exact GED cap of {size_cap}; supply approximate labels instead",
                g.id(),
                g.node_count()
            )));
        }
    }
    let (s1, s2) = skeletons(g1, g2);
    let mut order: Vec<usize> = (0..s1.n).collect();
    order.sort_by_key(|&u| (std::cmp::Reverse(s1.degree[u]), u));
    let mut search = Search {
        g1: &s1,
        g2: &s2,
        costs: *costs,
        order,
        mapping: vec![None; s1.n],
        used: vec![false; s2.n],
        best: f64::INFINITY,
    };
    search.explore(0, 0.0);
    Ok(search.best)
}

/// `1 - exp(-d / ((n1 + n2) / 2))`.
pub fn normalized_ground_truth(d: f64, n1: usize, n2: usize) -> Result<f64> {
    if !(d >= 0.0) || !d.is_finite() {
        return Err(Error::InvalidArgument(format!("edit distance must be finite and >= 0, got {d}")));
    }
    if d == 0.0 {
        return Ok(0.0);
    }
    let mean = (n1 + n2) as f64 / 2.0;
    if mean == 0.0 {
        return Err(Error::InvalidArgument("positive distance between two empty graphs".into()));
    }
    Ok(1.0 - (-d / mean).exp())
}

/// Symmetric map from unordered graph-id pairs to distances in `[0, 1)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSet {
    entries: BTreeMap<(String, String), f64>,
}

fn key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: &str, b: &str, distance: f64) -> Result<()> {
        if !(0.0..1.0).contains(&distance) {
            return Err(Error::InvalidData(format!("label ({a}, {b}) = {distance} outside [0, 1)")));
        }
        if a == b && distance != 0.0 {
            return Err(Error::InvalidData(format!("self pair {a} labelled {distance}")));
        }
        match self.entries.insert(key(a, b), distance) {
            Some(prev) if prev != distance => Err(Error::InvalidData(format!(
                "conflicting labels for ({a}, {b}): {prev} and {distance}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        if a == b {
            return Some(0.0);
        }
        self.entries.get(&key(a, b)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries with the lexicographically smaller id first.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, f64)> {
        self.entries.iter().map(|((a, b), v)| (a.as_str(), b.as_str(), *v))
    }

    /// One JSON array `["id_i", "id_j", distance]` per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (a, b, v) in self.iter() {
            out.push_str(&serde_json::to_string(&(a, b, v)).expect("labels serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut set = LabelSet::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let (a, b, v): (String, String, f64) = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            set.insert(&a, &b, v).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file))
    }
}

/// All unordered pairs `i < j` of `0..m`.
pub fn all_pairs(m: usize) -> Vec<(usize, usize)> {
    (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect()
}

/// Normalized exact GED for each listed pair, computed in parallel.
pub fn build_ground_truth(
    corpus: &Corpus,
    pairs: &[(usize, usize)],
    costs: &EditCostModel,
    size_cap: usize,
) -> Result<LabelSet> {
    let values: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (corpus.get(i), corpus.get(j));
            let d = if i == j { 0.0 } else { exact_ged(a, b, costs, size_cap)? };
            normalized_ground_truth(d, a.node_count(), b.node_count())
        })
        .collect();
    let mut set = LabelSet::new();
    for (&(i, j), v) in pairs.iter().zip(values) {
        set.insert(corpus.get(i).id(), corpus.get(j).id(), v?)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic_corpus, SynthParams};

    fn graph(id: &str, n: usize, edges: &[(usize, usize)]) -> GraphInstance {
        GraphInstance::new(
            id,
            (0..n).map(|i| format!("v{i}")).collect(),
            edges.iter().map(|&(a, b)| (a, b, 1.0)),
            None,
        )
        .unwrap()
    }

    fn ged(a: &GraphInstance, b: &GraphInstance) -> f64 {
        exact_ged(a, b, &EditCostModel::default(), DEFAULT_SIZE_CAP).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..n {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Unit-cost GED by trying every bijection between both graphs padded
    /// with isolated dummy nodes.
    fn brute_force_ged(a: &GraphInstance, b: &GraphInstance) -> f64 {
        let (n1, n2) = (a.node_count(), b.node_count());
        let n = n1 + n2;
        let mut best = f64::INFINITY;
        for p in permutations(n) {
            let mut cost = 0.0;
            for (u, &v) in p.iter().enumerate() {
                match (u < n1, v < n2) {
                    (true, false) | (false, true) => cost += 1.0,
                    _ => {}
                }
            }
            for u in 0..n {
                for w in u + 1..n {
                    let e1 = u < n1 && w < n1 && a.has_edge(u, w);
                    let e2 = p[u] < n2 && p[w] < n2 && b.has_edge(p[u], p[w]);
                    if e1 != e2 {
                        cost += 1.0;
                    }
                }
            }
            best = best.min(cost);
        }
        best
    }

    fn isomorphic(a: &GraphInstance, b: &GraphInstance) -> bool {
        let n = a.node_count();
        if n != b.node_count() || a.edge_count() != b.edge_count() {
            return false;
        }
        permutations(n)
            .iter()
            .any(|p| a.edges().all(|(u, v, _)| b.has_edge(p[u], p[v])))
    }

    #[test]
    fn hand_cases() {
        let p2 = graph("p2", 2, &[(0, 1)]);
        let p3 = graph("p3", 3, &[(0, 1), (1, 2)]);
        let tri = graph("t", 3, &[(0, 1), (1, 2), (0, 2)]);
        assert_eq!(ged(&p2, &p3), 2.0);
        assert_eq!(ged(&p3, &p2), 2.0);
        assert_eq!(ged(&tri, &p3), 1.0);
        assert_eq!(ged(&tri, &tri), 0.0);
        let empty = graph("e", 0, &[]);
        assert_eq!(ged(&empty, &tri), 6.0);
    }

    #[test]
    fn labels_are_substituted() {
        let attrs = |v: &[f64]| Some(v.iter().map(|x| vec![*x]).collect());
        let a = GraphInstance::new("a", vec!["x".into(), "y".into()], [(0, 1, 1.0)], attrs(&[0.0, 1.0])).unwrap();
        let b = GraphInstance::new("b", vec!["x".into(), "y".into()], [(0, 1, 1.0)], attrs(&[1.0, 1.0])).unwrap();
        assert_eq!(ged(&a, &b), 1.0);
    }

    #[test]
    fn size_cap_is_enforced() {
        let big = graph("big", 9, &[]);
        let err = exact_ged(&big, &big, &EditCostModel::default(), 8).unwrap_err();
        assert!(err.to_string().contains("approximate"));
    }

    #[test]
    fn matches_brute_force_on_small_graphs() {
        let corpus = generate_synthetic_corpus(&SynthParams {
            count: 12,
            size_min: 1,
            size_max: 4,
            edge_prob: 0.5,
            ..SynthParams::default()
        })
        .unwrap();
        for a in corpus.graphs() {
            for b in corpus.graphs() {
                assert_eq!(ged(a, b), brute_force_ged(a, b), "{} {}", a.id(), b.id());
            }
        }
    }

    #[test]
    fn isomorphic_pairs_have_zero_distance() {
        let corpus = generate_synthetic_corpus(&SynthParams {
            count: 30,
            size_min: 4,
            size_max: 6,
            edge_prob: 0.5,
            seed: 3,
            ..SynthParams::default()
        })
        .unwrap();
        for a in corpus.graphs() {
            for b in corpus.graphs() {
                assert_eq!(ged(a, b) == 0.0, isomorphic(a, b), "{} {}", a.id(), b.id());
            }
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalized_ground_truth(0.0, 4, 4).unwrap(), 0.0);
        assert!((normalized_ground_truth(2.0, 4, 4).unwrap() - 0.393469).abs() < 1e-6);
        assert!(normalized_ground_truth(1e6, 4, 4).unwrap() < 1.0 + 1e-12);
        assert!(normalized_ground_truth(-1.0, 4, 4).is_err());
    }

    #[test]
    fn label_file_round_trip() {
        let corpus = generate_synthetic_corpus(&SynthParams {
            count: 6,
            ..SynthParams::default()
        })
        .unwrap();
        let labels = build_ground_truth(&corpus, &all_pairs(6), &EditCostModel::default(), 8).unwrap();
        assert_eq!(labels.len(), 15);
        let text = labels.to_jsonl();
        let back = LabelSet::from_reader(text.as_bytes()).unwrap();
        assert_eq!(back, labels);
        assert_eq!(labels.get("g1", "g0"), labels.get("g0", "g1"));
        assert_eq!(labels.get("g3", "g3"), Some(0.0));
        assert!(LabelSet::from_reader(&b"[\"a\",\"b\",0.2]\n[\"b\",\"a\",0.3]\n"[..]).is_err());
        assert!(LabelSet::from_reader(&b"[\"a\",\"b\",1.5]\n"[..]).is_err());
    }
}
