//! Node-order-invariant inputs: Weisfeiler-Lehman codes, canonical node
//! order, sinusoidal positional embeddings and the zero-padded initial
//! embedding matrix.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::graph::{Corpus, GraphInstance};

pub const DEFAULT_WL_ITERATIONS: usize = 2;

/// Upper bound on leaves explored by the canonical-order search. Only highly
/// symmetric graphs well beyond desk scale come near it; past the bound the
/// best leaf found so far is used.
const MAX_CANONICAL_LEAVES: usize = 100_000;

/// WL colors for every node of every graph in a corpus.
///
/// Colors are ranks in the sorted set of signatures seen across the whole
/// corpus at each round, so they do not depend on node or graph order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WlCodeTable {
    codes: HashMap<String, Vec<u64>>,
    iterations: usize,
}

impl WlCodeTable {
    /// Codes of a graph, indexed like its node list.
    pub fn codes(&self, graph_id: &str) -> Option<&[u64]> {
        self.codes.get(graph_id).map(Vec::as_slice)
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }
}

fn attribute_bits(attrs: &[f64]) -> impl Iterator<Item = u64> + '_ {
    // Normalise -0.0 so equal attribute values share a color.
    attrs.iter().map(|&v| if v == 0.0 { 0 } else { v.to_bits() })
}

/// Iterative color refinement. The initial color is the attribute vector
/// when present, the degree otherwise; each round recolors a node by its own
/// color and the sorted multiset of its neighbors' colors.
pub fn compute_wl_codes(corpus: &Corpus, iterations: usize) -> WlCodeTable {
    let graphs = corpus.graphs();
    let mut signatures: Vec<Vec<Vec<u64>>> = graphs
        .iter()
        .map(|g| {
            (0..g.node_count())
                .map(|v| match g.attributes() {
                    Some(attrs) => std::iter::once(1).chain(attribute_bits(&attrs[v])).collect(),
                    None => vec![0, g.degree(v) as u64],
                })
                .collect()
        })
        .collect();
    let mut colors = rank_signatures(&signatures);

    for _ in 0..iterations {
        signatures = graphs
            .iter()
            .zip(&colors)
            .map(|(g, c)| {
                (0..g.node_count())
                    .map(|v| {
                        let mut neigh: Vec<u64> = g.neighbors(v).iter().map(|&(u, _)| c[u]).collect();
                        neigh.sort_unstable();
                        let mut sig = Vec::with_capacity(neigh.len() + 1);
                        sig.push(c[v]);
                        sig.extend(neigh);
                        sig
                    })
                    .collect()
            })
            .collect();
        colors = rank_signatures(&signatures);
    }

    WlCodeTable {
        codes: graphs
            .iter()
            .zip(colors)
            .map(|(g, c)| (g.id().to_string(), c))
            .collect(),
        iterations,
    }
}

fn rank_signatures(signatures: &[Vec<Vec<u64>>]) -> Vec<Vec<u64>> {
    let dictionary: BTreeMap<&Vec<u64>, u64> = signatures
        .iter()
        .flatten()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i as u64))
        .collect();
    signatures
        .iter()
        .map(|g| g.iter().map(|s| dictionary[s]).collect())
        .collect()
}

/// Canonical node order of `graph`.
///
/// Nodes are first ranked by (WL code, degree, sorted neighbor codes,
/// attribute vector). Remaining ties are resolved by individualization and
/// refinement, keeping the candidate order whose permuted weight matrix is
/// lexicographically smallest. Two input orderings of the same graph
/// therefore yield orders that differ at most by an automorphism, which
/// leaves every order-dependent quantity unchanged.
pub fn canonical_node_order(graph: &GraphInstance, table: &WlCodeTable) -> Result<Vec<usize>> {
    let codes = table.codes(graph.id()).ok_or_else(|| {
        Error::InvalidArgument(format!("WL table has no entry for graph {:?}", graph.id()))
    })?;
    if codes.len() != graph.node_count() {
        return Err(Error::InvalidArgument(format!(
            "WL table for graph {:?} covers {} nodes, graph has {}",
            graph.id(),
            codes.len(),
            graph.node_count()
        )));
    }
    Ok(canonical_order_from_codes(graph, codes))
}

fn canonical_order_from_codes(graph: &GraphInstance, codes: &[u64]) -> Vec<usize> {
    let n = graph.node_count();
    if n == 0 {
        return Vec::new();
    }
    let keys: Vec<Vec<u64>> = (0..n)
        .map(|v| {
            let mut neigh: Vec<u64> = graph.neighbors(v).iter().map(|&(u, _)| codes[u]).collect();
            neigh.sort_unstable();
            let mut key = vec![codes[v], graph.degree(v) as u64, neigh.len() as u64];
            key.extend(neigh);
            if let Some(attrs) = graph.attributes() {
                key.extend(attribute_bits(&attrs[v]));
            }
            key
        })
        .collect();
    let initial = rank_keys(&keys);

    let mut search = CanonicalSearch {
        graph,
        best: None,
        leaves: 0,
    };
    search.explore(initial);
    search.best.expect("at least one leaf").0
}

fn rank_keys<K: Ord>(keys: &[K]) -> Vec<u64> {
    let sorted: BTreeSet<&K> = keys.iter().collect();
    let index: BTreeMap<&K, u64> = sorted.into_iter().enumerate().map(|(i, k)| (k, i as u64)).collect();
    keys.iter().map(|k| index[k]).collect()
}

struct CanonicalSearch<'a> {
    graph: &'a GraphInstance,
    best: Option<(Vec<usize>, Vec<u64>)>,
    leaves: usize,
}

impl CanonicalSearch<'_> {
    /// Equitable refinement: split cells by the multiset of (neighbor color,
    /// edge weight) until the partition is stable.
    fn refine(&self, mut colors: Vec<u64>) -> Vec<u64> {
        let n = colors.len();
        let mut cells = colors.iter().collect::<BTreeSet<_>>().len();
        loop {
            let keys: Vec<(u64, Vec<(u64, u64)>)> = (0..n)
                .map(|v| {
                    let mut neigh: Vec<(u64, u64)> = self
                        .graph
                        .neighbors(v)
                        .iter()
                        .map(|&(u, w)| (colors[u], w.to_bits()))
                        .collect();
                    neigh.sort_unstable();
                    (colors[v], neigh)
                })
                .collect();
            colors = rank_keys(&keys);
            let new_cells = colors.iter().collect::<BTreeSet<_>>().len();
            if new_cells == cells {
                return colors;
            }
            cells = new_cells;
        }
    }

    fn explore(&mut self, colors: Vec<u64>) {
        let colors = self.refine(colors);
        let n = colors.len();

        let mut counts: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (v, &c) in colors.iter().enumerate() {
            counts.entry(c).or_default().push(v);
        }
        let Some((_, cell)) = counts.into_iter().find(|(_, members)| members.len() > 1) else {
            self.leaves += 1;
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&v| colors[v]);
            let signature = self.signature(&order);
            let better = match &self.best {
                None => true,
                Some((_, best)) => signature.cmp(best) == Ordering::Less,
            };
            if better {
                self.best = Some((order, signature));
            }
            return;
        };

        // Twins (same attributes, same neighborhood apart from each other) are
        // swapped by an automorphism, so one branch per twin class suffices.
        let mut representatives: Vec<usize> = Vec::new();
        for &v in &cell {
            if !representatives.iter().any(|&r| self.are_twins(r, v)) {
                representatives.push(v);
            }
        }
        for v in representatives {
            if self.leaves >= MAX_CANONICAL_LEAVES {
                return;
            }
            let individualized = colors
                .iter()
                .enumerate()
                .map(|(u, &c)| 2 * c + u64::from(u != v))
                .collect();
            self.explore(individualized);
        }
    }

    fn are_twins(&self, a: usize, b: usize) -> bool {
        if let Some(attrs) = self.graph.attributes() {
            if !attribute_bits(&attrs[a]).eq(attribute_bits(&attrs[b])) {
                return false;
            }
        }
        let strip = |v: usize, other: usize| -> Vec<(usize, u64)> {
            self.graph
                .neighbors(v)
                .iter()
                .filter(|&&(u, _)| u != other)
                .map(|&(u, w)| (u, w.to_bits()))
                .collect()
        };
        strip(a, b) == strip(b, a)
    }

    fn signature(&self, order: &[usize]) -> Vec<u64> {
        let n = order.len();
        let mut sig = Vec::with_capacity(n * (n - 1) / 2);
        for a in 0..n {
            for b in (a + 1)..n {
                sig.push(self.graph.weight(order[a], order[b]).to_bits());
            }
        }
        sig
    }
}

/// Sinusoidal embedding of a non-negative integer: entry `2l` is
/// `sin(code / 10000^(2l / d_h))` and entry `2l + 1` is
/// `cos(code / 10000^((2l + 1) / d_h))`.
pub fn positional_embedding(code: u64, d_h: usize) -> Result<Vec<f64>> {
    if d_h % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional embedding needs an even dimension, got {d_h}"
        )));
    }
    let c = code as f64;
    let d = d_h as f64;
    let mut out = Vec::with_capacity(d_h);
    for l in 0..d_h / 2 {
        let l = l as f64;
        out.push((c / 10000f64.powf(2.0 * l / d)).sin());
        out.push((c / 10000f64.powf((2.0 * l + 1.0) / d)).cos());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeEmbeddingConfig {
    pub d_h: usize,
    pub d_x: usize,
    pub k_max: usize,
}

impl NodeEmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.d_h % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "hidden size must be positive and even, got {}",
                self.d_h
            )));
        }
        if self.k_max == 0 {
            return Err(Error::InvalidArgument("k_max must be positive".into()));
        }
        Ok(())
    }
}

/// The parameter-free parts of a graph's initial embedding, in canonical
/// order and zero-padded to `k_max` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeatures {
    /// `k_max x d_x` attribute rows; `None` for attribute-free corpora.
    pub attributes: Option<Matrix>,
    /// `k_max x k_max`; row `i` is the weight vector of the `i`-th canonical
    /// node, its own slot holding zero.
    pub weights: Matrix,
    /// `k_max x d_h`; WL-code embedding plus degree embedding per node.
    pub positional: Matrix,
    pub valid_count: usize,
    /// `order[i]` is the input index of the node placed in row `i`.
    pub order: Vec<usize>,
}

pub fn graph_features(
    graph: &GraphInstance,
    table: &WlCodeTable,
    config: &NodeEmbeddingConfig,
) -> Result<GraphFeatures> {
    config.validate()?;
    let n = graph.node_count();
    if n > config.k_max {
        return Err(Error::InvalidData(format!(
            "graph {:?} has {n} nodes, more than k_max = {}",
            graph.id(),
            config.k_max
        )));
    }
    if graph.attribute_dim() != config.d_x && n > 0 {
        return Err(Error::InvalidData(format!(
            "graph {:?} has attribute dimension {}, expected {}",
            graph.id(),
            graph.attribute_dim(),
            config.d_x
        )));
    }
    let order = canonical_node_order(graph, table)?;
    let codes = table.codes(graph.id()).expect("checked by canonical_node_order");

    let k = config.k_max;
    let mut weights = Matrix::zeros(k, k);
    let mut positional = Matrix::zeros(k, config.d_h);
    for (i, &v) in order.iter().enumerate() {
        for (j, &u) in order.iter().enumerate() {
            weights[(i, j)] = graph.weight(v, u);
        }
        let role = positional_embedding(codes[v], config.d_h)?;
        let degree = positional_embedding(graph.degree(v) as u64, config.d_h)?;
        for (c, out) in positional.row_mut(i).iter_mut().enumerate() {
            *out = role[c] + degree[c];
        }
    }
    let attributes = if config.d_x > 0 {
        let mut x = Matrix::zeros(k, config.d_x);
        if let Some(attrs) = graph.attributes() {
            for (i, &v) in order.iter().enumerate() {
                x.row_mut(i).copy_from_slice(&attrs[v]);
            }
        }
        Some(x)
    } else {
        None
    };
    Ok(GraphFeatures {
        attributes,
        weights,
        positional,
        valid_count: n,
        order,
    })
}

/// `H0` together with the number of non-padding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialEmbeddings {
    pub h0: Matrix,
    pub valid_count: usize,
}

/// Sum of the attribute embedding (`X W_x`, skipped when `d_x = 0`), WL-code
/// embedding, neighborhood-weight embedding (`W W_w`) and degree embedding.
pub fn initial_embedding_matrix(
    features: &GraphFeatures,
    attribute_map: Option<&Matrix>,
    weight_map: &Matrix,
) -> Result<InitialEmbeddings> {
    let mut h0 = features.weights.matmul(weight_map)?;
    add_checked(&mut h0, &features.positional)?;
    if let (Some(x), Some(map)) = (&features.attributes, attribute_map) {
        add_checked(&mut h0, &x.matmul(map)?)?;
    }
    // Padding rows only ever receive zero contributions; keep them exactly zero.
    for i in features.valid_count..h0.rows() {
        h0.row_mut(i).fill(0.0);
    }
    Ok(InitialEmbeddings {
        h0,
        valid_count: features.valid_count,
    })
}

fn add_checked(acc: &mut Matrix, rhs: &Matrix) -> Result<()> {
    if acc.shape() != rhs.shape() {
        return Err(Error::Shape {
            op: "add",
            lhs: acc.shape(),
            rhs: rhs.shape(),
        });
    }
    acc.add_assign(rhs);
    Ok(())
}
