//! Graph instances, corpora, synthetic generation and train/validation/test
//! splitting.
//!
//! Graphs are undirected and weighted. Non-edges have weight zero and are not
//! stored. Node attributes are optional real vectors; a corpus without
//! attributes has `d_x == 0`.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single graph treated as one data point.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInstance {
    id: String,
    nodes: Vec<String>,
    /// Keyed on `(i, j)` with `i < j`.
    edges: BTreeMap<(usize, usize), f64>,
    attributes: Option<Vec<Vec<f64>>>,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl GraphInstance {
    /// Builds a graph from node names, index-based edges and optional per-node
    /// attributes (indexed like `nodes`).
    ///
    /// Each unordered pair may be listed once; listing `(a, b)` and `(b, a)`
    /// with different weights is rejected.
    pub fn new(
        id: impl Into<String>,
        nodes: Vec<String>,
        edges: impl IntoIterator<Item = (usize, usize, f64)>,
        attributes: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let id = id.into();
        let n = nodes.len();
        let mut seen = HashSet::with_capacity(n);
        for name in &nodes {
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidData(format!(
                    "graph {id}: duplicate node {name:?}"
                )));
            }
        }

        let mut edge_map = BTreeMap::new();
        for (a, b, w) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidData(format!(
                    "graph {id}: edge ({a}, {b}) references a node outside 0..{n}"
                )));
            }
            if a == b {
                return Err(Error::InvalidData(format!(
                    "graph {id}: self-loop on node {:?}",
                    nodes[a]
                )));
            }
            if !w.is_finite() || w == 0.0 {
                return Err(Error::InvalidData(format!(
                    "graph {id}: edge ({:?}, {:?}) has weight {w}; weights must be finite and nonzero",
                    nodes[a], nodes[b]
                )));
            }
            let key = (a.min(b), a.max(b));
            match edge_map.insert(key, w) {
                Some(prev) if prev.to_bits() != w.to_bits() => {
                    return Err(Error::InvalidData(format!(
                        "graph {id}: asymmetric duplicate edge ({:?}, {:?}): {prev} vs {w}",
                        nodes[a], nodes[b]
                    )));
                }
                _ => {}
            }
        }

        if let Some(attrs) = &attributes {
            if attrs.len() != n {
                return Err(Error::InvalidData(format!(
                    "graph {id}: {} attribute vectors for {n} nodes",
                    attrs.len()
                )));
            }
            if let Some(first) = attrs.first() {
                let d = first.len();
                for (i, a) in attrs.iter().enumerate() {
                    if a.len() != d {
                        return Err(Error::InvalidData(format!(
                            "graph {id}: node {:?} has attribute length {} (expected {d})",
                            nodes[i],
                            a.len()
                        )));
                    }
                    if a.iter().any(|v| !v.is_finite()) {
                        return Err(Error::InvalidData(format!(
                            "graph {id}: node {:?} has a non-finite attribute",
                            nodes[i]
                        )));
                    }
                }
            }
        }

        let mut adjacency = vec![Vec::new(); n];
        for (&(a, b), &w) in &edge_map {
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        for list in &mut adjacency {
            list.sort_by_key(|&(j, _)| j);
        }

        Ok(GraphInstance {
            id,
            nodes,
            edges: edge_map,
            attributes,
            adjacency,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(i, j, w)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.edges.iter().map(|(&(a, b), &w)| (a, b, w))
    }

    /// Weight of the unordered pair; zero for non-edges and for `i == j`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        self.edges
            .get(&(i.min(j), i.max(j)))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.edges.contains_key(&(i.min(j), i.max(j)))
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    /// Number of incident edges.
    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// Sum of incident edge weights.
    pub fn weighted_degree(&self, i: usize) -> f64 {
        self.adjacency[i].iter().map(|&(_, w)| w).sum()
    }

    pub fn attributes(&self) -> Option<&[Vec<f64>]> {
        self.attributes.as_deref()
    }

    pub fn attribute_dim(&self) -> usize {
        self.attributes
            .as_ref()
            .and_then(|a| a.first())
            .map_or(0, Vec::len)
    }

    pub fn is_connected(&self) -> bool {
        let n = self.node_count();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &(u, _) in &self.adjacency[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    queue.push_back(u);
                }
            }
        }
        count == n
    }

    /// Same graph with its node list reordered: new position `p` holds old node
    /// `order[p]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.node_count();
        let mut inverse = vec![usize::MAX; n];
        if order.len() != n {
            return Err(Error::InvalidArgument(format!(
                "permutation of length {} for {n} nodes",
                order.len()
            )));
        }
        for (p, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::InvalidArgument("not a permutation".into()));
            }
            inverse[old] = p;
        }
        let nodes = order.iter().map(|&o| self.nodes[o].clone()).collect();
        let edges = self.edges().map(|(a, b, w)| (inverse[a], inverse[b], w));
        let attributes = self
            .attributes
            .as_ref()
            .map(|a| order.iter().map(|&o| a[o].clone()).collect());
        GraphInstance::new(self.id.clone(), nodes, edges, attributes)
    }

    fn to_record(&self) -> GraphRecord {
        GraphRecord {
            id: self.id.clone(),
            nodes: self.nodes.clone(),
            edges: self
                .edges()
                .map(|(a, b, w)| (self.nodes[a].clone(), self.nodes[b].clone(), w))
                .collect(),
            attrs: self.attributes.as_ref().map(|attrs| {
                self.nodes
                    .iter()
                    .cloned()
                    .zip(attrs.iter().cloned())
                    .collect()
            }),
        }
    }

    fn from_record(record: GraphRecord) -> Result<Self> {
        let index: HashMap<&str, usize> = record
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let lookup = |name: &str| {
            index.get(name).copied().ok_or_else(|| {
                Error::InvalidData(format!(
                    "graph {}: edge references unknown node {name:?}",
                    record.id
                ))
            })
        };
        let mut edges = Vec::with_capacity(record.edges.len());
        for (a, b, w) in &record.edges {
            edges.push((lookup(a)?, lookup(b)?, *w));
        }
        let attributes = match &record.attrs {
            None => None,
            Some(map) => {
                let mut attrs = Vec::with_capacity(record.nodes.len());
                for name in &record.nodes {
                    let v = map.get(name).ok_or_else(|| {
                        Error::InvalidData(format!(
                            "graph {}: node {name:?} has no attribute vector",
                            record.id
                        ))
                    })?;
                    attrs.push(v.clone());
                }
                if map.len() != record.nodes.len() {
                    return Err(Error::InvalidData(format!(
                        "graph {}: attributes listed for unknown nodes",
                        record.id
                    )));
                }
                Some(attrs)
            }
        };
        GraphInstance::new(record.id, record.nodes, edges, attributes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    id: String,
    nodes: Vec<String>,
    #[serde(default)]
    edges: Vec<(String, String, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attrs: Option<BTreeMap<String, Vec<f64>>>,
}

/// An ordered collection of graphs sharing one attribute dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    graphs: Vec<GraphInstance>,
    d_x: usize,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(graphs: Vec<GraphInstance>) -> Result<Self> {
        let mut index = HashMap::with_capacity(graphs.len());
        let mut d_x: Option<usize> = None;
        for (i, g) in graphs.iter().enumerate() {
            if index.insert(g.id().to_string(), i).is_some() {
                return Err(Error::InvalidData(format!("duplicate graph id {:?}", g.id())));
            }
            // Empty graphs carry no attribute information either way.
            if g.node_count() == 0 {
                continue;
            }
            let d = g.attribute_dim();
            match d_x {
                None => d_x = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::InvalidData(format!(
                        "graph {:?}: attribute dimension {d} differs from corpus dimension {prev}",
                        g.id()
                    )));
                }
                _ => {}
            }
        }
        Ok(Corpus {
            graphs,
            d_x: d_x.unwrap_or(0),
            index,
        })
    }

    pub fn graphs(&self) -> &[GraphInstance] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn attribute_dim(&self) -> usize {
        self.d_x
    }

    pub fn get(&self, i: usize) -> &GraphInstance {
        &self.graphs[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> Vec<String> {
        self.graphs.iter().map(|g| g.id().to_string()).collect()
    }

    /// Parses the line-delimited JSON corpus format. Blank lines are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        Self::read_records(text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_records(BufReader::new(file))
    }

    fn read_records(reader: impl BufRead) -> Result<Self> {
        let mut graphs = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: GraphRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
            let graph = GraphInstance::from_record(record).map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
            graphs.push(graph);
        }
        Corpus::new(graphs)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for g in &self.graphs {
            out.push_str(&serde_json::to_string(&g.to_record()).expect("graph record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Largest node count across the corpus.
    pub fn max_graph_size(&self) -> Result<usize> {
        self.graphs
            .iter()
            .map(GraphInstance::node_count)
            .max()
            .ok_or_else(|| Error::InvalidArgument("max_graph_size of an empty corpus".into()))
    }
}

/// Parameters for [`generate_synthetic_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub count: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub edge_prob: f64,
    /// Number of distinct node labels, encoded as one-hot attributes. Zero
    /// produces an attribute-free corpus.
    pub labels: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            count: 60,
            size_min: 5,
            size_max: 8,
            edge_prob: 0.4,
            labels: 0,
            seed: 1,
        }
    }
}

const MAX_RESAMPLES: usize = 1000;

/// Generates `count` connected Erdős–Rényi graphs with unit weights.
/// Disconnected draws are resampled.
pub fn generate_synthetic_corpus(params: &SynthParams) -> Result<Corpus> {
    if params.count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    if params.size_min == 0 || params.size_min > params.size_max {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= size_min <= size_max, got {}..{}",
            params.size_min, params.size_max
        )));
    }
    if !(0.0..=1.0).contains(&params.edge_prob) {
        return Err(Error::InvalidArgument(format!(
            "edge_prob {} outside [0, 1]",
            params.edge_prob
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut graphs = Vec::with_capacity(params.count);
    for gi in 0..params.count {
        let n = rng.gen_range(params.size_min..=params.size_max);
        let nodes: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let mut accepted = None;
        for _ in 0..MAX_RESAMPLES {
            let mut edges = Vec::new();
            for a in 0..n {
                for b in (a + 1)..n {
                    if rng.gen_bool(params.edge_prob) {
                        edges.push((a, b, 1.0));
                    }
                }
            }
            let attributes = (params.labels > 0).then(|| {
                (0..n)
                    .map(|_| {
                        let mut v = vec![0.0; params.labels];
                        v[rng.gen_range(0..params.labels)] = 1.0;
                        v
                    })
                    .collect()
            });
            let g = GraphInstance::new(format!("g{gi}"), nodes.clone(), edges, attributes)?;
            if g.is_connected() {
                accepted = Some(g);
                break;
            }
        }
        match accepted {
            Some(g) => graphs.push(g),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "no connected graph with {n} nodes after {MAX_RESAMPLES} draws at edge_prob {}",
                    params.edge_prob
                )))
            }
        }
    }
    Corpus::new(graphs)
}

/// Disjoint train / validation / test id sets, each listed in corpus order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitAssignment {
    /// Corpus indices of each part, in corpus order.
    pub fn indices(&self, corpus: &Corpus) -> Result<SplitIndices> {
        let resolve = |ids: &[String]| -> Result<Vec<usize>> {
            let mut out = ids
                .iter()
                .map(|id| {
                    corpus
                        .index_of(id)
                        .ok_or_else(|| Error::InvalidData(format!("split references unknown graph {id:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            out.sort_unstable();
            Ok(out)
        };
        Ok(SplitIndices {
            train: resolve(&self.train_ids)?,
            validation: resolve(&self.validation_ids)?,
            test: resolve(&self.test_ids)?,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("split serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles the corpus with `seed` and apportions it to `ratios`
/// (train:validation:test). Validation and test sizes are floored; the
/// remainder goes to train.
pub fn split_corpus(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be non-negative, got {ratios:?}"
        )));
    }
    let total: f64 = ratios.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("split ratios sum to zero".into()));
    }
    let m = corpus.len();
    if ratios.iter().all(|&r| r > 0.0) && m < 3 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {m} graphs into three non-empty parts"
        )));
    }

    let n_val = ((m as f64) * ratios[1] / total).floor() as usize;
    let n_test = ((m as f64) * ratios[2] / total).floor() as usize;

    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut validation: Vec<usize> = order[..n_val].to_vec();
    let mut test: Vec<usize> = order[n_val..n_val + n_test].to_vec();
    let mut train: Vec<usize> = order[n_val + n_test..].to_vec();
    for part in [&mut train, &mut validation, &mut test] {
        part.sort_unstable();
    }
    let ids = |part: &[usize]| part.iter().map(|&i| corpus.get(i).id().to_string()).collect();
    Ok(SplitAssignment {
        train_ids: ids(&train),
        validation_ids: ids(&validation),
        test_ids: ids(&test),
    })
}
