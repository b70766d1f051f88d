//! Encoder and distance head bundled with their parameters.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, ParameterStore, Tape, Var};
use crate::encoder::{encode_graph, Dropout, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{Error, Result};
use crate::graph::Corpus;
use crate::head::{pair_distance, pair_distance_on_tape, DistanceHeadParams, DistanceMatrix};
use crate::wl::{compute_wl_codes, graph_features, GraphFeatures, NodeEmbeddingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub intermediate_size: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { intermediate_size: 32 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head.intermediate_size == 0 {
            return Err(Error::InvalidArgument("intermediate_size must be positive".into()));
        }
        Ok(())
    }
}

/// Shape metadata stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub k_max: usize,
    pub d_x: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDistanceModel {
    pub meta: ModelMeta,
    pub store: ParameterStore,
    pub encoder: EncoderParams,
    pub head: DistanceHeadParams,
}

/// Tape handles for one forward pass.
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub hidden: Var,
    pub output: Var,
}

impl GraphDistanceModel {
    pub fn new(config: ModelConfig, k_max: usize, d_x: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if k_max == 0 {
            return Err(Error::InvalidArgument("k_max must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let encoder = EncoderParams::init(&mut store, &config.encoder, k_max, d_x, &mut rng);
        let head = DistanceHeadParams::init(
            &mut store,
            config.encoder.hidden_size,
            config.head.intermediate_size,
            &mut rng,
        );
        Ok(GraphDistanceModel {
            meta: ModelMeta { config, k_max, d_x },
            store,
            encoder,
            head,
        })
    }

    /// Sized for `corpus`: `k_max` is its largest graph, `d_x` its attribute width.
    pub fn for_corpus(config: ModelConfig, corpus: &Corpus, seed: u64) -> Result<Self> {
        Self::new(config, corpus.max_graph_size()?, corpus.attribute_dim(), seed)
    }

    pub fn from_parts(meta: ModelMeta, store: ParameterStore) -> Result<Self> {
        meta.config.validate()?;
        let encoder = EncoderParams::from_store(&store, &meta.config.encoder)?;
        let head = DistanceHeadParams::from_store(&store)?;
        let reference = GraphDistanceModel::new(meta.config.clone(), meta.k_max, meta.d_x, 0)?;
        for id in reference.store.ids() {
            let name = reference.store.name(id);
            let found = store
                .find(name)
                .ok_or_else(|| Error::InvalidData(format!("checkpoint lacks parameter {name}")))?;
            if store.value(found).shape() != reference.store.value(id).shape() {
                return Err(Error::InvalidData(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    store.value(found).shape(),
                    reference.store.value(id).shape()
                )));
            }
        }
        Ok(GraphDistanceModel {
            meta,
            store,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.meta.config
    }

    /// Writes `<path>` (parameters) and `<path>.json` (metadata).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.store.save(path)?;
        let meta_path = meta_path(path);
        let text = serde_json::to_string_pretty(&self.meta).expect("metadata serializes");
        fs::write(&meta_path, text + "\n").map_err(|e| Error::io(meta_path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let store = ParameterStore::load(path)?;
        let meta_path = meta_path(path);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ModelMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::from_parts(meta, store)
    }

    /// Per-graph inputs; WL codes are computed over the whole corpus.
    pub fn features(&self, corpus: &Corpus) -> Result<Vec<GraphFeatures>> {
        let table = compute_wl_codes(corpus, self.meta.config.encoder.wl_iterations);
        let cfg = NodeEmbeddingConfig {
            d_h: self.meta.config.encoder.hidden_size,
            d_x: self.meta.d_x,
            k_max: self.meta.k_max,
        };
        corpus.graphs().iter().map(|g| graph_features(g, &table, &cfg)).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            encoder: EncoderVars::bind(tape, &self.store, &self.encoder),
            hidden: tape.param(&self.store, self.head.hidden),
            output: tape.param(&self.store, self.head.output),
        }
    }

    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        features: &GraphFeatures,
        dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        encode_graph(tape, &vars.encoder, features, &self.meta.config.encoder, dropout)
    }

    pub fn distance_on_tape(&self, tape: &mut Tape, vars: &ModelVars, z_i: Var, z_j: Var) -> Result<Var> {
        pair_distance_on_tape(tape, z_i, z_j, vars.hidden, vars.output)
    }

    /// Evaluation-mode representation `z` of one graph.
    pub fn embed(&self, features: &GraphFeatures) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = EncoderVars::bind(&mut tape, &self.store, &self.encoder);
        let z = encode_graph(&mut tape, &vars, features, &self.meta.config.encoder, None)?;
        let z = tape.value(z).data().to_vec();
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite graph representation".into()));
        }
        Ok(z)
    }

    pub fn embed_all(&self, features: &[GraphFeatures]) -> Result<Vec<Vec<f64>>> {
        features.par_iter().map(|f| self.embed(f)).collect()
    }

    pub fn distance(&self, z_i: &[f64], z_j: &[f64]) -> Result<f64> {
        pair_distance(
            z_i,
            z_j,
            self.store.value(self.head.hidden),
            self.store.value(self.head.output),
        )
    }

    /// Full predicted matrix; each unordered pair is computed once and mirrored.
    pub fn distance_matrix(&self, ids: Vec<String>, embeddings: &[Vec<f64>]) -> Result<DistanceMatrix> {
        let m = embeddings.len();
        let rows: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|i| {
                (i + 1..m)
                    .map(|j| self.distance(&embeddings[i], &embeddings[j]))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let mut values = Matrix::zeros(m, m);
        for (i, row) in rows.iter().enumerate() {
            for (offset, &v) in row.iter().enumerate() {
                let j = i + 1 + offset;
                values[(i, j)] = v;
                values[(j, i)] = v;
            }
        }
        DistanceMatrix::new(ids, values)
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    name.into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_synthetic_corpus, SynthParams};

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let corpus = generate_synthetic_corpus(&SynthParams {
            count: 5,
            labels: 3,
            ..SynthParams::default()
        })
        .unwrap();
        let model = GraphDistanceModel::for_corpus(ModelConfig::default(), &corpus, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gdck");
        model.save(&path).unwrap();
        let back = GraphDistanceModel::load(&path).unwrap();
        assert_eq!(back, model);

        let mut meta = model.meta.clone();
        meta.k_max += 1;
        assert!(GraphDistanceModel::from_parts(meta, model.store.clone()).is_err());
    }

    #[test]
    fn predicted_matrix_is_a_valid_distance_matrix() {
        let corpus = generate_synthetic_corpus(&SynthParams {
            count: 8,
            ..SynthParams::default()
        })
        .unwrap();
        let model = GraphDistanceModel::for_corpus(ModelConfig::default(), &corpus, 2).unwrap();
        let f = model.features(&corpus).unwrap();
        let z = model.embed_all(&f).unwrap();
        let d = model.distance_matrix(corpus.ids(), &z).unwrap();
        d.check_invariants().unwrap();
    }
}
