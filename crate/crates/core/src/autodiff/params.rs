use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::tape::Tape;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
struct Parameter {
    name: String,
    value: Matrix,
    grad: Matrix,
    first_moment: Matrix,
    second_moment: Matrix,
}

/// Named trainable matrices with gradient and optimizer-moment buffers.
///
/// Insertion order is preserved and is the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    steps: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let (rows, cols) = value.shape();
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad: Matrix::zeros(rows, cols),
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform initialisation.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
        let value = Matrix::from_vec(rows, cols, data).expect("sized by construction");
        self.insert(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of every parameter leaf on `tape` into the store.
    pub fn accumulate_gradients(&mut self, tape: &Tape) {
        for (id, g) in tape.param_gradients() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    /// Clears optimizer moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.steps = 0;
        for p in &mut self.params {
            p.first_moment.data_mut().fill(0.0);
            p.second_moment.data_mut().fill(0.0);
        }
    }

    /// Adaptive-moment update with decoupled weight decay, using the stored
    /// gradients. Nothing is modified if any gradient is non-finite.
    pub fn optimizer_step(&mut self, config: &OptimizerConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for parameter {}",
                p.name
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = config.betas;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for p in &mut self.params {
            let value = p.value.data_mut();
            let grad = p.grad.data();
            let m = p.first_moment.data_mut();
            let v = p.second_moment.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                value[i] -= config.lr * config.weight_decay * value[i];
                value[i] -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
        Ok(())
    }

    /// Copies values for every parameter whose name exists in `other` with the
    /// same shape. Returns how many were copied.
    pub fn load_matching(&mut self, other: &ParameterStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.params.iter().find(|q| q.name == p.name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Serialises parameter values (not gradients or moments).
    ///
    /// Layout, all integers little-endian: magic `GDCK`, `u32` version,
    /// `u32` entry count, then per entry `u32` name length, UTF-8 name,
    /// `u64` rows, `u64` cols and `rows * cols` `f64` values in row-major order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::InvalidData("not a parameter checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::InvalidData(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = r.u32()?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::InvalidData("checkpoint name is not UTF-8".into()))?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::InvalidData("checkpoint shape overflows".into()))?;
            let mut data = Vec::with_capacity(n.min(bytes.len() / 8));
            for _ in 0..n {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
            }
            store.insert(name, Matrix::from_vec(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidData("trailing bytes after checkpoint".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"GDCK";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::InvalidData("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}
