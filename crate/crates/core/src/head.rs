//! Pairwise distance head, mask matrix, masked loss and the distance-matrix
//! container.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Matrix, ParamId, ParameterStore, Tape, Var};
use crate::error::{Error, Result};

/// Parameter handles for the two bias-free layers `d_h -> hidden -> 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DistanceHeadParams {
    pub hidden: ParamId,
    pub output: ParamId,
}

impl DistanceHeadParams {
    pub fn init(store: &mut ParameterStore, d_h: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        DistanceHeadParams {
            hidden: store.insert_glorot("head.hidden", d_h, hidden, rng),
            output: store.insert_glorot("head.output", hidden, 1, rng),
        }
    }

    pub fn from_store(store: &ParameterStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::InvalidData(format!("checkpoint lacks parameter {name}")))
        };
        Ok(DistanceHeadParams {
            hidden: get("head.hidden")?,
            output: get("head.output")?,
        })
    }
}

/// `1 - exp(-|FC((z_i - z_j)^2)|)` for two `1 x d_h` rows, on a tape.
pub fn pair_distance_on_tape(
    tape: &mut Tape,
    z_i: Var,
    z_j: Var,
    hidden: Var,
    output: Var,
) -> Result<Var> {
    let diff = tape.sub(z_i, z_j)?;
    let sq = tape.square(diff);
    let h = tape.matmul(sq, hidden)?;
    let h = tape.relu(h);
    let s = tape.matmul(h, output)?;
    let s = tape.abs(s);
    let neg = tape.scale(s, -1.0);
    let e = tape.exp(neg);
    let neg_e = tape.scale(e, -1.0);
    let d = tape.add_scalar(neg_e, 1.0);
    Ok(tape.clamp_max(d, MAX_DISTANCE))
}

/// Distance between two graph representations. Symmetric bitwise, zero for
/// equal inputs and always in `[0, 1)` for finite inputs.
pub fn pair_distance(z_i: &[f64], z_j: &[f64], hidden: &Matrix, output: &Matrix) -> Result<f64> {
    if z_i.len() != z_j.len() {
        return Err(Error::Shape {
            op: "pair_distance",
            lhs: (1, z_i.len()),
            rhs: (1, z_j.len()),
        });
    }
    if z_i.iter().chain(z_j).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite graph representation".into()));
    }
    let sq: Vec<f64> = z_i
        .iter()
        .zip(z_j)
        .map(|(a, b)| {
            let d = a - b;
            d * d
        })
        .collect();
    let sq = Matrix::from_vec(1, sq.len(), sq)?;
    let h = sq.matmul(hidden)?.map(|x| x.max(0.0));
    let s = h.matmul(output)?;
    if s.shape() != (1, 1) {
        return Err(Error::Shape {
            op: "pair_distance",
            lhs: s.shape(),
            rhs: (1, 1),
        });
    }
    Ok((1.0 + -(-s.item().abs()).exp()).min(MAX_DISTANCE))
}

/// Largest double below one. `exp(-x)` underflows for large `x`; clamping
/// keeps distances strictly inside `[0, 1)`.
pub const MAX_DISTANCE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Loss weights: `beta` on the diagonal, 1 on labeled pairs, `alpha` on the
/// remaining off-diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub weights: Matrix,
    pub alpha: f64,
    pub beta: f64,
}

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 1000.0;

pub fn build_mask(m: usize, labeled_pairs: &[(usize, usize)], alpha: f64, beta: f64) -> Result<MaskMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let mut weights = Matrix::filled(m, m, alpha);
    for i in 0..m {
        weights[(i, i)] = beta;
    }
    for &(i, j) in labeled_pairs {
        if i >= m || j >= m {
            return Err(Error::InvalidArgument(format!(
                "labeled pair ({i}, {j}) out of range for m = {m}"
            )));
        }
        if i != j {
            weights[(i, j)] = 1.0;
            weights[(j, i)] = 1.0;
        }
    }
    Ok(MaskMatrix { weights, alpha, beta })
}

/// `||M ⊙ (D - D̄)||_p`, the entrywise p-norm of the weighted residual.
pub fn masked_loss(d: &Matrix, d_bar: &Matrix, mask: &Matrix, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("p must be at least 1, got {p}")));
    }
    if d.shape() != d_bar.shape() || d.shape() != mask.shape() {
        return Err(Error::Shape {
            op: "masked_loss",
            lhs: d.shape(),
            rhs: if d.shape() != d_bar.shape() { d_bar.shape() } else { mask.shape() },
        });
    }
    let total: f64 = d
        .data()
        .iter()
        .zip(d_bar.data())
        .zip(mask.data())
        .map(|((a, b), w)| (w * (a - b)).abs().powf(p))
        .sum();
    Ok(total.powf(1.0 / p))
}

/// Square matrix of pairwise distances labelled by graph id.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    ids: Vec<String>,
    values: Matrix,
}

impl DistanceMatrix {
    pub fn new(ids: Vec<String>, values: Matrix) -> Result<Self> {
        if values.rows() != ids.len() || values.cols() != ids.len() {
            return Err(Error::InvalidData(format!(
                "{} ids for a {}x{} matrix",
                ids.len(),
                values.rows(),
                values.cols()
            )));
        }
        Ok(DistanceMatrix { ids, values })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Checks symmetry (bitwise), a zero diagonal and entries in `[0, 1)`.
    pub fn check_invariants(&self) -> Result<()> {
        let m = self.len();
        for i in 0..m {
            if self.get(i, i) != 0.0 {
                return Err(Error::InvalidData(format!("nonzero diagonal at {}", self.ids[i])));
            }
            for j in 0..m {
                let v = self.get(i, j);
                if v.to_bits() != self.get(j, i).to_bits() {
                    return Err(Error::InvalidData(format!(
                        "asymmetric entry ({}, {})",
                        self.ids[i], self.ids[j]
                    )));
                }
                if !(0.0..1.0).contains(&v) {
                    return Err(Error::InvalidData(format!(
                        "entry ({}, {}) = {v} outside [0, 1)",
                        self.ids[i], self.ids[j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Header row `id,<ids...>`, then one row per graph. Values are written
    /// with 17 significant digits so they parse back to the same bits.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id".to_string()];
        header.extend(self.ids.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for (i, id) in self.ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(self.values.row(i).iter().map(|v| format!("{v:.16e}")));
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let parse_err = |line: usize, message: String| Error::Parse { line, message };
        let header = reader
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .clone();
        if header.get(0) != Some("id") {
            return Err(parse_err(1, "first header cell must be `id`".into()));
        }
        let ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let m = ids.len();
        let mut values = Matrix::zeros(m, m);
        let mut rows = 0;
        for (r, record) in reader.records().enumerate() {
            let line = r + 2;
            let record = record.map_err(|e| parse_err(line, e.to_string()))?;
            if r >= m {
                return Err(parse_err(line, "more rows than columns".into()));
            }
            if record.get(0) != Some(ids[r].as_str()) {
                return Err(parse_err(
                    line,
                    format!("row id {:?} does not match column id {:?}", record.get(0), ids[r]),
                ));
            }
            if record.len() != m + 1 {
                return Err(parse_err(line, format!("{} cells, expected {}", record.len(), m + 1)));
            }
            for (c, cell) in record.iter().skip(1).enumerate() {
                values[(r, c)] = cell
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(line, format!("cell {}: {e}", c + 1)))?;
            }
            rows += 1;
        }
        if rows != m {
            return Err(parse_err(rows + 2, format!("{rows} rows for {m} columns")));
        }
        DistanceMatrix::new(ids, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    /// Reorders rows and columns to follow `ids`.
    pub fn aligned_to(&self, ids: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let pos = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::InvalidData(format!("distance matrix lacks graph {id:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let m = ids.len();
        let mut values = Matrix::zeros(m, m);
        for (a, &i) in pos.iter().enumerate() {
            for (b, &j) in pos.iter().enumerate() {
                values[(a, b)] = self.values[(i, j)];
            }
        }
        DistanceMatrix::new(ids.to_vec(), values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(seed: u64) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let p = DistanceHeadParams::init(&mut store, 6, 5, &mut rng);
        (store.value(p.hidden).clone(), store.value(p.output).clone())
    }

    #[test]
    fn identical_inputs_give_zero() {
        let (h, o) = head(1);
        let z = [0.3, -1.0, 2.0, 0.0, 5.0, -0.1];
        assert_eq!(pair_distance(&z, &z, &h, &o).unwrap(), 0.0);
    }

    #[test]
    fn output_of_ln2_gives_one_half() {
        // Hidden layer copies the first coordinate; output layer scales by ln 2.
        let mut hidden = Matrix::zeros(2, 1);
        hidden[(0, 0)] = 1.0;
        let output = Matrix::scalar(std::f64::consts::LN_2);
        let d = pair_distance(&[1.0, 0.0], &[0.0, 0.0], &hidden, &output).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
        // A negative FC output is folded back by the absolute value.
        let d_neg = pair_distance(&[1.0, 0.0], &[0.0, 0.0], &hidden, &Matrix::scalar(-std::f64::consts::LN_2)).unwrap();
        assert_eq!(d, d_neg);
    }

    #[test]
    fn non_finite_inputs_error() {
        let (h, o) = head(1);
        let mut z = [0.0; 6];
        z[2] = f64::NAN;
        assert!(pair_distance(&z, &[0.0; 6], &h, &o).is_err());
    }

    #[test]
    fn tape_and_direct_paths_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParameterStore::new();
        let p = DistanceHeadParams::init(&mut store, 4, 3, &mut rng);
        let a = vec![0.5, -0.25, 1.5, 0.1];
        let b = vec![-0.5, 0.75, 0.5, 0.3];
        let mut t = Tape::new();
        let za = t.constant(Matrix::from_vec(1, 4, a.clone()).unwrap());
        let zb = t.constant(Matrix::from_vec(1, 4, b.clone()).unwrap());
        let h = t.param(&store, p.hidden);
        let o = t.param(&store, p.output);
        let d = pair_distance_on_tape(&mut t, za, zb, h, o).unwrap();
        let direct = pair_distance(&a, &b, store.value(p.hidden), store.value(p.output)).unwrap();
        assert_eq!(t.value(d).item().to_bits(), direct.to_bits());
    }

    #[test]
    fn mask_entries() {
        let mask = build_mask(6, &[(2, 5)], 0.1, DEFAULT_BETA).unwrap();
        let w = &mask.weights;
        for i in 0..6 {
            assert_eq!(w[(i, i)], 1000.0);
        }
        assert_eq!(w[(2, 5)], 1.0);
        assert_eq!(w[(5, 2)], 1.0);
        assert_eq!(w[(0, 1)], 0.1);
        assert!(build_mask(3, &[(0, 3)], 0.1, 1000.0).is_err());
        assert!(build_mask(3, &[], 1.5, 1000.0).is_err());
    }

    #[test]
    fn masked_loss_cases() {
        let d = Matrix::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap();
        let ones = Matrix::filled(2, 2, 1.0);
        assert_eq!(masked_loss(&d, &d, &ones, 2.0).unwrap(), 0.0);

        let d_bar = Matrix::from_rows(&[vec![0.0, 0.2], vec![0.2, 0.0]]).unwrap();
        let frob = d.zip_map(&d_bar, "sub", |a, b| a - b).unwrap().frobenius_norm();
        assert!((masked_loss(&d, &d_bar, &ones, 2.0).unwrap() - frob).abs() < 1e-15);

        // Residual [[0, 0.3], [0.3, 0]] under M = [[β, 1], [1, β]]: sqrt(2 * 0.09).
        let mask = build_mask(2, &[(0, 1)], 0.1, 1000.0).unwrap();
        let d_bar = Matrix::from_rows(&[vec![0.0, 0.2], vec![0.2, 0.0]]).unwrap();
        let loss = masked_loss(&d, &d_bar, &mask.weights, 2.0).unwrap();
        assert!((loss - 0.18f64.sqrt()).abs() < 1e-12, "{loss}");
        assert!((loss - 0.4243).abs() < 1e-4);

        assert!(masked_loss(&d, &Matrix::zeros(3, 3), &ones, 2.0).is_err());
        assert!(masked_loss(&d, &d, &ones, 0.5).is_err());
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let values = Matrix::from_rows(&[
            vec![0.0, 1.0 / 3.0, 0.1],
            vec![1.0 / 3.0, 0.0, 0.7 + 1e-17],
            vec![0.1, 0.7 + 1e-17, 0.0],
        ])
        .unwrap();
        let dm = DistanceMatrix::new(vec!["a".into(), "b,c".into(), "d".into()], values).unwrap();
        let back = DistanceMatrix::from_csv(&dm.to_csv()).unwrap();
        assert_eq!(back, dm);
        dm.check_invariants().unwrap();
        assert!(DistanceMatrix::from_csv("id,a\nb,0\n").is_err());
    }

    proptest! {
        #[test]
        fn metric_axioms_hold(
            a in proptest::collection::vec(-3.0f64..3.0, 6),
            b in proptest::collection::vec(-3.0f64..3.0, 6),
            seed in 0u64..50,
        ) {
            let (h, o) = head(seed);
            let ab = pair_distance(&a, &b, &h, &o).unwrap();
            let ba = pair_distance(&b, &a, &h, &o).unwrap();
            prop_assert_eq!(ab.to_bits(), ba.to_bits());
            prop_assert!((0.0..1.0).contains(&ab));
            prop_assert_eq!(pair_distance(&a, &a, &h, &o).unwrap(), 0.0);
        }

        #[test]
        fn masked_loss_is_monotone_in_each_residual(
            base in proptest::collection::vec(0.0f64..1.0, 9),
            idx in 0usize..9,
            bump in 0.0f64..0.5,
        ) {
            let target = Matrix::from_vec(3, 3, base.clone()).unwrap();
            let mask = build_mask(3, &[(0, 1)], 0.3, 1000.0).unwrap().weights;
            let d0 = Matrix::zeros(3, 3);
            let mut d1 = d0.clone();
            // Move one entry further from its target.
            d1.data_mut()[idx] = -bump;
            let l0 = masked_loss(&d0, &target, &mask, 2.0).unwrap();
            let l1 = masked_loss(&d1, &target, &mask, 2.0).unwrap();
            prop_assert!(l1 >= l0);
        }
    }
}
