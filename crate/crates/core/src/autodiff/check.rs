use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled per parameter matrix (all of them if larger).
    pub samples_per_param: usize,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero up to rounding do not dominate the report.
    pub relative_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            samples_per_param: 12,
            relative_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub coordinates_checked: usize,
}

/// Compares reverse-mode gradients with central differences
/// `(f(θ+ε) - f(θ-ε)) / 2ε` on a sample of coordinates of every parameter.
///
/// `loss` builds a fresh tape from the store and returns the scalar loss node;
/// it must be deterministic.
pub fn finite_difference_check<F>(
    store: &ParameterStore,
    loss: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<(Tape, Var)>,
{
    let (mut tape, out) = loss(store)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::Numerical("loss is not finite".into()));
    }
    tape.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    analytic.accumulate_gradients(&tape);

    let eval = |s: &ParameterStore| -> Result<f64> {
        let (t, v) = loss(s)?;
        let value = t.value(v).item();
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::Numerical("loss is not finite".into()))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut perturbed = store.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        coordinates_checked: 0,
    };
    for id in store.ids() {
        let len = store.value(id).len();
        if len == 0 {
            continue;
        }
        let picks = sample(&mut rng, len, config.samples_per_param.min(len));
        for k in picks.iter() {
            let original = store.value(id).data()[k];
            perturbed.value_mut(id).data_mut()[k] = original + config.eps;
            let plus = eval(&perturbed)?;
            perturbed.value_mut(id).data_mut()[k] = original - config.eps;
            let minus = eval(&perturbed)?;
            perturbed.value_mut(id).data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * config.eps);
            let exact = analytic.grad(id).data()[k];
            let denom = exact.abs().max(numeric.abs()).max(config.relative_floor);
            let rel = (exact - numeric).abs() / denom;
            report.coordinates_checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst_parameter = store.name(id).to_string();
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GradientRules, Matrix};

    #[test]
    fn quadratic_loss_is_exact() {
        let mut store = ParameterStore::new();
        let a = store.insert("a", Matrix::from_rows(&[vec![0.3, -1.1], vec![2.0, 0.7]]).unwrap());
        let b = store.insert("b", Matrix::from_rows(&[vec![1.5], vec![-0.4]]).unwrap());
        let report = finite_difference_check(
            &store,
            |s| {
                let mut t = Tape::new();
                let av = t.param(s, a);
                let bv = t.param(s, b);
                let p = t.matmul(av, bv)?;
                let sq = t.square(p);
                let l = t.sum(sq);
                Ok((t, l))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_relative_error <= 1e-10, "{report:?}");
        assert_eq!(report.coordinates_checked, 6);
    }

    fn relu_net(rules: GradientRules) -> f64 {
        let mut store = ParameterStore::new();
        let w = store.insert(
            "w",
            Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![-0.3, 0.8, -1.5]]).unwrap(),
        );
        let x = Matrix::from_rows(&[vec![0.7, 1.2], vec![-0.4, 0.9]]).unwrap();
        finite_difference_check(
            &store,
            |s| {
                let mut t = Tape::with_rules(rules);
                let xv = t.constant(x.clone());
                let wv = t.param(s, w);
                let h = t.matmul(xv, wv)?;
                let r = t.relu(h);
                let c = t.constant(Matrix::filled(2, 3, 0.7));
                let weighted = t.mul(r, c)?;
                let l = t.sum(weighted);
                Ok((t, l))
            },
            &GradCheckConfig::default(),
        )
        .unwrap()
        .max_relative_error
    }

    #[test]
    fn corrupted_rule_is_detected() {
        assert!(relu_net(GradientRules::Exact) < 1e-8);
        assert!(relu_net(GradientRules::CorruptRelu) > 1e-2);
    }

    #[test]
    fn non_finite_loss_errors() {
        let mut store = ParameterStore::new();
        let a = store.insert("a", Matrix::scalar(1000.0));
        let res = finite_difference_check(
            &store,
            |s| {
                let mut t = Tape::new();
                let av = t.param(s, a);
                let e = t.exp(av);
                Ok((t, e))
            },
            &GradCheckConfig::default(),
        );
        assert!(matches!(res, Err(Error::Numerical(_))));
    }
}
