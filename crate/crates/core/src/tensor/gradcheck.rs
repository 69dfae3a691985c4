//! Centered finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Tensors at or above this many entries are sampled instead of checked exhaustively.
pub const FULL_CHECK_LIMIT: usize = 10_000;
pub const SAMPLED_COORDINATES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn finite(value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Runtime(format!("non-finite loss {value} during gradient check")))
    }
}

/// Compares reverse-mode gradients of `loss` with centered differences of
/// step `eps` on every parameter coordinate (or a seeded sample of
/// [`SAMPLED_COORDINATES`] for large tensors).
///
/// The forward pass is recorded once; each perturbed evaluation replays only
/// the nodes downstream of the perturbed parameter, which gives the same
/// floating-point result as a fresh forward pass. Parameters the loss never
/// reads have a numeric derivative of exactly zero.
pub fn grad_check<F>(store: &ParamStore, eps: f64, seed: u64, loss: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Result<Var>,
{
    let mut tape = Tape::with_params(store);
    let out = loss(&mut tape)?;
    finite(tape.value(out).item())?;
    let grads = tape.backward(out)?.into_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let n = store.require(&name)?.len();
        let coords: Vec<usize> = if n < FULL_CHECK_LIMIT {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, SAMPLED_COORDINATES).into_vec();
            c.sort_unstable();
            c
        };
        let leaf = tape.param_var(&name);
        let downstream = leaf.map(|v| tape.downstream(v)).unwrap_or_default();
        for i in coords {
            let numeric = match leaf {
                Some(v) => {
                    let original = store.require(&name)?.data()[i];
                    let plus = finite(tape.probe(v, i, original + eps, &downstream, out))?;
                    let minus = finite(tape.probe(v, i, original - eps, &downstream, out))?;
                    (plus - minus) / (2.0 * eps)
                }
                None => 0.0,
            };
            let analytic = grads[&name].data()[i];
            let err = relative_error(analytic, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_model_is_exact() {
        let mut store = ParamStore::new();
        store
            .insert(
                "w".into(),
                Tensor::from_rows(&[vec![0.3], vec![-1.2], vec![2.0]]).unwrap(),
            )
            .unwrap();
        let x = Tensor::row_vector(vec![1.5, -0.5, 0.25]).unwrap();
        let report = grad_check(&store, 1e-5, 0, |tape| {
            let w = tape.param("w")?;
            let xv = tape.constant(x.clone());
            let y = tape.matmul(xv, w)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert_eq!(report.coordinates, 3);
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }

    #[test]
    fn replay_matches_fresh_forward_pass() {
        let mut store = ParamStore::new();
        store
            .insert(
                "w".into(),
                Tensor::from_rows(&[vec![0.3, 0.1], vec![-1.2, 0.7]]).unwrap(),
            )
            .unwrap();
        store
            .insert("b".into(), Tensor::row_vector(vec![0.05, -0.4]).unwrap())
            .unwrap();
        let x = Tensor::from_rows(&[vec![1.5, -0.5], vec![0.25, 2.0]]).unwrap();
        let forward = |tape: &mut Tape<'_>| -> Result<Var> {
            let w = tape.param("w")?;
            let b = tape.param("b")?;
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, w)?;
            let h = tape.add(h, b)?;
            let h = tape.tanh(h);
            let h = tape.layer_norm(h);
            let s = tape.softmax_rows(h);
            Ok(tape.mean(s))
        };
        let mut tape = Tape::with_params(&store);
        let out = forward(&mut tape).unwrap();
        let leaf = tape.param_var("w").unwrap();
        let down = tape.downstream(leaf);
        let replayed = tape.probe(leaf, 3, 0.9, &down, out);
        assert_eq!(tape.value(out).item(), {
            let mut fresh = Tape::with_params(&store);
            let v = forward(&mut fresh).unwrap();
            fresh.value(v).item()
        });
        let mut moved = store.clone();
        moved.get_mut("w").unwrap().data_mut()[3] = 0.9;
        let mut fresh = Tape::with_params(&moved);
        let v = forward(&mut fresh).unwrap();
        assert_eq!(replayed.to_bits(), fresh.value(v).item().to_bits());
    }
}
