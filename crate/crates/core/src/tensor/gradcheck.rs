use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::TensorError;

const STEP: f64 = 1e-5;
const FULL_SWEEP_LIMIT: usize = 10_000;
const SAMPLE_SIZE: usize = 256;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckWorst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub coordinates_checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub worst: Option<GradCheckWorst>,
}

/// Compares tape gradients of the scalar built by `f` against central
/// finite differences (step 1e-5).
///
/// Every coordinate is checked when the store holds fewer than 10k of them,
/// otherwise a seeded sample of 256. The per-coordinate error is
/// `|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)`. `f` must be deterministic.
pub fn grad_check<F>(params: &ParamStore, f: F, tol: f64, seed: u64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape) -> Result<Var, TensorError>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };

    let coords: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|(id, p)| (0..p.tensor.numel()).map(move |k| (id, k)))
        .collect();
    let chosen: Vec<(ParamId, usize)> = if coords.len() < FULL_SWEEP_LIMIT {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), SAMPLE_SIZE).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| coords[i]).collect()
    };

    let mut work = params.clone();
    let eval = |store: &ParamStore| -> Result<f64, TensorError> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        Ok(tape.scalar_value(loss))
    };

    let mut worst: Option<GradCheckWorst> = None;
    for &(id, k) in &chosen {
        let original = work.get(id).tensor.data()[k];
        work.get_mut(id).tensor.data_mut()[k] = original + STEP;
        let plus = eval(&work)?;
        work.get_mut(id).tensor.data_mut()[k] = original - STEP;
        let minus = eval(&work)?;
        work.get_mut(id).tensor.data_mut()[k] = original;

        let numeric = (plus - minus) / (2.0 * STEP);
        let g = analytic.get(id)[k];
        let rel_error = (g - numeric).abs() / 1f64.max(g.abs()).max(numeric.abs());
        if worst.as_ref().is_none_or(|w| rel_error > w.rel_error) {
            worst = Some(GradCheckWorst {
                param: params.get(id).name.clone(),
                index: k,
                analytic: g,
                numeric,
                rel_error,
            });
        }
    }

    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(GradCheckReport {
        coordinates_checked: chosen.len(),
        max_rel_error,
        tolerance: tol,
        passed: max_rel_error < tol,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_map_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.3, -0.7, 1.1, 2.0])).unwrap();
        let report = grad_check(
            &store,
            |t| {
                let wv = t.param(w);
                let x = t.vector(vec![1.5, -2.0, 0.25, 4.0]);
                t.dot(wv, x)
            },
            1e-10,
            0,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error < 1e-10);
        assert_eq!(report.coordinates_checked, 4);
    }

    #[test]
    fn corrupted_rule_is_reported_by_name() {
        let mut store = ParamStore::new();
        let good = store.add("good", Tensor::vector(vec![0.2, 0.4])).unwrap();
        let bad = store.add("bad", Tensor::vector(vec![0.5, -0.3])).unwrap();
        let report = grad_check(
            &store,
            |t| {
                let g = t.param(good);
                let b = t.param(bad);
                let gt = t.tanh(g)?;
                // Forward is a cube, backward claims 2x instead of 3x².
                let cube = t.custom_unary(
                    b,
                    |x| x * x * x,
                    Box::new(|x, _y, dy| x.iter().zip(dy).map(|(x, d)| 2.0 * x * d).collect()),
                )?;
                let s1 = t.sum(gt)?;
                let s2 = t.sum(cube)?;
                t.add(s1, s2)
            },
            1e-4,
            0,
        )
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.worst.unwrap().param, "bad");
    }

    #[test]
    fn large_stores_are_sampled() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.01; 12_000])).unwrap();
        let report = grad_check(
            &store,
            |t| {
                let wv = t.param(w);
                let sq = t.mul(wv, wv)?;
                t.sum(sq)
            },
            1e-6,
            5,
        )
        .unwrap();
        assert_eq!(report.coordinates_checked, 256);
        assert!(report.passed);
    }
}
