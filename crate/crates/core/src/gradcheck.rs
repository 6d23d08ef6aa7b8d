//! Central-difference gradient verification for arbitrary model
//! fragments.
//!
//! The fragment is expressed as a closure from a `ParameterSet<f64>` to a
//! scalar loss tensor. Analytic gradients come from one backward pass;
//! each parameter coordinate is then perturbed by ±h and the loss
//! re-evaluated. The fragment must be deterministic — stochastic pieces
//! (masking, Gumbel noise) are frozen via fixed seeds by the caller, and
//! non-determinism is detected and reported as an error.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::{forward_backward, Tensor};

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked_coords: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// Absolute floor below which a difference counts as agreement.
    /// Finite differences carry O(eps/h) noise, so parameters whose true
    /// gradient is exactly zero (e.g. a key bias, which cancels in the
    /// softmax) would otherwise register spurious relative error.
    pub atol: f64,
    /// Cap on coordinates checked per parameter; larger parameters get a
    /// seeded random subset. `None` checks everything.
    pub max_coords_per_param: Option<usize>,
    pub coord_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tolerance: 1e-4,
            atol: 1e-7,
            max_coords_per_param: None,
            coord_seed: 0,
        }
    }
}

fn rel_err(a: f64, b: f64, atol: f64) -> f64 {
    if (a - b).abs() <= atol {
        return 0.0;
    }
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-6)
}

pub fn gradient_check<F>(
    params: &ParameterSet<f64>,
    loss_fn: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterSet<f64>) -> Result<Tensor<f64>>,
{
    // Determinism probe: two evaluations must agree bitwise.
    let v1 = loss_fn(params)?.item();
    let v2 = loss_fn(params)?.item();
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::Numeric(format!(
            "fragment is not deterministic under fixed seed: {v1} vs {v2}"
        )));
    }

    params.clear_grads();
    let loss = loss_fn(params)?;
    forward_backward(&loss)?;
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .map(|(name, t)| {
            let g = t.grad().unwrap_or_else(|| vec![0.0; t.len()]);
            (name.clone(), g)
        })
        .collect();
    params.clear_grads();

    let mut per_param = Vec::new();
    let mut max_rel = 0.0f64;
    for (name, grads) in &analytic {
        let base = params.get(name)?;
        let n = base.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if n > cap => {
                let mut idx: Vec<usize> = (0..n).collect();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(crate::util::mix(opts.coord_seed, crate::util::hash_str(name)));
                idx.shuffle(&mut rng);
                idx.truncate(cap);
                idx
            }
            _ => (0..n).collect(),
        };

        let mut worst = 0.0f64;
        for &ci in &coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut perturbed = params.clone();
                let mut data = base.data().to_vec();
                data[ci] += delta;
                perturbed.replace(name, Tensor::param(base.dims(), data))?;
                Ok(loss_fn(&perturbed)?.item())
            };
            let fd = (eval(opts.h)? - eval(-opts.h)?) / (2.0 * opts.h);
            worst = worst.max(rel_err(grads[ci], fd, opts.atol));
        }
        max_rel = max_rel.max(worst);
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
            checked_coords: coords.len(),
        });
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::xavier_uniform;
    use rand::Rng;

    #[test]
    fn linear_layer_passes_tight_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("w", xavier_uniform(&mut rng, &[4, 3], 4, 3)).unwrap();
        ps.insert("b", xavier_uniform(&mut rng, &[3], 4, 3)).unwrap();
        let x = Tensor::constant(&[2, 4], (0..8).map(|i| 0.1 * i as f64).collect());
        let report = gradient_check(
            &ps,
            |ps| {
                Ok(x
                    .linear(ps.get("w")?, Some(ps.get("b")?))
                    .mul(&x.linear(ps.get("w")?, Some(ps.get("b")?)))
                    .sum_all())
            },
            &GradCheckOptions {
                tolerance: 1e-6,
                atol: 1e-12,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("l1.w", xavier_uniform(&mut rng, &[5, 8], 5, 8)).unwrap();
        ps.insert("l1.b", xavier_uniform(&mut rng, &[8], 5, 8)).unwrap();
        ps.insert("l2.w", xavier_uniform(&mut rng, &[8, 8], 8, 8)).unwrap();
        ps.insert("l2.b", xavier_uniform(&mut rng, &[8], 8, 8)).unwrap();
        ps.insert("l3.w", xavier_uniform(&mut rng, &[8, 1], 8, 1)).unwrap();
        ps.insert("l3.b", xavier_uniform(&mut rng, &[1], 8, 1)).unwrap();
        let x = Tensor::constant(&[3, 5], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect());
        let report = gradient_check(
            &ps,
            |ps| {
                let h1 = x.linear(ps.get("l1.w")?, Some(ps.get("l1.b")?)).tanh();
                let h2 = h1.linear(ps.get("l2.w")?, Some(ps.get("l2.b")?)).gelu();
                Ok(h2.linear(ps.get("l3.w")?, Some(ps.get("l3.b")?)).sum_all())
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn nondeterministic_fragment_is_rejected() {
        let mut ps: ParameterSet<f64> = ParameterSet::new();
        ps.insert("w", Tensor::param(&[1], vec![1.0])).unwrap();
        let counter = std::cell::Cell::new(0u64);
        let err = gradient_check(
            &ps,
            |ps| {
                counter.set(counter.get() + 1);
                Ok(ps.get("w")?.scale(counter.get() as f64).sum_all())
            },
            &GradCheckOptions::default(),
        );
        assert!(err.is_err());
    }
}
