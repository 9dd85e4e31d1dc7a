//! Central-difference gradient checking against the tape's reverse pass.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so that entries whose
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// Check at most this many entries per input (chosen deterministically).
    pub max_entries: Option<usize>,
    /// Seed for the output projection and entry selection.
    pub seed: u64,
    /// Test hook: analytic gradients are scaled by `1 + fault` before the
    /// comparison.
    pub fault: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: 1e-6,
            tol: 1e-5,
            floor: 1e-3,
            max_entries: None,
            seed: 0,
            fault: None,
        }
    }
}

impl GradcheckConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_entries(mut self, n: usize) -> Self {
        self.max_entries = Some(n);
        self
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_entry: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
    if err.is_nan() {
        f64::INFINITY
    } else {
        err
    }
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` receives one leaf per input. A non-scalar output is reduced with a fixed
/// random projection so that every output entry contributes.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut projection: Option<Tensor> = None;
    let mut eval = |values: &[Tensor], want_grads: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = if tape.value(out).len() == 1 {
            out
        } else {
            let shape = tape.value(out).shape().to_vec();
            let proj = projection
                .get_or_insert_with(|| {
                    let mut rng = Pcg32::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
                    Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))
                })
                .clone();
            let r = tape.constant(proj);
            let prod = tape.mul(out, r)?;
            tape.sum(prod)
        };
        let value = tape.value(loss).item()?;
        let grads = if want_grads {
            let g = tape.backward(loss)?;
            vars.iter()
                .zip(values)
                .map(|(&v, t)| g.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut rng = Pcg32::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let entries: Vec<usize> = match cfg.max_entries {
            Some(m) if m < input.len() => {
                let mut e = sample(&mut rng, input.len(), m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..input.len()).collect(),
        };
        let mut worst = 0.0f64;
        let mut worst_entry = 0;
        for &e in &entries {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + cfg.eps;
            let (plus, _) = eval(&work, false)?;
            work[i].data_mut()[e] = orig - cfg.eps;
            let (minus, _) = eval(&work, false)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let mut a = analytic[i][e];
            if let Some(fault) = cfg.fault {
                a *= 1.0 + fault;
            }
            let err = rel_error(a, numeric, cfg.floor);
            if err > worst || !err.is_finite() {
                worst = err;
                worst_entry = e;
            }
        }
        reports.push(InputReport {
            input: i,
            checked: entries.len(),
            max_rel_error: worst,
            worst_entry,
        });
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        inputs: reports,
        max_rel_error,
        tol: cfg.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_zero_error() {
        let x = Tensor::new(&[3], vec![0.2, -0.7, 1.3]).unwrap();
        let rep = gradcheck(|_, v| Ok(v[0]), &[x], &GradcheckConfig::default()).unwrap();
        assert!(rep.max_rel_error < 1e-9, "{rep:?}");
        assert!(rep.passed());
    }

    #[test]
    fn hard_sigmoid_interior() {
        let x = Tensor::new(&[1], vec![0.3]).unwrap();
        let rep = gradcheck(
            |t, v| Ok(t.hard_sigmoid(v[0])),
            &[x],
            &GradcheckConfig::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
    }

    #[test]
    fn fault_injection_fails() {
        let x = Tensor::new(&[2], vec![0.5, 1.5]).unwrap();
        let cfg = GradcheckConfig {
            fault: Some(1e-3),
            ..Default::default()
        };
        let rep = gradcheck(|t, v| Ok(t.sigmoid(v[0])), &[x], &cfg).unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn nan_comparison_is_failure() {
        assert_eq!(rel_error(f64::NAN, 1.0, 1e-3), f64::INFINITY);
    }
}
