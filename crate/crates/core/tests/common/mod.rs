//! Central finite-difference gradient oracle shared by the integration tests.
//!
//! The analytic side comes from the tape; the numeric side only ever calls the
//! forward function on perturbed parameter values, so it is independent of
//! every backward rule.

#![allow(dead_code)]

use mtrs::param::{Module, Parameter};
use mtrs::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor for the relative error so that entries whose true
/// gradient is ~0 are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < MAX_REL_ERR
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare tape gradients of `loss(module)` with central differences on up to
/// `per_param` randomly chosen coordinates of every unfrozen parameter
/// (`None`: all coordinates).
pub fn check_module<M, F>(module: &mut M, loss: F, per_param: Option<usize>, seed: u64) -> GradReport
where
    M: Module,
    F: Fn(&M) -> Tensor,
{
    module.zero_grad();
    let l = loss(module);
    l.backward().expect("scalar loss");
    let analytic: Vec<(String, Option<Vec<f64>>)> =
        module.parameters().iter().map(|p| (p.name().to_string(), p.grad())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport { max_rel_err: 0.0, worst: String::new(), checked: 0 };
    for (pi, (name, grad)) in analytic.iter().enumerate() {
        if module.parameters()[pi].is_frozen() {
            continue;
        }
        let base = module.parameters()[pi].data().to_vec();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < base.len() => sample(&mut rng, base.len(), k).into_vec(),
            _ => (0..base.len()).collect(),
        };
        for j in coords {
            let a = grad.as_ref().map_or(0.0, |g| g[j]);
            let eval = |m: &mut M, v: f64| {
                let mut d = base.clone();
                d[j] = v;
                m.parameters_mut()[pi].set_data(d).unwrap();
                loss(m).item().unwrap()
            };
            let fp = eval(module, base[j] + FD_STEP);
            let fm = eval(module, base[j] - FD_STEP);
            module.parameters_mut()[pi].set_data(base.clone()).unwrap();
            let n = (fp - fm) / (2.0 * FD_STEP);
            let e = rel_err(a, n);
            report.checked += 1;
            if report.checked == 1 || e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = format!("{name}[{j}]: analytic {a:.10e}, numeric {n:.10e}");
            }
        }
    }
    report
}

/// Bare parameters, for checking individual ops.
pub struct Leaves(pub Vec<Parameter>);

impl Leaves {
    pub fn random(shapes: &[&[usize]], seed: u64) -> Leaves {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Leaves(
            shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let n: usize = s.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    Parameter::new(format!("x{i}"), data, s).unwrap()
                })
                .collect(),
        )
    }

    pub fn t(&self, i: usize) -> &Tensor {
        self.0[i].tensor()
    }
}

impl Module for Leaves {
    fn parameters(&self) -> Vec<&Parameter> {
        self.0.iter().collect()
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.0.iter_mut().collect()
    }
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}
