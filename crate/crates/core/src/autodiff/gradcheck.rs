//! Central finite-difference gradient verification.
//!
//! The checker never touches the tape: it re-evaluates a caller-supplied
//! loss closure at perturbed parameter values, so it stays an independent
//! oracle for whatever backward pass produced the analytic gradients.

use crate::params::ParameterSet;
use ndarray::ArrayD;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl GradCheckReport {
    pub fn passed(&self, rel_tol: f64) -> bool {
        self.max_rel_err <= rel_tol
    }
}

/// Compares `analytic` gradients against central differences of `loss_fn`
/// for every `stride`-th element of every tensor in `params`
/// (`stride = 1` checks everything).
///
/// Relative error uses a floor so that near-zero gradient pairs compare
/// by absolute difference instead of blowing up.
pub fn check_against_fd<F>(
    params: &ParameterSet,
    analytic: &BTreeMap<String, ArrayD<f64>>,
    loss_fn: F,
    eps: f64,
    floor: f64,
    stride: usize,
) -> GradCheckReport
where
    F: Fn(&ParameterSet) -> f64,
{
    assert!(stride >= 1);
    let mut work = params.clone();
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = String::new();

    let names: Vec<String> = params.paths().cloned().collect();
    for name in &names {
        let n = params.get(name).unwrap().len();
        let an = analytic
            .get(name)
            .unwrap_or_else(|| panic!("analytic gradients missing {name:?}"));
        let an_slice = an.as_slice().expect("gradient layout");
        for i in (0..n).step_by(stride) {
            let orig = work.get(name).unwrap().as_slice().unwrap()[i];
            set_elem(&mut work, name, i, orig + eps);
            let up = loss_fn(&work);
            set_elem(&mut work, name, i, orig - eps);
            let down = loss_fn(&work);
            set_elem(&mut work, name, i, orig);
            let fd = (up - down) / (2.0 * eps);
            let a = an_slice[i];
            let rel = (fd - a).abs() / f64::max(floor, f64::max(fd.abs(), a.abs()));
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{i}]: fd={fd:.3e} analytic={a:.3e}");
            }
        }
    }
    GradCheckReport {
        checked,
        max_rel_err: max_rel,
        worst_param: worst,
    }
}

fn set_elem(set: &mut ParameterSet, name: &str, idx: usize, value: f64) {
    set.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = value;
}
