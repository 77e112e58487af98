//! Central finite-difference verification of analytic gradients.

use super::{Grads, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor; `None` probes all of them.
    pub max_coords: Option<usize>,
    /// Denominator floor for the relative error, so that gradients that are
    /// zero on both sides compare equal.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            max_coords: Some(16),
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `loss_fn`'s analytic gradients against central differences.
///
/// `loss_fn` returns the loss and the gradient of every trainable tensor.
/// Only tensors that appear in the analytic gradient map are probed. Probed
/// coordinates are evenly spaced through each tensor plus the coordinate with
/// the largest analytic magnitude.
pub fn finite_difference_check<F>(mut loss_fn: F, params: &ParamSet, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<(f64, Grads)>,
{
    let (base, analytic) = loss_fn(params)?;
    let (again, _) = loss_fn(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut work = params.clone();
    let mut groups = Vec::new();
    for (name, grad) in &analytic {
        let len = grad.len();
        let coords = probe_coords(grad, opts.max_coords);
        let mut max_rel: f64 = 0.0;
        for &k in &coords {
            let original = work.get(name).expect("gradient names a parameter").data()[k];
            work.get_mut(name).unwrap().data_mut()[k] = original + opts.step;
            let (plus, _) = loss_fn(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = original - opts.step;
            let (minus, _) = loss_fn(&work)?;
            work.get_mut(name).unwrap().data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            max_rel = max_rel.max(relative_error(grad[k], numeric, opts.abs_floor));
        }
        debug_assert!(coords.iter().all(|&k| k < len));
        groups.push(GroupError {
            name: name.clone(),
            max_rel_error: max_rel,
            coords_checked: coords.len(),
        });
    }
    Ok(GradCheckReport {
        groups,
        tolerance: opts.tolerance,
    })
}

fn probe_coords(grad: &[f64], max_coords: Option<usize>) -> Vec<usize> {
    let n = grad.len();
    match max_coords {
        Some(m) if m < n => {
            let mut coords: Vec<usize> = (0..m).map(|i| i * n / m).collect();
            let largest = grad
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if !coords.contains(&largest) {
                coords.push(largest);
            }
            coords
        }
        _ => (0..n).collect(),
    }
}
