use alloc::vec::Vec;

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that near-zero gradients are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub epsilon: f64,
    pub errors: Vec<ParamError>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.errors.len()
    }

    pub fn worst(&self) -> Option<&ParamError> {
        self.errors.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares `analytic` against central differences of `loss` around `params`.
///
/// Only the positions in `indices` are perturbed (all positions when `None`).
/// `params` is restored before returning. An empty parameter set passes
/// vacuously.
pub fn fd_gradient_check(
    params: &mut [f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    epsilon: f64,
    tolerance: f64,
    indices: Option<&[usize]>,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut errors = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = params[i];
        params[i] = orig + epsilon;
        let plus = loss(params);
        params[i] = orig - epsilon;
        let minus = loss(params);
        params[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        let rel_err = (a - numeric).abs() / denom;
        errors.push(ParamError {
            index: i,
            analytic: a,
            numeric,
            rel_err: if rel_err.is_nan() { f64::INFINITY } else { rel_err },
        });
    }
    let max_rel_err = errors.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    GradCheckReport {
        tolerance,
        epsilon,
        passed: max_rel_err <= tolerance,
        errors,
        max_rel_err,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn quad(p: &[f64]) -> f64 {
        p[0] * p[0] + 3.0 * p[0] * p[1] + p[1].sin()
    }

    #[test]
    fn correct_gradient_passes() {
        let mut p = vec![0.7, -1.2];
        let g = vec![2.0 * 0.7 + 3.0 * -1.2, 3.0 * 0.7 + (-1.2f64).cos()];
        let r = fd_gradient_check(&mut p, &g, quad, 1e-5, 1e-6, None);
        assert!(r.passed, "{r:?}");
        assert_eq!(p, vec![0.7, -1.2]);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut p = vec![0.7, -1.2];
        let g = vec![2.0 * 0.7 + 3.0 * -1.2, 3.0 * 0.7 + (-1.2f64).cos() + 0.01];
        let r = fd_gradient_check(&mut p, &g, quad, 1e-5, 1e-6, None);
        assert!(!r.passed);
        assert_eq!(r.worst().unwrap().index, 1);
    }

    #[test]
    fn zero_parameters_pass_vacuously() {
        let r = fd_gradient_check(&mut [], &[], |_| 0.0, 1e-5, 1e-6, None);
        assert!(r.passed);
        assert_eq!(r.checked(), 0);
    }
}
