//! Finite-difference gradient checks and naive reference implementations.

pub mod gradcheck;
pub mod oracles;

pub use gradcheck::{
    check_gradients, finite_diff_grad, op_kind, registered_ops, run_suite, GradCheckOptions, GradCheckReport, OpKind,
    COMPOSED_TOL, DEFAULT_EPS, PRIMITIVE_TOL,
};
pub use oracles::{run_oracles, OracleReport, ORACLE_TOL};

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::rel_err;

    #[test]
    fn rel_err_floors_denominator() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
