use crate::error::{Error, Result};

/// Gradient-reversal strength: `2 / (1 + e^{−10p}) − 1` with
/// `p = iteration / total`, rising from 0 towards 1.
pub fn lambda_schedule(iteration: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::config("total iterations must be positive"));
    }
    if iteration > total {
        return Err(Error::config(format!("iteration {iteration} exceeds total {total}")));
    }
    let p = iteration as f64 / total as f64;
    Ok(2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(lambda_schedule(0, 10).unwrap(), 0.0);
        assert!((lambda_schedule(5, 10).unwrap() - 2.5f64.tanh()).abs() < 1e-15);
        assert!((lambda_schedule(10, 10).unwrap() - 5f64.tanh()).abs() < 1e-15);
        assert!(lambda_schedule(1, 0).is_err());
        assert!(lambda_schedule(11, 10).is_err());
    }
}
