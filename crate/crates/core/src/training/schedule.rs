use crate::error::{Error, Result};

/// `base_lr * (1 - iteration / total)^power`.
pub fn poly_lr(iteration: usize, total_iterations: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total_iterations == 0 {
        return Err(Error::Range("total iterations must be at least 1".into()));
    }
    if iteration > total_iterations {
        return Err(Error::Range(format!(
            "iteration {iteration} exceeds total iterations {total_iterations}"
        )));
    }
    Ok(base_lr * (1.0 - iteration as f64 / total_iterations as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 1000, 0.1, 1.5).unwrap(), 0.1);
        assert_eq!(poly_lr(1000, 1000, 0.1, 1.5).unwrap(), 0.0);
        let mid = poly_lr(500, 1000, 0.1, 1.5).unwrap();
        assert!((mid - 0.1 * 0.5f64.powf(1.5)).abs() < 1e-15);
        assert!((mid - 0.0353553).abs() < 1e-7);
    }

    #[test]
    fn out_of_range() {
        assert!(matches!(poly_lr(11, 10, 0.1, 1.5), Err(Error::Range(_))));
        assert!(matches!(poly_lr(0, 0, 0.1, 1.5), Err(Error::Range(_))));
    }

    proptest! {
        #[test]
        fn strictly_decreasing(total in 1usize..5000, power in 0.1f64..4.0, frac in 0.0f64..1.0) {
            let i = ((total - 1) as f64 * frac) as usize;
            let a = poly_lr(i, total, 0.1, power).unwrap();
            let b = poly_lr(i + 1, total, 0.1, power).unwrap();
            prop_assert!(b < a);
        }
    }
}
