//! pass@k estimator, generic over the floating-point scalar.

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("pass@k requires 0 <= c <= n (got n={n}, c={c})")]
    CorrectExceedsSamples { n: u64, c: u64 },
    #[error("pass@k requires 1 <= k <= n (got n={n}, k={k})")]
    KOutOfRange { n: u64, k: u64 },
}

/// Unbiased pass@k: the probability that at least one of `k` samples drawn
/// without replacement from `n` (of which `c` are correct) is correct.
///
/// Evaluates `1 - C(n-c, k) / C(n, k)` as `1 - prod_{i=n-c+1}^{n} (1 - k/i)`,
/// which never forms a factorial.
pub fn pass_at_k<T: Float>(n: u64, c: u64, k: u64) -> Result<T, DomainError> {
    if c > n {
        return Err(DomainError::CorrectExceedsSamples { n, c });
    }
    if k == 0 || k > n {
        return Err(DomainError::KOutOfRange { n, k });
    }
    if n - c < k {
        return Ok(T::one());
    }
    let kf = cast::<T>(k);
    let mut miss = T::one();
    for i in (n - c + 1)..=n {
        miss = miss * (T::one() - kf / cast::<T>(i));
    }
    Ok(T::one() - miss)
}

/// Mean of per-task pass@k values; `None` if any task has fewer than `k` samples
/// or there are no tasks.
pub fn mean_pass_at_k<T: Float>(counts: &[(u64, u64)], k: u64) -> Option<T> {
    if counts.is_empty() {
        return None;
    }
    let mut sum = T::zero();
    for &(n, c) in counts {
        sum = sum + pass_at_k::<T>(n, c, k).ok()?;
    }
    Some(sum / cast::<T>(counts.len() as u64))
}

fn cast<T: Float>(v: u64) -> T {
    T::from(v).expect("u64 is representable in a float type")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_correct_sample() {
        assert_eq!(pass_at_k::<f64>(1, 1, 1).unwrap(), 1.0);
    }

    #[test]
    fn no_correct_samples() {
        assert_eq!(pass_at_k::<f64>(5, 0, 3).unwrap(), 0.0);
    }

    #[test]
    fn two_of_five_at_one() {
        // 2 of the 5 single-sample draws are correct
        assert!((pass_at_k::<f64>(5, 2, 1).unwrap() - 0.4).abs() < 1e-12);
        assert!((pass_at_k::<f32>(5, 2, 1).unwrap() - 0.4).abs() < 1e-6);
    }

    #[test]
    fn domain_errors() {
        assert_eq!(
            pass_at_k::<f64>(3, 4, 1),
            Err(DomainError::CorrectExceedsSamples { n: 3, c: 4 })
        );
        assert_eq!(pass_at_k::<f64>(3, 1, 0), Err(DomainError::KOutOfRange { n: 3, k: 0 }));
        assert_eq!(pass_at_k::<f64>(3, 1, 4), Err(DomainError::KOutOfRange { n: 3, k: 4 }));
    }

    #[test]
    fn large_n_stays_finite() {
        let v = pass_at_k::<f64>(10_000, 37, 100).unwrap();
        assert!(v.is_finite() && (0.0..=1.0).contains(&v));
    }

    #[test]
    fn mean_requires_enough_samples() {
        assert_eq!(mean_pass_at_k::<f64>(&[(1, 1), (1, 0)], 1), Some(0.5));
        assert_eq!(mean_pass_at_k::<f64>(&[(1, 1)], 2), None);
        assert_eq!(mean_pass_at_k::<f64>(&[], 1), None);
    }
}
