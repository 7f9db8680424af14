use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `(I - gamma P) x = rhs`, or `x (I - gamma P) = rhs` when
/// `transpose` is set, for a row-major `n x n` kernel `P`.
pub(crate) fn solve_resolvent(
    kernel: &[f64],
    n: usize,
    gamma: f64,
    rhs: &[f64],
    transpose: bool,
) -> Result<Vec<f64>> {
    let mut a = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            let p = kernel[i * n + j];
            if transpose {
                a[(j, i)] -= gamma * p;
            } else {
                a[(i, j)] -= gamma * p;
            }
        }
    }
    let b = DVector::from_column_slice(rhs);
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Solve("singular (I - gamma P) system".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solve("non-finite solution".into()));
    }
    Ok(x.as_slice().to_vec())
}
