//! Dense primal simplex for `max cᵀy s.t. A y ≤ b, y ≥ 0` with `b ≥ 0`, so
//! the slack basis is feasible from the start. Bland's rule prevents cycling.

use thiserror::Error;

const EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("objective unbounded along variable {0}")]
    Unbounded(usize),
    #[error("malformed program: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpOutcome {
    pub y: Vec<f64>,
    pub objective: f64,
    /// Slack of each constraint row at the optimum.
    pub slack: Vec<f64>,
    pub pivots: usize,
}

pub fn simplex_max(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> Result<LpOutcome, LpError> {
    let m = a.len();
    let n = c.len();
    if b.len() != m || a.iter().any(|row| row.len() != n) {
        return Err(LpError::Shape(format!("A is not {m}x{n}")));
    }
    if b.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(LpError::Shape("right-hand side must be finite and >= 0".into()));
    }
    // Tableau rows: [A | I | b]; objective row holds reduced costs -c.
    let width = n + m + 1;
    let mut t = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        t[i][..n].copy_from_slice(&a[i]);
        t[i][n + i] = 1.0;
        t[i][width - 1] = b[i];
    }
    for j in 0..n {
        t[m][j] = -c[j];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let mut pivots = 0;
    // Bland: lowest-index column with negative reduced cost.
    while let Some(col) = (0..n + m).find(|&j| t[m][j] < -EPS) {
        let mut row: Option<usize> = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if t[i][col] > EPS {
                let ratio = t[i][width - 1] / t[i][col];
                let better = match row {
                    None => true,
                    Some(r) => ratio < best - EPS || (ratio <= best + EPS && basis[i] < basis[r]),
                };
                if better {
                    best = ratio;
                    row = Some(i);
                }
            }
        }
        let Some(row) = row else {
            return Err(LpError::Unbounded(col));
        };
        let p = t[row][col];
        for v in t[row].iter_mut() {
            *v /= p;
        }
        let pivot_row = t[row].clone();
        for (i, r) in t.iter_mut().enumerate() {
            if i != row && r[col] != 0.0 {
                let f = r[col];
                for (v, pv) in r.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        basis[row] = col;
        pivots += 1;
    }
    let mut y = vec![0.0; n];
    for (i, &var) in basis.iter().enumerate() {
        if var < n {
            y[var] = t[i][width - 1].max(0.0);
        }
    }
    let objective = c.iter().zip(&y).map(|(c, y)| c * y).sum();
    let slack = a
        .iter()
        .zip(b)
        .map(|(row, bi)| bi - row.iter().zip(&y).map(|(a, y)| a * y).sum::<f64>())
        .collect();
    Ok(LpOutcome { y, objective, slack, pivots })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_two_variable() {
        // max 3x + 5y; x <= 4; 2y <= 12; 3x + 2y <= 18 -> (2, 6), 36
        let a = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 2.0]];
        let out = simplex_max(&a, &[4.0, 12.0, 18.0], &[3.0, 5.0]).unwrap();
        assert!((out.objective - 36.0).abs() < 1e-12);
        assert!((out.y[0] - 2.0).abs() < 1e-12 && (out.y[1] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_column_is_unbounded() {
        let a = vec![vec![1.0, 0.0]];
        assert_eq!(simplex_max(&a, &[1.0], &[1.0, 1.0]), Err(LpError::Unbounded(1)));
    }

    #[test]
    fn degenerate_rhs() {
        let a = vec![vec![1.0, 1.0], vec![1.0, 0.0]];
        let out = simplex_max(&a, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(out.objective, 0.0);
    }
}
