//! Dense least squares by Householder QR.

/// Minimize `‖A·β − y‖₂` for a column-major `A` (each inner vector is one
/// column). Returns `None` when `A` is numerically rank deficient.
///
/// Columns are scaled to unit norm before the factorization so that the rank
/// test does not depend on the units of the data.
pub(crate) fn solve(columns: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let n = columns.len();
    let m = y.len();
    if n == 0 || m < n || columns.iter().any(|c| c.len() != m) {
        return None;
    }

    let scale: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if scale.iter().any(|s| *s == 0.0 || !s.is_finite()) {
        return None;
    }
    let mut a: Vec<Vec<f64>> = columns
        .iter()
        .zip(&scale)
        .map(|(c, s)| c.iter().map(|v| v / s).collect())
        .collect();
    let mut b = y.to_vec();

    let mut diag = vec![0.0; n];
    for j in 0..n {
        let norm = a[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        let alpha = if a[j][j] > 0.0 { -norm } else { norm };
        // v = x - alpha e1, stored in place of column j below the diagonal
        a[j][j] -= alpha;
        let vnorm2: f64 = a[j][j..].iter().map(|v| v * v).sum();
        diag[j] = alpha;
        if vnorm2 == 0.0 {
            continue;
        }
        let (head, tail) = a.split_at_mut(j + 1);
        let v = &head[j][j..];
        for col in tail.iter_mut() {
            let dot: f64 = v.iter().zip(&col[j..]).map(|(p, q)| p * q).sum();
            let f = 2.0 * dot / vnorm2;
            for (c, vi) in col[j..].iter_mut().zip(v) {
                *c -= f * vi;
            }
        }
        let dot: f64 = v.iter().zip(&b[j..]).map(|(p, q)| p * q).sum();
        let f = 2.0 * dot / vnorm2;
        for (c, vi) in b[j..].iter_mut().zip(v) {
            *c -= f * vi;
        }
    }

    let rmax = diag.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
    let tol = rmax * (m as f64) * f64::EPSILON * 16.0;
    if diag.iter().any(|d| d.abs() <= tol) {
        return None;
    }

    // R is upper triangular: diagonal in `diag`, strict upper part in a[col][row].
    let mut beta = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= a[k][i] * beta[k];
        }
        beta[i] = s / diag[i];
    }
    for (bk, s) in beta.iter_mut().zip(&scale) {
        *bk /= s;
    }
    Some(beta)
}
