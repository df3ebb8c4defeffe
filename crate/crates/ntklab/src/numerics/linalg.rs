use ndarray::{Array1, Array2};

use crate::{Error, Result};

/// Thin singular value decomposition `M = U·diag(S)·Vᵀ`.
///
/// `U` is rows×k, `V` is cols×k with k = min(rows, cols); both have
/// orthonormal columns. `S` is sorted descending. Signs are fixed so the
/// largest-magnitude entry of each `U` column is positive (first index wins
/// ties), which makes downstream feature responses reproducible.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Array2<f64>,
    pub s: Array1<f64>,
    pub v: Array2<f64>,
}

fn ensure_finite(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what}: matrix has non-finite entries")));
    }
    Ok(())
}

fn to_na(m: &Array2<f64>) -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Flip column signs in place so each column's largest-magnitude entry is
/// positive; the paired matrix (V for an SVD) is flipped in lockstep.
fn fix_column_signs(u: &mut Array2<f64>, mut paired: Option<&mut Array2<f64>>) {
    for j in 0..u.ncols() {
        let mut arg = 0;
        let mut best = -1.0;
        for i in 0..u.nrows() {
            let a = u[[i, j]].abs();
            if a > best {
                best = a;
                arg = i;
            }
        }
        if u[[arg, j]] < 0.0 {
            for i in 0..u.nrows() {
                u[[i, j]] = -u[[i, j]];
            }
            if let Some(v) = paired.as_deref_mut() {
                for i in 0..v.nrows() {
                    v[[i, j]] = -v[[i, j]];
                }
            }
        }
    }
}

/// Thin SVD with deterministic ordering and sign convention. See [`Svd`].
pub fn svd(m: &Array2<f64>) -> Result<Svd> {
    ensure_finite(m, "svd")?;
    let (rows, cols) = (m.nrows(), m.ncols());
    let decomp = to_na(m)
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Linalg("svd iteration did not converge".into()))?;
    let u_na = decomp
        .u
        .ok_or_else(|| Error::Linalg("svd returned no U factor".into()))?;
    let vt_na = decomp
        .v_t
        .ok_or_else(|| Error::Linalg("svd returned no V factor".into()))?;
    let k = decomp.singular_values.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        decomp.singular_values[b]
            .partial_cmp(&decomp.singular_values[a])
            .expect("singular values are finite")
    });

    let mut u = Array2::zeros((rows, k));
    let mut s = Array1::zeros(k);
    let mut v = Array2::zeros((cols, k));
    for (jnew, &jold) in order.iter().enumerate() {
        s[jnew] = decomp.singular_values[jold];
        for i in 0..rows {
            u[[i, jnew]] = u_na[(i, jold)];
        }
        for i in 0..cols {
            v[[i, jnew]] = vt_na[(jold, i)];
        }
    }
    fix_column_signs(&mut u, Some(&mut v));
    Ok(Svd { u, s, v })
}

/// Eigendecomposition of a symmetric matrix.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues sorted descending
/// and eigenvectors as the corresponding columns, sign-fixed like [`svd`].
/// Input must be square and symmetric to 1e−10 (relative to its largest
/// entry); asymmetric input is rejected rather than silently symmetrized.
pub fn symmetric_eig(m: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    ensure_finite(m, "symmetric_eig")?;
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Shape(format!(
            "symmetric_eig: expected square matrix, got {}×{}",
            n,
            m.ncols()
        )));
    }
    let scale = m.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[[i, j]] - m[[j, i]]).abs() > 1e-10 * scale {
                return Err(Error::Domain(format!(
                    "symmetric_eig: entries ({i},{j}) and ({j},{i}) differ by more than 1e-10 relative"
                )));
            }
        }
    }

    let eig = to_na(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });

    let mut values = Array1::zeros(n);
    let mut vectors = Array2::zeros((n, n));
    for (jnew, &jold) in order.iter().enumerate() {
        values[jnew] = eig.eigenvalues[jold];
        for i in 0..n {
            vectors[[i, jnew]] = eig.eigenvectors[(i, jold)];
        }
    }
    fix_column_signs(&mut vectors, None);
    Ok((values, vectors))
}

/// Solve the square system A·x = b by LU with partial pivoting.
pub fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    ensure_finite(a, "solve")?;
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::Shape(format!(
            "solve: {}×{} matrix with rhs of length {}",
            n,
            a.ncols(),
            b.len()
        )));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("solve: rhs has non-finite entries".into()));
    }
    let lu = to_na(a).lu();
    let rhs = nalgebra::DVector::from_iterator(n, b.iter().copied());
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Linalg("solve: system is singular".into()))?;
    Ok(Array1::from_vec(x.iter().copied().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Deterministic filler for "random" test matrices; a plain LCG keeps
    /// the oracle test independent of the crate's RNG choices.
    fn lcg_matrix(rows: usize, cols: usize, mut state: u64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b.iter()).fold(0.0f64, |m, (&x, &y)| m.max((x - y).abs()))
    }

    fn reconstruct(d: &Svd) -> Array2<f64> {
        let us = &d.u * &d.s.clone().insert_axis(ndarray::Axis(0));
        us.dot(&d.v.t())
    }

    /// Closed-form singular values of a 2-column matrix via the trace and
    /// determinant of MᵀM — independent of the factorization under test.
    fn gram_oracle_sigma(m: &Array2<f64>) -> (f64, f64) {
        let g = m.t().dot(m);
        let tr = g[[0, 0]] + g[[1, 1]];
        let det = g[[0, 0]] * g[[1, 1]] - g[[0, 1]] * g[[1, 0]];
        let disc = (tr * tr - 4.0 * det).sqrt();
        (((tr + disc) / 2.0).sqrt(), ((tr - disc) / 2.0).sqrt())
    }

    #[test]
    fn identity_is_its_own_svd() {
        let d = svd(&Array2::eye(2)).unwrap();
        assert!(max_abs_diff(&d.u, &Array2::eye(2)) < 1e-12);
        assert!(max_abs_diff(&d.v, &Array2::eye(2)) < 1e-12);
        assert!((d.s[0] - 1.0).abs() < 1e-12 && (d.s[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_singular_values() {
        let d = svd(&array![[3.0, 0.0], [0.0, 2.0]]).unwrap();
        assert!((d.s[0] - 3.0).abs() < 1e-12 && (d.s[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_values_match_gram_eigenvalue_oracle() {
        // Oracle: for 2-column M the eigenvalues of MᵀM follow from the
        // 2×2 trace/determinant closed form; σᵢ = √λᵢ.
        let m: Array2<f64> = array![[3.0, 0.0], [4.0, 5.0]];
        let (o1, o2) = gram_oracle_sigma(&m);
        let d = svd(&m).unwrap();
        assert!((d.s[0] - o1).abs() < 1e-10, "σ₁={} vs oracle {o1}", d.s[0]);
        assert!((d.s[1] - o2).abs() < 1e-10, "σ₂={} vs oracle {o2}", d.s[1]);
        // Frozen values: σ = (√45, √5).
        assert!((d.s[0] - 6.708203932499369).abs() < 1e-10);
        assert!((d.s[1] - 2.23606797749979).abs() < 1e-10);
    }

    #[test]
    fn tall_matrix_reconstruction_with_gram_oracle() {
        let m: Array2<f64> = array![[0.3, -1.2], [2.0, 0.5], [-0.7, 1.1]];
        let d = svd(&m).unwrap();
        assert!(max_abs_diff(&reconstruct(&d), &m) < 1e-10);
        let (o1, o2) = gram_oracle_sigma(&m);
        assert!((d.s[0] - o1).abs() < 1e-10);
        assert!((d.s[1] - o2).abs() < 1e-10);
    }

    #[test]
    fn sign_convention_largest_u_entry_positive() {
        let d = svd(&array![[0.0, -2.0], [-3.0, 0.0]]).unwrap();
        assert!((d.s[0] - 3.0).abs() < 1e-12 && (d.s[1] - 2.0).abs() < 1e-12);
        // Largest-magnitude entry of each U column must be positive, and the
        // paired V flip must preserve the reconstruction.
        assert!(max_abs_diff(&d.u, &array![[0.0, 1.0], [1.0, 0.0]]) < 1e-12, "u={:?}", d.u);
        assert!(max_abs_diff(&reconstruct(&d), &array![[0.0, -2.0], [-3.0, 0.0]]) < 1e-12);
    }

    #[test]
    fn random_shapes_reconstruct_and_stay_orthonormal() {
        for &(rows, cols, seed) in &[(5usize, 3usize, 11u64), (3, 5, 12), (40, 40, 13), (200, 60, 14), (60, 200, 15), (200, 200, 16)] {
            let m = lcg_matrix(rows, cols, seed);
            let scale = m.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
            let d = svd(&m).unwrap();
            assert!(max_abs_diff(&reconstruct(&d), &m) < 1e-10 * scale, "{rows}×{cols}");
            let utu = d.u.t().dot(&d.u);
            let vtv = d.v.t().dot(&d.v);
            let k = d.s.len();
            assert!(max_abs_diff(&utu, &Array2::eye(k)) < 1e-12 * k as f64, "UᵀU {rows}×{cols}");
            assert!(max_abs_diff(&vtv, &Array2::eye(k)) < 1e-12 * k as f64, "VᵀV {rows}×{cols}");
            for j in 1..k {
                assert!(d.s[j - 1] >= d.s[j], "not descending at {j}");
            }
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(svd(&array![[f64::NAN, 0.0], [0.0, 1.0]]).is_err());
        assert!(symmetric_eig(&array![[f64::INFINITY, 0.0], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let (vals, _) = symmetric_eig(&Array2::eye(2)).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        let (vals, _) = symmetric_eig(&array![[-1.0, 0.0], [0.0, -2.0]]).unwrap();
        assert!((vals[0] + 1.0).abs() < 1e-12 && (vals[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn eig_two_by_two_closed_form() {
        // [[2,1],[1,2]] has eigenpairs (3, [1,1]/√2) and (1, [1,−1]/√2).
        let (vals, vecs) = symmetric_eig(&array![[2.0, 1.0], [1.0, 2.0]]).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        let r = 0.5f64.sqrt();
        assert!((vecs[[0, 0]] - r).abs() < 1e-10 && (vecs[[1, 0]] - r).abs() < 1e-10);
        // Sign rule: tie on magnitudes, first index wins, so column 1 starts positive.
        assert!((vecs[[0, 1]] - r).abs() < 1e-10 && (vecs[[1, 1]] + r).abs() < 1e-10);
    }

    #[test]
    fn eig_random_symmetric_residual() {
        let raw = lcg_matrix(4, 4, 99);
        let m = &raw + &raw.t();
        let (vals, vecs) = symmetric_eig(&m).unwrap();
        for j in 0..4 {
            let v = vecs.column(j).to_owned();
            let resid = &m.dot(&v) - &(vals[j] * &v);
            let worst = resid.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
            assert!(worst < 1e-9, "pair {j}: residual {worst}");
        }
        let vtv = vecs.t().dot(&vecs);
        assert!(max_abs_diff(&vtv, &Array2::eye(4)) < 1e-10);
        for j in 1..4 {
            assert!(vals[j - 1] >= vals[j]);
        }
    }

    #[test]
    fn eig_rejects_asymmetric_and_non_square() {
        assert!(symmetric_eig(&array![[1.0, 2.0], [0.0, 1.0]]).is_err());
        assert!(symmetric_eig(&Array2::<f64>::zeros((2, 3))).is_err());
    }

    #[test]
    fn solve_recovers_a_known_solution() {
        let a = array![[3.0, 1.0], [1.0, 2.0]];
        let x_true = array![0.5, -1.25];
        let b = a.dot(&x_true);
        let x = solve(&a, &b).unwrap();
        assert!((x[0] - x_true[0]).abs() < 1e-12);
        assert!((x[1] - x_true[1]).abs() < 1e-12);
    }

    #[test]
    fn solve_checks_residual_on_random_systems() {
        for n in [1usize, 3, 6, 12] {
            let a = lcg_matrix(n, n, 0xfeed_f00d + n as u64);
            let b = lcg_matrix(n, 1, 0xabad_cafe + n as u64).column(0).to_owned();
            let x = solve(&a, &b).unwrap();
            let r = &a.dot(&x) - &b;
            let worst = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(worst < 1e-9, "n = {n}: residual {worst}");
        }
    }

    #[test]
    fn solve_rejects_singular_and_misshapen_systems() {
        let singular = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(solve(&singular, &array![1.0, 1.0]).is_err());
        assert!(solve(&array![[1.0, 0.0]], &array![1.0]).is_err());
        assert!(solve(&array![[1.0]], &array![f64::NAN]).is_err());
    }
}
