//! Dense row-major helpers for the small matrices used throughout.

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `a` is `n x m`, `b` is `m x p`.
pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(b.len(), m * p);
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..p {
                out[i * p + j] += aik * b[k * p + j];
            }
        }
    }
    out
}

pub(crate) fn identity(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    out
}

/// Largest singular value of a `rows x cols` matrix by power iteration on
/// `WᵀW`, stopping at relative change `1e-8` or the iteration cap.
pub fn spectral_norm(w: &[f64], rows: usize, cols: usize) -> f64 {
    spectral_norm_with(w, rows, cols, 1e-8, 1000)
}

pub(crate) fn spectral_norm_with(w: &[f64], rows: usize, cols: usize, rtol: f64, max_iter: usize) -> f64 {
    assert_eq!(w.len(), rows * cols);
    if rows == 0 || cols == 0 || w.iter().all(|&x| x == 0.0) {
        return 0.0;
    }
    let max_iter = max_iter.max(200);
    // Two deterministic starts; a single start can be exactly orthogonal to
    // the top right-singular vector.
    let start_a: Vec<f64> = (0..cols).map(|j| (1.618 * j as f64 + 0.5).sin() + 1.5).collect();
    let row = (0..rows)
        .max_by(|&a, &b| {
            let na = norm2(&w[a * cols..(a + 1) * cols]);
            let nb = norm2(&w[b * cols..(b + 1) * cols]);
            na.total_cmp(&nb)
        })
        .unwrap_or(0);
    let start_b = w[row * cols..(row + 1) * cols].to_vec();
    power_iteration(w, rows, cols, start_a, rtol, max_iter)
        .max(power_iteration(w, rows, cols, start_b, rtol, max_iter))
}

fn power_iteration(w: &[f64], rows: usize, cols: usize, mut v: Vec<f64>, rtol: f64, max_iter: usize) -> f64 {
    let n = norm2(&v);
    if n == 0.0 {
        return 0.0;
    }
    v.iter_mut().for_each(|x| *x /= n);
    let apply = |v: &[f64], out: &mut [f64]| {
        for i in 0..rows {
            out[i] = (0..cols).map(|j| w[i * cols + j] * v[j]).sum();
        }
    };
    let mut wv = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..max_iter {
        apply(&v, &mut wv);
        let mut next = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                next[j] += w[i * cols + j] * wv[i];
            }
        }
        let nn = norm2(&next);
        if nn == 0.0 {
            break;
        }
        let new_sigma = nn.sqrt();
        next.iter_mut().for_each(|x| *x /= nn);
        v = next;
        let converged = (new_sigma - sigma).abs() <= rtol * new_sigma;
        sigma = new_sigma;
        if converged {
            break;
        }
    }
    apply(&v, &mut wv);
    norm2(&wv).max(sigma)
}
