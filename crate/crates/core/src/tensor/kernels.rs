//! Slice reductions split over independent lanes so the compiler can keep
//! them in vector registers.

use super::Real;

const LANES: usize = 8;

fn reduce<R: Real>(n: usize, term: impl Fn(usize) -> R) -> R {
    let mut acc = [R::zero(); LANES];
    let full = n / LANES * LANES;
    for base in (0..full).step_by(LANES) {
        for (l, a) in acc.iter_mut().enumerate() {
            *a = *a + term(base + l);
        }
    }
    let mut tail = R::zero();
    for i in full..n {
        tail = tail + term(i);
    }
    acc.iter().fold(tail, |s, &a| s + a)
}

pub(crate) fn sum<R: Real>(x: &[R]) -> R {
    reduce(x.len(), |i| x[i])
}

pub(crate) fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    reduce(n, |i| a[i] * b[i])
}

/// `Σ (x − m)²`.
pub(crate) fn sum_sq_dev<R: Real>(x: &[R], m: R) -> R {
    reduce(x.len(), |i| (x[i] - m) * (x[i] - m))
}

/// `out[r·cols + c] += Σ_k a[r·len + k] · b[c·len + k]` for row-major `a`
/// (`rows × len`) and `b` (`cols × len`): a product against a transposed
/// right operand with a long inner dimension, where blocked GEMM packing
/// does not pay off. Four rows of `a` share each pass over a row of `b`.
pub(crate) fn add_a_bt<R: Real>(out: &mut [R], a: &[R], b: &[R], rows: usize, cols: usize, len: usize) {
    let full = len / LANES * LANES;
    let mut r = 0;
    while r + 4 <= rows {
        let ar: [&[R]; 4] = std::array::from_fn(|i| &a[(r + i) * len..(r + i + 1) * len]);
        for c in 0..cols {
            let bc = &b[c * len..(c + 1) * len];
            let mut acc = [[R::zero(); LANES]; 4];
            for base in (0..full).step_by(LANES) {
                let bb = &bc[base..base + LANES];
                for (row, lane) in ar.iter().zip(acc.iter_mut()) {
                    let aa = &row[base..base + LANES];
                    for l in 0..LANES {
                        lane[l] = lane[l] + aa[l] * bb[l];
                    }
                }
            }
            for (i, (row, lane)) in ar.iter().zip(&acc).enumerate() {
                let mut t = lane.iter().fold(R::zero(), |s, &v| s + v);
                for k in full..len {
                    t = t + row[k] * bc[k];
                }
                let o = &mut out[(r + i) * cols + c];
                *o = *o + t;
            }
        }
        r += 4;
    }
    for r in r..rows {
        let ar = &a[r * len..(r + 1) * len];
        for c in 0..cols {
            let o = &mut out[r * cols + c];
            *o = *o + dot(ar, &b[c * len..(c + 1) * len]);
        }
    }
}
