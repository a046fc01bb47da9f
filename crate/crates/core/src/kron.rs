//! Mode-wise algebra on `(L_p ⊗ L_t ⊗ L_n)` for vectors laid out as
//! `p·T·N + t·N + n`. The Kronecker product is never formed.

use nalgebra::DMatrix;

use crate::scalar::Scalar;

/// Tensor dimensions `(P, T, N)` of a flat vector.
pub type Dims = (usize, usize, usize);

fn fiber_layout(dims: Dims, mode: usize) -> (usize, usize, usize, usize) {
    // (fiber length, stride, outer count, outer stride) for the given mode;
    // the fastest index inside the outer block spans `stride` entries.
    let (p, t, n) = dims;
    match mode {
        0 => (p, t * n, 1, 0),
        1 => (t, n, p, t * n),
        _ => (n, 1, p * t, n),
    }
}

/// Applies `f` to every mode-`mode` fiber of `v` in place.
fn for_each_fiber<T: Scalar>(v: &mut [T], dims: Dims, mode: usize, mut f: impl FnMut(&mut [T])) {
    let (len, stride, outer, outer_stride) = fiber_layout(dims, mode);
    if stride == 1 {
        v.chunks_mut(len).for_each(f);
        return;
    }
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for inner in 0..stride {
            let base = o * outer_stride + inner;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = v[base + k * stride];
            }
            f(&mut buf);
            for (k, b) in buf.iter().enumerate() {
                v[base + k * stride] = *b;
            }
        }
    }
}

/// `x ← L x` for lower-triangular `L`.
fn lower_mul_in_place<T: Scalar>(l: &DMatrix<T>, x: &mut [T]) {
    for i in (0..x.len()).rev() {
        let mut s = T::zero();
        for j in 0..=i {
            s += l[(i, j)] * x[j];
        }
        x[i] = s;
    }
}

/// `x ← L⁻¹ x` for lower-triangular `L` by forward substitution.
fn lower_solve_in_place<T: Scalar>(l: &DMatrix<T>, x: &mut [T]) {
    for i in 0..x.len() {
        let mut s = x[i];
        for j in 0..i {
            s -= l[(i, j)] * x[j];
        }
        x[i] = s / l[(i, i)];
    }
}

fn check<T: Scalar>(factors: [&DMatrix<T>; 3], len: usize) -> Option<Dims> {
    let dims = (factors[0].nrows(), factors[1].nrows(), factors[2].nrows());
    let square = factors.iter().all(|f| f.is_square());
    (square && dims.0 * dims.1 * dims.2 == len).then_some(dims)
}

/// `(L_p ⊗ L_t ⊗ L_n) v` via three mode-wise multiplications.
/// Returns `None` on a dimension mismatch.
pub fn kron_lower_mul<T: Scalar>(
    lp: &DMatrix<T>,
    lt: &DMatrix<T>,
    ln: &DMatrix<T>,
    v: &[T],
) -> Option<Vec<T>> {
    let dims = check([lp, lt, ln], v.len())?;
    let mut out = v.to_vec();
    for_each_fiber(&mut out, dims, 2, |x| lower_mul_in_place(ln, x));
    for_each_fiber(&mut out, dims, 1, |x| lower_mul_in_place(lt, x));
    for_each_fiber(&mut out, dims, 0, |x| lower_mul_in_place(lp, x));
    Some(out)
}

/// `(L_p ⊗ L_t ⊗ L_n)⁻¹ v` via three mode-wise triangular solves.
pub fn kron_lower_solve<T: Scalar>(
    lp: &DMatrix<T>,
    lt: &DMatrix<T>,
    ln: &DMatrix<T>,
    v: &[T],
) -> Option<Vec<T>> {
    let dims = check([lp, lt, ln], v.len())?;
    let mut out = v.to_vec();
    for_each_fiber(&mut out, dims, 2, |x| lower_solve_in_place(ln, x));
    for_each_fiber(&mut out, dims, 1, |x| lower_solve_in_place(lt, x));
    for_each_fiber(&mut out, dims, 0, |x| lower_solve_in_place(lp, x));
    Some(out)
}

/// Dense `A ⊗ B ⊗ C`. Only meant for small checks.
pub fn dense_kron3<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>, c: &DMatrix<T>) -> DMatrix<T> {
    a.kronecker(b).kronecker(c)
}
