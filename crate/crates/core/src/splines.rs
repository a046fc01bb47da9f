//! Knot-based thin-plate regression splines in scaled `(x, y, t̃)` space.
//!
//! The radial kernel is `η(r) = −r`, the thin-plate kernel for three input
//! dimensions and second-order penalty. Radial coefficients are constrained
//! to be orthogonal to the polynomial terms at the knots, and that
//! constraint is absorbed into the basis so the penalty's null space is
//! exactly the polynomial space.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::scalar::{cast, cast_usize, Scalar};

/// A point in `(x km, y km, t hours)` before time scaling.
pub type WindowPoint<T> = [T; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("requested {requested} knots but only {available} distinct points")]
    TooFewDistinctPoints { requested: usize, available: usize },
    #[error("duplicate knots at positions {0} and {1}")]
    DuplicateKnots(usize, usize),
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
}

/// Thin-plate kernel for d = 3, m = 2.
#[inline]
pub fn tps_radial<T: Scalar>(r: T) -> T {
    -r
}

#[inline]
fn dist3<T: Scalar>(a: &[T; 3], b: &[T; 3]) -> T {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
}

fn scale_point<T: Scalar>(p: &WindowPoint<T>, time_scale: T) -> [T; 3] {
    [p[0], p[1], p[2] * time_scale]
}

/// Time scale (km per hour) making one time step as long as the median
/// nearest-neighbor distance between the window's locations.
pub fn time_scale_for<T: Scalar>(locations: &[[T; 2]], time_step: T) -> T {
    let mut nn: Vec<T> = Vec::with_capacity(locations.len());
    for (i, a) in locations.iter().enumerate() {
        let best = locations
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, b)| {
                let dx = a[0] - b[0];
                let dy = a[1] - b[1];
                (dx * dx + dy * dy).sqrt()
            })
            .filter(|&d| d > T::zero())
            .fold(None, |m: Option<T>, d| Some(m.map_or(d, |m| m.min(d))));
        if let Some(d) = best {
            nn.push(d);
        }
    }
    if nn.is_empty() {
        return T::one() / time_step;
    }
    nn.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = nn.len();
    let median = if k % 2 == 1 {
        nn[k / 2]
    } else {
        (nn[k / 2 - 1] + nn[k / 2]) * cast(0.5)
    };
    median / time_step
}

/// Farthest-point sampling of `j` knots (returned as indices into `points`).
///
/// The first knot is the point nearest the centroid; each next knot is the
/// point farthest from all chosen ones. Ties go to the lower index.
pub fn select_knots<T: Scalar>(points: &[[T; 3]], j: usize) -> Result<Vec<usize>, BasisError> {
    let n = points.len();
    let distinct = count_distinct(points);
    if j > distinct || j == 0 {
        return Err(BasisError::TooFewDistinctPoints {
            requested: j,
            available: distinct,
        });
    }
    let mut centroid = [T::zero(); 3];
    for p in points {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    let centroid = centroid.map(|c| c / cast_usize::<T>(n));
    let first = argbest(points.iter().map(|p| dist3(p, &centroid)), |a, b| a < b);
    let mut chosen = vec![first];
    let mut min_d: Vec<T> = points.iter().map(|p| dist3(p, &points[first])).collect();
    while chosen.len() < j {
        let next = argbest(min_d.iter().copied(), |a, b| a > b);
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            let d = dist3(p, &points[next]);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    Ok(chosen)
}

/// Index of the first element strictly better than all earlier ones.
fn argbest<T: Scalar>(values: impl Iterator<Item = T>, better: impl Fn(T, T) -> bool) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.enumerate() {
        match best {
            Some((_, b)) if !better(v, b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|b| b.0).unwrap_or(0)
}

fn count_distinct<T: Scalar>(points: &[[T; 3]]) -> usize {
    let mut keys: Vec<[u64; 3]> = points
        .iter()
        .map(|p| p.map(|v| crate::scalar::to_f64(v).to_bits()))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Projects a symmetric matrix onto the PSD cone by clipping negative eigenvalues.
pub fn psd_project<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let sym = (m + m.transpose()) * cast::<T>(0.5);
    let eig = SymmetricEigen::new(sym);
    let clipped = eig.eigenvalues.map(|v| if v < T::zero() { T::zero() } else { v });
    let r = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    (&r + r.transpose()) * cast::<T>(0.5)
}

/// Design matrix, penalty and evaluation data of one window's spline.
#[derive(Debug, Clone)]
pub struct SplineBasis<T: Scalar> {
    knots: Vec<[T; 3]>,
    design: DMatrix<T>,
    penalty: DMatrix<T>,
    null_dim: usize,
    time_scale: T,
    /// Which of the scaled axes (0 = x, 1 = y, 2 = t̃) enter the polynomial part.
    poly_axes: Vec<usize>,
    /// J × (J − null_dim) orthonormal basis of the constrained radial coefficients.
    constraint: DMatrix<T>,
}

impl<T: Scalar> SplineBasis<T> {
    pub fn knots(&self) -> &[[T; 3]] {
        &self.knots
    }

    /// `n × J` design matrix.
    pub fn design(&self) -> &DMatrix<T> {
        &self.design
    }

    /// `J × J` penalty.
    pub fn penalty(&self) -> &DMatrix<T> {
        &self.penalty
    }

    pub fn null_dim(&self) -> usize {
        self.null_dim
    }

    pub fn time_scale(&self) -> T {
        self.time_scale
    }

    pub fn poly_axes(&self) -> &[usize] {
        &self.poly_axes
    }

    pub fn n_coef(&self) -> usize {
        self.knots.len()
    }

    /// Number of radial (penalized) columns; they come first in the design.
    pub fn n_radial(&self) -> usize {
        self.knots.len() - self.null_dim
    }

    /// Basis row at a raw `(x, y, t)` point.
    pub fn evaluate(&self, point: &WindowPoint<T>) -> DVector<T> {
        let p = scale_point(point, self.time_scale);
        let raw = DVector::from_iterator(
            self.knots.len(),
            self.knots.iter().map(|k| tps_radial(dist3(&p, k))),
        );
        let radial = self.constraint.tr_mul(&raw);
        let mut row = DVector::zeros(self.n_coef());
        row.rows_mut(0, radial.len()).copy_from(&radial);
        let base = radial.len();
        row[base] = T::one();
        for (i, &a) in self.poly_axes.iter().enumerate() {
            row[base + 1 + i] = p[a];
        }
        row
    }
}

/// Builds the constrained thin-plate basis for `points` (raw `(x, y, t)`)
/// with `knots` already in scaled space.
pub fn build_basis<T: Scalar>(
    points: &[WindowPoint<T>],
    knots: &[[T; 3]],
    time_scale: T,
) -> Result<SplineBasis<T>, BasisError> {
    if points.is_empty() {
        return Err(BasisError::Degenerate("no points"));
    }
    if knots.is_empty() {
        return Err(BasisError::Degenerate("no knots"));
    }
    let scaled: Vec<[T; 3]> = points.iter().map(|p| scale_point(p, time_scale)).collect();
    if scaled.iter().all(|p| *p == scaled[0]) {
        return Err(BasisError::Degenerate("all points identical"));
    }
    for a in 0..knots.len() {
        for b in a + 1..knots.len() {
            if knots[a] == knots[b] {
                return Err(BasisError::DuplicateKnots(a, b));
            }
        }
    }
    let j = knots.len();

    // Centered knot coordinates; centering keeps the constraint basis
    // independent of where the window sits.
    let inv_j = T::one() / cast_usize::<T>(j);
    let mut centroid = [T::zero(); 3];
    for k in knots {
        for a in 0..3 {
            centroid[a] += k[a] * inv_j;
        }
    }
    let poly_axes = independent_axes(knots, &centroid);
    let null_dim = 1 + poly_axes.len();
    if null_dim > j {
        return Err(BasisError::Degenerate("fewer knots than polynomial terms"));
    }

    let mut tk = DMatrix::<T>::zeros(j, null_dim + j);
    for (r, k) in knots.iter().enumerate() {
        tk[(r, 0)] = T::one();
        for (i, &a) in poly_axes.iter().enumerate() {
            tk[(r, 1 + i)] = k[a] - centroid[a];
        }
        tk[(r, null_dim + r)] = T::one();
    }
    let q = tk.qr().q();
    let constraint = q.columns(null_dim, j - null_dim).into_owned();

    let knot_kernel = DMatrix::from_fn(j, j, |a, b| tps_radial(dist3(&knots[a], &knots[b])));
    let radial_penalty = if j > null_dim {
        psd_project(&(constraint.transpose() * &knot_kernel * &constraint))
    } else {
        DMatrix::zeros(0, 0)
    };

    let n = points.len();
    let raw = DMatrix::from_fn(n, j, |i, c| tps_radial(dist3(&scaled[i], &knots[c])));
    let radial = raw * &constraint;
    let nr = j - null_dim;
    let mut design = DMatrix::<T>::zeros(n, j);
    design.columns_mut(0, nr).copy_from(&radial);
    for (i, p) in scaled.iter().enumerate() {
        design[(i, nr)] = T::one();
        for (c, &a) in poly_axes.iter().enumerate() {
            design[(i, nr + 1 + c)] = p[a];
        }
    }
    let mut penalty = DMatrix::<T>::zeros(j, j);
    penalty.view_mut((0, 0), (nr, nr)).copy_from(&radial_penalty);

    Ok(SplineBasis {
        knots: knots.to_vec(),
        design,
        penalty,
        null_dim,
        time_scale,
        poly_axes,
        constraint,
    })
}

/// Greedy selection of the axes whose knot coordinates are linearly
/// independent of the constant and of previously selected axes.
fn independent_axes<T: Scalar>(knots: &[[T; 3]], centroid: &[T; 3]) -> Vec<usize> {
    let cols: Vec<DVector<T>> = (0..3)
        .map(|a| DVector::from_iterator(knots.len(), knots.iter().map(|k| k[a] - centroid[a])))
        .collect();
    let spread = cols.iter().map(|c| c.norm()).fold(T::zero(), |m, v| m.max(v));
    if spread <= T::zero() {
        return Vec::new();
    }
    let tol = spread * cast(1e-6);
    let mut basis: Vec<DVector<T>> = Vec::new();
    let mut axes = Vec::new();
    for (a, col) in cols.iter().enumerate() {
        // centered columns are already orthogonal to the constant
        let mut r = col.clone();
        for b in &basis {
            let proj = b.dot(&r);
            r.axpy(-proj, b, T::one());
        }
        let norm = r.norm();
        if norm > tol {
            basis.push(r / norm);
            axes.push(a);
        }
    }
    axes
}
