//! Symmetric 3×3 eigen-decomposition (cyclic Jacobi).

use nalgebra::{Matrix3, Vector3};

use crate::scalar::Real;

/// Eigenpairs of a symmetric 3×3 matrix, eigenvalues ascending.
///
/// `vectors.column(i)` pairs with `values[i]`. Equal eigenvalues keep the
/// axis order in which Jacobi left them (x before y before z), and each
/// eigenvector is signed so its largest-magnitude component is positive.
#[derive(Debug, Clone, Copy)]
pub struct SymmetricEigen3<T: Real> {
    pub values: Vector3<T>,
    pub vectors: Matrix3<T>,
}

impl<T: Real> SymmetricEigen3<T> {
    pub fn new(m: &Matrix3<T>) -> Self {
        let mut a = (m + m.transpose()) * T::lit(0.5);
        let mut v = Matrix3::<T>::identity();
        let scale = a.iter().fold(T::zero(), |s, x| s.max(x.abs()));
        let eps = T::default_epsilon() * scale;

        for _ in 0..64 {
            let off = a[(0, 1)].abs() + a[(0, 2)].abs() + a[(1, 2)].abs();
            if off <= eps || scale == T::zero() {
                break;
            }
            for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (T::lit(2.0) * apq);
                let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                // A' = Jᵀ A J with J the Givens rotation in the (p, q) plane.
                for k in 0..3 {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..3 {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..3 {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }

        let mut order = [0usize, 1, 2];
        let diag = [a[(0, 0)], a[(1, 1)], a[(2, 2)]];
        order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap_or(std::cmp::Ordering::Equal));

        let mut values = Vector3::zeros();
        let mut vectors = Matrix3::zeros();
        for (dst, &src) in order.iter().enumerate() {
            values[dst] = diag[src];
            let mut col: Vector3<T> = v.column(src).into_owned();
            let lead = col.iamax();
            if col[lead] < T::zero() {
                col = -col;
            }
            vectors.set_column(dst, &col.normalize());
        }
        Self { values, vectors }
    }

    /// Eigenvector of the smallest eigenvalue.
    pub fn min_vector(&self) -> Vector3<T> {
        self.vectors.column(0).into_owned()
    }
}
