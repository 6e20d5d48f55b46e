//! Small dense complex matrices. Only the handful of operations the crate
//! needs; covariance matrices are N×N with N in the tens.

use crate::num::{inner, Cplx, Real};

/// Row-major square complex matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix<T> {
    n: usize,
    data: Vec<Cplx<T>>,
}

impl<T: Real> CMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        CMatrix {
            n,
            data: vec![Cplx::new(T::zero(), T::zero()); n * n],
        }
    }

    /// `w wᴴ`.
    pub fn outer(w: &[Cplx<T>]) -> Self {
        let n = w.len();
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = w[i] * w[j].conj();
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Cplx<T> {
        self.data[i * self.n + j]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.n, other.n);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.n, other.n);
        CMatrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn matvec(&self, x: &[Cplx<T>]) -> Vec<Cplx<T>> {
        (0..self.n)
            .map(|i| {
                self.data[i * self.n..(i + 1) * self.n]
                    .iter()
                    .zip(x)
                    .fold(Cplx::new(T::zero(), T::zero()), |acc, (a, b)| acc + a * b)
            })
            .collect()
    }

    /// `vᴴ M v`; real part only (exact for Hermitian `M`).
    pub fn quad_form(&self, v: &[Cplx<T>]) -> T {
        inner(v, &self.matvec(v)).re
    }

    pub fn trace(&self) -> Cplx<T> {
        (0..self.n).map(|i| self.data[i * self.n + i]).fold(Cplx::new(T::zero(), T::zero()), |a, b| a + b)
    }

    pub fn frobenius_sqr(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_hermitian(&self, tol: T) -> bool {
        (0..self.n).all(|i| (0..self.n).all(|j| (self.get(i, j) - self.get(j, i).conj()).norm() <= tol))
    }
}
