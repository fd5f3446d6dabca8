//! Banded matrices with an unpivoted LU factorization.
//!
//! Every system solved here has the form `M − Δt·D_yA` with `M` diagonal
//! positive and `−D_yA` having a positive semidefinite symmetric part, so all
//! leading principal submatrices are nonsingular and no pivoting is needed.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct BandedMatrix {
    n: usize,
    w: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        let w = bandwidth.min(n.saturating_sub(1));
        Self { n, w, data: vec![0.0; n * (2 * w + 1)] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.w, "({i}, {j}) outside band {}", self.w);
        i * (2 * self.w + 1) + (j + self.w - i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.w {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn add_diagonal(&mut self, diag: &[f64]) {
        for (i, &d) in diag.iter().enumerate() {
            self.add(i, i, d);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n, self.w);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.w);
            let hi = (i + self.w).min(self.n - 1);
            for j in lo..=hi {
                t.add(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.w);
                let hi = (i + self.w).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    /// In-place Doolittle factorization; `L` has a unit diagonal.
    pub fn factor(mut self) -> Result<BandedLu> {
        let (n, w) = (self.n, self.w);
        for k in 0..n {
            let pivot = self.data[self.slot(k, k)];
            let scale =
                (0..n.min(k + w + 1)).skip(k.saturating_sub(w)).map(|j| self.get(k, j).abs()).fold(0.0, f64::max);
            if !(pivot.abs() > 1e-300 && pivot.abs() > 1e-14 * scale) {
                return Err(Error::SingularMatrix { row: k, pivot });
            }
            let last = (k + w).min(n - 1);
            for i in k + 1..=last {
                let s = self.slot(i, k);
                let l = self.data[s] / pivot;
                self.data[s] = l;
                if l != 0.0 {
                    for j in k + 1..=last {
                        let u = self.data[self.slot(k, j)];
                        let t = self.slot(i, j);
                        self.data[t] -= l * u;
                    }
                }
            }
        }
        Ok(BandedLu { lu: self })
    }
}

#[derive(Clone, Debug)]
pub struct BandedLu {
    lu: BandedMatrix,
}

impl BandedLu {
    #[allow(clippy::needless_range_loop)]
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let (n, w) = (self.lu.n, self.lu.w);
        for i in 0..n {
            let lo = i.saturating_sub(w);
            let mut s = b[i];
            for j in lo..i {
                s -= self.lu.data[self.lu.slot(i, j)] * b[j];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + w).min(n - 1);
            let mut s = b[i];
            for j in i + 1..=hi {
                s -= self.lu.data[self.lu.slot(i, j)] * b[j];
            }
            b[i] = s / self.lu.data[self.lu.slot(i, i)];
        }
    }
}
