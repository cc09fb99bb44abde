//! Compressed sparse rows, reverse Cuthill–McKee ordering and an envelope (skyline) Cholesky.

use crate::error::{Error, Result};
use std::collections::VecDeque;

#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    /// Duplicates are summed; column indices end up sorted.
    pub fn from_triplets(nrows: usize, ncols: usize, trip: &[(usize, usize, f64)]) -> Self {
        let mut count = vec![0usize; nrows + 1];
        for &(r, _, _) in trip {
            count[r + 1] += 1;
        }
        for i in 0..nrows {
            count[i + 1] += count[i];
        }
        let mut cols = vec![0usize; trip.len()];
        let mut vals = vec![0.0; trip.len()];
        let mut next = count.clone();
        for &(r, c, v) in trip {
            debug_assert!(c < ncols);
            cols[next[r]] = c;
            vals[next[r]] = v;
            next[r] += 1;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(trip.len());
        let mut data = Vec::with_capacity(trip.len());
        indptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for r in 0..nrows {
            row.clear();
            row.extend((count[r]..count[r + 1]).map(|k| (cols[k], vals[k])));
            row.sort_unstable_by_key(|e| e.0);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut s = 0.0;
                while k < row.len() && row[k].0 == c {
                    s += row[k].1;
                    k += 1;
                }
                indices.push(c);
                data.push(s);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows,
            ncols,
            indptr,
            indices,
            data,
        }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.indptr[r]..self.indptr[r + 1]).map(move |k| (self.indices[k], self.data[k]))
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let s = &self.indices[self.indptr[r]..self.indptr[r + 1]];
        match s.binary_search(&c) {
            Ok(k) => self.data[self.indptr[r] + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        for (r, yr) in y.iter_mut().enumerate().take(self.nrows) {
            let mut s = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                s += self.data[k] * x[self.indices[k]];
            }
            *yr = s;
        }
    }

    /// `Aᵀ x`.
    pub fn tmatvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                for k in self.indptr[r]..self.indptr[r + 1] {
                    y[self.indices[k]] += self.data[k] * xr;
                }
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let trip: Vec<_> = (0..self.nrows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v)))
            .collect();
        Self::from_triplets(self.ncols, self.nrows, &trip)
    }

    pub fn matmul(&self, other: &Csr) -> Self {
        assert_eq!(self.ncols, other.nrows);
        let mut acc = vec![0.0; other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut data = Vec::new();
        let mut cols = Vec::new();
        for r in 0..self.nrows {
            cols.clear();
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if mark[c] != r {
                        mark[c] = r;
                        acc[c] = 0.0;
                        cols.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            cols.sort_unstable();
            for &c in &cols {
                indices.push(c);
                data.push(acc[c]);
            }
            indptr.push(indices.len());
        }
        Self {
            nrows: self.nrows,
            ncols: other.ncols,
            indptr,
            indices,
            data,
        }
    }

    /// Rows and columns restricted to the given index lists.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut cmap = vec![usize::MAX; self.ncols];
        for (j, &c) in cols.iter().enumerate() {
            cmap[c] = j;
        }
        let mut trip = Vec::new();
        for (i, &r) in rows.iter().enumerate() {
            for (c, v) in self.row(r) {
                if cmap[c] != usize::MAX {
                    trip.push((i, cmap[c], v));
                }
            }
        }
        Self::from_triplets(rows.len(), cols.len(), &trip)
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Reverse Cuthill–McKee permutation of a structurally symmetric pattern: `perm[new] = old`.
pub fn rcm(a: &Csr) -> Vec<usize> {
    let n = a.nrows;
    let deg: Vec<usize> = (0..n).map(|r| a.indptr[r + 1] - a.indptr[r]).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    let mut nbrs = Vec::new();
    while order.len() < n {
        // start each component from a low-degree vertex
        let start = (0..n).filter(|&v| !visited[v]).min_by_key(|&v| deg[v]).unwrap();
        let start = pseudo_peripheral(a, start, &deg);
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            nbrs.clear();
            nbrs.extend(a.row(v).map(|(c, _)| c).filter(|&c| !visited[c]));
            nbrs.sort_by_key(|&c| (deg[c], c));
            for &c in &nbrs {
                visited[c] = true;
                queue.push_back(c);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(a: &Csr, start: usize, deg: &[usize]) -> usize {
    let n = a.nrows;
    let mut v = start;
    let mut ecc = 0;
    let mut level = vec![usize::MAX; n];
    for _ in 0..8 {
        level.iter_mut().for_each(|l| *l = usize::MAX);
        let mut q = VecDeque::from([v]);
        level[v] = 0;
        let mut last = vec![v];
        let mut depth = 0;
        while let Some(x) = q.pop_front() {
            for (c, _) in a.row(x) {
                if level[c] == usize::MAX {
                    level[c] = level[x] + 1;
                    if level[c] > depth {
                        depth = level[c];
                        last.clear();
                    }
                    if level[c] == depth {
                        last.push(c);
                    }
                    q.push_back(c);
                }
            }
        }
        if depth <= ecc {
            break;
        }
        ecc = depth;
        v = *last.iter().min_by_key(|&&c| deg[c]).unwrap();
    }
    v
}

/// Envelope Cholesky `P A Pᵀ = L Lᵀ` with a reusable symbolic structure.
#[derive(Clone, Debug)]
pub struct Skyline {
    n: usize,
    perm: Vec<usize>,
    inv: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    vals: Vec<f64>,
}

impl Skyline {
    /// Symbolic analysis for the pattern of `a` (lower and upper parts are both consulted).
    pub fn analyze(a: &Csr) -> Self {
        let n = a.nrows;
        let perm = rcm(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for r in 0..n {
            for (c, _) in a.row(r) {
                let (i, j) = (inv[r], inv[c]);
                let (hi, lo) = (i.max(j), i.min(j));
                first[hi] = first[hi].min(lo);
            }
        }
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            start.push(start[i] + (i - first[i] + 1));
        }
        let vals = vec![0.0; start[n]];
        Self {
            n,
            perm,
            inv,
            first,
            start,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn envelope_size(&self) -> usize {
        self.vals.len()
    }

    /// Storage slot of original entry `(r, c)`, if it lies in the envelope.
    #[inline]
    pub fn slot(&self, r: usize, c: usize) -> Option<usize> {
        let (i, j) = (self.inv[r], self.inv[c]);
        let (hi, lo) = (i.max(j), i.min(j));
        if lo < self.first[hi] {
            None
        } else {
            Some(self.start[hi] + lo - self.first[hi])
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.vals
    }

    pub fn clear(&mut self) {
        self.vals.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Add to original entry `(r, c)`, lower triangle only (`r ≥ c` after permutation is handled).
    #[inline]
    pub fn add_at(&mut self, slot: usize, v: f64) {
        self.vals[slot] += v;
    }

    /// Load the values of `a` (same pattern as analysed).
    pub fn load(&mut self, a: &Csr) {
        self.clear();
        for r in 0..a.nrows {
            for (c, v) in a.row(r) {
                if self.inv[r] >= self.inv[c] {
                    let s = self.slot(r, c).expect("entry outside analysed pattern");
                    self.vals[s] += v;
                }
            }
        }
    }

    /// In-place factorization of the loaded values.
    pub fn factor(&mut self) -> Result<()> {
        let n = self.n;
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            for j in fi..i {
                let fj = self.first[j];
                let sj = self.start[j];
                let k0 = fi.max(fj);
                let len = j - k0;
                let (head, tail) = self.vals.split_at_mut(si);
                let ri = &tail[k0 - fi..k0 - fi + len];
                let rj = &head[sj + k0 - fj..sj + k0 - fj + len];
                let s = dot(ri, rj);
                let d = head[sj + j - fj];
                let e = &mut tail[j - fi];
                *e = (*e - s) / d;
            }
            let row = &self.vals[si..si + i - fi];
            let s = dot(row, row);
            let d = self.vals[si + i - fi] - s;
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    row: self.perm[i],
                    pivot: d,
                });
            }
            self.vals[si + i - fi] = d.sqrt();
        }
        Ok(())
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        self.solve_into(b, &mut x);
        x
    }

    pub fn solve_into(&self, b: &[f64], x: &mut [f64]) {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&o| b[o]).collect();
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            let row = &self.vals[si..si + i - fi];
            let s = dot(row, &y[fi..i]);
            y[i] = (y[i] - s) / self.vals[si + i - fi];
        }
        for i in (0..n).rev() {
            let fi = self.first[i];
            let si = self.start[i];
            y[i] /= self.vals[si + i - fi];
            let yi = y[i];
            for (k, v) in self.vals[si..si + i - fi].iter().enumerate() {
                y[fi + k] -= v * yi;
            }
        }
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
    }

    pub fn factorize(a: &Csr) -> Result<Self> {
        let mut s = Self::analyze(a);
        s.load(a);
        s.factor()?;
        Ok(s)
    }
}

/// Conjugate gradients for SPD `a`, preconditioned by an (approximate) Cholesky factor.
pub fn pcg(a: &Csr, b: &[f64], x: &mut [f64], pre: &Skyline, rtol: f64, atol: f64, max_iter: usize) -> (usize, f64) {
    let mut r: Vec<f64> = a.matvec(x).iter().zip(b).map(|(ax, bi)| bi - ax).collect();
    let mut z = pre.solve(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let bnorm = dot(b, b).sqrt();
    let mut rnorm = dot(&r, &r).sqrt();
    let tol = atol.max(rtol * bnorm);
    let mut ap = vec![0.0; b.len()];
    let mut it = 0;
    while rnorm > tol && it < max_iter {
        a.matvec_into(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..b.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        pre.solve_into(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..b.len() {
            p[i] = z[i] + beta * p[i];
        }
        rnorm = dot(&r, &r).sqrt();
        it += 1;
    }
    (it, rnorm)
}
