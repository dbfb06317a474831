//! Flat indexing of the upper triangle of a symmetric `d x d` matrix.
//!
//! The ordering is row-major over `i <= j`:
//! `(0,0), (0,1), ..., (0,d-1), (1,1), ..., (1,d-1), ..., (d-1,d-1)`.
//! Every module that converts between a dependency matrix and its parameter
//! vector goes through this type.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpperIndex {
    dim: usize,
    pairs: Vec<(usize, usize)>,
}

impl UpperIndex {
    pub fn new(dim: usize) -> Self {
        let mut pairs = Vec::with_capacity(param_count(dim));
        for i in 0..dim {
            for j in i..dim {
                pairs.push((i, j));
            }
        }
        Self { dim, pairs }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of free parameters, `d (d + 1) / 2`.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Flat position of `(i, j)`; the arguments may be given in either order.
    pub fn flat(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        debug_assert!(j < self.dim);
        row_offset(self.dim, i) + (j - i)
    }

    pub fn pair(&self, p: usize) -> (usize, usize) {
        self.pairs[p]
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Flat positions of the diagonal entries.
    pub fn diagonal(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.dim).map(move |i| self.flat(i, i))
    }
}

pub fn param_count(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

fn row_offset(dim: usize, i: usize) -> usize {
    i * dim - i * i.saturating_sub(1) / 2
}
