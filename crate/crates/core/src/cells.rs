//! Dense per-cell storage over the (group, area) cross-classification.
//!
//! Cells are addressed as `(j, d)` with `j` a group index in `0..j_count`
//! and `d` an area index in `0..d_count`. Storage is group-major so that
//! all areas of one group are contiguous.

#[derive(Debug, Clone, PartialEq)]
pub struct CellGrid<T> {
    j_count: usize,
    d_count: usize,
    data: Vec<T>,
}

impl<T: Clone> CellGrid<T> {
    pub fn filled(j_count: usize, d_count: usize, value: T) -> Self {
        CellGrid {
            j_count,
            d_count,
            data: vec![value; j_count * d_count],
        }
    }
}

impl<T> CellGrid<T> {
    pub fn from_fn(j_count: usize, d_count: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(j_count * d_count);
        for j in 0..j_count {
            for d in 0..d_count {
                data.push(f(j, d));
            }
        }
        CellGrid {
            j_count,
            d_count,
            data,
        }
    }

    pub fn from_vec(j_count: usize, d_count: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), j_count * d_count, "cell grid size mismatch");
        CellGrid {
            j_count,
            d_count,
            data,
        }
    }

    #[inline]
    pub fn j_count(&self) -> usize {
        self.j_count
    }

    #[inline]
    pub fn d_count(&self) -> usize {
        self.d_count
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn flat_index(&self, j: usize, d: usize) -> usize {
        debug_assert!(j < self.j_count && d < self.d_count);
        j * self.d_count + d
    }

    #[inline]
    pub fn get(&self, j: usize, d: usize) -> &T {
        &self.data[self.flat_index(j, d)]
    }

    #[inline]
    pub fn get_mut(&mut self, j: usize, d: usize) -> &mut T {
        let idx = self.flat_index(j, d);
        &mut self.data[idx]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Iterate cells as `(j, d, &value)` in group-major order.
    pub fn iter_cells(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let d_count = self.d_count;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (i / d_count, i % d_count, v))
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> CellGrid<U> {
        CellGrid {
            j_count: self.j_count,
            d_count: self.d_count,
            data: self.data.iter().map(f).collect(),
        }
    }
}
