use super::KernelError;

/// Row-major signed 8-bit matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Int8Matrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
}

impl Int8Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(KernelError::Length {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> i8) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| i8::from(r == c))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Columns `cols` in the given order, as a new `[rows, cols.len()]` matrix.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        Self::from_fn(self.rows, cols.len(), |r, c| self.get(r, cols[c]))
    }
}

/// Row-major signed 32-bit accumulator matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Int32Matrix {
    rows: usize,
    cols: usize,
    data: Vec<i32>,
}

impl Int32Matrix {
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<i32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }
}

impl From<&Int8Matrix> for Int32Matrix {
    fn from(m: &Int8Matrix) -> Self {
        Self::from_raw(m.rows, m.cols, m.data.iter().map(|&v| v as i32).collect())
    }
}
