use super::{Int8Matrix, KernelError};

/// Bits between the low and high lane of a packed unit.
pub const LANE_SHIFT: u32 = 16;

/// Adjacent-row INT4 weight pairs, one 32-bit unit per (row pair, column).
///
/// A unit holds `hi * 2^16 + lo`, where `lo` is the weight of row `2i` and
/// `hi` the weight of row `2i + 1`. Keeping the signed composite (rather than
/// two independently masked lanes) is what makes `unit * a == hi*a*2^16 + lo*a`
/// hold for a shared activation `a`, so one multiply yields both products.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedInt4Matrix {
    logical_rows: usize,
    cols: usize,
    packed: Vec<i32>,
    pad_row: bool,
}

/// Splits a packed product or packed partial sum into `(lo, hi)`.
///
/// Exact whenever the low-lane value lies in `[-2^15, 2^15)`.
#[inline(always)]
pub fn split_lanes(p: i32) -> (i32, i32) {
    let lo = p as i16 as i32;
    let hi = (p - lo) >> LANE_SHIFT;
    (lo, hi)
}

#[inline(always)]
fn compose(lo: i8, hi: i8) -> i32 {
    ((hi as i32) << LANE_SHIFT) + lo as i32
}

/// Packs rows `(2i, 2i+1)` into shared units; odd row counts get a zero pad row.
pub fn pack_int4(w: &Int8Matrix) -> Result<PackedInt4Matrix, KernelError> {
    if let Some(idx) = w.data().iter().position(|&v| !(-8..=7).contains(&v)) {
        return Err(KernelError::Int4Range {
            row: idx / w.cols().max(1),
            col: idx % w.cols().max(1),
            value: w.data()[idx],
        });
    }
    let (rows, cols) = (w.rows(), w.cols());
    let pairs = rows.div_ceil(2);
    let mut packed = Vec::with_capacity(pairs * cols);
    for p in 0..pairs {
        for c in 0..cols {
            let lo = w.get(2 * p, c);
            let hi = if 2 * p + 1 < rows { w.get(2 * p + 1, c) } else { 0 };
            packed.push(compose(lo, hi));
        }
    }
    Ok(PackedInt4Matrix {
        logical_rows: rows,
        cols,
        packed,
        pad_row: rows % 2 == 1,
    })
}

impl PackedInt4Matrix {
    pub fn logical_rows(&self) -> usize {
        self.logical_rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_pairs(&self) -> usize {
        self.logical_rows.div_ceil(2)
    }

    pub fn pad_row(&self) -> bool {
        self.pad_row
    }

    pub fn units(&self) -> &[i32] {
        &self.packed
    }

    pub fn unit(&self, pair: usize, col: usize) -> i32 {
        self.packed[pair * self.cols + col]
    }

    /// Decoded `(lo, hi)` weights of one unit.
    pub fn lanes(&self, pair: usize, col: usize) -> (i8, i8) {
        let (lo, hi) = split_lanes(self.unit(pair, col));
        (lo as i8, hi as i8)
    }

    pub fn unpack(&self) -> Int8Matrix {
        Int8Matrix::from_fn(self.logical_rows, self.cols, |r, c| {
            let (lo, hi) = self.lanes(r / 2, c);
            if r % 2 == 0 {
                lo
            } else {
                hi
            }
        })
    }

    /// Overwrites one raw unit. Only for fault-injection in verification runs.
    pub fn corrupt_unit(&mut self, index: usize, value: i32) {
        self.packed[index] = value;
    }
}
