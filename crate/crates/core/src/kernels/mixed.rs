use super::{gemm_i4_packed_with, gemm_i8_with, CostCounter, Int32Matrix, Int8Matrix, KernelError, PackedInt4Matrix};
use crate::gradtape::Tensor;
use crate::par::Exec;

/// Quantized weights as the mixed multiplier consumes them.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightOperand {
    /// 8-bit weights: both token groups run on the byte-level kernel.
    Int8(Int8Matrix),
    /// 4-bit weights: 8-bit tokens run on the byte-level kernel with the
    /// weights sign-extended, 4-bit tokens on the packed kernel.
    Int4(PackedInt4Matrix),
}

impl WeightOperand {
    pub fn rows(&self) -> usize {
        match self {
            WeightOperand::Int8(w) => w.rows(),
            WeightOperand::Int4(w) => w.logical_rows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            WeightOperand::Int8(w) => w.cols(),
            WeightOperand::Int4(w) => w.cols(),
        }
    }
}

/// Activation columns (tokens) split by bit width, with their original positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationGroups {
    hi: Int8Matrix,
    lo: Int8Matrix,
    hi_index: Vec<usize>,
    lo_index: Vec<usize>,
}

impl ActivationGroups {
    /// `hi` is `[K, n_hi]` holding 8-bit tokens, `lo` is `[K, n_lo]` holding
    /// 4-bit tokens; the index lists must together be a permutation of `0..N`.
    pub fn new(
        hi: Int8Matrix,
        lo: Int8Matrix,
        hi_index: Vec<usize>,
        lo_index: Vec<usize>,
    ) -> Result<Self, KernelError> {
        if hi.cols() != hi_index.len() || lo.cols() != lo_index.len() {
            return Err(KernelError::GroupWidth {
                hi: hi.cols(),
                lo: lo.cols(),
                n: hi_index.len() + lo_index.len(),
            });
        }
        if hi.rows() != lo.rows() && hi.cols() > 0 && lo.cols() > 0 {
            return Err(KernelError::Shape {
                lhs: (hi.rows(), hi.cols()),
                rhs: (lo.rows(), lo.cols()),
            });
        }
        let n = hi_index.len() + lo_index.len();
        let mut seen = vec![false; n];
        for &i in hi_index.iter().chain(&lo_index) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(KernelError::GroupWidth {
                    hi: hi.cols(),
                    lo: lo.cols(),
                    n,
                });
            }
        }
        if let Some(&v) = lo.data().iter().find(|&&v| !(-8..=7).contains(&v)) {
            return Err(KernelError::Int4Activation { value: v });
        }
        Ok(Self {
            hi,
            lo,
            hi_index,
            lo_index,
        })
    }

    pub fn tokens(&self) -> usize {
        self.hi_index.len() + self.lo_index.len()
    }

    pub fn hi(&self) -> &Int8Matrix {
        &self.hi
    }

    pub fn lo(&self) -> &Int8Matrix {
        &self.lo
    }

    pub fn hi_index(&self) -> &[usize] {
        &self.hi_index
    }

    pub fn lo_index(&self) -> &[usize] {
        &self.lo_index
    }

    fn inner(&self) -> usize {
        if self.hi.cols() > 0 {
            self.hi.rows()
        } else {
            self.lo.rows()
        }
    }
}

/// Scales applied after integer accumulation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixedScales {
    pub weight: f64,
    pub hi: f64,
    pub lo: f64,
}

/// Mixed-precision MAC over both token groups, dequantized per group and
/// scattered back to the caller's token order. Returns `[M, N]` floats.
pub fn gemm_mixed(
    w: &WeightOperand,
    x: &ActivationGroups,
    scales: MixedScales,
    cost: &mut CostCounter,
) -> Result<Tensor, KernelError> {
    gemm_mixed_with(w, x, scales, cost, Exec::default())
}

pub fn gemm_mixed_with(
    w: &WeightOperand,
    x: &ActivationGroups,
    scales: MixedScales,
    cost: &mut CostCounter,
    exec: Exec,
) -> Result<Tensor, KernelError> {
    let (m, k) = (w.rows(), w.cols());
    let n = x.tokens();
    if n > 0 && x.inner() != k {
        return Err(KernelError::Shape {
            lhs: (m, k),
            rhs: (x.inner(), n),
        });
    }
    let mut out = vec![0.0; m * n];
    let mut scatter = |acc: &Int32Matrix, index: &[usize], scale: f64| {
        for r in 0..m {
            for (j, &col) in index.iter().enumerate() {
                out[r * n + col] = acc.get(r, j) as f64 * scale;
            }
        }
    };
    if !x.hi_index.is_empty() {
        let acc = match w {
            WeightOperand::Int8(w8) => gemm_i8_with(w8, &x.hi, cost, exec)?,
            WeightOperand::Int4(w4) => gemm_i8_with(&w4.unpack(), &x.hi, cost, exec)?,
        };
        scatter(&acc, &x.hi_index, scales.weight * scales.hi);
    }
    if !x.lo_index.is_empty() {
        let acc = match w {
            WeightOperand::Int8(w8) => gemm_i8_with(w8, &x.lo, cost, exec)?,
            WeightOperand::Int4(w4) => gemm_i4_packed_with(w4, &x.lo, cost, exec)?,
        };
        scatter(&acc, &x.lo_index, scales.weight * scales.lo);
    }
    Ok(Tensor::from_raw(vec![m, n], out))
}
