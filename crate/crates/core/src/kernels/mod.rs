//! Integer GeMM kernels: byte-level INT8, packed INT4, mixed per-token
//! dispatch, a scalar oracle, and operation tallies.

mod gemm;
mod matrix;
mod mixed;
mod pack;
mod reference;
pub mod verify;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gemm::{gemm_i4_packed, gemm_i4_packed_with, gemm_i8, gemm_i8_with, MAX_K_I4, MAX_K_I8, PACKED_SPLIT_BLOCK};
pub use matrix::{Int32Matrix, Int8Matrix};
pub use mixed::{gemm_mixed, gemm_mixed_with, ActivationGroups, MixedScales, WeightOperand};
pub use pack::{pack_int4, split_lanes, PackedInt4Matrix, LANE_SHIFT};
pub use reference::scalar_reference_gemm;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("matrix {rows}x{cols} needs {} values, got {len}", rows * cols)]
    Length { rows: usize, cols: usize, len: usize },
    #[error("shape mismatch: [{}x{}] x [{}x{}]", lhs.0, lhs.1, rhs.0, rhs.1)]
    Shape { lhs: (usize, usize), rhs: (usize, usize) },
    #[error("inner dimension {k} exceeds the 32-bit accumulation bound {max}")]
    AccumulationBound { k: usize, max: usize },
    #[error("weight {value} at ({row}, {col}) does not fit in 4 bits")]
    Int4Range { row: usize, col: usize, value: i8 },
    #[error("4-bit token group holds {value}, outside [-8, 7]")]
    Int4Activation { value: i8 },
    #[error("token groups of width {hi} + {lo} do not form a permutation of {n} tokens")]
    GroupWidth { hi: usize, lo: usize, n: usize },
    #[error("reference product at ({row}, {col}) overflows 32 bits")]
    Overflow { row: usize, col: usize },
}

/// Multiply and add tallies for kernel calls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCounter {
    pub mul_count: u64,
    pub add_count: u64,
}

impl CostCounter {
    pub fn absorb(&mut self, other: CostCounter) {
        self.mul_count += other.mul_count;
        self.add_count += other.add_count;
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}
