use rand::Rng;
use serde::Serialize;

use super::{
    gemm_i4_packed_with, gemm_i8_with, gemm_mixed_with, pack_int4, scalar_reference_gemm, ActivationGroups,
    CostCounter, Int32Matrix, Int8Matrix, MixedScales, WeightOperand,
};
use crate::par::Exec;
use crate::rng;

/// Largest dimension drawn by the randomized suite.
pub const MAX_DIM: usize = 64;

/// Deliberate defects for exercising the failure path of the suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Overwrite one packed unit of the first case after packing.
    CorruptPack,
}

/// One randomized case, reproducible from `(seed, index)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelCase {
    pub index: u64,
    pub w: Int8Matrix,
    pub x: Int8Matrix,
    /// Per-token 8-bit flag for the mixed path.
    pub hi_tokens: Vec<bool>,
}

impl KernelCase {
    /// Draws case `index` of the suite for `seed`. Every fourth case pins
    /// operands to the extremes `-8` and `-128`/`127`.
    pub fn generate(seed: u64, index: u64) -> Self {
        let mut r = rng::substream(seed, "verify-kernels", index);
        let m = r.random_range(1..=MAX_DIM);
        let k = r.random_range(1..=MAX_DIM);
        let n = r.random_range(1..=MAX_DIM);
        let extreme = index % 4 == 3;
        let w = Int8Matrix::from_fn(m, k, |_, _| if extreme { -8 } else { r.random_range(-8..=7) });
        let hi_tokens: Vec<bool> = (0..n).map(|_| r.random()).collect();
        let x = Int8Matrix::from_fn(k, n, |_, c| match (extreme, hi_tokens[c]) {
            (true, true) => *[-128, 127].get(r.random_range(0..2)).unwrap(),
            (true, false) => -8,
            (false, true) => r.random(),
            (false, false) => r.random_range(-8..=7),
        });
        Self { index, w, x, hi_tokens }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.w.rows(), self.w.cols(), self.x.cols())
    }
}

/// First disagreement found in a case.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mismatch {
    pub seed: u64,
    pub case: u64,
    pub kernel: &'static str,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub row: usize,
    pub col: usize,
    pub expected: i64,
    pub actual: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub cases: u64,
    pub mismatches: Vec<Mismatch>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn first_diff(expected: &Int32Matrix, actual: &Int32Matrix) -> Option<(usize, usize, i64, i64)> {
    let n = expected.cols();
    expected
        .data()
        .iter()
        .zip(actual.data())
        .position(|(a, b)| a != b)
        .map(|i| (i / n, i % n, expected.data()[i] as i64, actual.data()[i] as i64))
}

/// Checks one case: packed and byte-level kernels, in both execution modes,
/// and the mixed path against the scalar oracle.
pub fn check_case(seed: u64, case: &KernelCase, fault: Option<Fault>) -> Option<Mismatch> {
    let (m, k, n) = case.shape();
    let mismatch = |kernel, (row, col, expected, actual)| Mismatch {
        seed,
        case: case.index,
        kernel,
        m,
        k,
        n,
        row,
        col,
        expected,
        actual,
    };
    let reference = scalar_reference_gemm(&case.w, &case.x).expect("generated shapes conform");
    let mut packed = pack_int4(&case.w).expect("generated weights fit in 4 bits");
    if fault == Some(Fault::CorruptPack) {
        let u = packed.unit(0, 0);
        packed.corrupt_unit(0, u ^ 0x0001_0001);
    }
    for exec in [Exec::Sequential, Exec::Parallel] {
        let cost = &mut CostCounter::default();
        let y8 = gemm_i8_with(&case.w, &case.x, cost, exec).expect("byte-level kernel");
        if let Some(d) = first_diff(&reference, &y8) {
            return Some(mismatch("gemm_i8", d));
        }
        let y4 = gemm_i4_packed_with(&packed, &case.x, cost, exec).expect("packed kernel");
        if let Some(d) = first_diff(&reference, &y4) {
            return Some(mismatch("gemm_i4_packed", d));
        }
    }
    let hi: Vec<usize> = (0..n).filter(|&c| case.hi_tokens[c]).collect();
    let lo: Vec<usize> = (0..n).filter(|&c| !case.hi_tokens[c]).collect();
    let groups = ActivationGroups::new(case.x.select_cols(&hi), case.x.select_cols(&lo), hi, lo)
        .expect("generated groups are a valid split");
    let unit = MixedScales {
        weight: 1.0,
        hi: 1.0,
        lo: 1.0,
    };
    let y = gemm_mixed_with(&WeightOperand::Int4(packed), &groups, unit, &mut CostCounter::default(), Exec::default())
        .expect("mixed kernel");
    for r in 0..m {
        for c in 0..n {
            let (e, a) = (reference.get(r, c) as i64, y.at(r, c) as i64);
            if e as f64 != y.at(r, c) {
                return Some(mismatch("gemm_mixed", (r, c, e, a)));
            }
        }
    }
    None
}

/// Runs `cases` randomized cases for `seed`, collecting every failing case.
pub fn verify_kernels(seed: u64, cases: u64, fault: Option<Fault>) -> VerifyReport {
    let mismatches = crate::par::map_range(cases as usize, Exec::default(), |i| {
        let case = KernelCase::generate(seed, i as u64);
        let f = if i == 0 { fault } else { None };
        check_case(seed, &case, f)
    });
    VerifyReport {
        seed,
        cases,
        mismatches: mismatches.into_iter().flatten().collect(),
    }
}
