use super::{split_lanes, CostCounter, Int32Matrix, Int8Matrix, KernelError, PackedInt4Matrix};
use crate::par::{self, Exec};

/// Packed products accumulated per lane before an exact split. With
/// `|w| <= 8` and `|a| <= 128`, 31 low-lane terms stay within `[-2^15, 2^15)`
/// and the full packed sum stays within `i32`.
pub const PACKED_SPLIT_BLOCK: usize = 31;

/// Largest inner dimension for which 32-bit accumulation of 8-bit by 8-bit
/// products cannot overflow: `2^31 / (2^7 * 2^7)`.
pub const MAX_K_I8: usize = (1 << 31) / (128 * 128);

/// Same bound for 4-bit weights by 8-bit activations: `2^31 / (2^3 * 2^7)`.
pub const MAX_K_I4: usize = (1 << 31) / (8 * 128);

/// Output rows handed to one worker.
const ROW_BLOCK: usize = 8;

/// Byte-level GeMM `w[M,K] x x[K,N] -> [M,N]` with 32-bit accumulation.
pub fn gemm_i8(w: &Int8Matrix, x: &Int8Matrix, cost: &mut CostCounter) -> Result<Int32Matrix, KernelError> {
    gemm_i8_with(w, x, cost, Exec::default())
}

pub fn gemm_i8_with(
    w: &Int8Matrix,
    x: &Int8Matrix,
    cost: &mut CostCounter,
    exec: Exec,
) -> Result<Int32Matrix, KernelError> {
    let (m, k, n) = (w.rows(), w.cols(), x.cols());
    if x.rows() != k {
        return Err(KernelError::Shape {
            lhs: (m, k),
            rhs: (x.rows(), n),
        });
    }
    if k > MAX_K_I8 {
        return Err(KernelError::AccumulationBound { k, max: MAX_K_I8 });
    }
    let mut out = vec![0i32; m * n];
    if n == 0 || m == 0 {
        return Ok(Int32Matrix::from_raw(m, n, out));
    }
    let blocks = m.div_ceil(ROW_BLOCK);
    let mut tallies = vec![CostCounter::default(); blocks];
    let xd = x.data();
    {
        let mut work: Vec<(&mut [i32], &mut CostCounter)> =
            out.chunks_mut(ROW_BLOCK * n).zip(tallies.iter_mut()).collect();
        par::for_each_chunk_mut(&mut work, 1, exec, |b, slot| {
            let (rows_out, tally) = &mut slot[0];
            for (local, orow) in rows_out.chunks_mut(n).enumerate() {
                let wrow = w.row(b * ROW_BLOCK + local);
                for (kk, &wv) in wrow.iter().enumerate() {
                    let wv = wv as i32;
                    let xrow = &xd[kk * n..(kk + 1) * n];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += wv * xv as i32;
                    }
                    tally.mul_count += n as u64;
                    tally.add_count += n as u64;
                }
            }
        });
    }
    for t in &tallies {
        cost.absorb(*t);
    }
    Ok(Int32Matrix::from_raw(m, n, out))
}

/// Packed INT4 GeMM: one multiply per (row pair, k, n) produces both rows'
/// products, which are accumulated jointly and split exactly every
/// [`PACKED_SPLIT_BLOCK`] steps of `k`.
pub fn gemm_i4_packed(
    wp: &PackedInt4Matrix,
    x: &Int8Matrix,
    cost: &mut CostCounter,
) -> Result<Int32Matrix, KernelError> {
    gemm_i4_packed_with(wp, x, cost, Exec::default())
}

pub fn gemm_i4_packed_with(
    wp: &PackedInt4Matrix,
    x: &Int8Matrix,
    cost: &mut CostCounter,
    exec: Exec,
) -> Result<Int32Matrix, KernelError> {
    let (m, k, n) = (wp.logical_rows(), wp.cols(), x.cols());
    if x.rows() != k {
        return Err(KernelError::Shape {
            lhs: (m, k),
            rhs: (x.rows(), n),
        });
    }
    if k > MAX_K_I4 {
        return Err(KernelError::AccumulationBound { k, max: MAX_K_I4 });
    }
    let pairs = wp.row_pairs();
    // Two output rows per pair; the pad row of an odd M is dropped at the end.
    let mut out = vec![0i32; 2 * pairs * n];
    if n == 0 || m == 0 {
        return Ok(Int32Matrix::from_raw(m, n, vec![0; m * n]));
    }
    let pair_block = ROW_BLOCK / 2;
    let blocks = pairs.div_ceil(pair_block);
    let mut tallies = vec![CostCounter::default(); blocks];
    let xd = x.data();
    {
        let mut work: Vec<(&mut [i32], &mut CostCounter)> = out
            .chunks_mut(pair_block * 2 * n)
            .zip(tallies.iter_mut())
            .collect();
        par::for_each_chunk_mut(&mut work, 1, exec, |b, slot| {
            let (rows_out, tally) = &mut slot[0];
            let mut acc = vec![0i32; n];
            for (local, pair_out) in rows_out.chunks_mut(2 * n).enumerate() {
                let p = b * pair_block + local;
                let (lo_out, hi_out) = pair_out.split_at_mut(n);
                for kb in (0..k).step_by(PACKED_SPLIT_BLOCK) {
                    acc.fill(0);
                    for kk in kb..(kb + PACKED_SPLIT_BLOCK).min(k) {
                        let unit = wp.unit(p, kk);
                        let xrow = &xd[kk * n..(kk + 1) * n];
                        for (a, &xv) in acc.iter_mut().zip(xrow) {
                            *a += unit * xv as i32;
                        }
                        tally.mul_count += n as u64;
                        tally.add_count += n as u64;
                    }
                    for ((&a, lo), hi) in acc.iter().zip(lo_out.iter_mut()).zip(hi_out.iter_mut()) {
                        let (l, h) = split_lanes(a);
                        *lo += l;
                        *hi += h;
                    }
                    tally.add_count += 2 * n as u64;
                }
            }
        });
    }
    for t in &tallies {
        cost.absorb(*t);
    }
    out.truncate(m * n);
    Ok(Int32Matrix::from_raw(m, n, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{pack_int4, scalar_reference_gemm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example() -> (Int8Matrix, Int8Matrix) {
        (
            Int8Matrix::new(2, 2, vec![1, -2, 3, 4]).unwrap(),
            Int8Matrix::new(2, 1, vec![5, -6]).unwrap(),
        )
    }

    #[test]
    fn hand_example_both_kernels() {
        let (w, x) = example();
        let mut c8 = CostCounter::default();
        let y = gemm_i8(&w, &x, &mut c8).unwrap();
        assert_eq!(y.data(), &[17, -9]);
        assert_eq!(c8.mul_count, 4);

        let mut c4 = CostCounter::default();
        let y4 = gemm_i4_packed(&pack_int4(&w).unwrap(), &x, &mut c4).unwrap();
        assert_eq!(y4.data(), &[17, -9]);
        assert_eq!(c4.mul_count, 2);
    }

    #[test]
    fn identity_widens() {
        let x = Int8Matrix::from_fn(5, 3, |r, c| (r as i8 - 2) * 40 + c as i8);
        let mut c = CostCounter::default();
        let y = gemm_i8(&Int8Matrix::identity(5), &x, &mut c).unwrap();
        assert_eq!(y, Int32Matrix::from(&x));
        let y4 = gemm_i4_packed(&pack_int4(&Int8Matrix::identity(5)).unwrap(), &x, &mut c).unwrap();
        assert_eq!(y4, Int32Matrix::from(&x));
    }

    #[test]
    fn zero_activations() {
        let w = Int8Matrix::from_fn(6, 4, |r, c| (r + c) as i8 % 8 - 4);
        let y = gemm_i4_packed(&pack_int4(&w).unwrap(), &Int8Matrix::zeros(4, 7), &mut CostCounter::default()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn shape_mismatch() {
        let (w, _) = example();
        let x = Int8Matrix::zeros(3, 1);
        assert!(matches!(gemm_i8(&w, &x, &mut CostCounter::default()), Err(KernelError::Shape { .. })));
        assert!(matches!(
            gemm_i4_packed(&pack_int4(&w).unwrap(), &x, &mut CostCounter::default()),
            Err(KernelError::Shape { .. })
        ));
    }

    #[test]
    fn long_reduction_at_extremes_is_exact() {
        // Worst-case magnitudes across many split blocks.
        let k = 4 * PACKED_SPLIT_BLOCK + 7;
        let w = Int8Matrix::from_fn(4, k, |r, _| if r % 2 == 0 { -8 } else { 7 });
        for a in [-128i8, 127] {
            let x = Int8Matrix::from_fn(k, 3, |_, _| a);
            let mut c = CostCounter::default();
            let packed = gemm_i4_packed(&pack_int4(&w).unwrap(), &x, &mut c).unwrap();
            assert_eq!(packed, scalar_reference_gemm(&w, &x).unwrap());
        }
    }

    #[test]
    fn cost_counts() {
        let w = Int8Matrix::from_fn(7, 40, |_, _| 1);
        let x = Int8Matrix::from_fn(40, 5, |_, _| 1);
        let mut c8 = CostCounter::default();
        gemm_i8(&w, &x, &mut c8).unwrap();
        assert_eq!((c8.mul_count, c8.add_count), (7 * 40 * 5, 7 * 40 * 5));
        let mut c4 = CostCounter::default();
        gemm_i4_packed(&pack_int4(&w).unwrap(), &x, &mut c4).unwrap();
        assert_eq!(c4.mul_count, 4 * 40 * 5);
        assert_eq!(c4.add_count, 4 * 40 * 5 + 2 * 4 * 2 * 5);
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Int8Matrix::from_fn(37, 50, |_, _| rng.random_range(-8..=7));
        let x = Int8Matrix::from_fn(50, 19, |_, _| rng.random());
        let wp = pack_int4(&w).unwrap();
        let (mut a, mut b) = (CostCounter::default(), CostCounter::default());
        let s = gemm_i8_with(&w, &x, &mut a, Exec::Sequential).unwrap();
        let p = gemm_i8_with(&w, &x, &mut b, Exec::Parallel).unwrap();
        assert_eq!(s, p);
        assert_eq!(a, b);
        let s4 = gemm_i4_packed_with(&wp, &x, &mut a, Exec::Sequential).unwrap();
        let p4 = gemm_i4_packed_with(&wp, &x, &mut b, Exec::Parallel).unwrap();
        assert_eq!(s4, p4);
        assert_eq!(s4, s);
        assert_eq!(a, b);
    }
}
