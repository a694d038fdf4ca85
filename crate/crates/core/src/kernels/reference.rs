use super::{Int32Matrix, Int8Matrix, KernelError};

/// Triple-loop integer product in 64-bit, narrowed to 32-bit at the end.
/// Deliberately naive: this is the oracle the optimized kernels answer to.
pub fn scalar_reference_gemm(w: &Int8Matrix, x: &Int8Matrix) -> Result<Int32Matrix, KernelError> {
    let (m, k, n) = (w.rows(), w.cols(), x.cols());
    if x.rows() != k {
        return Err(KernelError::Shape {
            lhs: (m, k),
            rhs: (x.rows(), n),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc: i64 = 0;
            for p in 0..k {
                acc += w.get(i, p) as i64 * x.get(p, j) as i64;
            }
            out.push(i32::try_from(acc).map_err(|_| KernelError::Overflow { row: i, col: j })?);
        }
    }
    Ok(Int32Matrix::from_raw(m, n, out))
}
