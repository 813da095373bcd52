use nalgebra::DMatrix;

use super::{Result, Rng, Tensor, TensorError};

/// I.i.d. zero-mean Gaussian draws with standard deviation `std`.
pub fn gaussian_init(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor> {
    if !std.is_finite() || std <= 0.0 {
        return Err(TensorError::Invalid(format!(
            "gaussian std must be positive, got {std}"
        )));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.normal()).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Orthogonal matrix from the QR decomposition of a Gaussian draw, with the
/// columns of Q sign-corrected so that diag(R) is positive. Tall or square
/// outputs have orthonormal columns; wide outputs have orthonormal rows.
pub fn orthogonal_init(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(TensorError::Invalid(format!(
            "orthogonal init needs positive dims, got {rows}x{cols}"
        )));
    }
    let (m, n) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let draws: Vec<f64> = (0..m * n).map(|_| rng.normal()).collect();
    let a = DMatrix::from_row_slice(m, n, &draws);
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    Tensor::new(vec![rows, cols], out)
}
