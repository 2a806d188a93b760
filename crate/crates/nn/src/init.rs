use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Element, Tensor};

/// Orthogonal initialization. Trailing axes are flattened so the tensor is
/// viewed as `shape[0] x prod(shape[1..])`; rows are orthonormal when there
/// are no more rows than columns, columns otherwise. The result is scaled by
/// `gain`.
pub fn orthogonal_init<T: Element, R: Rng + ?Sized>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor<T> {
    let rows = shape.first().copied().unwrap_or(1);
    let cols: usize = shape.iter().skip(1).product();
    let (count, dim) = if rows <= cols { (rows, cols) } else { (cols, rows) };

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // modified Gram-Schmidt, applied twice for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }

    let mut data = vec![T::zero(); rows * cols];
    for (i, b) in basis.iter().enumerate() {
        for (j, x) in b.iter().enumerate() {
            let idx = if rows <= cols { i * cols + j } else { j * cols + i };
            data[idx] = T::of(gain * x);
        }
    }
    Tensor::from_vec(shape, data).expect("shape product")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Gram matrix of the rows of a `rows x cols` matrix.
    fn gram(t: &Tensor<f64>, rows: usize, cols: usize) -> Vec<f64> {
        let d = t.data();
        let mut g = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                g[i * rows + j] = (0..cols).map(|k| d[i * cols + k] * d[j * cols + k]).sum();
            }
        }
        g
    }

    fn assert_scaled_identity(g: &[f64], n: usize, scale: f64) {
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { scale } else { 0.0 };
                assert!((g[i * n + j] - want).abs() < 1e-5, "G[{i},{j}] = {}", g[i * n + j]);
            }
        }
    }

    #[test]
    fn square_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = orthogonal_init::<f64, _>(&[4, 4], 1.0, &mut rng);
        assert_scaled_identity(&gram(&q, 4, 4), 4, 1.0);
    }

    #[test]
    fn gain_scales_gram_by_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = orthogonal_init::<f64, _>(&[4, 4], 2.0, &mut rng);
        assert_scaled_identity(&gram(&q, 4, 4), 4, 4.0);
    }

    #[test]
    fn wide_matrix_has_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = orthogonal_init::<f64, _>(&[3, 7], 1.0, &mut rng);
        assert_scaled_identity(&gram(&q, 3, 7), 3, 1.0);
    }

    #[test]
    fn tall_matrix_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = orthogonal_init::<f64, _>(&[6, 2], 1.0, &mut rng);
        // transpose, then rows of the transpose are the columns
        let d = q.data();
        let t: Vec<f64> = (0..2).flat_map(|c| (0..6).map(move |r| d[r * 2 + c])).collect();
        let qt = Tensor::from_vec(&[2, 6], t).unwrap();
        assert_scaled_identity(&gram(&qt, 2, 6), 2, 1.0);
    }

    #[test]
    fn conv_kernel_flattens_trailing_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = orthogonal_init::<f64, _>(&[8, 3, 3, 3], 1.0, &mut rng);
        assert_eq!(q.shape(), &[8, 3, 3, 3]);
        assert_scaled_identity(&gram(&q, 8, 27), 8, 1.0);
    }
}
