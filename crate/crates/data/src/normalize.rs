//! Image normalization: divide the whole tensor by its L2 norm, guarding the
//! all-zero image with ε = 1e-8.

use hvqa_core::kernels::dot;
use hvqa_core::scalar::Scalar;
use hvqa_core::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-8;

pub fn normalize_image<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let norm = dot(image.data(), image.data()).sqrt();
    let floor = T::from_f64(NORM_EPS);
    let denom = if norm > floor { norm } else { floor };
    image.map(|v| v / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(t: &Tensor<f64>) -> f64 {
        t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn unit_norm_for_nonzero() {
        let t = Tensor::from_f64(vec![2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap();
        let n = normalize_image(&t);
        assert!((norm(&n) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_image_stays_zero() {
        let t = Tensor::<f64>::zeros(vec![4, 4, 3]);
        let n = normalize_image(&t);
        assert!(n.data().iter().all(|&v| v == 0.0 && !v.is_nan()));
    }

    #[test]
    fn scale_invariant() {
        let t = Tensor::from_f64(vec![4], &[0.3, -1.0, 2.0, 0.7]).unwrap();
        let doubled = t.map(|v: f64| v * 2.0);
        let a = normalize_image(&t);
        let b = normalize_image(&doubled);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
