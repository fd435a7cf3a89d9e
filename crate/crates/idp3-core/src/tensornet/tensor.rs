//! Dense f64 tensor with explicit shape. Heavy products go through ndarray's
//! gemm; everything else is plain slice arithmetic.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;

/// Row-major dense tensor. All values are f64 end to end; there is no dtype
/// machinery at this scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(data.len(), n, "data length {} does not match shape {:?}", data.len(), shape);
        Self { shape: shape.to_vec(), data }
    }

    /// Standard normal entries from the caller's generator.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(|_| rng.sample(StandardNormal)).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Same data, new shape; element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {:?} -> {:?}", self.shape, shape);
        Self { shape: shape.to_vec(), data: self.data.clone() }
    }

    pub fn scaled(mut self, c: f64) -> Self {
        for v in &mut self.data {
            *v *= c;
        }
        self
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }
}

/// out = a[m,k] . b[k,n], overwriting out.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    let av = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((k, n), b).expect("rhs shape");
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("out shape");
    general_mat_mul(1.0, &av, &bv, 0.0, &mut cv);
}

/// out = a^T[m,k] . b[k,n] where a is stored [k,m]; accumulates when `acc`.
pub(crate) fn matmul_tn(a: &[f64], k: usize, m: usize, b: &[f64], n: usize, out: &mut [f64], acc: bool) {
    let av = ArrayView2::from_shape((k, m), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((k, n), b).expect("rhs shape");
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("out shape");
    general_mat_mul(1.0, &av.t(), &bv, if acc { 1.0 } else { 0.0 }, &mut cv);
}

/// out = a[m,k] . b^T[k,n] where b is stored [n,k]; accumulates when `acc`.
pub(crate) fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64], acc: bool) {
    let av = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let bv = ArrayView2::from_shape((n, k), b).expect("rhs shape");
    let mut cv = ArrayViewMut2::from_shape((m, n), out).expect("out shape");
    general_mat_mul(1.0, &av, &bv.t(), if acc { 1.0 } else { 0.0 }, &mut cv);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_hand_case() {
        // [[1,2],[3,4]] . [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(&a, 2, 2, &b, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        // a stored [k=3, m=2]; want a^T[2,3] . b[3,2]
        let a = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // a^T = [[1,2,3],[4,5,6]]
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        matmul_tn(&a, 3, 2, &b, 2, &mut c, false);
        // [[1,2,3],[4,5,6]] . [[7,8],[9,10],[11,12]] = [[58,64],[139,154]]
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        // a[2,3] . b^T where b stored [2,3]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0]; // b^T = [[1,0],[0,1],[1,1]]
        let mut c = [0.0; 4];
        matmul_nt(&a, 2, 3, &b, 2, &mut c, false);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn accumulating_gemm_adds() {
        // Identity^T . (2*Identity) accumulated onto ones.
        let a = [1.0, 0.0, 0.0, 1.0];
        let b = [2.0, 0.0, 0.0, 2.0];
        let mut c = [1.0, 1.0, 1.0, 1.0];
        matmul_tn(&a, 2, 2, &b, 2, &mut c, true);
        assert_eq!(c, [3.0, 1.0, 1.0, 3.0]);
    }

    #[test]
    fn reshape_checks_count() {
        let t = Tensor::from_vec(&[2, 3], vec![0.0; 6]);
        assert_eq!(t.reshaped(&[3, 2]).shape(), &[3, 2]);
    }

    #[test]
    #[should_panic]
    fn reshape_wrong_count_panics() {
        Tensor::zeros(&[2, 3]).reshaped(&[4, 2]);
    }

    #[test]
    fn finite_detection() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.all_finite());
        t.data_mut()[1] = f64::NAN;
        assert!(!t.all_finite());
    }
}
