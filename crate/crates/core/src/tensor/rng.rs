use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Element, Shape, Tensor};

/// Seedable, platform-independent random stream (ChaCha8, counter based).
#[derive(Clone, Debug)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent stream derived from this seed and a label, so that adding
    /// a parameter does not shift the values of every other one.
    pub fn fork(seed: u64, label: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Rng::new(seed ^ h.rotate_left(17))
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    /// Normal(0, std) resampled until it falls inside `±bound_sigmas·std`.
    pub fn trunc_normal(&mut self, std: f64, bound_sigmas: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= bound_sigmas {
                return z * std;
            }
        }
    }

    pub fn trunc_normal_tensor<T: Element>(&mut self, shape: Shape, std: f64) -> Tensor<T> {
        let data = (0..shape.numel()).map(|_| T::from_f64(self.trunc_normal(std, 2.0))).collect();
        Tensor::from_raw(shape, data)
    }

    pub fn shuffle<V>(&mut self, items: &mut [V]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
