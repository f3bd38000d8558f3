use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;

/// Deterministic random source addressed by `(seed, stream)`.
///
/// Streams are independent substreams of one ChaCha key, so replicate `r`
/// can draw from stream `r` on any thread and get the same numbers.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on another stream of the same seed.
    pub fn substream(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on `[-1/2, 1/2)`.
    pub fn centered(&mut self) -> f64 {
        self.uniform() - 0.5
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Tensor of i.i.d. draws from `[-1/2, 1/2)`.
    pub fn centered_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.centered()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn normal(&mut self, shape: &[usize], mean: f64, std: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| mean + std * self.standard_normal()).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }
}
