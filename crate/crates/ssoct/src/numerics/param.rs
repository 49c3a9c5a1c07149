//! Trainable parameter storage: values, gradients, and optimizer moments.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// One named block of trainable parameters together with its gradient
/// accumulator and the two Adam moment estimates. All four tensors share
/// one shape.
#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m1: Tensor,
    pub m2: Tensor,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        ParamBlock {
            name: name.into(),
            value,
            grad: Tensor::zeros(shape.clone()),
            m1: Tensor::zeros(shape.clone()),
            m2: Tensor::zeros(shape),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// An ordered set of parameter blocks. The order is fixed at construction
/// time and is the canonical iteration order for optimizer updates,
/// serialization, and gradient checks.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    blocks: Vec<ParamBlock>,
    /// Adam step counter; increments once per optimizer step.
    pub adam_t: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { blocks: Vec::new(), adam_t: 0 }
    }

    /// Registers a block and returns its index, which stays valid for the
    /// lifetime of the set.
    pub fn register(&mut self, block: ParamBlock) -> usize {
        self.blocks.push(block);
        self.blocks.len() - 1
    }

    /// Registers a zero-initialized block of the given shape.
    pub fn register_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        self.register(ParamBlock::new(name, Tensor::zeros(shape)))
    }

    /// Registers a block initialized uniformly in `±sqrt(6 / fan_in)`.
    pub fn register_uniform(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.register_uniform_bounded(name, shape, bound, rng)
    }

    /// Registers a block initialized uniformly in `±bound`.
    pub fn register_uniform_bounded(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.register(ParamBlock::new(name, Tensor::new(shape, data).expect("valid shape")))
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn block(&self, idx: usize) -> &ParamBlock {
        &self.blocks[idx]
    }

    pub fn block_mut(&mut self, idx: usize) -> &mut ParamBlock {
        &mut self.blocks[idx]
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Total number of scalar parameters across all blocks.
    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.blocks {
            b.grad.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn moments_match_value_shape() {
        let b = ParamBlock::new("w", Tensor::zeros(vec![2, 3]));
        assert_eq!(b.grad.shape(), b.value.shape());
        assert_eq!(b.m1.shape(), b.value.shape());
        assert_eq!(b.m2.shape(), b.value.shape());
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = ParamSet::new();
        let idx = set.register_uniform("w", vec![8, 8], 16, &mut rng);
        let bound = (6.0 / 16.0_f64).sqrt();
        assert!(set.block(idx).value.data().iter().all(|v| v.abs() < bound));
        // Not all zero.
        assert!(set.block(idx).value.data().iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn zero_grads_clears_all_blocks() {
        let mut set = ParamSet::new();
        let idx = set.register_zeros("w", vec![3]);
        set.block_mut(idx).grad.data_mut()[1] = 5.0;
        set.zero_grads();
        assert_eq!(set.block(idx).grad.data(), &[0.0, 0.0, 0.0]);
    }
}
