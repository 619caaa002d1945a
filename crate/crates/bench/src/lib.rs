//! Shared inputs for the benchmarks.

use fmatune_core::data::synth_dataset;
use fmatune_core::{Image, RandomStream, Tensor};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = RandomStream::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// `n` procedural 32×32 images.
pub fn images(n: usize) -> Vec<Image> {
    let ds = synth_dataset(n.div_ceil(10), 10, 7).expect("synthetic data");
    ds.images()[..n].to_vec()
}
