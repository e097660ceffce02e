//! Fixtures shared by the benchmarks.

use patchcert::{InputDims, Model, Result, Tensor};

/// Untrained default-width CNN; timing does not depend on the weights.
pub fn model(side: usize) -> Result<Model> {
    Model::plain_cnn(InputDims::new(1, side, side), 4, (12, 24), 7)
}

/// A smooth deterministic image in `[0, 1]`.
pub fn image(side: usize) -> Tensor {
    let data = (0..side * side)
        .map(|i| {
            let (r, c) = ((i / side) as f32, (i % side) as f32);
            0.5 + 0.5 * (0.37 * r).sin() * (0.23 * c).cos()
        })
        .collect();
    Tensor::new(vec![1, side, side], data).expect("shape matches data")
}
