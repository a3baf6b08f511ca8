use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// I.i.d. samples from `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::Contract(format!("glorot fans must be positive, got {fan_in}/{fan_out}")));
    }
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
    Ok(t)
}
