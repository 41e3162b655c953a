use crate::error::{invalid, shape_err, Result};
use crate::tensor::Tensor;

/// `2|A∩B| / (|A|+|B|)` on binary masks; two empty masks score 1.
pub fn dice(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        if (x != 0.0 && x != 1.0) || (y != 0.0 && y != 1.0) {
            return Err(invalid(format!("dice needs binary masks, found {x} / {y}")));
        }
        inter += (x == 1.0 && y == 1.0) as usize;
        total += (x == 1.0) as usize + (y == 1.0) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}
