use crate::error::Result;
use crate::tensor::Tensor;

pub const PEAK: f64 = 255.0;

pub fn mse(reference: &Tensor, estimate: &Tensor) -> Result<f64> {
    Ok(reference.sub(estimate)?.map(|d| d * d).mean())
}

/// `10 log10(255^2 / MSE)` in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(reference: &Tensor, estimate: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(reference, estimate)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * libm::log10(PEAK * PEAK / mse)
    }
}

/// Clips to `[0, 255]` and rounds half away from zero, as when writing 8-bit output.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| libm::round(v.clamp(0.0, PEAK)))
}
