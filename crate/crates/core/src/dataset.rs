//! Class-conditional synthetic images in `[-1, 1]`.
//!
//! | class | pattern |
//! |---|---|
//! | 0 | axis-aligned Gaussian blob near a fixed anchor |
//! | 1 | vertical stripes |
//! | 2 | checkerboard |
//! | 3 | radial gradient |
//!
//! Each sample jitters its pattern parameters and colour from its own RNG
//! stream, so sample `k` does not depend on how many others are drawn.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const PATTERN_CLASSES: usize = 4;

/// One image of `class` with shape `[channels, height, width]`.
pub fn synth_image(class: usize, channels: usize, height: usize, width: usize, rng: &mut RngStream) -> Result<Tensor> {
    if class >= PATTERN_CLASSES {
        return Err(Error::input(format!("class {class} has no pattern (max {})", PATTERN_CLASSES - 1)));
    }
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::dim("image dims must be positive"));
    }
    let (hf, wf) = (height as f64, width as f64);
    // Relative coordinates keep patterns comparable across resolutions.
    let pattern: Box<dyn Fn(f64, f64) -> f64> = match class {
        0 => {
            let cy = 0.3 + 0.1 * (rng.uniform() - 0.5);
            let cx = 0.3 + 0.1 * (rng.uniform() - 0.5);
            let sy = 0.12 + 0.06 * rng.uniform();
            let sx = 0.12 + 0.06 * rng.uniform();
            Box::new(move |y, x| {
                let g = (-((y - cy) / sy).powi(2) / 2.0 - ((x - cx) / sx).powi(2) / 2.0).exp();
                2.0 * g - 1.0
            })
        }
        1 => {
            let period = 0.2 + 0.15 * rng.uniform();
            let phase = rng.uniform() * 2.0 * PI;
            Box::new(move |_, x| (2.0 * PI * x / period + phase).sin())
        }
        2 => {
            let cell = 0.2 + 0.15 * rng.uniform();
            let (oy, ox) = (rng.uniform() * cell, rng.uniform() * cell);
            Box::new(move |y, x| {
                let parity = (((y + oy) / cell).floor() + ((x + ox) / cell).floor()) as i64;
                if parity.rem_euclid(2) == 0 { 0.8 } else { -0.8 }
            })
        }
        _ => {
            let cy = 0.5 + 0.2 * (rng.uniform() - 0.5);
            let cx = 0.5 + 0.2 * (rng.uniform() - 0.5);
            Box::new(move |y, x| {
                let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() / 0.75;
                1.0 - 2.0 * r.min(1.0)
            })
        }
    };
    let colour: Vec<f64> = (0..channels).map(|_| 0.6 + 0.4 * rng.uniform()).collect();
    let mut data = vec![0.0; channels * height * width];
    for y in 0..height {
        for x in 0..width {
            let v = pattern((y as f64 + 0.5) / hf, (x as f64 + 0.5) / wf);
            for (c, k) in colour.iter().enumerate() {
                data[(c * height + y) * width + x] = (k * v).clamp(-1.0, 1.0);
            }
        }
    }
    Tensor::new(vec![channels, height, width], data)
}

/// `n_per_class` images per class, ordered class by class. Sample `k` uses
/// stream `k` of `seed`.
pub fn generate(
    classes: usize,
    n_per_class: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<(Tensor, usize)>> {
    if classes == 0 || classes > PATTERN_CLASSES {
        return Err(Error::config(format!("classes must be in 1..={PATTERN_CLASSES}, got {classes}")));
    }
    let mut out = Vec::with_capacity(classes * n_per_class);
    for class in 0..classes {
        for i in 0..n_per_class {
            let mut rng = RngStream::new(seed, (class * n_per_class + i) as u64);
            out.push((synth_image(class, channels, height, width, &mut rng)?, class));
        }
    }
    Ok(out)
}
