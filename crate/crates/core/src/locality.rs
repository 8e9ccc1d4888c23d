//! Patch embedding and the locality-enhancement convolution on the token grid.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use crate::ops::ConvSpec;

impl ConvSpec {
    /// The 3x3 filter used at inference and most training steps.
    pub const BASE: ConvSpec = ConvSpec::new(3, 1, 1, 1);

    /// Shape-preserving 3x3 filter with dilation and padding `rate`.
    pub const fn dilated(rate: usize) -> Self {
        ConvSpec::new(3, rate, 1, rate)
    }

    /// Odd kernel, unit stride, `p = d (k - 1) / 2`.
    pub fn check_shape_preserving(&self) -> Result<()> {
        if self.k.is_multiple_of(2) {
            return Err(Error::config(format!("kernel size {} must be odd", self.k)));
        }
        if self.s != 1 {
            return Err(Error::config(format!("stride {} must be 1", self.s)));
        }
        if self.d == 0 || self.p != self.d * (self.k - 1) / 2 {
            return Err(Error::config(format!(
                "padding {} does not preserve shape for kernel {} dilation {}",
                self.p, self.k, self.d
            )));
        }
        Ok(())
    }
}

/// Tokens laid out on the patch grid, `[h, w, dim]`.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub tokens: Tensor,
    pub image_size: (usize, usize),
    pub patch: usize,
}

impl PatchGrid {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch, self.image_size.1 / self.patch)
    }

    pub fn dim(&self) -> usize {
        self.tokens.last_dim()
    }

    /// Tokens as a `[h * w, dim]` raster-ordered matrix.
    pub fn as_rows(&self) -> Tensor {
        let (h, w) = self.grid();
        self.tokens.clone().reshape(&[h * w, self.dim()]).expect("grid size")
    }
}

fn grid_dims(height: usize, width: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) || height == 0 || width == 0 {
        return Err(Error::dim(format!(
            "image {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok((height / patch, width / patch))
}

/// Cuts `x: [C, H, W]` into raster-ordered patches. Row `i * w + j` holds
/// patch `(i, j)` flattened in `(py, px, c)` order, giving `[h * w, p * p * C]`.
pub fn patch_rows(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, hh, ww) = x.dims3()?;
    let (h, w) = grid_dims(hh, ww, patch)?;
    let pd = patch * patch * c;
    let mut out = vec![0.0; h * w * pd];
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * pd;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..c {
                        out[base + (py * patch + px) * c + ch] =
                            x.data()[(ch * hh + i * patch + py) * ww + j * patch + px];
                    }
                }
            }
        }
    }
    Tensor::new(vec![h * w, pd], out)
}

/// Inverse of [`patch_rows`] for an `height x width` image with `channels`.
pub fn unpatch_rows(
    rows: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Tensor> {
    let (h, w) = grid_dims(height, width, patch)?;
    let pd = patch * patch * channels;
    if rows.shape() != [h * w, pd] {
        return Err(Error::dim(format!(
            "patch rows {:?} inconsistent with {channels}x{height}x{width} at patch {patch}",
            rows.shape()
        )));
    }
    let mut out = vec![0.0; channels * height * width];
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * pd;
            for py in 0..patch {
                for px in 0..patch {
                    for ch in 0..channels {
                        out[(ch * height + i * patch + py) * width + j * patch + px] =
                            rows.data()[base + (py * patch + px) * channels + ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![channels, height, width], out)
}

/// Patchifies `x` and projects every patch with `proj_w: [p*p*C, dim]` and
/// `proj_b: [dim]`.
pub fn patchify(x: &Tensor, patch: usize, proj_w: &Tensor, proj_b: &Tensor) -> Result<PatchGrid> {
    let (_, hh, ww) = x.dims3()?;
    let rows = patch_rows(x, patch)?;
    let mut tokens = ops::matmul(&rows, proj_w)?;
    let dim = tokens.last_dim();
    if proj_b.shape() != [dim] {
        return Err(Error::dim("patch projection bias width"));
    }
    for row in tokens.data_mut().chunks_mut(dim) {
        for (t, b) in row.iter_mut().zip(proj_b.data()) {
            *t += b;
        }
    }
    let (h, w) = (hh / patch, ww / patch);
    Ok(PatchGrid {
        tokens: tokens.reshape(&[h, w, dim])?,
        image_size: (hh, ww),
        patch,
    })
}

/// Reassembles an image from a grid whose tokens hold `p * p * out_channels`
/// raw patch values.
pub fn unpatchify(grid: &PatchGrid, out_channels: usize) -> Result<Tensor> {
    let (h, w) = grid.grid();
    let (gh, gw, dim) = grid.tokens.dims3()?;
    if (gh, gw) != (h, w) || dim != grid.patch * grid.patch * out_channels {
        return Err(Error::dim(format!(
            "grid {:?} inconsistent with image {:?}, patch {} and {out_channels} channels",
            grid.tokens.shape(),
            grid.image_size,
            grid.patch
        )));
    }
    unpatch_rows(
        &grid.as_rows(),
        out_channels,
        grid.image_size.0,
        grid.image_size.1,
        grid.patch,
    )
}

/// Convolution over the token grid with hidden-dim channels, `w: [dim, dim, k, k]`.
pub fn locality_conv(grid: &PatchGrid, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Result<PatchGrid> {
    spec.check_shape_preserving()?;
    let (h, wd, dim) = grid.tokens.dims3()?;
    let chw = grid
        .tokens
        .clone()
        .reshape(&[h * wd, dim])?
        .transpose2d()?
        .reshape(&[dim, h, wd])?;
    let y = ops::conv2d(&chw, w, b, spec)?;
    let cout = y.shape()[0];
    let tokens = y
        .reshape(&[cout, h * wd])?
        .transpose2d()?
        .reshape(&[h, wd, cout])?;
    Ok(PatchGrid {
        tokens,
        image_size: grid.image_size,
        patch: grid.patch,
    })
}

/// Tape form of [`locality_conv`] on raster-ordered token rows `[h * w, dim]`.
pub fn locality_conv_on_tape(
    tape: &mut Tape<'_>,
    rows: Var,
    grid: (usize, usize),
    w: Var,
    b: Var,
    spec: ConvSpec,
) -> Result<Var> {
    spec.check_shape_preserving()?;
    let (n, dim) = tape.value(rows).dims2()?;
    if n != grid.0 * grid.1 {
        return Err(Error::dim("token count does not match grid"));
    }
    let t = tape.transpose(rows)?;
    let chw = tape.reshape(t, &[dim, grid.0, grid.1])?;
    let y = tape.conv2d(chw, w, b, spec)?;
    let cout = tape.value(y).shape()[0];
    let flat = tape.reshape(y, &[cout, n])?;
    tape.transpose(flat)
}

/// Random swap of the locality conv's dilation during training.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiDilationPolicy {
    probability: f64,
    rates: Vec<usize>,
}

impl Default for MultiDilationPolicy {
    fn default() -> Self {
        Self {
            probability: 0.1,
            rates: vec![2],
        }
    }
}

impl MultiDilationPolicy {
    pub fn new(probability: f64, rates: Vec<usize>) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::config(format!(
                "multi-dilation probability {probability} outside [0, 1]"
            )));
        }
        if rates.is_empty() || rates.iter().any(|&r| r < 2) {
            return Err(Error::config(format!(
                "dilation rates must be a nonempty set of values >= 2, got {rates:?}"
            )));
        }
        Ok(Self { probability, rates })
    }

    /// Policy that never dilates.
    pub fn disabled() -> Self {
        Self {
            probability: 0.0,
            rates: vec![2],
        }
    }

    pub fn probability(&self) -> f64 {
        self.probability
    }

    pub fn rates(&self) -> &[usize] {
        &self.rates
    }
}

/// With probability `1 - p` the base filter, otherwise a dilated filter with
/// a rate drawn uniformly from the policy. Every returned spec is applied
/// with the same weights.
pub fn sample_conv_spec(policy: &MultiDilationPolicy, rng: &mut RngStream) -> ConvSpec {
    if policy.probability > 0.0 && rng.bernoulli(policy.probability) {
        let r = policy.rates[rng.below(policy.rates.len())];
        ConvSpec::dilated(r)
    } else {
        ConvSpec::BASE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_kernel(dim: usize) -> Tensor {
        let mut w = Tensor::zeros(&[dim, dim, 3, 3]);
        for c in 0..dim {
            w.set(&[c, c, 1, 1], 1.0);
        }
        w
    }

    #[test]
    fn patchify_arithmetic() {
        let mut rng = RngStream::new(0, 0);
        let x = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);
        let rows = patch_rows(&x, 2).unwrap();
        assert_eq!(rows.shape(), &[64, 12]);
        let g = patchify(&x, 2, &Tensor::eye(12), &Tensor::zeros(&[12])).unwrap();
        assert_eq!(g.grid(), (8, 8));
        assert_eq!(g.tokens.shape(), &[8, 8, 12]);
    }

    #[test]
    fn unit_patch_identity_projection_copies_pixels() {
        let mut rng = RngStream::new(1, 0);
        let x = Tensor::randn(&[1, 4, 6], 1.0, &mut rng);
        let g = patchify(&x, 1, &Tensor::eye(1), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(g.tokens.data(), x.data());
    }

    #[test]
    fn roundtrip() {
        let mut rng = RngStream::new(2, 0);
        for (c, h, w, p) in [(3, 8, 8, 2), (2, 12, 4, 4), (1, 6, 9, 3), (3, 2, 2, 2)] {
            let x = Tensor::randn(&[c, h, w], 1.0, &mut rng);
            let d = p * p * c;
            let g = patchify(&x, p, &Tensor::eye(d), &Tensor::zeros(&[d])).unwrap();
            let back = unpatchify(&g, c).unwrap();
            assert!(back.bit_eq(&x));
        }
    }

    #[test]
    fn unpatchify_edge_cases() {
        let single = PatchGrid {
            tokens: Tensor::from_vec((0..12).map(f64::from).collect())
                .reshape(&[1, 1, 12])
                .unwrap(),
            image_size: (2, 2),
            patch: 2,
        };
        let img = unpatchify(&single, 3).unwrap();
        assert_eq!(img.shape(), &[3, 2, 2]);
        let zeros = PatchGrid {
            tokens: Tensor::zeros(&[2, 3, 4]),
            image_size: (4, 6),
            patch: 2,
        };
        assert!(unpatchify(&zeros, 1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(unpatchify(&zeros, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn indivisible_image_rejected() {
        let x = Tensor::zeros(&[1, 5, 4]);
        assert!(matches!(patch_rows(&x, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn identity_kernel_keeps_grid() {
        let mut rng = RngStream::new(3, 0);
        let grid = PatchGrid {
            tokens: Tensor::randn(&[3, 5, 4], 1.0, &mut rng),
            image_size: (6, 10),
            patch: 2,
        };
        for spec in [ConvSpec::BASE, ConvSpec::dilated(2)] {
            let out = locality_conv(&grid, &identity_kernel(4), &Tensor::zeros(&[4]), spec).unwrap();
            assert!(out.tokens.bit_eq(&grid.tokens));
        }
    }

    #[test]
    fn shape_preserved_for_all_small_grids() {
        let mut rng = RngStream::new(4, 0);
        let w = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
        let b = Tensor::zeros(&[2]);
        for h in 1..=16 {
            for wd in 1..=16 {
                let grid = PatchGrid {
                    tokens: Tensor::zeros(&[h, wd, 2]),
                    image_size: (h, wd),
                    patch: 1,
                };
                for spec in [ConvSpec::BASE, ConvSpec::dilated(2), ConvSpec::dilated(3)] {
                    let out = locality_conv(&grid, &w, &b, spec).unwrap();
                    assert_eq!(out.tokens.shape(), &[h, wd, 2]);
                }
            }
        }
    }

    #[test]
    fn constant_input_closed_form_and_border_leak() {
        // One channel, constant value v, kernel of ones, bias b: interior
        // outputs are 9v + b, edges see fewer taps because of zero padding.
        let (v, bias) = (0.5, 0.25);
        let grid = PatchGrid {
            tokens: Tensor::full(&[5, 5, 1], v),
            image_size: (5, 5),
            patch: 1,
        };
        let w = Tensor::ones(&[1, 1, 3, 3]);
        let b = Tensor::from_vec(vec![bias]);
        let out = locality_conv(&grid, &w, &b, ConvSpec::BASE).unwrap();
        let at = |r: usize, c: usize| out.tokens.at(&[r, c, 0]);
        for r in 1..4 {
            for c in 1..4 {
                assert_eq!(at(r, c), 9.0 * v + bias);
            }
        }
        assert_eq!(at(0, 0), 4.0 * v + bias);
        assert_eq!(at(0, 2), 6.0 * v + bias);
        assert_ne!(at(0, 2), at(2, 2));
    }

    #[test]
    fn invalid_specs_rejected() {
        let grid = PatchGrid {
            tokens: Tensor::zeros(&[2, 2, 1]),
            image_size: (2, 2),
            patch: 1,
        };
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        for spec in [ConvSpec::new(3, 1, 2, 1), ConvSpec::new(3, 1, 1, 2), ConvSpec::new(2, 1, 1, 1)] {
            assert!(matches!(locality_conv(&grid, &w, &b, spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn zero_probability_never_dilates() {
        let mut rng = RngStream::new(5, 0);
        let p = MultiDilationPolicy::new(0.0, vec![2]).unwrap();
        for _ in 0..1000 {
            assert_eq!(sample_conv_spec(&p, &mut rng), ConvSpec::BASE);
        }
    }

    #[test]
    fn dilation_frequency() {
        let mut rng = RngStream::new(6, 0);
        let p = MultiDilationPolicy::default();
        let draws = 100_000;
        let hits = (0..draws)
            .filter(|_| sample_conv_spec(&p, &mut rng) == ConvSpec::dilated(2))
            .count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.1).abs() <= 0.01, "{freq}");
    }

    #[test]
    fn two_rates_split_evenly() {
        let mut rng = RngStream::new(7, 0);
        let prob = 0.3;
        let p = MultiDilationPolicy::new(prob, vec![2, 3]).unwrap();
        let draws = 100_000;
        let mut counts = [0usize; 2];
        for _ in 0..draws {
            match sample_conv_spec(&p, &mut rng) {
                s if s == ConvSpec::dilated(2) => counts[0] += 1,
                s if s == ConvSpec::dilated(3) => counts[1] += 1,
                _ => {}
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - prob / 2.0).abs() <= 0.01, "{f}");
        }
    }

    #[test]
    fn policy_validation() {
        assert!(MultiDilationPolicy::new(1.5, vec![2]).is_err());
        assert!(MultiDilationPolicy::new(0.5, vec![]).is_err());
        assert!(MultiDilationPolicy::new(0.5, vec![1]).is_err());
    }
}
