//! Causal visibility masks over an `H x W` token grid.
//!
//! Tokens are indexed in raster order, `idx(r, c) = r * W + c`. A mask row is
//! a query, a column is a key. The four scan variants are:
//!
//! | variant | key `k` is visible to query `q` when |
//! |---|---|
//! | `OneD` | `idx(k) <= idx(q)` |
//! | `LowerRight` | `k == q`, or `k` is not in the closed lower-right quadrant of `q` |
//! | `UnmaskNeighborhood` | `LowerRight`, or `k` is an 8-neighbour of `q` |
//! | `LowerRightCorner` | `k` is not strictly below *and* strictly right of `q` |

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::NEG_SENTINEL;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ScanVariant {
    /// Raster-order causal scan.
    OneD,
    /// Hide the lower-right quadrant including its row and column.
    LowerRight,
    /// `LowerRight`, with the 3x3 neighbourhood unmasked.
    UnmaskNeighborhood,
    /// Hide only the strict lower-right corner.
    #[default]
    LowerRightCorner,
}

impl ScanVariant {
    pub const ALL: [ScanVariant; 4] = [
        ScanVariant::OneD,
        ScanVariant::LowerRight,
        ScanVariant::UnmaskNeighborhood,
        ScanVariant::LowerRightCorner,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScanVariant::OneD => "a",
            ScanVariant::LowerRight => "b",
            ScanVariant::UnmaskNeighborhood => "c",
            ScanVariant::LowerRightCorner => "d",
        }
    }

    /// Whether `key` is visible from `query`, both given as `(row, col)`.
    pub fn visible(self, width: usize, query: (usize, usize), key: (usize, usize)) -> bool {
        let (rq, cq) = query;
        let (rk, ck) = key;
        match self {
            ScanVariant::OneD => rk * width + ck <= rq * width + cq,
            ScanVariant::LowerRight => key == query || !(rk >= rq && ck >= cq),
            ScanVariant::UnmaskNeighborhood => {
                ScanVariant::LowerRight.visible(width, query, key)
                    || (rk.abs_diff(rq) <= 1 && ck.abs_diff(cq) <= 1)
            }
            ScanVariant::LowerRightCorner => !(rk > rq && ck > cq),
        }
    }
}

impl fmt::Display for ScanVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScanVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "1d" | "a_1d" => Ok(ScanVariant::OneD),
            "b" | "lower_right" | "b_lower_right" => Ok(ScanVariant::LowerRight),
            "c" | "unmask_neighborhood" | "c_unmask_neighborhood" => {
                Ok(ScanVariant::UnmaskNeighborhood)
            }
            "d" | "lower_right_corner" | "d_lower_right_corner" => {
                Ok(ScanVariant::LowerRightCorner)
            }
            other => Err(Error::config(format!("unknown scan variant `{other}`"))),
        }
    }
}

/// Dense boolean visibility matrix over `H * W` raster-ordered tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    height: usize,
    width: usize,
    visible: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskViolation {
    EmptyRow(usize),
    SelfHidden(usize),
}

impl AttentionMask {
    /// Wraps a hand-built matrix without checking its invariants.
    pub fn from_visible(height: usize, width: usize, visible: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if visible.len() != n * n {
            return Err(Error::dim(format!(
                "{height}x{width} grid needs a {n}x{n} mask, got {} entries",
                visible.len()
            )));
        }
        Ok(Self {
            height,
            width,
            visible,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn is_visible(&self, query: usize, key: usize) -> bool {
        self.visible[query * self.tokens() + key]
    }

    pub fn set(&mut self, query: usize, key: usize, visible: bool) {
        let n = self.tokens();
        self.visible[query * n + key] = visible;
    }

    pub fn row(&self, query: usize) -> &[bool] {
        let n = self.tokens();
        &self.visible[query * n..(query + 1) * n]
    }

    pub fn visible_count(&self, query: usize) -> usize {
        self.row(query).iter().filter(|&&v| v).count()
    }

    /// Visible keys of `query`, ascending.
    pub fn visible_keys(&self, query: usize) -> Vec<usize> {
        self.row(query)
            .iter()
            .enumerate()
            .filter_map(|(k, &v)| v.then_some(k))
            .collect()
    }

    /// Total number of visible (query, key) pairs.
    pub fn visible_pairs(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

pub fn build_mask(variant: ScanVariant, height: usize, width: usize) -> Result<AttentionMask> {
    if height == 0 || width == 0 {
        return Err(Error::dim(format!("mask grid must be non-empty, got {height}x{width}")));
    }
    let n = height * width;
    let mut visible = vec![false; n * n];
    for q in 0..n {
        let qpos = (q / width, q % width);
        for k in 0..n {
            visible[q * n + k] = variant.visible(width, qpos, (k / width, k % width));
        }
    }
    Ok(AttentionMask {
        height,
        width,
        visible,
    })
}

/// Checks that every row has a visible key and that every token sees itself.
pub fn validate(mask: &AttentionMask) -> std::result::Result<(), Vec<MaskViolation>> {
    let mut violations = Vec::new();
    for q in 0..mask.tokens() {
        if mask.visible_count(q) == 0 {
            violations.push(MaskViolation::EmptyRow(q));
        }
        if !mask.is_visible(q, q) {
            violations.push(MaskViolation::SelfHidden(q));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Visible entries become `0`, hidden ones [`NEG_SENTINEL`].
pub fn to_additive(mask: &AttentionMask) -> Tensor {
    let n = mask.tokens();
    let data = mask
        .visible
        .iter()
        .map(|&v| if v { 0.0 } else { NEG_SENTINEL })
        .collect();
    Tensor::new(vec![n, n], data).expect("n*n entries")
}

/// Renders the mask as rows of `0`/`1` characters.
pub fn to_ascii(mask: &AttentionMask) -> String {
    let n = mask.tokens();
    let mut out = String::with_capacity(n * (n + 1));
    for q in 0..n {
        out.extend(mask.row(q).iter().map(|&v| if v { '1' } else { '0' }));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_d_two_by_two() {
        let m = build_mask(ScanVariant::OneD, 2, 2).unwrap();
        assert_eq!(m.visible_keys(1), vec![0, 1]);
        assert_eq!(m.visible_count(1), 2);
    }

    #[test]
    fn corner_two_by_two() {
        let m = build_mask(ScanVariant::LowerRightCorner, 2, 2).unwrap();
        assert_eq!(m.visible_keys(0), vec![0, 1, 2]);
        assert_eq!(m.visible_count(3), 4);
    }

    #[test]
    fn corner_visible_count_formula() {
        for h in 1..=6 {
            for w in 1..=6 {
                let m = build_mask(ScanVariant::LowerRightCorner, h, w).unwrap();
                for r in 0..h {
                    for c in 0..w {
                        let want = h * w - (h - 1 - r) * (w - 1 - c);
                        assert_eq!(m.visible_count(r * w + c), want, "{h}x{w} ({r},{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn one_d_on_a_row_is_lower_triangular() {
        let n = 7;
        let m = build_mask(ScanVariant::OneD, 1, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(m.is_visible(i, j), j <= i);
            }
        }
    }

    #[test]
    fn last_token_visibility() {
        let (h, w) = (4, 5);
        let last = h * w - 1;
        let d = build_mask(ScanVariant::LowerRightCorner, h, w).unwrap();
        assert_eq!(d.visible_count(last), h * w);
        let b = build_mask(ScanVariant::LowerRight, h, w).unwrap();
        // The closed quadrant of the last token is the token itself.
        assert_eq!(b.visible_count(last), h * w);
        let b_first = b.visible_count(0);
        assert_eq!(b_first, 1);
    }

    #[test]
    fn all_variants_valid_up_to_eight() {
        for v in ScanVariant::ALL {
            for h in 1..=8 {
                for w in 1..=8 {
                    let m = build_mask(v, h, w).unwrap();
                    assert_eq!(validate(&m), Ok(()), "{v} {h}x{w}");
                }
            }
        }
    }

    #[test]
    fn validate_reports_violations() {
        let mut m = build_mask(ScanVariant::OneD, 2, 2).unwrap();
        m.set(1, 1, false);
        assert_eq!(validate(&m), Err(vec![MaskViolation::SelfHidden(1)]));

        let mut empty = build_mask(ScanVariant::OneD, 1, 3).unwrap();
        for k in 0..3 {
            empty.set(2, k, false);
        }
        assert_eq!(
            validate(&empty),
            Err(vec![MaskViolation::EmptyRow(2), MaskViolation::SelfHidden(2)])
        );
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(
            build_mask(ScanVariant::OneD, 0, 3),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn additive_form() {
        let single = to_additive(&build_mask(ScanVariant::LowerRight, 1, 1).unwrap());
        assert_eq!(single.data(), &[0.0]);
        let pair = to_additive(&build_mask(ScanVariant::OneD, 1, 2).unwrap());
        assert_eq!(pair.data(), &[0.0, NEG_SENTINEL, 0.0, 0.0]);
    }

    #[test]
    fn additive_roundtrip_sign_pattern() {
        for v in ScanVariant::ALL {
            let m = build_mask(v, 3, 4).unwrap();
            let add = to_additive(&m);
            let n = m.tokens();
            for q in 0..n {
                for k in 0..n {
                    assert_eq!(add.data()[q * n + k] == 0.0, m.is_visible(q, k));
                }
            }
        }
    }

    #[test]
    fn parse_variants() {
        for v in ScanVariant::ALL {
            assert_eq!(v.as_str().parse::<ScanVariant>().unwrap(), v);
        }
        assert!("e".parse::<ScanVariant>().is_err());
        assert_eq!(ScanVariant::default(), ScanVariant::LowerRightCorner);
    }
}
