use proptest::prelude::*;

use ledit_core::attention::{masked_attention, AttentionWeights};
use ledit_core::gradcheck::grad_check;
use ledit_core::locality::{self, PatchGrid};
use ledit_core::mask::{build_mask, to_additive, validate, ScanVariant};
use ledit_core::ops::{conv2d, softmax_lastdim, ConvSpec, NEG_SENTINEL};
use ledit_core::{RngStream, Tensor};

fn variant() -> impl Strategy<Value = ScanVariant> {
    prop::sample::select(ScanVariant::ALL.to_vec())
}

fn nested_conv(x: &Tensor, w: &Tensor, b: &Tensor, spec: ConvSpec) -> Tensor {
    let (cin, h, wd) = x.dims3().unwrap();
    let cout = w.shape()[0];
    let k = spec.k;
    let ho = spec.output_len(h).unwrap();
    let wo = spec.output_len(wd).unwrap();
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * spec.s + ky * spec.d) as isize - spec.p as isize;
                            let ix = (ox * spec.s + kx * spec.d) as isize - spec.p as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x.at(&[ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                }
                out.set(&[co, oy, ox], acc);
            }
        }
    }
    out
}

fn random_weights(d: usize, heads: usize, rng: &mut RngStream) -> AttentionWeights {
    let mut m = || Tensor::randn(&[d, d], 0.5, rng);
    AttentionWeights::new(m(), m(), m(), m(), heads).unwrap()
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let (n, d) = x.dims2().unwrap();
    let mut data = Vec::with_capacity(n * d);
    for &p in perm {
        data.extend_from_slice(x.row(p));
    }
    Tensor::new(vec![n, d], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalise(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, v in variant()) {
        let mut rng = RngStream::new(seed, 0);
        let x = Tensor::randn(&[rows, cols], 3.0, &mut rng);
        let y = softmax_lastdim(&x, None).unwrap();
        for r in 0..rows {
            prop_assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(y.row(r).iter().all(|&p| p >= 0.0));
        }
        // Masked: every row of a scan-variant mask has a visible key.
        let m = build_mask(v, rows, cols).unwrap();
        let n = m.tokens();
        let x = Tensor::randn(&[n, n], 3.0, &mut rng);
        let y = softmax_lastdim(&x, Some(&to_additive(&m))).unwrap();
        for q in 0..n {
            prop_assert!((y.row(q).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for k in 0..n {
                if !m.is_visible(q, k) {
                    prop_assert_eq!(y.at(&[q, k]), 0.0);
                }
            }
        }
    }

    #[test]
    fn conv_matches_nested_loops_bitwise(seed in any::<u64>(), h in 1usize..=8, w in 1usize..=8, d in 1usize..=2, cin in 1usize..3, cout in 1usize..3) {
        let mut rng = RngStream::new(seed, 1);
        let spec = if d == 1 { ConvSpec::BASE } else { ConvSpec::dilated(d) };
        let x = Tensor::randn(&[cin, h, w], 1.0, &mut rng);
        let k = Tensor::randn(&[cout, cin, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[cout], 1.0, &mut rng);
        let got = conv2d(&x, &k, &b, spec).unwrap();
        prop_assert!(got.bit_eq(&nested_conv(&x, &k, &b, spec)));
    }

    #[test]
    fn shape_preserving_specs(h in 1usize..=16, w in 1usize..=16, r in 1usize..=4) {
        let spec = if r == 1 { ConvSpec::BASE } else { ConvSpec::dilated(r) };
        prop_assert_eq!(spec.output_len(h), Some(h));
        prop_assert_eq!(spec.output_len(w), Some(w));
        let grid = PatchGrid { tokens: Tensor::ones(&[h, w, 2]), image_size: (h, w), patch: 1 };
        let out = locality::locality_conv(&grid, &Tensor::zeros(&[2, 2, 3, 3]), &Tensor::zeros(&[2]), spec).unwrap();
        prop_assert_eq!(out.grid(), (h, w));
    }

    #[test]
    fn unmasked_attention_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..8, heads in 1usize..3) {
        let mut rng = RngStream::new(seed, 2);
        let d = 4 * heads;
        let w = random_weights(d, heads, &mut rng);
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.below(i + 1));
        }
        let a = masked_attention(&permute_rows(&x, &perm), &w, None, 1.3).unwrap();
        let b = permute_rows(&masked_attention(&x, &w, None, 1.3).unwrap(), &perm);
        prop_assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn outputs_are_convex_combinations(seed in any::<u64>(), h in 1usize..4, w in 1usize..4, v in variant()) {
        let mut rng = RngStream::new(seed, 3);
        let d = 3;
        let eye = || Tensor::eye(d);
        let weights = AttentionWeights::new(eye(), eye(), eye(), eye(), 1).unwrap();
        let m = build_mask(v, h, w).unwrap();
        let x = Tensor::randn(&[m.tokens(), d], 1.0, &mut rng);
        let y = masked_attention(&x, &weights, Some(&m), 1.0).unwrap();
        for q in 0..m.tokens() {
            let keys = m.visible_keys(q);
            for c in 0..d {
                let lo = keys.iter().map(|&k| x.at(&[k, c])).fold(f64::INFINITY, f64::min);
                let hi = keys.iter().map(|&k| x.at(&[k, c])).fold(f64::NEG_INFINITY, f64::max);
                let val = y.at(&[q, c]);
                prop_assert!(val >= lo - 1e-12 && val <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn random_shape_gradients(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        let mut rng = RngStream::new(seed, 4);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let coeff = Tensor::randn(&[m, n], 1.0, &mut rng);
        let err = grad_check(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            let y = t.gelu(y);
            let y = t.softmax(y, None)?;
            let c = t.constant(coeff.clone());
            t.mul(y, c)
        }, &[a, b], 1e-5).unwrap();
        prop_assert!(err <= 1e-4, "{}", err);
    }
}

#[test]
fn additive_masks_use_the_sentinel() {
    for v in ScanVariant::ALL {
        let m = build_mask(v, 3, 3).unwrap();
        let add = to_additive(&m);
        assert!(add.data().iter().all(|&x| x == 0.0 || x == NEG_SENTINEL));
    }
}

#[test]
fn corner_variant_is_dominance_monotone() {
    for h in 1..=6 {
        for w in 1..=6 {
            let m = build_mask(ScanVariant::LowerRightCorner, h, w).unwrap();
            for q1 in 0..h * w {
                for q2 in 0..h * w {
                    let (r1, c1) = (q1 / w, q1 % w);
                    let (r2, c2) = (q2 / w, q2 % w);
                    if r2 >= r1 && c2 >= c1 {
                        for k in 0..h * w {
                            assert!(!m.is_visible(q1, k) || m.is_visible(q2, k));
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn lower_right_last_token_sees_complement_of_quadrant() {
    for (h, w) in [(2, 2), (3, 4), (5, 2)] {
        let m = build_mask(ScanVariant::LowerRight, h, w).unwrap();
        let last = h * w - 1;
        assert_eq!(m.visible_count(last), h * w);
        assert!(validate(&m).is_ok());
    }
}

#[test]
fn causal_mask_breaks_equivariance() {
    let mut rng = RngStream::new(42, 0);
    let d = 4;
    let w = random_weights(d, 1, &mut rng);
    let m = build_mask(ScanVariant::LowerRightCorner, 2, 2).unwrap();
    let x = Tensor::randn(&[4, d], 1.0, &mut rng);
    let perm = [3, 2, 1, 0];
    let a = masked_attention(&permute_rows(&x, &perm), &w, Some(&m), 1.0).unwrap();
    let b = permute_rows(&masked_attention(&x, &w, Some(&m), 1.0).unwrap(), &perm);
    assert!(a.max_abs_diff(&b) >= 1e-3);
}

#[test]
fn draws_independent_of_thread() {
    let here = Tensor::randn(&[16], 1.0, &mut RngStream::new(5, 9));
    let there = std::thread::spawn(|| Tensor::randn(&[16], 1.0, &mut RngStream::new(5, 9)))
        .join()
        .unwrap();
    assert!(here.bit_eq(&there));
}

fn corner_rule(q: (usize, usize), k: (usize, usize)) -> bool {
    !(k.0 > q.0 && k.1 > q.1)
}

#[test]
fn corner_variant_matches_enumerated_rule() {
    for h in 1..=6 {
        for w in 1..=6 {
            let m = build_mask(ScanVariant::LowerRightCorner, h, w).unwrap();
            for q in 0..h * w {
                for k in 0..h * w {
                    assert_eq!(m.is_visible(q, k), corner_rule((q / w, q % w), (k / w, k % w)));
                }
            }
        }
    }
}

#[test]
fn raster_variant_on_a_row_is_lower_triangular() {
    for n in 1..=12 {
        let m = build_mask(ScanVariant::OneD, 1, n).unwrap();
        for q in 0..n {
            for k in 0..n {
                assert_eq!(m.is_visible(q, k), k <= q);
            }
        }
    }
}
