//! Numeric kernels shared by the differentiable graph and the cached
//! inference runtime.

use ndarray::{Array2, ArrayView2, Axis};

pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = f64::from_bits(0x3fe6_2e42_fee0_0000);
const LN2_LO: f64 = f64::from_bits(0x3dea_39ef_3579_3c76);
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52

/// Branch-free `e^x`, accurate to about one ulp.
///
/// Returns exactly `0.0` for `-inf`, `inf` on overflow and propagates NaN.
#[inline]
pub fn exp(x: f64) -> f64 {
    let xc = x.clamp(-746.0, 710.0);
    let kf = (xc * LOG2E + ROUND_MAGIC) - ROUND_MAGIC;
    let r = (xc - kf * LN2_HI) - kf * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let k = kf as i64;
    let k1 = k / 2;
    let k2 = k - k1;
    let s1 = f64::from_bits(((k1 + 1023) as u64) << 52);
    let s2 = f64::from_bits(((k2 + 1023) as u64) << 52);
    p * s1 * s2
}

/// tanh-approximated GELU, written as `x * sigmoid(2u)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    x / (1.0 + exp(-2.0 * u))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let s = 1.0 / (1.0 + exp(-2.0 * u));
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = a.split_at(a.len() - a.len() % 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-wise layer norm. Returns `(output, normalized, inverse std per row)`.
pub fn layer_norm(
    x: ArrayView2<f64>,
    gamma: ArrayView2<f64>,
    beta: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let (rows, cols) = x.dim();
    let mut xhat = Array2::zeros((rows, cols));
    let mut out = Array2::zeros((rows, cols));
    let mut inv_std = Vec::with_capacity(rows);
    let g = gamma.row(0);
    let b = beta.row(0);
    for (r, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for c in 0..cols {
            let xh = (row[c] - mean) * inv;
            xhat[[r, c]] = xh;
            out[[r, c]] = xh * g[c] + b[c];
        }
    }
    (out, xhat, inv_std)
}

/// Add a `1 × n` bias row to every row of `x` in place.
pub fn add_bias(x: &mut Array2<f64>, bias: ArrayView2<f64>) {
    let b = bias.row(0);
    for mut row in x.axis_iter_mut(Axis(0)) {
        row += &b;
    }
}

/// Scaled dot-product attention of one query row over `n_keys` cached
/// key/value rows (row-major, width `q.len()`). Keys with `valid == false`
/// are skipped entirely. Writes the attended row into `out` and, per head,
/// the attention weights into `probs` (`heads * n_keys`, zeros for skipped
/// keys).
pub fn attend(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    valid: &[bool],
    heads: usize,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let d = q.len();
    let dh = d / heads;
    let n_keys = valid.len();
    let scale = 1.0 / (dh as f64).sqrt();
    out.iter_mut().for_each(|o| *o = 0.0);
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let p = &mut probs[h * n_keys..(h + 1) * n_keys];
        let mut max = f64::NEG_INFINITY;
        for j in 0..n_keys {
            if !valid[j] {
                p[j] = f64::NEG_INFINITY;
                continue;
            }
            let kj = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            let s = dot(qh, kj) * scale;
            p[j] = s;
            if s > max {
                max = s;
            }
        }
        if max == f64::NEG_INFINITY {
            p.fill(0.0);
            continue;
        }
        for v in p.iter_mut() {
            *v = exp(*v - max);
        }
        let sum: f64 = p.iter().sum();
        let oh = &mut out[h * dh..(h + 1) * dh];
        for j in 0..n_keys {
            if !valid[j] {
                continue;
            }
            p[j] /= sum;
            let vj = &values[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, v) in oh.iter_mut().zip(vj) {
                *o += p[j] * v;
            }
        }
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let exps: Vec<f64> = logits.iter().map(|&l| exp(l - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log(sum(exp(x)))` with max shift.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logits.iter().map(|&l| exp(l - max)).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn exp_matches_std() {
        let mut x = -745.0;
        while x < 709.0 {
            let (a, b) = (exp(x), x.exp());
            if b >= f64::MIN_POSITIVE {
                assert!(((a - b) / b).abs() < 4e-16, "{x}: {a} vs {b}");
            } else {
                assert!((a - b).abs() <= 2.0 * f64::from_bits(1), "{x}: {a} vs {b}");
            }
            x += 0.0137;
        }
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(f64::NEG_INFINITY), 0.0);
        assert_eq!(exp(-800.0), 0.0);
        assert_eq!(exp(710.0), f64::INFINITY);
        assert_eq!(exp(f64::INFINITY), f64::INFINITY);
        assert!(exp(f64::NAN).is_nan());
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 1.0, -1.0]];
        let g = array![[1.0, 1.0, 1.0, 1.0]];
        let b = array![[0.0, 0.0, 0.0, 0.0]];
        let (out, _, _) = layer_norm(x.view(), g.view(), b.view());
        for row in out.axis_iter(Axis(0)) {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn attend_skips_invalid_keys() {
        let q = [1.0, 0.0];
        let keys = [9.0, 9.0, 1.0, 0.0, 0.0, 1.0];
        let values = [100.0, 100.0, 1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 2];
        let mut probs = [0.0; 3];
        attend(
            &q,
            &keys,
            &values,
            &[false, true, true],
            1,
            &mut out,
            &mut probs,
        );
        assert_eq!(probs[0], 0.0);
        assert!((probs[1] + probs[2] - 1.0).abs() < 1e-12);
        assert!(out[0] < 3.0);
        // same result as if the invalid key never existed
        let mut out2 = [0.0; 2];
        let mut probs2 = [0.0; 2];
        attend(
            &q,
            &keys[2..],
            &values[2..],
            &[true, true],
            1,
            &mut out2,
            &mut probs2,
        );
        assert_eq!(out, out2);
    }

    #[test]
    fn softmax_analytic() {
        let p = softmax(&[3f64.ln(), 0.0]);
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        assert!((log_sum_exp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }
}
