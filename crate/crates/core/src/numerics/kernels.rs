//! Raw slice kernels behind the graph ops. All maps are HWC row-major.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// 3x3 cross-correlation with replication padding of one pixel.
/// `kernel` is laid out `[ky][kx][cin][cout]`.
pub fn conv3x3_forward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w * cout);
    for _ in 0..h * w {
        out.extend_from_slice(bias);
    }
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * cout;
            let acc = &mut out[o..o + cout];
            for ky in 0..3 {
                let sy = clamp_index(y as isize + ky as isize - 1, h);
                for kx in 0..3 {
                    let sx = clamp_index(x as isize + kx as isize - 1, w);
                    let src = &input[(sy * w + sx) * cin..(sy * w + sx + 1) * cin];
                    let kbase = (ky * 3 + kx) * cin * cout;
                    for (ci, &v) in src.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &kernel[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (a, &k) in acc.iter_mut().zip(krow) {
                            *a += v * k;
                        }
                    }
                }
            }
        }
    }
    out
}

pub struct Conv3x3Grads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kernel: &[f64],
    cout: usize,
    grad_out: &[f64],
    need: [bool; 3],
) -> Conv3x3Grads {
    let mut gin = need[0].then(|| vec![0.0; h * w * cin]);
    let mut gk = need[1].then(|| vec![0.0; 9 * cin * cout]);
    let gb = need[2].then(|| {
        let mut gb = vec![0.0; cout];
        for px in grad_out.chunks_exact(cout) {
            for (b, &g) in gb.iter_mut().zip(px) {
                *b += g;
            }
        }
        gb
    });
    if gin.is_some() || gk.is_some() {
        for y in 0..h {
            for x in 0..w {
                let go = &grad_out[(y * w + x) * cout..(y * w + x + 1) * cout];
                for ky in 0..3 {
                    let sy = clamp_index(y as isize + ky as isize - 1, h);
                    for kx in 0..3 {
                        let sx = clamp_index(x as isize + kx as isize - 1, w);
                        let s = (sy * w + sx) * cin;
                        let kbase = (ky * 3 + kx) * cin * cout;
                        for ci in 0..cin {
                            let krange = kbase + ci * cout..kbase + (ci + 1) * cout;
                            if let Some(gin) = gin.as_mut() {
                                let krow = &kernel[krange.clone()];
                                let dot: f64 = krow.iter().zip(go).map(|(k, g)| k * g).sum();
                                gin[s + ci] += dot;
                            }
                            if let Some(gk) = gk.as_mut() {
                                let v = input[s + ci];
                                if v != 0.0 {
                                    for (k, &g) in gk[krange].iter_mut().zip(go) {
                                        *k += v * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Conv3x3Grads {
        input: gin,
        kernel: gk,
        bias: gb,
    }
}

/// Standard normal CDF via the exact error function.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

/// `[n, din] x [din, dout] + bias`.
pub fn linear_forward(
    input: &[f64],
    n: usize,
    din: usize,
    weight: &[f64],
    bias: &[f64],
    dout: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * dout);
    for row in input.chunks_exact(din).take(n) {
        let start = out.len();
        out.extend_from_slice(bias);
        let acc = &mut out[start..start + dout];
        for (i, &v) in row.iter().enumerate() {
            for (a, &wv) in acc.iter_mut().zip(&weight[i * dout..(i + 1) * dout]) {
                *a += v * wv;
            }
        }
    }
    out
}

/// Space-to-depth over 2x2 patches. Output channel order is patch position
/// major (row-major within the patch), then input channel.
pub fn pack(input: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(input.len());
    for i in 0..ho {
        for j in 0..wo {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let s = ((2 * i + dy) * w + 2 * j + dx) * c;
                out.extend_from_slice(&input[s..s + c]);
            }
        }
    }
    out
}

/// Inverse of [`pack`]. `h`, `w`, `c` describe the unpacked output.
pub fn unpack(input: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    let wo = w / 2;
    for i in 0..h / 2 {
        for j in 0..wo {
            let base = (i * wo + j) * 4 * c;
            for (p, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let d = ((2 * i + dy) * w + 2 * j + dx) * c;
                out[d..d + c].copy_from_slice(&input[base + p * c..base + (p + 1) * c]);
            }
        }
    }
    out
}

/// Interleave channels of two maps with equal spatial size.
pub fn concat_channels(a: &[f64], ca: usize, b: &[f64], cb: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (pa, pb) in a.chunks_exact(ca).zip(b.chunks_exact(cb)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    out
}

pub fn split_channels(g: &[f64], ca: usize, cb: usize) -> (Vec<f64>, Vec<f64>) {
    let cells = g.len() / (ca + cb);
    let mut ga = Vec::with_capacity(cells * ca);
    let mut gb = Vec::with_capacity(cells * cb);
    for px in g.chunks_exact(ca + cb) {
        ga.extend_from_slice(&px[..ca]);
        gb.extend_from_slice(&px[ca..]);
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_matches_declared_order() {
        let z = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(pack(&z, 2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(unpack(&[1.0, 2.0, 3.0, 4.0], 2, 2, 1), z.to_vec());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        // Phi(1) = 0.841344746068542...
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-14);
    }

    #[test]
    fn replication_padding_on_single_pixel() {
        // With one pixel every tap reads the same value.
        let k = vec![1.0; 9];
        let out = conv3x3_forward(&[2.0], 1, 1, 1, &k, &[0.5], 1);
        assert_eq!(out, vec![18.5]);
    }
}
