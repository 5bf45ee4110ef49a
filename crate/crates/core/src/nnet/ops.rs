//! Kernels on single images laid out as `[channels, height, width]`.

/// 3x3 convolution, stride 1, zero "same" padding. `weight` is
/// `[out, in, 3, 3]`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_forward(
    input: &[f32],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    bias: &[f32],
    out_c: usize,
    out: &mut [f32],
) {
    let plane = h * w;
    for o in 0..out_c {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(bias[o]);
        for i in 0..in_c {
            let src = &input[i * plane..(i + 1) * plane];
            let k = &weight[(o * in_c + i) * 9..(o * in_c + i) * 9 + 9];
            for ky in 0..3 {
                let (y0, y1) = valid_range(ky, h);
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    let (x0, x1) = valid_range(kx, w);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        for (a, b) in d.iter_mut().zip(s) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients and, when `d_input` is given, the
/// input gradient of [`conv3x3_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f32],
    in_c: usize,
    h: usize,
    w: usize,
    weight: &[f32],
    out_c: usize,
    d_out: &[f32],
    d_weight: &mut [f32],
    d_bias: &mut [f32],
    mut d_input: Option<&mut [f32]>,
) {
    let plane = h * w;
    for o in 0..out_c {
        let g = &d_out[o * plane..(o + 1) * plane];
        d_bias[o] += g.iter().sum::<f32>();
        for i in 0..in_c {
            let src = &input[i * plane..(i + 1) * plane];
            let base = (o * in_c + i) * 9;
            for ky in 0..3 {
                let (y0, y1) = valid_range(ky, h);
                for kx in 0..3 {
                    let (x0, x1) = valid_range(kx, w);
                    let mut acc = 0f32;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let gr = &g[y * w + x0..y * w + x1];
                        let s = &src[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                        acc += gr.iter().zip(s).map(|(a, b)| a * b).sum::<f32>();
                    }
                    d_weight[base + ky * 3 + kx] += acc;
                    if let Some(di) = d_input.as_deref_mut() {
                        let wv = weight[base + ky * 3 + kx];
                        let dst = &mut di[i * plane..(i + 1) * plane];
                        for y in y0..y1 {
                            let sy = y + ky - 1;
                            let gr = &g[y * w + x0..y * w + x1];
                            let d = &mut dst[sy * w + x0 + kx - 1..sy * w + x1 + kx - 1];
                            for (a, b) in d.iter_mut().zip(gr) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output rows (or columns) `[lo, hi)` for which kernel tap `k` reads
/// inside the image.
#[inline]
fn valid_range(k: usize, n: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if k == 2 { n.saturating_sub(1) } else { n };
    (lo.min(hi), hi)
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// 2x2 max pooling, stride 2; trailing odd rows/columns are dropped. Ties
/// go to the first element in row-major scan order. Returns the flat source
/// index of each maximum.
pub fn maxpool2_forward(input: &[f32], c: usize, h: usize, w: usize, out: &mut [f32]) -> Vec<u32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[j] > input[best] {
                        best = j;
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = input[best];
                arg.push(best as u32);
            }
        }
    }
    arg
}

pub fn maxpool2_backward(arg: &[u32], d_out: &[f32], d_input: &mut [f32]) {
    for (&j, &g) in arg.iter().zip(d_out) {
        d_input[j as usize] += g;
    }
}

pub fn sigmoid(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
