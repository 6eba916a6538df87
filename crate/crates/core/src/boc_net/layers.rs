//! Single-sample forward and backward kernels. Activations are flat
//! channel-major buffers; shapes are fixed by the network plan.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvShape {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, in_h: usize, in_w: usize) -> Self {
        let out_h = (in_h + 2 * pad - k) / stride + 1;
        let out_w = (in_w + 2 * pad - k) / stride + 1;
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            in_h,
            in_w,
            out_h,
            out_w,
        }
    }

    /// Output index range along one axis whose input tap `o * stride + kk - pad`
    /// falls inside `0..in_len`.
    #[inline]
    fn valid_range(&self, kk: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let kk = kk as isize;
        // smallest o with o*s + kk - p >= 0
        let lo = ((p - kk).max(0) + s - 1) / s;
        // largest o with o*s + kk - p <= in_len - 1
        let hi_num = in_len as isize - 1 + p - kk;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).clamp(0, out_len as isize) as usize;
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv_forward(sh: &ConvShape, weight: &[f64], bias: &[f64], input: &[f64], out: &mut Vec<f64>) {
    let (k, s, p) = (sh.k, sh.stride, sh.pad);
    let plane_in = sh.in_h * sh.in_w;
    let plane_out = sh.out_h * sh.out_w;
    out.clear();
    out.resize(sh.out_c * plane_out, 0.0);
    for oc in 0..sh.out_c {
        let out_plane = &mut out[oc * plane_out..(oc + 1) * plane_out];
        out_plane.fill(bias[oc]);
        for ic in 0..sh.in_c {
            let in_plane = &input[ic * plane_in..(ic + 1) * plane_in];
            for ky in 0..k {
                let (oy_lo, oy_hi) = sh.valid_range(ky, sh.in_h, sh.out_h);
                for kx in 0..k {
                    let wv = weight[((oc * sh.in_c + ic) * k + ky) * k + kx];
                    let (ox_lo, ox_hi) = sh.valid_range(kx, sh.in_w, sh.out_w);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let in_row = &in_plane[iy * sh.in_w..(iy + 1) * sh.in_w];
                        let out_row = &mut out_plane[oy * sh.out_w..(oy + 1) * sh.out_w];
                        if s == 1 {
                            let off = ox_lo + kx - p;
                            let n = ox_hi - ox_lo;
                            for (o, &x) in out_row[ox_lo..ox_hi].iter_mut().zip(&in_row[off..off + n]) {
                                *o += wv * x;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                out_row[ox] += wv * in_row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients; writes the input gradient when requested.
pub(crate) fn conv_backward(
    sh: &ConvShape,
    weight: &[f64],
    input: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_in: Option<&mut Vec<f64>>,
) {
    let (k, s, p) = (sh.k, sh.stride, sh.pad);
    let plane_in = sh.in_h * sh.in_w;
    let plane_out = sh.out_h * sh.out_w;
    let mut grad_in = grad_in.map(|g| {
        g.clear();
        g.resize(sh.in_c * plane_in, 0.0);
        g
    });
    for oc in 0..sh.out_c {
        let go_plane = &grad_out[oc * plane_out..(oc + 1) * plane_out];
        grad_b[oc] += go_plane.iter().sum::<f64>();
        for ic in 0..sh.in_c {
            let in_plane = &input[ic * plane_in..(ic + 1) * plane_in];
            for ky in 0..k {
                let (oy_lo, oy_hi) = sh.valid_range(ky, sh.in_h, sh.out_h);
                for kx in 0..k {
                    let widx = ((oc * sh.in_c + ic) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let (ox_lo, ox_hi) = sh.valid_range(kx, sh.in_w, sh.out_w);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let go_row = &go_plane[oy * sh.out_w..(oy + 1) * sh.out_w];
                        let in_row = &in_plane[iy * sh.in_w..(iy + 1) * sh.in_w];
                        for ox in ox_lo..ox_hi {
                            acc += go_row[ox] * in_row[ox * s + kx - p];
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let gi_row = &mut gi[ic * plane_in + iy * sh.in_w..ic * plane_in + (iy + 1) * sh.in_w];
                            for ox in ox_lo..ox_hi {
                                gi_row[ox * s + kx - p] += wv * go_row[ox];
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
}

pub(crate) fn dense_forward(n_in: usize, n_out: usize, weight: &[f64], bias: &[f64], input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend((0..n_out).map(|j| {
        let row = &weight[j * n_in..(j + 1) * n_in];
        bias[j] + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
    }));
}

pub(crate) fn dense_backward(
    n_in: usize,
    n_out: usize,
    weight: &[f64],
    input: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    grad_in: Option<&mut Vec<f64>>,
) {
    for j in 0..n_out {
        let g = grad_out[j];
        grad_b[j] += g;
        if g != 0.0 {
            for (gw, x) in grad_w[j * n_in..(j + 1) * n_in].iter_mut().zip(input) {
                *gw += g * x;
            }
        }
    }
    if let Some(gi) = grad_in {
        gi.clear();
        gi.resize(n_in, 0.0);
        for j in 0..n_out {
            let g = grad_out[j];
            if g != 0.0 {
                for (d, w) in gi.iter_mut().zip(&weight[j * n_in..(j + 1) * n_in]) {
                    *d += w * g;
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2; records the winning input index per output.
pub(crate) fn maxpool_forward(c: usize, in_h: usize, in_w: usize, input: &[f64], out: &mut Vec<f64>, argmax: &mut Vec<u32>) {
    let (oh, ow) = (in_h / 2, in_w / 2);
    out.clear();
    argmax.clear();
    for ch in 0..c {
        let base = ch * in_h * in_w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * in_w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * in_w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                argmax.push(best as u32);
            }
        }
    }
}

pub(crate) fn maxpool_backward(in_len: usize, argmax: &[u32], grad_out: &[f64], grad_in: &mut Vec<f64>) {
    grad_in.clear();
    grad_in.resize(in_len, 0.0);
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        grad_in[idx as usize] += g;
    }
}
