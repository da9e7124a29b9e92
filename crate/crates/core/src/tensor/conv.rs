//! Channels-last 3×3 convolution kernels with zero padding 1.
//!
//! Loops are organized around input pixels in the forward pass and output
//! pixels in the input-gradient pass so that all-zero rows (empty BEV cells,
//! dead ReLUs) are skipped.

use super::dense::Tensor;

pub(crate) fn out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

/// Output coordinate fed by input coordinate `i` through kernel tap `k`.
#[inline]
fn tap_target(i: usize, k: usize, stride: usize, out: usize) -> Option<usize> {
    let pos = i + 1;
    if pos < k {
        return None;
    }
    let p = pos - k;
    if p % stride != 0 {
        return None;
    }
    let o = p / stride;
    (o < out).then_some(o)
}

pub(crate) fn forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w.shape()[3];
    let (ho, wo) = (out_size(h, stride), out_size(wd, stride));
    let mut out = vec![0.0; ho * wo * co];
    for px in out.chunks_mut(co) {
        px.copy_from_slice(b.data());
    }
    let xd = x.data();
    let wdat = w.data();
    for iy in 0..h {
        for ix in 0..wd {
            let xr = &xd[(iy * wd + ix) * ci..(iy * wd + ix + 1) * ci];
            if xr.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..3 {
                let Some(oy) = tap_target(iy, ky, stride, ho) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ox) = tap_target(ix, kx, stride, wo) else {
                        continue;
                    };
                    let orow = &mut out[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                    let wbase = (ky * 3 + kx) * ci * co;
                    for (c, &xv) in xr.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wdat[wbase + c * co..wbase + (c + 1) * co];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![ho, wo, co], out).expect("conv output shape")
}

#[allow(clippy::type_complexity)]
pub(crate) fn backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (h, wd, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = w.shape()[3];
    let (ho, wo) = (g.shape()[0], g.shape()[1]);
    let xd = x.data();
    let wdat = w.data();
    let gd = g.data();

    let gx = need_x.then(|| {
        let mut gx = vec![0.0; h * wd * ci];
        for oy in 0..ho {
            for ox in 0..wo {
                let gr = &gd[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                if gr.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix as usize >= wd {
                            continue;
                        }
                        let base = (iy as usize * wd + ix as usize) * ci;
                        let wbase = (ky * 3 + kx) * ci * co;
                        for c in 0..ci {
                            let wrow = &wdat[wbase + c * co..wbase + (c + 1) * co];
                            let mut acc = 0.0;
                            for (a, b) in wrow.iter().zip(gr) {
                                acc += a * b;
                            }
                            gx[base + c] += acc;
                        }
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), gx).expect("conv grad shape")
    });

    let (gw, gb) = if need_w {
        let mut gw = vec![0.0; 9 * ci * co];
        let mut gb = vec![0.0; co];
        for gr in gd.chunks(co) {
            for (o, v) in gb.iter_mut().zip(gr) {
                *o += v;
            }
        }
        for iy in 0..h {
            for ix in 0..wd {
                let xr = &xd[(iy * wd + ix) * ci..(iy * wd + ix + 1) * ci];
                if xr.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..3 {
                    let Some(oy) = tap_target(iy, ky, stride, ho) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(ox) = tap_target(ix, kx, stride, wo) else {
                            continue;
                        };
                        let gr = &gd[(oy * wo + ox) * co..(oy * wo + ox + 1) * co];
                        let wbase = (ky * 3 + kx) * ci * co;
                        for (c, &xv) in xr.iter().enumerate() {
                            if xv == 0.0 {
                                continue;
                            }
                            let orow = &mut gw[wbase + c * co..wbase + (c + 1) * co];
                            for (o, &gv) in orow.iter_mut().zip(gr) {
                                *o += xv * gv;
                            }
                        }
                    }
                }
            }
        }
        (
            Some(Tensor::new(w.shape().to_vec(), gw).expect("conv weight grad")),
            Some(Tensor::new(vec![co], gb).expect("conv bias grad")),
        )
    } else {
        (None, None)
    };
    (gx, gw, gb)
}

pub(crate) fn upsample_forward(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (w, c) = (x.shape()[1], x.shape()[2]);
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        for xx in 0..out_w {
            let s = ((y / 2) * w + xx / 2) * c;
            out.extend_from_slice(&x.data()[s..s + c]);
        }
    }
    Tensor::new(vec![out_h, out_w, c], out).expect("upsample shape")
}

pub(crate) fn upsample_backward(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let (out_h, out_w, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let w = in_shape[1];
    let mut gx = Tensor::zeros(in_shape);
    for y in 0..out_h {
        for xx in 0..out_w {
            let s = ((y / 2) * w + xx / 2) * c;
            let src = &g.data()[(y * out_w + xx) * c..(y * out_w + xx + 1) * c];
            for (o, v) in gx.data_mut()[s..s + c].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    gx
}
