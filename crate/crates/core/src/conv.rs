//! Same-padded 2-D convolutions on channels-last `[H, W, C]` feature maps.
//!
//! Both ops use the cross-correlation convention and zero padding of
//! `k / 2` on every side, so output extents equal input extents.

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::kernels;
use crate::tensor::{dims3, Tensor};

/// `[H*W, k*k*Cin]` patch matrix, zero outside the image.
fn im2col(x: &[f32], h: usize, w: usize, c: usize, k: usize) -> Vec<f32> {
    let pad = (k / 2) as isize;
    let cols = k * k * c;
    let mut out = vec![0.0f32; h * w * cols];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut out[(y * w + xx) * cols..(y * w + xx + 1) * cols];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let off = (ky * k + kx) * c;
                    dst[off..off + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

fn col2im(cols: &[f32], h: usize, w: usize, c: usize, k: usize) -> Vec<f32> {
    let pad = (k / 2) as isize;
    let width = k * k * c;
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let src = &cols[(y * w + xx) * width..(y * w + xx + 1) * width];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let off = (ky * k + kx) * c;
                    for ch in 0..c {
                        out[dst + ch] += src[off + ch];
                    }
                }
            }
        }
    }
    out
}

fn kernel_size(op: &'static str, w: &Tensor) -> Result<usize> {
    let (k, k2) = match *w.shape() {
        [k, k2, _, _] | [k, k2, _] => (k, k2),
        ref s => return Err(shape_err(op, format!("bad kernel shape {s:?}"))),
    };
    if k != k2 || k % 2 == 0 {
        return Err(shape_err(op, format!("kernel must be odd and square, got {k}x{k2}")));
    }
    Ok(k)
}

impl Tape {
    /// `x[H, W, Cin] (*) w[k, k, Cin, Cout] + b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, cin) = dims3("conv2d", self.value(x))?;
        let wv = self.value(w);
        let k = kernel_size("conv2d", wv)?;
        let [_, _, wcin, cout] = *wv.shape() else {
            return Err(shape_err("conv2d", format!("kernel {:?} is not 4-d", wv.shape())));
        };
        if wcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        if self.value(b).numel() != cout {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} for {cout} output channels", self.shape(b)),
            ));
        }
        let n = h * wd;
        let kk = k * k * cin;
        let cols = im2col(self.value(x).data(), h, wd, cin, k);
        let mut out = kernels::gemm_nn(&cols, wv.data(), n, kk, cout);
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let out = Tensor::new(&[h, wd, cout], out)?;
        let (wshape, bshape) = (self.shape(w).to_vec(), self.shape(b).to_vec());
        self.push("conv2d", out, &[x, w, b], move |g, p, _| {
            let cols = im2col(p[0].data(), h, wd, cin, k);
            let gw = kernels::gemm_tn(&cols, g.data(), kk, n, cout);
            let gcols = kernels::gemm_nt(g.data(), p[1].data(), n, cout, kk);
            let gx = col2im(&gcols, h, wd, cin, k);
            let mut gb = vec![0.0f32; cout];
            for row in g.data().chunks(cout) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![
                Some(Tensor::new(&[h, wd, cin], gx).unwrap()),
                Some(Tensor::new(&wshape, gw).unwrap()),
                Some(Tensor::new(&bshape, gb).unwrap()),
            ]
        })
    }

    /// Depth-wise `x[H, W, C] (*) w[k, k, C] + b[C]`.
    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (h, wd, c) = dims3("dwconv2d", self.value(x))?;
        let wv = self.value(w);
        let k = kernel_size("dwconv2d", wv)?;
        if wv.shape().len() != 3 || wv.shape()[2] != c {
            return Err(shape_err(
                "dwconv2d",
                format!("kernel {:?} for {c} channels", wv.shape()),
            ));
        }
        if self.value(b).numel() != c {
            return Err(shape_err(
                "dwconv2d",
                format!("bias {:?} for {c} channels", self.shape(b)),
            ));
        }
        let pad = (k / 2) as isize;
        let (xd, wdata, bd) = (self.value(x).data(), wv.data(), self.value(b).data());
        let mut out = vec![0.0f32; h * wd * c];
        for y in 0..h {
            for xx in 0..wd {
                let o = &mut out[(y * wd + xx) * c..(y * wd + xx + 1) * c];
                o.copy_from_slice(bd);
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= wd as isize {
                            continue;
                        }
                        let src = &xd[(sy as usize * wd + sx as usize) * c..][..c];
                        let kern = &wdata[(ky * k + kx) * c..][..c];
                        for ch in 0..c {
                            o[ch] += src[ch] * kern[ch];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[h, wd, c], out)?;
        let (wshape, bshape) = (self.shape(w).to_vec(), self.shape(b).to_vec());
        self.push("dwconv2d", out, &[x, w, b], move |g, p, _| {
            let (xd, wdata, gd) = (p[0].data(), p[1].data(), g.data());
            let mut gx = vec![0.0f32; h * wd * c];
            let mut gw = vec![0.0f32; k * k * c];
            let mut gb = vec![0.0f32; c];
            for y in 0..h {
                for xx in 0..wd {
                    let go = &gd[(y * wd + xx) * c..][..c];
                    for ch in 0..c {
                        gb[ch] += go[ch];
                    }
                    for ky in 0..k {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let sx = xx as isize + kx as isize - pad;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            let s = (sy as usize * wd + sx as usize) * c;
                            let kidx = (ky * k + kx) * c;
                            for ch in 0..c {
                                gx[s + ch] += go[ch] * wdata[kidx + ch];
                                gw[kidx + ch] += go[ch] * xd[s + ch];
                            }
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(&[h, wd, c], gx).unwrap()),
                Some(Tensor::new(&wshape, gw).unwrap()),
                Some(Tensor::new(&bshape, gb).unwrap()),
            ]
        })
    }
}
