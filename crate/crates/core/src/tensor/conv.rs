//! Batched grouped 2-D convolution kernels over `(N, C, H, W)` buffers.
//!
//! Two layouts dominate the network: 1×1 channel mixing (lowered to GEMM)
//! and per-channel temporal filtering (`groups == C`, kernel `k×1`). Both
//! have dedicated paths; everything else goes through the direct loop.

use super::{kernels, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }
}

/// `floor((len + 2·pad − kernel) / stride) + 1`, or `None` when the padded
/// input is shorter than the kernel.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: Conv2dSpec,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.padding == (0, 0) && self.spec.groups == 1
    }

    fn is_temporal_depthwise(&self) -> bool {
        self.spec.groups == self.c_in
            && self.c_in == self.c_out
            && self.kw == 1
            && self.spec.padding.1 == 0
            && self.spec.stride.1 == 1
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

/// Gathers the strided sample grid of a 1×1 convolution into a dense buffer.
fn gather_strided<R: Real>(x: &[R], g: &ConvGeom) -> Vec<R> {
    let (sh, sw) = g.spec.stride;
    let mut out = Vec::with_capacity(g.n * g.c_in * g.out_plane());
    for nc in 0..g.n * g.c_in {
        let plane = &x[nc * g.in_plane()..(nc + 1) * g.in_plane()];
        for i in 0..g.ho {
            for j in 0..g.wo {
                out.push(plane[i * sh * g.w + j * sw]);
            }
        }
    }
    out
}

/// Calls `f(out_row, in_row, rows)` for the output rows that tap `k` of a
/// temporal kernel reads inside the input. With unit stride the valid rows
/// form one contiguous run.
fn for_tap_rows(g: &ConvGeom, k: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (sh, ph) = (g.spec.stride.0, g.spec.padding.0);
    // to * sh + k - ph in [0, h)
    let first = ph.saturating_sub(k).div_ceil(sh);
    let last = (g.h + ph).checked_sub(k + 1).map(|m| (m / sh + 1).min(g.ho));
    let Some(end) = last else { return };
    if first >= end {
        return;
    }
    if sh == 1 {
        f(first, first + k - ph, end - first);
    } else {
        for to in first..end {
            f(to, to * sh + k - ph, 1);
        }
    }
}

pub(crate) fn forward<R: Real>(x: &[R], w: &[R], bias: Option<&[R]>, g: &ConvGeom) -> Vec<R> {
    let mut out = vec![R::zero(); g.n * g.c_out * g.out_plane()];
    if g.is_pointwise() {
        let strided = g.spec.stride != (1, 1);
        let gathered;
        let src = if strided {
            gathered = gather_strided(x, g);
            &gathered[..]
        } else {
            x
        };
        let p = g.out_plane();
        for n in 0..g.n {
            R::gemm(
                g.c_out,
                g.c_in,
                p,
                R::one(),
                w,
                (g.c_in as isize, 1),
                &src[n * g.c_in * p..(n + 1) * g.c_in * p],
                (p as isize, 1),
                R::zero(),
                &mut out[n * g.c_out * p..(n + 1) * g.c_out * p],
                (p as isize, 1),
            );
        }
    } else if g.is_temporal_depthwise() {
        for nc in 0..g.n * g.c_in {
            let c = nc % g.c_in;
            let plane = &x[nc * g.in_plane()..(nc + 1) * g.in_plane()];
            let dst = &mut out[nc * g.out_plane()..(nc + 1) * g.out_plane()];
            for k in 0..g.kh {
                let wk = w[c * g.kh + k];
                for_tap_rows(g, k, |to, ti, rows| {
                    let d = &mut dst[to * g.w..(to + rows) * g.w];
                    let s = &plane[ti * g.w..(ti + rows) * g.w];
                    for (o, &v) in d.iter_mut().zip(s) {
                        *o = *o + wk * v;
                    }
                });
            }
        }
    } else {
        direct_forward(x, w, &mut out, g);
    }
    if let Some(b) = bias {
        let p = g.out_plane();
        for (i, chunk) in out.chunks_mut(p).enumerate() {
            let bv = b[i % g.c_out];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    out
}

fn direct_forward<R: Real>(x: &[R], w: &[R], out: &mut [R], g: &ConvGeom) {
    let groups = g.spec.groups;
    let cin_g = g.c_in / groups;
    let cout_g = g.c_out / groups;
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    for n in 0..g.n {
        for co in 0..g.c_out {
            let grp = co / cout_g;
            for oi in 0..g.ho {
                for oj in 0..g.wo {
                    let mut acc = R::zero();
                    for ci in 0..cin_g {
                        let cx = grp * cin_g + ci;
                        for ki in 0..g.kh {
                            let ii = (oi * sh + ki) as isize - ph as isize;
                            if ii < 0 || ii as usize >= g.h {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let jj = (oj * sw + kj) as isize - pw as isize;
                                if jj < 0 || jj as usize >= g.w {
                                    continue;
                                }
                                let xv = x[((n * g.c_in + cx) * g.h + ii as usize) * g.w + jj as usize];
                                let wv = w[((co * cin_g + ci) * g.kh + ki) * g.kw + kj];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    out[((n * g.c_out + co) * g.ho + oi) * g.wo + oj] = acc;
                }
            }
        }
    }
}

pub(crate) struct ConvGrads<R> {
    pub x: Vec<R>,
    pub w: Vec<R>,
    pub bias: Vec<R>,
}

pub(crate) fn backward<R: Real>(gout: &[R], x: &[R], w: &[R], g: &ConvGeom) -> ConvGrads<R> {
    let mut gx = vec![R::zero(); x.len()];
    let mut gw = vec![R::zero(); w.len()];
    let p = g.out_plane();
    let mut gb = vec![R::zero(); g.c_out];
    for (i, chunk) in gout.chunks(p).enumerate() {
        gb[i % g.c_out] = gb[i % g.c_out] + kernels::sum(chunk);
    }
    if g.is_pointwise() {
        let strided = g.spec.stride != (1, 1);
        let gathered;
        let src = if strided {
            gathered = gather_strided(x, g);
            &gathered[..]
        } else {
            x
        };
        let mut gsrc = if strided {
            vec![R::zero(); src.len()]
        } else {
            Vec::new()
        };
        for n in 0..g.n {
            let go = &gout[n * g.c_out * p..(n + 1) * g.c_out * p];
            let xs = &src[n * g.c_in * p..(n + 1) * g.c_in * p];
            // gw += go · xsᵀ
            kernels::add_a_bt(&mut gw, go, xs, g.c_out, g.c_in, p);
            // gx = wᵀ · go
            let dst = if strided {
                &mut gsrc[n * g.c_in * p..(n + 1) * g.c_in * p]
            } else {
                &mut gx[n * g.c_in * p..(n + 1) * g.c_in * p]
            };
            R::gemm(
                g.c_in,
                g.c_out,
                p,
                R::one(),
                w,
                (1, g.c_in as isize),
                go,
                (p as isize, 1),
                R::zero(),
                dst,
                (p as isize, 1),
            );
        }
        if strided {
            let (sh, sw) = g.spec.stride;
            for nc in 0..g.n * g.c_in {
                for i in 0..g.ho {
                    for j in 0..g.wo {
                        gx[nc * g.in_plane() + i * sh * g.w + j * sw] = gsrc[nc * p + i * g.wo + j];
                    }
                }
            }
        }
    } else if g.is_temporal_depthwise() {
        for nc in 0..g.n * g.c_in {
            let c = nc % g.c_in;
            let plane = &x[nc * g.in_plane()..(nc + 1) * g.in_plane()];
            let gplane = &mut gx[nc * g.in_plane()..(nc + 1) * g.in_plane()];
            let go = &gout[nc * p..(nc + 1) * p];
            for k in 0..g.kh {
                let wk = w[c * g.kh + k];
                let mut acc = R::zero();
                for_tap_rows(g, k, |to, ti, rows| {
                    let grow = &go[to * g.w..(to + rows) * g.w];
                    let span = ti * g.w..(ti + rows) * g.w;
                    for (gs, &gv) in gplane[span.clone()].iter_mut().zip(grow) {
                        *gs = *gs + wk * gv;
                    }
                    acc = acc + kernels::dot(grow, &plane[span]);
                });
                gw[c * g.kh + k] = gw[c * g.kh + k] + acc;
            }
        }
    } else {
        direct_backward(gout, x, w, &mut gx, &mut gw, g);
    }
    ConvGrads { x: gx, w: gw, bias: gb }
}

fn direct_backward<R: Real>(gout: &[R], x: &[R], w: &[R], gx: &mut [R], gw: &mut [R], g: &ConvGeom) {
    let groups = g.spec.groups;
    let cin_g = g.c_in / groups;
    let cout_g = g.c_out / groups;
    let (sh, sw) = g.spec.stride;
    let (ph, pw) = g.spec.padding;
    for n in 0..g.n {
        for co in 0..g.c_out {
            let grp = co / cout_g;
            for oi in 0..g.ho {
                for oj in 0..g.wo {
                    let go = gout[((n * g.c_out + co) * g.ho + oi) * g.wo + oj];
                    for ci in 0..cin_g {
                        let cx = grp * cin_g + ci;
                        for ki in 0..g.kh {
                            let ii = (oi * sh + ki) as isize - ph as isize;
                            if ii < 0 || ii as usize >= g.h {
                                continue;
                            }
                            for kj in 0..g.kw {
                                let jj = (oj * sw + kj) as isize - pw as isize;
                                if jj < 0 || jj as usize >= g.w {
                                    continue;
                                }
                                let xi = ((n * g.c_in + cx) * g.h + ii as usize) * g.w + jj as usize;
                                let wi = ((co * cin_g + ci) * g.kh + ki) * g.kw + kj;
                                gx[xi] = gx[xi] + w[wi] * go;
                                gw[wi] = gw[wi] + x[xi] * go;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(n: usize, c_in: usize, h: usize, w: usize, c_out: usize, kh: usize, kw: usize, spec: Conv2dSpec) -> ConvGeom {
        ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            ho: conv_output_len(h, kh, spec.stride.0, spec.padding.0).unwrap(),
            wo: conv_output_len(w, kw, spec.stride.1, spec.padding.1).unwrap(),
            spec,
        }
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * scale).collect()
    }

    #[test]
    fn output_length_formula() {
        assert_eq!(conv_output_len(16, 5, 2, 2), Some(8));
        assert_eq!(conv_output_len(150, 5, 2, 2), Some(75));
        assert_eq!(conv_output_len(3, 5, 1, 0), None);
    }

    #[test]
    fn fast_paths_agree_with_direct_loops() {
        let cases = [
            geom(2, 3, 6, 4, 5, 1, 1, Conv2dSpec::default()),
            geom(2, 3, 7, 4, 5, 1, 1, Conv2dSpec { stride: (2, 1), ..Default::default() }),
            geom(2, 4, 9, 3, 4, 5, 1, Conv2dSpec { stride: (2, 1), padding: (2, 0), groups: 4 }),
            geom(1, 6, 8, 3, 6, 5, 1, Conv2dSpec { stride: (1, 1), padding: (2, 0), groups: 6 }),
        ];
        for g in cases {
            let x = ramp(g.n * g.c_in * g.h * g.w, 1.0);
            let w = ramp(g.c_out * (g.c_in / g.spec.groups) * g.kh * g.kw, 0.5);
            let fast = forward(&x, &w, None, &g);
            let mut slow = vec![0.0; fast.len()];
            direct_forward(&x, &w, &mut slow, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
            let go = ramp(fast.len(), 0.3);
            let fast_g = backward(&go, &x, &w, &g);
            let mut gx = vec![0.0; x.len()];
            let mut gw = vec![0.0; w.len()];
            direct_backward(&go, &x, &w, &mut gx, &mut gw, &g);
            for (a, b) in fast_g.x.iter().zip(&gx).chain(fast_g.w.iter().zip(&gw)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
