//! Convolution and pooling kernels on raw NCHW buffers.

use super::tensor::Real;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            self.h + 2 * self.pad + 1 - self.k,
            self.w + 2 * self.pad + 1 - self.k,
        )
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }
}

fn im2col<R: Real>(g: &ConvGeom, x: &[R], col: &mut [R]) {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for i in 0..oh {
                    let si = i as isize + ki as isize - g.pad as isize;
                    let line = &mut dst[i * ow..(i + 1) * ow];
                    if si < 0 || si >= g.h as isize {
                        line.fill(R::zero());
                        continue;
                    }
                    let src = &xc[si as usize * g.w..(si as usize + 1) * g.w];
                    for (j, out) in line.iter_mut().enumerate() {
                        let sj = j as isize + kj as isize - g.pad as isize;
                        *out = if sj < 0 || sj >= g.w as isize {
                            R::zero()
                        } else {
                            src[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<R: Real>(g: &ConvGeom, col: &[R], dx: &mut [R]) {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for i in 0..oh {
                    let si = i as isize + ki as isize - g.pad as isize;
                    if si < 0 || si >= g.h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let sj = j as isize + kj as isize - g.pad as isize;
                        if sj < 0 || sj >= g.w as isize {
                            continue;
                        }
                        let d = &mut dxc[si as usize * g.w + sj as usize];
                        *d = *d + src[i * ow + j];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<R: Real>(
    g: &ConvGeom,
    x: &[R],
    weight: &[R],
    bias: Option<&[R]>,
) -> Vec<R> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let rows = g.col_rows();
    let mut col = vec![R::zero(); rows * plane];
    let mut out = vec![R::zero(); g.n * g.o * plane];
    for s in 0..g.n {
        im2col(
            g,
            &x[s * g.c * g.h * g.w..(s + 1) * g.c * g.h * g.w],
            &mut col,
        );
        let y = &mut out[s * g.o * plane..(s + 1) * g.o * plane];
        R::gemm(
            g.o,
            rows,
            plane,
            R::one(),
            weight,
            false,
            &col,
            false,
            R::zero(),
            y,
        );
        if let Some(b) = bias {
            for (o, bo) in b.iter().enumerate() {
                for v in &mut y[o * plane..(o + 1) * plane] {
                    *v = *v + *bo;
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<R> {
    pub dx: Option<Vec<R>>,
    pub dw: Option<Vec<R>>,
    pub db: Option<Vec<R>>,
}

pub(crate) fn conv2d_backward<R: Real>(
    g: &ConvGeom,
    x: &[R],
    weight: &[R],
    dy: &[R],
    want: (bool, bool, bool),
) -> ConvGrads<R> {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    let rows = g.col_rows();
    let chw = g.c * g.h * g.w;
    let mut col = vec![R::zero(); rows * plane];
    let mut dx = want.0.then(|| vec![R::zero(); g.n * chw]);
    let mut dw = want.1.then(|| vec![R::zero(); g.o * rows]);
    let mut db = want.2.then(|| vec![R::zero(); g.o]);
    for s in 0..g.n {
        let dys = &dy[s * g.o * plane..(s + 1) * g.o * plane];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[s * chw..(s + 1) * chw], &mut col);
            R::gemm(
                g.o,
                plane,
                rows,
                R::one(),
                dys,
                false,
                &col,
                true,
                R::one(),
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            R::gemm(
                rows,
                g.o,
                plane,
                R::one(),
                weight,
                true,
                dys,
                false,
                R::zero(),
                &mut col,
            );
            col2im(g, &col, &mut dx[s * chw..(s + 1) * chw]);
        }
        if let Some(db) = db.as_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc = *acc + dys[o * plane..(o + 1) * plane].iter().copied().sum::<R>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// k x k mean pooling over the two trailing axes of `planes` planes.
pub(crate) fn avg_pool<R: Real>(x: &[R], planes: usize, h: usize, w: usize, k: usize) -> Vec<R> {
    let (oh, ow) = (h / k, w / k);
    let inv = R::one() / R::of((k * k) as f64);
    let mut out = vec![R::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            for j in 0..w {
                let o = &mut dst[(i / k) * ow + j / k];
                *o = *o + src[i * w + j] * inv;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool`].
pub(crate) fn avg_pool_backward<R: Real>(
    dy: &[R],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<R> {
    let (oh, ow) = (h / k, w / k);
    let inv = R::one() / R::of((k * k) as f64);
    let mut dx = vec![R::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / k) * ow + j / k] * inv;
            }
        }
    }
    dx
}

/// Nearest-neighbour replication of each pixel into a k x k block.
pub(crate) fn upsample_nearest<R: Real>(
    x: &[R],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<R> {
    let (oh, ow) = (h * k, w * k);
    let mut out = vec![R::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..oh {
            for j in 0..ow {
                dst[i * ow + j] = src[(i / k) * w + j / k];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest`]: block sums.
pub(crate) fn upsample_nearest_backward<R: Real>(
    dy: &[R],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<R> {
    let (oh, ow) = (h * k, w * k);
    let mut dx = vec![R::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let d = &mut dst[(i / k) * w + j / k];
                *d = *d + src[i * ow + j];
            }
        }
    }
    dx
}
