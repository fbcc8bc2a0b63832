//! Building blocks of the network: convolutions, instance normalization,
//! pooling, bilinear upsampling and the per-pixel softmax.
//!
//! Every layer exposes an explicit `forward` that returns its output plus a
//! cache, and a `backward` that consumes the cache, accumulates parameter
//! gradients into a flat gradient buffer and returns the gradient with
//! respect to its input. Parameters live in one flat `Vec<f64>` owned by the
//! network; layers only hold offsets into it.

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Shape and location of one named parameter tensor in the flat buffer.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Accumulates parameters during network construction.
pub struct NetBuilder<R: Rng> {
    pub params: Vec<f64>,
    pub specs: Vec<ParamSpec>,
    pub rng: R,
}

impl<R: Rng> NetBuilder<R> {
    pub fn new(rng: R) -> Self {
        NetBuilder {
            params: Vec::new(),
            specs: Vec::new(),
            rng,
        }
    }

    fn reserve(&mut self, name: String, shape: &[usize], values: Vec<f64>) -> usize {
        let len: usize = shape.iter().product();
        debug_assert_eq!(len, values.len());
        let offset = self.params.len();
        self.params.extend_from_slice(&values);
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            offset,
            len,
        });
        offset
    }
}

/// 2D convolution, stride 1. Kernel size 3 uses zero padding 1 so spatial
/// size is preserved; kernel size 1 is a plain channel mix.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    w_off: usize,
    b_off: usize,
}

pub struct ConvCache {
    // im2col matrix for k=3, the flattened input for k=1
    cols: Array2<f64>,
    h: usize,
    w: usize,
}

impl Conv2d {
    /// Kaiming fan-in initialization for the weights, zero bias.
    pub fn new<R: Rng>(
        b: &mut NetBuilder<R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
    ) -> Self {
        assert!(
            ksize == 1 || ksize == 3,
            "only 1x1 and 3x3 kernels are used"
        );
        let fan_in = in_ch * ksize * ksize;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid normal");
        let w: Vec<f64> = (0..out_ch * fan_in)
            .map(|_| normal.sample(&mut b.rng))
            .collect();
        let w_off = b.reserve(format!("{name}.weight"), &[out_ch, in_ch, ksize, ksize], w);
        let b_off = b.reserve(format!("{name}.bias"), &[out_ch], vec![0.0; out_ch]);
        Conv2d {
            in_ch,
            out_ch,
            ksize,
            w_off,
            b_off,
        }
    }

    fn weight<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        let k2 = self.ksize * self.ksize;
        ArrayView2::from_shape(
            (self.out_ch, self.in_ch * k2),
            &p[self.w_off..self.w_off + self.out_ch * self.in_ch * k2],
        )
        .expect("contiguous weight")
    }

    pub fn forward(&self, p: &[f64], x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let cols = if self.ksize == 3 {
            im2col3(x)
        } else {
            x.to_shape((c, h * w)).expect("contiguous").to_owned()
        };
        let mut out = self.weight(p).dot(&cols); // (out_ch, h*w)
        let bias = &p[self.b_off..self.b_off + self.out_ch];
        for (o, mut row) in out.rows_mut().into_iter().enumerate() {
            row += bias[o];
        }
        let out = out
            .into_shape_with_order((self.out_ch, h, w))
            .expect("reshape");
        (out, ConvCache { cols, h, w })
    }

    /// Accumulates weight/bias gradients into `g` and returns dL/dx.
    pub fn backward(
        &self,
        p: &[f64],
        cache: &ConvCache,
        grad_out: &Array3<f64>,
        g: &mut [f64],
    ) -> Array3<f64> {
        let (oc, h, w) = grad_out.dim();
        debug_assert_eq!(oc, self.out_ch);
        let go = grad_out.to_shape((oc, h * w)).expect("contiguous");

        let dw = go.dot(&cache.cols.t()); // (out_ch, in_ch*k2)
        let k2 = self.ksize * self.ksize;
        let wlen = self.out_ch * self.in_ch * k2;
        let dwslice = dw.as_slice().expect("contiguous");
        for (dst, src) in g[self.w_off..self.w_off + wlen].iter_mut().zip(dwslice) {
            *dst += *src;
        }
        for o in 0..self.out_ch {
            g[self.b_off + o] += go.row(o).sum();
        }

        let dcols = self.weight(p).t().dot(&go); // (in_ch*k2, h*w)
        if self.ksize == 3 {
            col2im3(&dcols, self.in_ch, cache.h, cache.w)
        } else {
            dcols
                .into_shape_with_order((self.in_ch, cache.h, cache.w))
                .expect("reshape")
        }
    }
}

/// Column matrix layout: row `c*9 + ky*3 + kx`, column `y*w + x` holds
/// input pixel `(c, y+ky-1, x+kx-1)`, zero outside the image.
fn im2col3(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * 9, h * w));
    let xs = x.as_slice().expect("contiguous input");
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let (oy0, oy1) = if ky == 0 {
                (1, h)
            } else if ky == 2 {
                (0, h - 1)
            } else {
                (0, h)
            };
            for kx in 0..3 {
                let (ox0, ox1) = if kx == 0 {
                    (1, w)
                } else if kx == 2 {
                    (0, w - 1)
                } else {
                    (0, w)
                };
                let row = ci * 9 + ky * 3 + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("contiguous row");
                for oy in oy0..oy1 {
                    let iy = oy + ky - 1;
                    let src = &plane[iy * w + (ox0 + kx - 1)..iy * w + (ox1 + kx - 1)];
                    dst[oy * w + ox0..oy * w + ox1].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

/// Transpose of `im2col3`: scatters column gradients back onto the image.
fn col2im3(dcols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((c, h, w));
    let out = dx.as_slice_mut().expect("contiguous");
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let (oy0, oy1) = if ky == 0 {
                (1, h)
            } else if ky == 2 {
                (0, h - 1)
            } else {
                (0, h)
            };
            for kx in 0..3 {
                let (ox0, ox1) = if kx == 0 {
                    (1, w)
                } else if kx == 2 {
                    (0, w - 1)
                } else {
                    (0, w)
                };
                let row = dcols.row(ci * 9 + ky * 3 + kx);
                let src = row.as_slice().expect("contiguous row");
                for oy in oy0..oy1 {
                    let iy = oy + ky - 1;
                    let dsts = &mut plane[iy * w + (ox0 + kx - 1)..iy * w + (ox1 + kx - 1)];
                    for (d, s) in dsts.iter_mut().zip(&src[oy * w + ox0..oy * w + ox1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
    dx
}

/// Per-sample, per-channel normalization over the spatial dimensions with a
/// learnable affine transform.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub ch: usize,
    pub eps: f64,
    gamma_off: usize,
    beta_off: usize,
}

pub struct NormCache {
    xhat: Array3<f64>,
    inv_std: Array1<f64>,
}

impl InstanceNorm {
    pub fn new<R: Rng>(b: &mut NetBuilder<R>, name: &str, ch: usize, eps: f64) -> Self {
        let gamma_off = b.reserve(format!("{name}.gamma"), &[ch], vec![1.0; ch]);
        let beta_off = b.reserve(format!("{name}.beta"), &[ch], vec![0.0; ch]);
        InstanceNorm {
            ch,
            eps,
            gamma_off,
            beta_off,
        }
    }

    pub fn forward(&self, p: &[f64], x: &Array3<f64>) -> (Array3<f64>, NormCache) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.ch);
        let m = (h * w) as f64;
        let mut xhat = Array3::<f64>::zeros((c, h, w));
        let mut inv_std = Array1::<f64>::zeros(c);
        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            let plane = x.slice(s![ci, .., ..]);
            let mean = plane.sum() / m;
            let var = plane.mapv(|v| (v - mean) * (v - mean)).sum() / m;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = istd;
            let gamma = p[self.gamma_off + ci];
            let beta = p[self.beta_off + ci];
            let mut xh = xhat.slice_mut(s![ci, .., ..]);
            let mut o = out.slice_mut(s![ci, .., ..]);
            for ((xv, xh), o) in plane.iter().zip(xh.iter_mut()).zip(o.iter_mut()) {
                let n = (*xv - mean) * istd;
                *xh = n;
                *o = gamma * n + beta;
            }
        }
        (out, NormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        p: &[f64],
        cache: &NormCache,
        grad_out: &Array3<f64>,
        g: &mut [f64],
    ) -> Array3<f64> {
        let (c, h, w) = grad_out.dim();
        let m = (h * w) as f64;
        let mut dx = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            let dy = grad_out.slice(s![ci, .., ..]);
            let xh = cache.xhat.slice(s![ci, .., ..]);
            let sum_dy = dy.sum();
            let sum_dy_xh: f64 = dy.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
            g[self.gamma_off + ci] += sum_dy_xh;
            g[self.beta_off + ci] += sum_dy;
            let gamma = p[self.gamma_off + ci];
            let k = gamma * cache.inv_std[ci];
            let mean_dy = sum_dy / m;
            let mean_dy_xh = sum_dy_xh / m;
            let mut d = dx.slice_mut(s![ci, .., ..]);
            for ((dv, dyv), xhv) in d.iter_mut().zip(dy.iter()).zip(xh.iter()) {
                *dv = k * (*dyv - mean_dy - *xhv * mean_dy_xh);
            }
        }
        dx
    }
}

pub fn relu_forward(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// `out` is the forward output; gradient passes where the output is positive.
pub fn relu_backward(out: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
    let mut dx = grad_out.clone();
    dx.zip_mut_with(out, |d, o| {
        if *o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub struct PoolCache {
    argmax: Vec<usize>, // flat input index per output element
    in_h: usize,
    in_w: usize,
}

/// 2x2 max pooling with stride 2; requires even spatial dimensions. Ties
/// resolve to the first element in row-major scan order.
pub fn maxpool2_forward(x: &Array3<f64>) -> (Array3<f64>, PoolCache) {
    let (c, h, w) = x.dim();
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    let mut argmax = vec![0usize; c * oh * ow];
    let xs = x.as_slice().expect("contiguous");
    for ci in 0..c {
        let plane = &xs[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (2 * oy) * w + 2 * ox;
                let cands = [base, base + 1, base + w, base + w + 1];
                let mut best = cands[0];
                for &i in &cands[1..] {
                    if plane[i] > plane[best] {
                        best = i;
                    }
                }
                out[[ci, oy, ox]] = plane[best];
                argmax[ci * oh * ow + oy * ow + ox] = ci * h * w + best;
            }
        }
    }
    (
        out,
        PoolCache {
            argmax,
            in_h: h,
            in_w: w,
        },
    )
}

pub fn maxpool2_backward(cache: &PoolCache, grad_out: &Array3<f64>) -> Array3<f64> {
    let (c, oh, ow) = grad_out.dim();
    let mut dx = Array3::<f64>::zeros((c, cache.in_h, cache.in_w));
    let d = dx.as_slice_mut().expect("contiguous");
    let go = grad_out.as_slice().expect("contiguous");
    for (i, &src) in cache.argmax.iter().enumerate() {
        d[src] += go[i];
    }
    debug_assert_eq!(go.len(), c * oh * ow);
    dx
}

/// One axis of the factor-2 bilinear map: output index -> two source taps.
fn bilinear_taps(n_in: usize) -> Vec<(usize, usize, f64)> {
    let n_out = 2 * n_in;
    (0..n_out)
        .map(|i| {
            // align_corners = false: src = (i + 0.5) / 2 - 0.5, clamped at 0
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let i0 = i0.min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let t = src - i0 as f64;
            (i0, i1, t)
        })
        .collect()
}

/// Factor-2 bilinear upsampling (align_corners off).
pub fn upsample2_forward(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let ty = bilinear_taps(h);
    let tx = bilinear_taps(w);
    let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        let plane = x.slice(s![ci, .., ..]);
        let mut o = out.slice_mut(s![ci, .., ..]);
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v = (1.0 - wy) * ((1.0 - wx) * plane[[y0, x0]] + wx * plane[[y0, x1]])
                    + wy * ((1.0 - wx) * plane[[y1, x0]] + wx * plane[[y1, x1]]);
                o[[oy, ox]] = v;
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Array3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let (c, _, _) = grad_out.dim();
    let ty = bilinear_taps(in_h);
    let tx = bilinear_taps(in_w);
    let mut dx = Array3::<f64>::zeros((c, in_h, in_w));
    for ci in 0..c {
        let go = grad_out.slice(s![ci, .., ..]);
        let mut d = dx.slice_mut(s![ci, .., ..]);
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let gv = go[[oy, ox]];
                d[[y0, x0]] += (1.0 - wy) * (1.0 - wx) * gv;
                d[[y0, x1]] += (1.0 - wy) * wx * gv;
                d[[y1, x0]] += wy * (1.0 - wx) * gv;
                d[[y1, x1]] += wy * wx * gv;
            }
        }
    }
    dx
}

/// Concatenates two feature maps along the channel axis.
pub fn concat_channels(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
    let (ca, h, w) = a.dim();
    let (cb, hb, wb) = b.dim();
    debug_assert_eq!((h, w), (hb, wb));
    let mut out = Array3::<f64>::zeros((ca + cb, h, w));
    out.slice_mut(s![..ca, .., ..]).assign(a);
    out.slice_mut(s![ca.., .., ..]).assign(b);
    out
}

pub fn split_channels(grad: &Array3<f64>, ca: usize) -> (Array3<f64>, Array3<f64>) {
    (
        grad.slice(s![..ca, .., ..]).to_owned(),
        grad.slice(s![ca.., .., ..]).to_owned(),
    )
}

/// Per-pixel softmax over the channel (class) axis.
pub fn softmax_forward(logits: &Array3<f64>) -> Array3<f64> {
    let (k, h, w) = logits.dim();
    let mut out = Array3::<f64>::zeros((k, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut m = f64::NEG_INFINITY;
            for c in 0..k {
                m = m.max(logits[[c, y, x]]);
            }
            let mut z = 0.0;
            for c in 0..k {
                let e = (logits[[c, y, x]] - m).exp();
                out[[c, y, x]] = e;
                z += e;
            }
            for c in 0..k {
                out[[c, y, x]] /= z;
            }
        }
    }
    out
}

/// dL/dlogits from dL/dprobs using the softmax Jacobian.
pub fn softmax_backward(probs: &Array3<f64>, grad_probs: &Array3<f64>) -> Array3<f64> {
    let (k, h, w) = probs.dim();
    let mut dz = Array3::<f64>::zeros((k, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut dot = 0.0;
            for c in 0..k {
                dot += grad_probs[[c, y, x]] * probs[[c, y, x]];
            }
            for c in 0..k {
                dz[[c, y, x]] = probs[[c, y, x]] * (grad_probs[[c, y, x]] - dot);
            }
        }
    }
    dz
}
