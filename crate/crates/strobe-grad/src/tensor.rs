//! Dense row-major f32 tensors and the raw (non-differentiable) kernels.
//!
//! Shapes are plain `Vec<usize>`; storage is `Arc<Vec<f32>>` so clones are
//! cheap and copy-on-write happens only when a tensor is actually mutated.
//! Everything here is single-threaded and deterministic: every output element
//! is accumulated in a fixed order, so repeated runs produce bit-identical
//! results.

use std::sync::Arc;

/// A dense row-major f32 tensor.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.len() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer of {} elements",
            shape,
            data.len()
        );
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        Tensor::new(shape.to_vec(), vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::new(vec![], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| f(i)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access; clones the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// The single element of a scalar (or any one-element) tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.len(),
            "cannot reshape {:?} to {:?}",
            self.shape,
            shape
        );
        Tensor { shape: shape.to_vec(), data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    /// Elementwise combine of two same-shape tensors.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, c: f32) -> Tensor {
        self.map(|x| x * c)
    }

    /// Sum of all elements, accumulated in f64 for stability.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }
}

/// Shape of the result of broadcasting two same-rank shapes together.
/// Each axis must match or one side must be 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    assert_eq!(a.len(), b.len(), "broadcast requires equal rank: {:?} vs {:?}", a, b);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            assert!(x == y || x == 1 || y == 1, "cannot broadcast {:?} with {:?}", a, b);
            x.max(y)
        })
        .collect()
}

/// Elementwise binary op with same-rank broadcasting.
///
/// The hot path splits the shape at the last axis where either operand
/// broadcasts, so the inner loop runs over a contiguous block with plain
/// slice indexing.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    if a.shape == b.shape {
        return a.zip(b, f);
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape);
    let out_strides = strides_of(&out_shape);
    let sa: Vec<usize> = strides_of(&a.shape)
        .iter()
        .zip(&a.shape)
        .map(|(&st, &d)| if d == 1 { 0 } else { st })
        .collect();
    let sb: Vec<usize> = strides_of(&b.shape)
        .iter()
        .zip(&b.shape)
        .map(|(&st, &d)| if d == 1 { 0 } else { st })
        .collect();

    // Longest suffix over which both operands are contiguous and full-size:
    // that suffix becomes the inner loop.
    let rank = out_shape.len();
    let mut split = rank;
    let mut run = 1usize;
    while split > 0 {
        let ax = split - 1;
        if a.shape[ax] == out_shape[ax]
            && b.shape[ax] == out_shape[ax]
            && sa[ax] == out_strides[ax]
            && sb[ax] == out_strides[ax]
        {
            run *= out_shape[ax];
            split -= 1;
        } else {
            break;
        }
    }

    let n: usize = out_shape.iter().product();
    let mut out = vec![0.0f32; n];
    let ad = a.data();
    let bd = b.data();
    let mut idx = vec![0usize; split];
    let mut pos = 0usize;
    while pos < n {
        let mut oa = 0usize;
        let mut ob = 0usize;
        for (ax, &i) in idx.iter().enumerate() {
            oa += sa[ax] * i;
            ob += sb[ax] * i;
        }
        if run > 1 {
            // Both operands stride 1 over the suffix.
            let av = &ad[oa..oa + run];
            let bv = &bd[ob..ob + run];
            for k in 0..run {
                out[pos + k] = f(av[k], bv[k]);
            }
        } else {
            // Inner axes may still broadcast; fall back to per-element strides
            // over the last axis only when run == 1 by treating each element.
            out[pos] = f(ad[oa], bd[ob]);
        }
        pos += run;
        // Increment the outer multi-index.
        let mut ax = split;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
        if split == 0 {
            break;
        }
    }
    Tensor::new(out_shape, out)
}

/// Sum over `axes`, keeping reduced axes as size 1.
pub fn sum_axes(x: &Tensor, axes: &[usize]) -> Tensor {
    let mut out_shape = x.shape().to_vec();
    for &ax in axes {
        assert!(ax < out_shape.len(), "sum axis {} out of range for {:?}", ax, x.shape());
        out_shape[ax] = 1;
    }
    let in_strides = strides_of(x.shape());
    let out_strides = strides_of(&out_shape);
    // Stride map: reduced axes contribute 0 to the output offset.
    let map: Vec<usize> = out_strides
        .iter()
        .zip(&out_shape)
        .map(|(&st, &d)| if d == 1 { 0 } else { st })
        .collect();

    let mut out = vec![0.0f32; out_shape.iter().product()];
    let xd = x.data();

    // Fast path: all reduced axes form a contiguous suffix.
    let rank = x.rank();
    let mut suffix = rank;
    while suffix > 0 && out_shape[suffix - 1] == 1 && x.shape()[suffix - 1] != 1 {
        suffix -= 1;
    }
    let suffix_only = (0..suffix).all(|ax| out_shape[ax] == x.shape()[ax]);
    if suffix_only {
        let run: usize = x.shape()[suffix..].iter().product();
        for (o, chunk) in out.iter_mut().zip(xd.chunks_exact(run.max(1))) {
            let mut acc = 0.0f32;
            for &v in chunk {
                acc += v;
            }
            *o = acc;
        }
        return Tensor::new(out_shape, out);
    }

    let mut idx = vec![0usize; rank];
    for &v in xd {
        let mut off = 0usize;
        for (ax, &i) in idx.iter().enumerate() {
            off += map[ax] * i;
        }
        out[off] += v;
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < x.shape()[ax] {
                break;
            }
            idx[ax] = 0;
        }
        let _ = in_strides;
    }
    Tensor::new(out_shape, out)
}

/// Broadcast `x` (same rank, axes of size 1 or matching) up to `shape`.
pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Tensor {
    if x.shape() == shape {
        return x.clone();
    }
    broadcast_zip(&Tensor::zeros(shape), x, |_, b| b)
}

/// (m,k) x (k,n) -> (m,n) via the GEMM backend.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 2, "matmul lhs must be rank 2, got {:?}", a.shape());
    assert_eq!(b.rank(), 2, "matmul rhs must be rank 2, got {:?}", b.shape());
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    assert_eq!(k, k2, "matmul inner dims: {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![0.0f32; m * n];
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose2(x: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 2, "transpose2 needs rank 2, got {:?}", x.shape());
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = xd[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, zero padding) on (N, C, T, H, W) tensors.
// ---------------------------------------------------------------------------

fn conv_out_dim(d: usize, k: usize, p: usize) -> usize {
    d + 2 * p + 1 - k
}

/// Unfold one sample into a (C*kt*kh*kw, To*Ho*Wo) column matrix.
fn im2col(
    x: &[f32],
    c: usize,
    dims: [usize; 3],
    k: [usize; 3],
    p: [usize; 3],
    col: &mut [f32],
) {
    let [t, h, w] = dims;
    let [kt, kh, kw] = k;
    let (to, ho, wo) = (
        conv_out_dim(t, kt, p[0]),
        conv_out_dim(h, kh, p[1]),
        conv_out_dim(w, kw, p[2]),
    );
    let ncols = to * ho * wo;
    let mut row = 0usize;
    for ci in 0..c {
        let base_c = ci * t * h * w;
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    let mut col_idx = 0usize;
                    for ot in 0..to {
                        let it = (ot + dt).wrapping_sub(p[0]);
                        let t_ok = it < t;
                        for oh in 0..ho {
                            let ih = (oh + dh).wrapping_sub(p[1]);
                            let h_ok = ih < h;
                            if t_ok && h_ok {
                                let src_base = base_c + (it * h + ih) * w;
                                for ow in 0..wo {
                                    let iw = (ow + dw).wrapping_sub(p[2]);
                                    dst[col_idx + ow] =
                                        if iw < w { x[src_base + iw] } else { 0.0 };
                                }
                            } else {
                                dst[col_idx..col_idx + wo].fill(0.0);
                            }
                            col_idx += wo;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// 3-D convolution, stride 1: x (N,Ci,T,H,W), w (Co,Ci,kt,kh,kw) -> (N,Co,To,Ho,Wo).
pub fn conv3d(x: &Tensor, w: &Tensor, pad: [usize; 3]) -> Tensor {
    assert_eq!(x.rank(), 5, "conv3d input must be rank 5, got {:?}", x.shape());
    assert_eq!(w.rank(), 5, "conv3d weight must be rank 5, got {:?}", w.shape());
    let (n, ci) = (x.shape()[0], x.shape()[1]);
    let dims = [x.shape()[2], x.shape()[3], x.shape()[4]];
    let (co, ci2) = (w.shape()[0], w.shape()[1]);
    let k = [w.shape()[2], w.shape()[3], w.shape()[4]];
    assert_eq!(ci, ci2, "conv3d channels: input {:?} vs weight {:?}", x.shape(), w.shape());
    let (to, ho, wo) = (
        conv_out_dim(dims[0], k[0], pad[0]),
        conv_out_dim(dims[1], k[1], pad[1]),
        conv_out_dim(dims[2], k[2], pad[2]),
    );
    let krows = ci * k[0] * k[1] * k[2];
    let ncols = to * ho * wo;
    let mut col = vec![0.0f32; krows * ncols];
    let mut out = vec![0.0f32; n * co * ncols];
    let sample = dims[0] * dims[1] * dims[2] * ci;
    for i in 0..n {
        im2col(&x.data()[i * sample..(i + 1) * sample], ci, dims, k, pad, &mut col);
        unsafe {
            matrixmultiply::sgemm(
                co,
                krows,
                ncols,
                1.0,
                w.data().as_ptr(),
                krows as isize,
                1,
                col.as_ptr(),
                ncols as isize,
                1,
                0.0,
                out[i * co * ncols..].as_mut_ptr(),
                ncols as isize,
                1,
            );
        }
    }
    Tensor::new(vec![n, co, to, ho, wo], out)
}

/// Gradient of conv3d w.r.t. the weight: x (N,Ci,T,H,W), gy (N,Co,To,Ho,Wo)
/// -> (Co,Ci,kt,kh,kw). Accumulates over the batch in index order.
pub fn conv3d_grad_weight(x: &Tensor, gy: &Tensor, k: [usize; 3], pad: [usize; 3]) -> Tensor {
    let (n, ci) = (x.shape()[0], x.shape()[1]);
    let dims = [x.shape()[2], x.shape()[3], x.shape()[4]];
    let co = gy.shape()[1];
    assert_eq!(gy.shape()[0], n, "conv3d_grad_weight batch mismatch");
    let ncols = gy.shape()[2] * gy.shape()[3] * gy.shape()[4];
    let krows = ci * k[0] * k[1] * k[2];
    let mut col = vec![0.0f32; krows * ncols];
    let mut gw = vec![0.0f32; co * krows];
    let sample = dims[0] * dims[1] * dims[2] * ci;
    for i in 0..n {
        im2col(&x.data()[i * sample..(i + 1) * sample], ci, dims, k, pad, &mut col);
        unsafe {
            // gw += gy_i (co x ncols) * col^T (ncols x krows)
            matrixmultiply::sgemm(
                co,
                ncols,
                krows,
                1.0,
                gy.data()[i * co * ncols..].as_ptr(),
                ncols as isize,
                1,
                col.as_ptr(),
                1,
                ncols as isize,
                1.0,
                gw.as_mut_ptr(),
                krows as isize,
                1,
            );
        }
    }
    Tensor::new(vec![co, ci, k[0], k[1], k[2]], gw)
}

/// Swap the in/out channel axes of a conv weight and reverse its kernel axes.
/// Convolving an output gradient with this produces the input gradient.
pub fn flip_kernel(w: &Tensor) -> Tensor {
    assert_eq!(w.rank(), 5, "flip_kernel needs rank 5, got {:?}", w.shape());
    let (co, ci) = (w.shape()[0], w.shape()[1]);
    let [kt, kh, kw] = [w.shape()[2], w.shape()[3], w.shape()[4]];
    let wd = w.data();
    let mut out = vec![0.0f32; wd.len()];
    for o in 0..co {
        for i in 0..ci {
            for a in 0..kt {
                for b in 0..kh {
                    for c in 0..kw {
                        let src = ((((o * ci) + i) * kt + a) * kh + b) * kw + c;
                        let dst = ((((i * co) + o) * kt + (kt - 1 - a)) * kh + (kh - 1 - b)) * kw
                            + (kw - 1 - c);
                        out[dst] = wd[src];
                    }
                }
            }
        }
    }
    Tensor::new(vec![ci, co, kt, kh, kw], out)
}

// ---------------------------------------------------------------------------
// Pooling / unpooling on (N, C, T, H, W).
// ---------------------------------------------------------------------------

/// Output length of one pooled axis: factor 2 halves with ceil (odd axes are
/// zero-padded on the left), factor 1 is a no-op.
pub fn pool_out_dim(d: usize, f: usize) -> usize {
    match f {
        1 => d,
        2 => (d + 1) / 2,
        _ => panic!("pool factor must be 1 or 2, got {}", f),
    }
}

/// Average pooling with window == stride == factor per axis. Odd axes are
/// zero-padded on the left and the divisor always includes padded cells.
pub fn avg_pool3d(x: &Tensor, f: [usize; 3]) -> Tensor {
    assert_eq!(x.rank(), 5, "avg_pool3d needs rank 5, got {:?}", x.shape());
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let dims = [x.shape()[2], x.shape()[3], x.shape()[4]];
    let od = [
        pool_out_dim(dims[0], f[0]),
        pool_out_dim(dims[1], f[1]),
        pool_out_dim(dims[2], f[2]),
    ];
    // Left zero-pad of 1 on odd axes being halved.
    let off = [
        (f[0] == 2 && dims[0] % 2 == 1) as usize,
        (f[1] == 2 && dims[1] % 2 == 1) as usize,
        (f[2] == 2 && dims[2] % 2 == 1) as usize,
    ];
    let divisor = (f[0] * f[1] * f[2]) as f32;
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * od[0] * od[1] * od[2]];
    let mut oi = 0usize;
    for nc in 0..n * c {
        let base = nc * dims[0] * dims[1] * dims[2];
        for ot in 0..od[0] {
            for oh in 0..od[1] {
                for ow in 0..od[2] {
                    let mut acc = 0.0f32;
                    for dt in 0..f[0] {
                        let it = (ot * f[0] + dt).wrapping_sub(off[0]);
                        if it >= dims[0] {
                            continue;
                        }
                        for dh in 0..f[1] {
                            let ih = (oh * f[1] + dh).wrapping_sub(off[1]);
                            if ih >= dims[1] {
                                continue;
                            }
                            for dw in 0..f[2] {
                                let iw = (ow * f[2] + dw).wrapping_sub(off[2]);
                                if iw >= dims[2] {
                                    continue;
                                }
                                acc += xd[base + (it * dims[1] + ih) * dims[2] + iw];
                            }
                        }
                    }
                    out[oi] = acc / divisor;
                    oi += 1;
                }
            }
        }
    }
    Tensor::new(vec![n, c, od[0], od[1], od[2]], out)
}

/// Adjoint of `avg_pool3d` scaled the same way: spreads each pooled-grid value
/// divided by the window size back over its window. `in_dims` are the
/// original (pre-pool) T,H,W.
pub fn avg_unpool3d(g: &Tensor, f: [usize; 3], in_dims: [usize; 3]) -> Tensor {
    assert_eq!(g.rank(), 5, "avg_unpool3d needs rank 5, got {:?}", g.shape());
    let (n, c) = (g.shape()[0], g.shape()[1]);
    let od = [g.shape()[2], g.shape()[3], g.shape()[4]];
    assert_eq!(
        [pool_out_dim(in_dims[0], f[0]), pool_out_dim(in_dims[1], f[1]), pool_out_dim(in_dims[2], f[2])],
        od,
        "avg_unpool3d: grid {:?} does not match pooling {:?} of {:?}",
        od,
        f,
        in_dims
    );
    let off = [
        (f[0] == 2 && in_dims[0] % 2 == 1) as usize,
        (f[1] == 2 && in_dims[1] % 2 == 1) as usize,
        (f[2] == 2 && in_dims[2] % 2 == 1) as usize,
    ];
    let divisor = (f[0] * f[1] * f[2]) as f32;
    let gd = g.data();
    let mut out = vec![0.0f32; n * c * in_dims[0] * in_dims[1] * in_dims[2]];
    for nc in 0..n * c {
        let gbase = nc * od[0] * od[1] * od[2];
        let obase = nc * in_dims[0] * in_dims[1] * in_dims[2];
        for it in 0..in_dims[0] {
            let ot = (it + off[0]) / f[0];
            for ih in 0..in_dims[1] {
                let oh = (ih + off[1]) / f[1];
                let row = obase + (it * in_dims[1] + ih) * in_dims[2];
                let grow = gbase + (ot * od[1] + oh) * od[2];
                for iw in 0..in_dims[2] {
                    let ow = (iw + off[2]) / f[2];
                    out[row + iw] = gd[grow + ow] / divisor;
                }
            }
        }
    }
    Tensor::new(vec![n, c, in_dims[0], in_dims[1], in_dims[2]], out)
}

/// Nearest-neighbour 2x spatial upsampling: (N,C,T,H,W) -> (N,C,T,2H,2W).
pub fn unpool2x(x: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 5, "unpool2x needs rank 5, got {:?}", x.shape());
    let (n, c, t, h, w) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * t * 4 * h * w];
    let ow = 2 * w;
    for nct in 0..n * c * t {
        let ibase = nct * h * w;
        let obase = nct * 4 * h * w;
        for ih in 0..h {
            let src = &xd[ibase + ih * w..ibase + (ih + 1) * w];
            for dh in 0..2 {
                let row = obase + (2 * ih + dh) * ow;
                for iw in 0..w {
                    out[row + 2 * iw] = src[iw];
                    out[row + 2 * iw + 1] = src[iw];
                }
            }
        }
    }
    Tensor::new(vec![n, c, t, 2 * h, 2 * w], out)
}

/// Adjoint of `unpool2x`: sums each 2x2 spatial window. (…,2H,2W) -> (…,H,W).
pub fn sum_pool2x(x: &Tensor) -> Tensor {
    assert_eq!(x.rank(), 5, "sum_pool2x needs rank 5, got {:?}", x.shape());
    let (n, c, t, h2, w2) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    assert!(h2 % 2 == 0 && w2 % 2 == 0, "sum_pool2x needs even H,W, got {:?}", x.shape());
    let (h, w) = (h2 / 2, w2 / 2);
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * t * h * w];
    for nct in 0..n * c * t {
        let ibase = nct * h2 * w2;
        let obase = nct * h * w;
        for oh in 0..h {
            let r0 = ibase + (2 * oh) * w2;
            let r1 = ibase + (2 * oh + 1) * w2;
            for ow in 0..w {
                out[obase + oh * w + ow] =
                    xd[r0 + 2 * ow] + xd[r0 + 2 * ow + 1] + xd[r1 + 2 * ow] + xd[r1 + 2 * ow + 1];
            }
        }
    }
    Tensor::new(vec![n, c, t, h, w], out)
}

// ---------------------------------------------------------------------------
// Indexing.
// ---------------------------------------------------------------------------

/// Gather slices along `axis` at the given indices (repeats allowed).
pub fn index_select(x: &Tensor, axis: usize, idx: &[usize]) -> Tensor {
    assert!(axis < x.rank(), "index_select axis {} out of range for {:?}", axis, x.shape());
    let d = x.shape()[axis];
    for &i in idx {
        assert!(i < d, "index {} out of range for axis of size {}", i, d);
    }
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[axis] = idx.len();
    let xd = x.data();
    let mut out = vec![0.0f32; outer * idx.len() * inner];
    for o in 0..outer {
        for (j, &i) in idx.iter().enumerate() {
            let src = (o * d + i) * inner;
            let dst = (o * idx.len() + j) * inner;
            out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
        }
    }
    Tensor::new(shape, out)
}

/// Scatter-add slices of `src` along `axis` into a zero tensor whose `axis`
/// has length `out_len`. Adjoint of `index_select`; repeated indices
/// accumulate in order.
pub fn index_scatter_add(src: &Tensor, axis: usize, idx: &[usize], out_len: usize) -> Tensor {
    assert!(axis < src.rank());
    assert_eq!(src.shape()[axis], idx.len(), "index count mismatch");
    let outer: usize = src.shape()[..axis].iter().product();
    let inner: usize = src.shape()[axis + 1..].iter().product();
    let mut shape = src.shape().to_vec();
    shape[axis] = out_len;
    let sd = src.data();
    let mut out = vec![0.0f32; outer * out_len * inner];
    for o in 0..outer {
        for (j, &i) in idx.iter().enumerate() {
            assert!(i < out_len, "scatter index {} out of range {}", i, out_len);
            let src_off = (o * idx.len() + j) * inner;
            let dst_off = (o * out_len + i) * inner;
            for k in 0..inner {
                out[dst_off + k] += sd[src_off + k];
            }
        }
    }
    Tensor::new(shape, out)
}

/// Concatenate along `axis`; all other axes must match.
pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let rank = parts[0].rank();
    assert!(axis < rank);
    let mut shape = parts[0].shape().to_vec();
    let mut total = 0usize;
    for p in parts {
        assert_eq!(p.rank(), rank, "concat rank mismatch");
        for ax in 0..rank {
            if ax != axis {
                assert_eq!(p.shape()[ax], shape[ax], "concat shape mismatch on axis {}", ax);
            }
        }
        total += p.shape()[axis];
    }
    shape[axis] = total;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0f32; outer * total * inner];
    for o in 0..outer {
        let mut at = 0usize;
        for p in parts {
            let d = p.shape()[axis];
            let src = &p.data()[o * d * inner..(o + 1) * d * inner];
            let dst_off = (o * total + at) * inner;
            out[dst_off..dst_off + d * inner].copy_from_slice(src);
            at += d;
        }
    }
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known_product() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn conv3d_identity_kernel_passes_input_through() {
        let x = Tensor::from_fn(&[1, 1, 2, 3, 3], |i| i as f32);
        let mut w = Tensor::zeros(&[1, 1, 1, 3, 3]);
        w.data_mut()[4] = 1.0; // centre tap
        let y = conv3d(&x, &w, [0, 1, 1]);
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv3d_matches_direct_loop() {
        // Brute-force reference over a small asymmetric case.
        let x = Tensor::from_fn(&[2, 2, 3, 4, 5], |i| ((i * 37 % 23) as f32) / 7.0 - 1.0);
        let w = Tensor::from_fn(&[3, 2, 3, 3, 3], |i| ((i * 17 % 19) as f32) / 9.0 - 1.0);
        let y = conv3d(&x, &w, [1, 1, 1]);
        let (n, ci, t, h, wd) = (2, 2, 3, 4, 5);
        let co = 3;
        for ni in 0..n {
            for o in 0..co {
                for ot in 0..t {
                    for oh in 0..h {
                        for ow in 0..wd {
                            let mut acc = 0.0f32;
                            for c in 0..ci {
                                for a in 0..3usize {
                                    for b in 0..3usize {
                                        for e in 0..3usize {
                                            let it = (ot + a).wrapping_sub(1);
                                            let ih = (oh + b).wrapping_sub(1);
                                            let iw = (ow + e).wrapping_sub(1);
                                            if it < t && ih < h && iw < wd {
                                                let xi = (((ni * ci + c) * t + it) * h + ih) * wd
                                                    + iw;
                                                let wi =
                                                    (((o * ci + c) * 3 + a) * 3 + b) * 3 + e;
                                                acc += x.data()[xi] * w.data()[wi];
                                            }
                                        }
                                    }
                                }
                            }
                            let yi = (((ni * co + o) * t + ot) * h + oh) * wd + ow;
                            assert!(
                                (y.data()[yi] - acc).abs() < 1e-4,
                                "mismatch at {}: {} vs {}",
                                yi,
                                y.data()[yi],
                                acc
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn avg_pool_even_axis_averages_pairs() {
        let x = Tensor::new(vec![1, 1, 1, 1, 4], vec![1.0, 3.0, 5.0, 7.0]);
        let y = avg_pool3d(&x, [1, 1, 2]);
        assert_eq!(y.shape(), &[1, 1, 1, 1, 2]);
        assert_eq!(y.data(), &[2.0, 6.0]);
    }

    #[test]
    fn avg_pool_odd_axis_pads_left_with_zero() {
        let x = Tensor::new(vec![1, 1, 1, 1, 3], vec![2.0, 4.0, 6.0]);
        let y = avg_pool3d(&x, [1, 1, 2]);
        // Windows: [pad, 2] and [4, 6], divisor 2.
        assert_eq!(y.data(), &[1.0, 5.0]);
    }

    #[test]
    fn avg_unpool_is_adjoint_of_avg_pool() {
        // <pool(x), g> must equal <x, unpool(g)> for the pair to be a valid
        // linear-map/adjoint pair.
        let x = Tensor::from_fn(&[1, 2, 3, 5, 4], |i| (i as f32).sin());
        let f = [2, 2, 2];
        let y = avg_pool3d(&x, f);
        let g = Tensor::from_fn(y.shape(), |i| (i as f32 * 0.7).cos());
        let gx = avg_unpool3d(&g, f, [3, 5, 4]);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(&a, &b)| (a * b) as f64).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(&a, &b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-5, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn unpool_and_sum_pool_are_adjoint() {
        let x = Tensor::from_fn(&[2, 1, 2, 3, 3], |i| (i as f32) * 0.1);
        let y = unpool2x(&x);
        assert_eq!(y.shape(), &[2, 1, 2, 6, 6]);
        let g = Tensor::from_fn(y.shape(), |i| ((i % 7) as f32) - 3.0);
        let gx = sum_pool2x(&g);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(&a, &b)| (a * b) as f64).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(&a, &b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn index_select_then_scatter_restores_positions() {
        let x = Tensor::from_fn(&[1, 1, 6, 1, 1], |i| i as f32);
        let sel = index_select(&x, 2, &[1, 3, 5]);
        assert_eq!(sel.data(), &[1.0, 3.0, 5.0]);
        let back = index_scatter_add(&sel, 2, &[1, 3, 5], 6);
        assert_eq!(back.data(), &[0.0, 1.0, 0.0, 3.0, 0.0, 5.0]);
    }

    #[test]
    fn broadcast_zip_channel_vector_over_feature_map() {
        let x = Tensor::full(&[2, 3, 1, 2, 2], 1.0);
        let b = Tensor::new(vec![1, 3, 1, 1, 1], vec![10.0, 20.0, 30.0]);
        let y = broadcast_zip(&x, &b, |a, b| a + b);
        assert_eq!(y.shape(), &[2, 3, 1, 2, 2]);
        assert_eq!(y.data()[0..4], [11.0; 4]);
        assert_eq!(y.data()[4..8], [21.0; 4]);
        assert_eq!(y.data()[8..12], [31.0; 4]);
    }

    #[test]
    fn sum_axes_keeps_rank_and_matches_manual_totals() {
        let x = Tensor::from_fn(&[2, 3, 2, 1, 1], |i| i as f32);
        let s = sum_axes(&x, &[0, 2, 3, 4]);
        assert_eq!(s.shape(), &[1, 3, 1, 1, 1]);
        // Channel c sums x[n,c,t] over n,t: indices per channel.
        assert_eq!(s.data(), &[(0 + 1 + 6 + 7) as f32, (2 + 3 + 8 + 9) as f32, (4 + 5 + 10 + 11) as f32]);
    }

    #[test]
    fn flip_kernel_is_an_involution_up_to_channel_swap() {
        let w = Tensor::from_fn(&[2, 3, 1, 3, 3], |i| i as f32);
        let f = flip_kernel(&w);
        assert_eq!(f.shape(), &[3, 2, 1, 3, 3]);
        let ff = flip_kernel(&f);
        assert_eq!(ff.shape(), w.shape());
        assert_eq!(ff.data(), w.data());
    }

    #[test]
    fn concat_along_channel_axis() {
        let a = Tensor::full(&[1, 2, 1, 1, 2], 1.0);
        let b = Tensor::full(&[1, 1, 1, 1, 2], 2.0);
        let y = concat(&[&a, &b], 1);
        assert_eq!(y.shape(), &[1, 3, 1, 1, 2]);
        assert_eq!(y.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
