//! Dense tensors on a reverse-mode tape.
//!
//! Nodes are appended in construction order, so the tape itself is a valid
//! topological order and backward is a single reverse sweep. Gradients
//! accumulate additively; callers reset between steps by building a fresh
//! graph (the usual pattern) or via [`Graph::zero_grads`].

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use kernels::{gemm_nn, gemm_nt, gemm_tn, ConvDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>> + Send + Sync>;

struct Node<T: Scalar> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    parents: Vec<TensorId>,
    backward: Option<BackFn<T>>,
    tag: &'static str,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].data.len()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn tag(&self, id: TensorId) -> &'static str {
        self.nodes[id.0].tag
    }

    /// Gradient of `id`, if backward has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
    }

    fn push(
        &mut self,
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<TensorId>,
        backward: Option<BackFn<T>>,
        tag: &'static str,
    ) -> Result<TensorId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: tag });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            parents,
            backward: if requires_grad { backward } else { None },
            tag,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// New leaf tensor. Trainable leaves set `requires_grad`.
    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim(
                "leaf",
                format!("shape {:?} does not match {} values", shape, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            data,
            shape: shape.to_vec(),
            requires_grad,
            grad: None,
            parents: Vec::new(),
            backward: None,
            tag: "leaf",
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<TensorId> {
        self.leaf(vec![T::from_f64(v)], &[1], false)
    }

    /// Custom node with a caller-supplied backward hook. The hook maps the
    /// upstream gradient to one gradient per parent, in parent order.
    pub fn custom_op(
        &mut self,
        parents: &[TensorId],
        data: Vec<T>,
        shape: Vec<usize>,
        tag: &'static str,
        backward: impl Fn(&[T]) -> Vec<Vec<T>> + Send + Sync + 'static,
    ) -> Result<TensorId> {
        self.push(data, shape, parents.to_vec(), Some(Box::new(backward)), tag)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            data,
            shape,
            vec![a, b],
            Some(Box::new(|g: &[T]| vec![g.to_vec(), g.to_vec()])),
            "add",
        )
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let av = self.data(a).to_vec();
        let bv = self.data(b).to_vec();
        let data: Vec<T> = av.iter().zip(&bv).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            data,
            shape,
            vec![a, b],
            Some(Box::new(move |g: &[T]| {
                vec![
                    g.iter().zip(&bv).map(|(&gi, &y)| gi * y).collect(),
                    g.iter().zip(&av).map(|(&gi, &x)| gi * x).collect(),
                ]
            })),
            "mul",
        )
    }

    /// max(x, 0); the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = self.data(x).to_vec();
        let data: Vec<T> = xv.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.shape(x).to_vec();
        self.push(
            data,
            shape,
            vec![x],
            Some(Box::new(move |g: &[T]| {
                vec![g
                    .iter()
                    .zip(&xv)
                    .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                    .collect()]
            })),
            "relu",
        )
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let cv = T::from_f64(c);
        let data: Vec<T> = self.data(x).iter().map(|&v| v * cv).collect();
        let shape = self.shape(x).to_vec();
        self.push(
            data,
            shape,
            vec![x],
            Some(Box::new(move |g: &[T]| vec![g.iter().map(|&gi| gi * cv).collect()])),
            "scale",
        )
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let total: T = self.data(x).iter().copied().sum();
        let n = self.numel(x);
        self.push(
            vec![total],
            vec![1],
            vec![x],
            Some(Box::new(move |g: &[T]| vec![vec![g[0]; n]])),
            "sum",
        )
    }

    // ---- linear algebra ----

    /// c[M,N] = a[M,K] * b[K,N]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.data(a).to_vec();
        let bv = self.data(b).to_vec();
        let data = gemm_nn(&av, &bv, m, k, n);
        self.push(
            data,
            vec![m, n],
            vec![a, b],
            Some(Box::new(move |g: &[T]| {
                vec![gemm_nt(g, &bv, m, n, k), gemm_tn(&av, g, m, k, n)]
            })),
            "matmul",
        )
    }

    /// y[B,OUT] = x[B,IN] * w[OUT,IN]^T + b[OUT]
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::dim("linear", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let (batch, input, output) = (sx[0], sx[1], sw[0]);
        let xv = self.data(x).to_vec();
        let wv = self.data(w).to_vec();
        let mut data = gemm_nt(&xv, &wv, batch, input, output);
        {
            let bias = self.data(b);
            for row in data.chunks_mut(output) {
                for (v, &bo) in row.iter_mut().zip(bias) {
                    *v = *v + bo;
                }
            }
        }
        self.push(
            data,
            vec![batch, output],
            vec![x, w, b],
            Some(Box::new(move |g: &[T]| {
                let dx = gemm_nn(g, &wv, batch, output, input);
                let dw = gemm_tn(g, &xv, batch, output, input);
                let mut db = vec![T::zero(); output];
                for row in g.chunks(output) {
                    for (d, &gi) in db.iter_mut().zip(row) {
                        *d = *d + gi;
                    }
                }
                vec![dx, dw, db]
            })),
            "linear",
        )
    }

    /// Cross-correlation with zero padding; output extent floors.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::dim("conv2d", format!("x {sx:?}, w {sw:?}")));
        }
        if stride < 1 {
            return Err(Error::dim("conv2d", "stride must be >= 1".to_string()));
        }
        let (batch, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        if oh == 0 || ow == 0 {
            return Err(Error::dim("conv2d", "non-positive output extent".to_string()));
        }
        let dims = ConvDims { batch, c_in, h, w: wd, c_out, kh, kw, stride, pad, oh, ow };
        let wv = self.data(w).to_vec();
        let (data, cols) = kernels::conv2d_forward(self.data(x), &wv, &dims);
        self.push(
            data,
            vec![batch, c_out, oh, ow],
            vec![x, w],
            Some(Box::new(move |g: &[T]| {
                vec![
                    kernels::conv2d_backward_x(g, &wv, &dims),
                    kernels::conv2d_backward_w(g, &cols, &dims),
                ]
            })),
            "conv2d",
        )
    }

    // ---- spatial ----

    /// 2x2 max pooling with stride 2 (extents floor); ties keep the first max.
    pub fn max_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(Error::dim("max_pool2", format!("{sx:?}")));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::dim("max_pool2", "non-positive output extent".to_string()));
        }
        let xv = self.data(x);
        let mut data = vec![T::zero(); batch * c * oh * ow];
        let mut arg = vec![0u32; batch * c * oh * ow];
        let mut o = 0usize;
        for n in 0..batch {
            for cc in 0..c {
                let plane = &xv[(n * c + cc) * h * w..(n * c + cc + 1) * h * w];
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut best = plane[(2 * oi) * w + 2 * oj];
                        let mut bidx = (2 * oi) * w + 2 * oj;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = (2 * oi + di) * w + 2 * oj + dj;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    bidx = idx;
                                }
                            }
                        }
                        data[o] = best;
                        arg[o] = ((n * c + cc) * h * w + bidx) as u32;
                        o += 1;
                    }
                }
            }
        }
        let in_len = xv.len();
        self.push(
            data,
            vec![batch, c, oh, ow],
            vec![x],
            Some(Box::new(move |g: &[T]| {
                let mut dx = vec![T::zero(); in_len];
                for (gi, &ai) in g.iter().zip(&arg) {
                    dx[ai as usize] = dx[ai as usize] + *gi;
                }
                vec![dx]
            })),
            "max_pool2",
        )
    }

    /// [N,C,H,W] -> [N,C] spatial mean.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(Error::dim("global_avg_pool", format!("{sx:?}")));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let xv = self.data(x);
        let mut data = vec![T::zero(); batch * c];
        for (i, out) in data.iter_mut().enumerate() {
            let plane = &xv[i * hw..(i + 1) * hw];
            *out = plane.iter().copied().sum::<T>() * inv;
        }
        self.push(
            data,
            vec![batch, c],
            vec![x],
            Some(Box::new(move |g: &[T]| {
                let mut dx = vec![T::zero(); batch * c * hw];
                for (i, &gi) in g.iter().enumerate() {
                    let v = gi * inv;
                    for d in dx[i * hw..(i + 1) * hw].iter_mut() {
                        *d = v;
                    }
                }
                vec![dx]
            })),
            "global_avg_pool",
        )
    }

    /// Parameter-free shortcut: subsample by stride 2 and zero-pad channels.
    pub fn downsample_pad(&mut self, x: TensorId, out_c: usize) -> Result<TensorId> {
        let sx = self.shape(x);
        if sx.len() != 4 || out_c < sx[1] {
            return Err(Error::dim("downsample_pad", format!("{sx:?} -> {out_c} channels")));
        }
        let (batch, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xv = self.data(x);
        let mut data = vec![T::zero(); batch * out_c * oh * ow];
        for n in 0..batch {
            for cc in 0..c {
                let src = &xv[(n * c + cc) * h * w..(n * c + cc + 1) * h * w];
                let dst = &mut data[(n * out_c + cc) * oh * ow..(n * out_c + cc + 1) * oh * ow];
                for oi in 0..oh {
                    for oj in 0..ow {
                        dst[oi * ow + oj] = src[(2 * oi) * w + 2 * oj];
                    }
                }
            }
        }
        let in_len = xv.len();
        self.push(
            data,
            vec![batch, out_c, oh, ow],
            vec![x],
            Some(Box::new(move |g: &[T]| {
                let mut dx = vec![T::zero(); in_len];
                for n in 0..batch {
                    for cc in 0..c {
                        let gsrc = &g[(n * out_c + cc) * oh * ow..(n * out_c + cc + 1) * oh * ow];
                        let dst = &mut dx[(n * c + cc) * h * w..(n * c + cc + 1) * h * w];
                        for oi in 0..oh {
                            for oj in 0..ow {
                                dst[(2 * oi) * w + 2 * oj] = gsrc[oi * ow + oj];
                            }
                        }
                    }
                }
                vec![dx]
            })),
            "downsample_pad",
        )
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if shape.iter().product::<usize>() != self.numel(x) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let data = self.data(x).to_vec();
        self.push(
            data,
            shape.to_vec(),
            vec![x],
            Some(Box::new(|g: &[T]| vec![g.to_vec()])),
            "reshape",
        )
    }

    // ---- normalization ----

    /// Batch norm over (N, H, W) per channel using batch statistics.
    /// Returns the output plus the biased batch mean/variance so callers can
    /// fold them into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<T>, Vec<T>)> {
        let (c, per, map) = self.bn_layout(x, gamma, beta)?;
        let xv = self.data(x).to_vec();
        let count = T::from_f64(per as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (i, &v) in xv.iter().enumerate() {
            mean[map(i)] = mean[map(i)] + v;
        }
        for mc in mean.iter_mut() {
            *mc = *mc / count;
        }
        for (i, &v) in xv.iter().enumerate() {
            let d = v - mean[map(i)];
            var[map(i)] = var[map(i)] + d * d;
        }
        for vc in var.iter_mut() {
            *vc = *vc / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::from_f64(eps)).sqrt().recip()).collect();
        let xhat: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[map(i)]) * inv_std[map(i)])
            .collect();
        let gv = self.data(gamma).to_vec();
        let bv = self.data(beta);
        let data: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| gv[map(i)] * h + bv[map(i)])
            .collect();
        let shape = self.shape(x).to_vec();
        let (mean_out, var_out) = (mean, var);
        let xhat_b = xhat;
        let inv_b = inv_std;
        let id = self.push(
            data,
            shape,
            vec![x, gamma, beta],
            Some(Box::new(move |g: &[T]| {
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, &gi) in g.iter().enumerate() {
                    dgamma[map(i)] = dgamma[map(i)] + gi * xhat_b[i];
                    dbeta[map(i)] = dbeta[map(i)] + gi;
                }
                // dx = gamma*inv_std/m * (m*g - dbeta - xhat * dgamma)
                let dx: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let cc = map(i);
                        gv[cc] * inv_b[cc] / count
                            * (count * gi - dbeta[cc] - xhat_b[i] * dgamma[cc])
                    })
                    .collect();
                vec![dx, dgamma, dbeta]
            })),
            "batch_norm",
        )?;
        Ok((id, mean_out, var_out))
    }

    /// Batch norm with frozen statistics (a per-channel affine map).
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<TensorId> {
        let (c, _per, map) = self.bn_layout(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm_eval", "running stats length".to_string()));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::from_f64(eps)).sqrt().recip()).collect();
        let gv = self.data(gamma).to_vec();
        let bv = self.data(beta);
        let xv = self.data(x);
        let xhat: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - mean[map(i)]) * inv_std[map(i)])
            .collect();
        let data: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| gv[map(i)] * h + bv[map(i)])
            .collect();
        let shape = self.shape(x).to_vec();
        let inv_b = inv_std;
        self.push(
            data,
            shape,
            vec![x, gamma, beta],
            Some(Box::new(move |g: &[T]| {
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (i, &gi) in g.iter().enumerate() {
                    dgamma[map(i)] = dgamma[map(i)] + gi * xhat[i];
                    dbeta[map(i)] = dbeta[map(i)] + gi;
                }
                let dx: Vec<T> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * gv[map(i)] * inv_b[map(i)])
                    .collect();
                vec![dx, dgamma, dbeta]
            })),
            "batch_norm_eval",
        )
    }

    fn bn_layout(
        &self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<(usize, usize, impl Fn(usize) -> usize + Copy + Send + Sync + 'static)> {
        let sx = self.shape(x);
        let c = match sx.len() {
            2 => sx[1],
            4 => sx[1],
            _ => return Err(Error::dim("batch_norm", format!("{sx:?}"))),
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("batch_norm", "gamma/beta must be [C]".to_string()));
        }
        let hw = if sx.len() == 4 { sx[2] * sx[3] } else { 1 };
        let per = sx[0] * hw;
        let chw = c * hw;
        let map = move |i: usize| (i % chw) / hw;
        Ok((c, per, map))
    }

    // ---- loss ----

    /// Mean negative log-likelihood of `labels` under softmax(logits).
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let sl = self.shape(logits);
        if sl.len() != 2 {
            return Err(Error::dim("cross_entropy", format!("{sl:?}")));
        }
        let (n, classes) = (sl[0], sl[1]);
        if n == 0 {
            return Err(Error::Contract("cross_entropy requires a non-empty batch".into()));
        }
        if labels.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{n} logit rows vs {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!("label {bad} not in [0, {classes})")));
        }
        let zv = self.data(logits);
        let mut softmax = vec![T::zero(); n * classes];
        let mut loss = 0.0f64;
        for (i, row) in zv.chunks(classes).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (j, &z) in row.iter().enumerate() {
                let e = (z - mx).exp();
                softmax[i * classes + j] = e;
                denom = denom + e;
            }
            for s in softmax[i * classes..(i + 1) * classes].iter_mut() {
                *s = *s / denom;
            }
            let lse = denom.ln() + mx;
            loss += (lse - row[labels[i]]).as_f64();
        }
        let labels = labels.to_vec();
        let inv_n = T::from_f64(1.0 / n as f64);
        self.push(
            vec![T::from_f64(loss / n as f64)],
            vec![1],
            vec![logits],
            Some(Box::new(move |g: &[T]| {
                let go = g[0];
                let mut dz = softmax.clone();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * classes + l] = dz[i * classes + l] - T::one();
                }
                for d in dz.iter_mut() {
                    *d = *d * go * inv_n;
                }
                vec![dz]
            })),
            "cross_entropy",
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Each call propagates a fresh unit
    /// seed and adds into any gradients already present, so calling twice
    /// without [`Graph::zero_grads`] doubles them.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        // upstream gradients local to this call
        let mut up: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        up[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(u) = up[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.accumulate(TensorId(idx), &u);
            let Some(bw) = self.nodes[idx].backward.as_ref() else { continue };
            let grads = bw(&u);
            let parents = &self.nodes[idx].parents;
            debug_assert_eq!(
                grads.len(),
                parents.len(),
                "backward_fn of {} returned {} grads for {} inputs",
                self.nodes[idx].tag,
                grads.len(),
                parents.len()
            );
            for (p, g) in parents.clone().into_iter().zip(grads) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[p.0].data.len());
                match up[p.0].as_mut() {
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(g) {
                            *a = *a + gi;
                        }
                    }
                    None => up[p.0] = Some(g),
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, g: &[T]) {
        let node = &mut self.nodes[id.0];
        match node.grad.as_mut() {
            Some(acc) => {
                for (a, &gi) in acc.iter_mut().zip(g) {
                    *a = *a + gi;
                }
            }
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }
}
