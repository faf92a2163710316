//! Forward and backward kernels. All functions work on flat row-major slices.

use super::{Result, Scalar, Tensor, TensorError};

fn mismatch(op: &'static str, axes: &'static str, detail: String) -> TensorError {
    TensorError::DimensionMismatch { op, axes, detail }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(mismatch("conv2d", "input rank", format!("expected NCHW, got {input:?}")));
        }
        if weight.len() != 4 {
            return Err(mismatch("conv2d", "weight rank", format!("expected OIKK, got {weight:?}")));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, i, k, k2) = (weight[0], weight[1], weight[2], weight[3]);
        if i != c {
            return Err(mismatch(
                "conv2d",
                "input axis 1 (C) vs weight axis 1 (I)",
                format!("{c} != {i}"),
            ));
        }
        if k != k2 {
            return Err(mismatch(
                "conv2d",
                "weight axes 2 and 3 (K)",
                format!("non-square kernel {k}x{k2}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch(
                "conv2d",
                "input axes 2,3 (H,W) vs kernel",
                format!("padded input {}x{} smaller than kernel {k}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(Self { n, c, h, w, o, k, stride, pad, ho, wo })
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols_width(&self) -> usize {
        self.n * self.ho * self.wo
    }

    pub fn out_dims(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }
}

/// Unrolls input patches into a `(C*K*K) x (N*Ho*Wo)` matrix.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let hw_out = g.ho * g.wo;
    let width = g.cols_width();
    let mut cols = vec![T::zero(); g.ckk() * width];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let row_base = row * width;
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut cols[row_base + n * hw_out..][..hw_out];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[ih as usize * g.w..][..g.w];
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                dst[oh * g.wo + ow] = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T]) -> Vec<T> {
    let hw_out = g.ho * g.wo;
    let width = g.cols_width();
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let row_base = row * width;
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    let src = &cols[row_base + n * hw_out..][..hw_out];
                    for oh in 0..g.ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for ow in 0..g.wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                plane[ih as usize * g.w + iw as usize] =
                                    plane[ih as usize * g.w + iw as usize] + src[oh * g.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T]) -> Vec<T> {
    let cols = im2col(g, x);
    let width = g.cols_width();
    let ckk = g.ckk();
    let mut tmp = vec![T::zero(); g.o * width];
    T::gemm(
        g.o,
        ckk,
        width,
        T::one(),
        (w, ckk as isize, 1),
        (&cols, width as isize, 1),
        T::zero(),
        (&mut tmp, width as isize, 1),
    );
    // (O x N*HW) -> NCHW
    let hw = g.ho * g.wo;
    let mut out = vec![T::zero(); g.n * g.o * hw];
    for o in 0..g.o {
        for n in 0..g.n {
            out[(n * g.o + o) * hw..][..hw].copy_from_slice(&tmp[o * width + n * hw..][..hw]);
        }
    }
    out
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let hw = g.ho * g.wo;
    let width = g.cols_width();
    let ckk = g.ckk();
    let mut dyg = vec![T::zero(); g.o * width];
    for o in 0..g.o {
        for n in 0..g.n {
            dyg[o * width + n * hw..][..hw].copy_from_slice(&dy[(n * g.o + o) * hw..][..hw]);
        }
    }
    let dw = need_dw.then(|| {
        let cols = im2col(g, x);
        let mut dw = vec![T::zero(); g.o * ckk];
        T::gemm(
            g.o,
            width,
            ckk,
            T::one(),
            (&dyg, width as isize, 1),
            (&cols, 1, width as isize),
            T::zero(),
            (&mut dw, ckk as isize, 1),
        );
        dw
    });
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); ckk * width];
        T::gemm(
            ckk,
            g.o,
            width,
            T::one(),
            (w, 1, ckk as isize),
            (&dyg, width as isize, 1),
            T::zero(),
            (&mut dcols, width as isize, 1),
        );
        col2im(g, &dcols)
    });
    (dx, dw)
}

/// Batchnorm hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report them for the running update.
    Train,
    /// Normalize with the running statistics only.
    Eval,
}

/// Per-channel running mean and variance of a batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.numel()
    }

    /// Exponential moving average toward the batch statistics.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = T::from_f64(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.values_mut().iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.values_mut().iter_mut().zip(&batch.var_unbiased) {
            *r = keep * *r + m * b;
        }
    }
}

/// Statistics of one training-mode batchnorm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

pub(crate) fn bn_check<T: Scalar>(
    x: &[usize],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &RunningStats<T>,
) -> Result<()> {
    if x.len() != 4 {
        return Err(mismatch("batchnorm2d", "input rank", format!("expected NCHW, got {x:?}")));
    }
    let c = x[1];
    for (name, len) in [
        ("gamma", gamma.numel()),
        ("beta", beta.numel()),
        ("running stats", stats.channels()),
    ] {
        if len != c {
            return Err(mismatch(
                "batchnorm2d",
                "input axis 1 (C)",
                format!("{name} has {len} entries for {c} channels"),
            ));
        }
    }
    Ok(())
}

pub(crate) fn bn_forward<T: Scalar>(
    dims: &[usize],
    x: &[T],
    gamma: &[T],
    beta: &[T],
    stats: &RunningStats<T>,
    mode: BnMode,
    cfg: BatchNormConfig,
) -> (Vec<T>, BnSaved<T>, Option<BatchStats<T>>) {
    let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
    let count = n * hw;
    let cnt = T::from_f64(count as f64);
    let eps = T::from_f64(cfg.eps);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut batch = BatchStats {
        mean: vec![T::zero(); c],
        var_unbiased: vec![T::zero(); c],
    };
    for ch in 0..c {
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut sum = T::zero();
                for s in 0..n {
                    for &v in &x[(s * c + ch) * hw..][..hw] {
                        sum = sum + v;
                    }
                }
                let mean = sum / cnt;
                let mut ss = T::zero();
                for s in 0..n {
                    for &v in &x[(s * c + ch) * hw..][..hw] {
                        let d = v - mean;
                        ss = ss + d * d;
                    }
                }
                let var = ss / cnt;
                batch.mean[ch] = mean;
                batch.var_unbiased[ch] = if count > 1 {
                    ss / T::from_f64((count - 1) as f64)
                } else {
                    var
                };
                (mean, var)
            }
            BnMode::Eval => (stats.mean.values()[ch], stats.var.values()[ch]),
        };
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mean) * istd;
                xhat[i] = xh;
                y[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let batch = (mode == BnMode::Train).then_some(batch);
    (y, BnSaved { xhat, inv_std, mode }, batch)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Scalar>(
    dims: &[usize],
    gamma: &[T],
    saved: &BnSaved<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
    let cnt = T::from_f64((n * hw) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                sum_dy = sum_dy + dy[i];
                sum_dy_xhat = sum_dy_xhat + dy[i] * saved.xhat[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * saved.inv_std[ch];
        for s in 0..n {
            let base = (s * c + ch) * hw;
            for i in base..base + hw {
                dx[i] = match saved.mode {
                    BnMode::Eval => dy[i] * scale,
                    BnMode::Train => {
                        scale * (dy[i] - sum_dy / cnt - saved.xhat[i] * sum_dy_xhat / cnt)
                    }
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn linear_dims(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if w.len() != 2 {
        return Err(mismatch("linear", "weight rank", format!("expected [out, in], got {w:?}")));
    }
    let n = x[0];
    let f: usize = x[1..].iter().product();
    if x.len() < 2 || f != w[1] {
        return Err(mismatch(
            "linear",
            "input features (axes 1..) vs weight axis 1",
            format!("input {x:?} has {f} features, weight expects {}", w[1]),
        ));
    }
    if b != [w[0]] {
        return Err(mismatch(
            "linear",
            "bias axis 0 vs weight axis 0",
            format!("bias {b:?} for {} outputs", w[0]),
        ));
    }
    Ok((n, f, w[0]))
}

pub(crate) fn linear_forward<T: Scalar>(
    (n, f, o): (usize, usize, usize),
    x: &[T],
    w: &[T],
    b: &[T],
) -> Vec<T> {
    let mut y = vec![T::zero(); n * o];
    for row in y.chunks_mut(o) {
        row.copy_from_slice(b);
    }
    T::gemm(n, f, o, T::one(), (x, f as isize, 1), (w, 1, f as isize), T::one(), (&mut y, o as isize, 1));
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn linear_backward<T: Scalar>(
    (n, f, o): (usize, usize, usize),
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * f];
    T::gemm(n, o, f, T::one(), (dy, o as isize, 1), (w, f as isize, 1), T::zero(), (&mut dx, f as isize, 1));
    let mut dw = vec![T::zero(); o * f];
    T::gemm(o, n, f, T::one(), (dy, 1, o as isize), (x, f as isize, 1), T::zero(), (&mut dw, f as isize, 1));
    let mut db = vec![T::zero(); o];
    for row in dy.chunks(o) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    (dx, dw, db)
}

/// Mean cross-entropy with log-sum-exp stabilization. Returns `(loss, softmax)`.
pub(crate) fn softmax_cross_entropy<T: Scalar>(
    dims: &[usize],
    logits: &[T],
    labels: &[usize],
) -> Result<(T, Vec<T>)> {
    if dims.len() != 2 {
        return Err(mismatch("softmax_cross_entropy", "logits rank", format!("expected N x K, got {dims:?}")));
    }
    let (n, k) = (dims[0], dims[1]);
    if k < 2 {
        return Err(TensorError::Config(format!("cross-entropy needs at least 2 classes, got {k}")));
    }
    if labels.len() != n {
        return Err(mismatch(
            "softmax_cross_entropy",
            "logits axis 0 vs labels",
            format!("{n} rows, {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::Config(format!("label {bad} outside [0, {k})")));
    }
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * k..][..k];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &z in row {
            denom = denom + (z - max).exp();
        }
        let lse = max + denom.ln();
        total = total + (lse - row[label]);
        for (p, &z) in probs[i * k..][..k].iter_mut().zip(row) {
            *p = (z - lse).exp();
        }
    }
    Ok((total / T::from_f64(n as f64), probs))
}
