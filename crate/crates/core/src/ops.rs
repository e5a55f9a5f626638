//! Hand-written CPU kernels for the hot paths of training.
//!
//! Each kernel is a candle custom op with an explicit backward pass, so it
//! composes with autograd. All kernels accept `f32` and `f64`.

use std::sync::Mutex;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};

use crate::error::Result;

type CResult<T> = candle_core::Result<T>;

trait Elem:
    Copy
    + Default
    + PartialOrd
    + Into<f64>
    + std::ops::AddAssign
    + std::ops::Add<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Sub<Output = Self>
    + Send
    + Sync
{
    fn from_f64(v: f64) -> Self;
    /// In-place `exp` over a slice.
    fn exp_all(xs: &mut [Self]);
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn exp_all(xs: &mut [Self]) {
        for x in xs {
            *x = exp_f32(*x);
        }
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn exp_all(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }
}

/// Branch-free `exp` for f32, accurate to about 2 ulp; vectorizes in plain loops.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.clamp(-87.0, 88.0);
    // adding 1.5 * 2^23 rounds to the nearest integer without a libm call
    const SHIFT: f32 = 12_582_912.0;
    let n = (x * LOG2E + SHIFT) - SHIFT;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4_f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 0.5;
    let p = p * r * r + r + 1.0;
    p * f32::from_bits(((n as i32 + 127) as u32) << 23)
}

fn slice<'a, T>(v: &'a [T], l: &Layout, op: &str) -> CResult<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

/// Dispatch a unary kernel on the storage dtype.
macro_rules! unary {
    ($op:expr, $s:expr, $l:expr, $f:ident $(, $arg:expr)*) => {
        match $s {
            CpuStorage::F32(v) => CpuStorage::F32($f(slice(v, $l, $op)? $(, $arg)*)),
            CpuStorage::F64(v) => CpuStorage::F64($f(slice(v, $l, $op)? $(, $arg)*)),
            _ => candle_core::bail!("{}: only f32 and f64 are supported", $op),
        }
    };
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn cols(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Calls `f(row, col, src_index)` for every in-bounds patch element.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.out_hw();
        let kk = self.k * self.k;
        let ncol = self.cols();
        for b in 0..self.b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for c in 0..self.c {
                        let plane = (b * self.c + c) * self.h;
                        for ky in 0..self.k {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                let col = c * kk + ky * self.k + kx;
                                f(row * ncol + col, (plane + iy as usize) * self.w + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Elem>(src: &[T], g: ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let mut out = vec![T::default(); g.b * ho * wo * g.cols()];
    g.for_each(|dst, s| out[dst] = src[s]);
    out
}

fn col2im<T: Elem>(src: &[T], g: ConvGeom) -> Vec<T> {
    let mut out = vec![T::default(); g.b * g.c * g.h * g.w];
    g.for_each(|s, dst| out[dst] += src[s]);
    out
}

/// `(B, C, H, W)` to patch rows `(B * Ho * Wo, C * k * k)`, zero padded.
struct Im2Col {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Im2Col {
    fn geom(&self, dims: &[usize]) -> CResult<ConvGeom> {
        let &[b, c, h, w] = dims else {
            candle_core::bail!("im2col expects a 4-d input, got {dims:?}")
        };
        Ok(ConvGeom {
            b,
            c,
            h,
            w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        })
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = self.geom(l.dims())?;
        let (ho, wo) = g.out_hw();
        let out = unary!("im2col", s, l, im2col, g);
        Ok((out, Shape::from((g.b * ho * wo, g.cols()))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let g = self.geom(arg.dims())?;
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(g))?))
    }
}

/// Adjoint of [`Im2Col`]: scatter-add patch rows back onto the image.
struct Col2Im(ConvGeom);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = self.0;
        let out = unary!("col2im", s, l, col2im, g);
        Ok((out, Shape::from((g.b, g.c, g.h, g.w))))
    }
}

/// 2-D convolution as one matrix product over zero-padded patches.
///
/// `weight` is `(O, C, k, k)`; `bias`, when given, is `(O,)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, _, _, _) = x.dims4()?;
    let (o, c, k, _) = weight.dims4()?;
    let cols = x.contiguous()?.apply_op1(Im2Col { k, stride, pad })?;
    let w = weight.reshape((o, c * k * k))?.t()?;
    let mut y = cols.matmul(&w)?;
    if let Some(bias) = bias {
        y = y.broadcast_add(bias)?;
    }
    let ho = (x.dim(2)? + 2 * pad - k) / stride + 1;
    let wo = (x.dim(3)? + 2 * pad - k) / stride + 1;
    Ok(y.reshape((b, ho, wo, o))?.permute((0, 3, 1, 2))?.contiguous()?)
}

fn upsample2<T: Elem>(src: &[T], b: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len() * 4);
    for plane in src.chunks_exact(h * w).take(b) {
        for row in plane.chunks_exact(w) {
            for _ in 0..2 {
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    out
}

fn pool2_sum<T: Elem>(src: &[T], b: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![T::default(); b * h2 * w2];
    for (p, plane) in src.chunks_exact(h * w).enumerate() {
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for y in 0..h {
            for x in 0..w {
                dst[(y / 2) * w2 + x / 2] += plane[y * w + x];
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling by a factor of two.
struct Upsample2;

impl CustomOp1 for Upsample2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let out = unary!("upsample2", s, l, upsample2, b * c, h, w);
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Pool2Sum)?))
    }
}

/// Sum over non-overlapping 2x2 blocks; adjoint of [`Upsample2`].
struct Pool2Sum;

impl CustomOp1 for Pool2Sum {
    fn name(&self) -> &'static str {
        "pool2-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let out = unary!("pool2-sum", s, l, pool2_sum, b * c, h, w);
        Ok((out, Shape::from((b, c, h / 2, w / 2))))
    }
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2)?)
}

const LANES: usize = 8;

/// Reduction with independent lanes, so the loop vectorizes.
#[inline(always)]
fn reduce<T: Elem>(xs: &[T], init: T, f: impl Fn(T, T) -> T) -> T {
    let mut acc = [init; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = f(*a, v);
        }
    }
    let mut r = init;
    for &v in acc.iter().chain(tail) {
        r = f(r, v);
    }
    r
}

#[inline(always)]
fn max<T: Elem>(a: T, b: T) -> T {
    if b > a {
        b
    } else {
        a
    }
}

/// Fills `logp` and `p` with the log-softmax and softmax of `z * inv_t`.
#[inline]
fn softmax_row<T: Elem>(z: &[T], inv_t: T, logp: &mut [T], p: &mut [T]) {
    for (o, &v) in logp.iter_mut().zip(z) {
        *o = v * inv_t;
    }
    let m = reduce(logp, T::from_f64(f64::NEG_INFINITY), max);
    for (e, o) in p.iter_mut().zip(logp.iter_mut()) {
        *o = *o - m;
        *e = *o;
    }
    T::exp_all(p);
    let sum: f64 = reduce(p, T::default(), |a, b| a + b).into();
    let (ln_sum, inv_sum) = (T::from_f64(sum.ln()), T::from_f64(1.0 / sum));
    for (e, o) in p.iter_mut().zip(logp.iter_mut()) {
        *o = *o - ln_sum;
        *e = *e * inv_sum;
    }
}

struct RowBuffers<T> {
    lt: Vec<T>,
    ls: Vec<T>,
    pt: Vec<T>,
    ps: Vec<T>,
    tmp: Vec<T>,
}

impl<T: Elem> RowBuffers<T> {
    fn new(n: usize) -> Self {
        Self {
            lt: vec![T::default(); n],
            ls: vec![T::default(); n],
            pt: vec![T::default(); n],
            ps: vec![T::default(); n],
            tmp: vec![T::default(); n],
        }
    }

    fn load(&mut self, st: &[T], ss: &[T], inv_t: T) {
        softmax_row(st, inv_t, &mut self.lt, &mut self.pt);
        softmax_row(ss, inv_t, &mut self.ls, &mut self.ps);
    }

    /// `sum_j p_t (log p_t - max(log p_s, floor))`, unscaled.
    fn kl(&mut self, log_floor: T) -> f64 {
        for (((d, &p), &lt), &ls) in self.tmp.iter_mut().zip(&self.pt).zip(&self.lt).zip(&self.ls) {
            *d = p * (lt - max(ls, log_floor));
        }
        reduce(&self.tmp, T::default(), |a, b| a + b).into()
    }
}

/// `out[j] = sum_c q[c] * keys[c][j]`, with `keys` laid out `(C, N)`.
#[inline]
fn sim_row<T: Elem>(q: &[T], keys: &[T], out: &mut [T]) {
    let n = out.len();
    out.fill(T::default());
    for (c, &qc) in q.iter().enumerate() {
        for (o, &k) in out.iter_mut().zip(&keys[c * n..(c + 1) * n]) {
            *o += qc * k;
        }
    }
}

#[inline]
fn dot<T: Elem>(a: &[T], b: &[T], tmp: &mut [T]) -> T {
    for ((d, &x), &y) in tmp.iter_mut().zip(a).zip(b) {
        *d = x * y;
    }
    reduce(tmp, T::default(), |a, b| a + b)
}

/// Features of one batch element, `(C, N)`, and the query column `i` of each.
struct Batch<'a, T> {
    t: &'a [T],
    s: &'a [T],
    c: usize,
    n: usize,
}

impl<T: Elem> Batch<'_, T> {
    fn column(x: &[T], c: usize, n: usize, i: usize, out: &mut Vec<T>) {
        out.clear();
        out.extend((0..c).map(|k| x[k * n + i]));
    }
}

struct Scratch<T> {
    rows: RowBuffers<T>,
    zt: Vec<T>,
    zs: Vec<T>,
    qt: Vec<T>,
    qs: Vec<T>,
}

impl<T: Elem> Scratch<T> {
    fn new(c: usize, n: usize) -> Self {
        Self {
            rows: RowBuffers::new(n),
            zt: vec![T::default(); n],
            zs: vec![T::default(); n],
            qt: Vec::with_capacity(c),
            qs: Vec::with_capacity(c),
        }
    }

    /// Build both affinity rows for query position `i`.
    fn load(&mut self, b: &Batch<'_, T>, i: usize, inv_t: T) {
        Batch::<T>::column(b.t, b.c, b.n, i, &mut self.qt);
        Batch::<T>::column(b.s, b.c, b.n, i, &mut self.qs);
        sim_row(&self.qt, b.t, &mut self.zt);
        sim_row(&self.qs, b.t, &mut self.zs);
        self.rows.load(&self.zt, &self.zs, inv_t);
    }
}

/// Gradient of the unscaled row loss with respect to the student logit row,
/// written to `gs`: `p_s * sum(masked p_t) - masked p_t`, where entries whose
/// student probability sits below the floor are masked out.
fn student_logit_grad<T: Elem>(r: &mut RowBuffers<T>, floor: T, gs: &mut [T]) {
    for ((d, &p), &ls) in r.tmp.iter_mut().zip(&r.pt).zip(&r.ls) {
        *d = if ls > floor { p } else { T::default() };
    }
    let masked = reduce(&r.tmp, T::default(), |a, b| a + b);
    for ((d, &m), &ps) in gs.iter_mut().zip(&r.tmp).zip(&r.ps) {
        *d = ps * masked - m;
    }
}

/// Loss per position and, when `with_grad`, the student feature gradient for a unit
/// upstream gradient, `(B, C, N)`.
fn affinity_kl<T: Elem>(
    t: &[T],
    s: &[T],
    dims: (usize, usize, usize),
    temperature: f64,
    log_floor: f64,
    with_grad: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (bn, c, n) = dims;
    let mut scratch = Scratch::new(c, n);
    let scale = temperature * temperature;
    let (inv_t, floor) = (T::from_f64(1.0 / temperature), T::from_f64(log_floor));
    let mut out = Vec::with_capacity(bn * n);
    let mut grad = with_grad.then(|| vec![T::default(); bn * c * n]);
    let mut gs = vec![T::default(); n];
    // d/d sim = (1/T) d/dz, and the loss carries T^2
    let g = T::from_f64(temperature);
    for b in 0..bn {
        let batch = Batch {
            t: &t[b * c * n..(b + 1) * c * n],
            s: &s[b * c * n..(b + 1) * c * n],
            c,
            n,
        };
        for i in 0..n {
            scratch.load(&batch, i, inv_t);
            out.push(T::from_f64(scale * scratch.rows.kl(floor)));
            if let Some(grad) = grad.as_mut() {
                let r = &mut scratch.rows;
                student_logit_grad(r, floor, &mut gs);
                let grad = &mut grad[b * c * n..(b + 1) * c * n];
                for k in 0..c {
                    grad[k * n + i] = g * dot(&gs, &batch.t[k * n..(k + 1) * n], &mut r.tmp);
                }
            }
        }
    }
    (out, grad)
}

/// Gradient of the per-position loss with respect to the teacher features.
///
/// With `Gs` and `Gt` the gradients on the student and teacher logit rows, the
/// teacher receives `Gt t_j` as query and `Gt t_i + Gs s_i` as key.
fn affinity_kl_teacher_grad<T: Elem>(
    t: &[T],
    s: &[T],
    up: &[T],
    dims: (usize, usize, usize),
    temperature: f64,
    log_floor: f64,
) -> Vec<T> {
    let (bn, c, n) = dims;
    let mut scratch = Scratch::new(c, n);
    let mut gs = vec![T::default(); n];
    let mut gt = vec![T::default(); n];
    let mut out = vec![T::default(); bn * c * n];
    let (inv_t, floor) = (T::from_f64(1.0 / temperature), T::from_f64(log_floor));
    for b in 0..bn {
        let batch = Batch {
            t: &t[b * c * n..(b + 1) * c * n],
            s: &s[b * c * n..(b + 1) * c * n],
            c,
            n,
        };
        let grad = &mut out[b * c * n..(b + 1) * c * n];
        for i in 0..n {
            scratch.load(&batch, i, inv_t);
            let g = T::from_f64(up[b * n + i].into() * temperature);
            let r = &mut scratch.rows;
            student_logit_grad(r, floor, &mut gs);
            let kl = T::from_f64(r.kl(floor));
            for (((d, &pt), &lt), &ls) in gt.iter_mut().zip(&r.pt).zip(&r.lt).zip(&r.ls) {
                *d = g * pt * (lt - max(ls, floor) - kl);
            }
            for k in 0..c {
                let row = &mut grad[k * n..(k + 1) * n];
                let q = dot(&gt, &batch.t[k * n..(k + 1) * n], &mut r.tmp);
                let (qt, qs) = (scratch.qt[k], g * scratch.qs[k]);
                for ((d, &a), &b) in row.iter_mut().zip(&gt).zip(&gs) {
                    *d += a * qt + b * qs;
                }
                row[i] += q;
            }
        }
    }
    out
}

/// Per-position `T^2 KL(softmax(t_i . t / T) || softmax(s_i . t / T))` for unit features
/// `(B, C, N)`, with the student probabilities floored inside the logarithm.
///
/// The `N x N` affinity matrices are never materialized.
struct AffinityKl {
    temperature: f64,
    log_floor: f64,
    /// Student gradient for a unit upstream gradient, filled by the forward pass.
    student_grad: Option<Mutex<Option<CpuStorage>>>,
}

fn dims3(l: &Layout, op: &str) -> CResult<(usize, usize, usize)> {
    match *l.dims() {
        [b, c, n] => Ok((b, c, n)),
        ref d => candle_core::bail!("{op}: expected (batch, channels, positions), got {d:?}"),
    }
}

impl CustomOp2 for AffinityKl {
    fn name(&self) -> &'static str {
        "affinity-kl"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let op = "affinity-kl";
        if l1.dims() != l2.dims() {
            candle_core::bail!("{op}: shapes differ {:?} vs {:?}", l1.dims(), l2.dims());
        }
        let d = dims3(l1, op)?;
        let (t, f, w) = (self.temperature, self.log_floor, self.student_grad.is_some());
        let (out, grad) = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let (o, g) = affinity_kl(slice(a, l1, op)?, slice(b, l2, op)?, d, t, f, w);
                (CpuStorage::F32(o), g.map(CpuStorage::F32))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let (o, g) = affinity_kl(slice(a, l1, op)?, slice(b, l2, op)?, d, t, f, w);
                (CpuStorage::F64(o), g.map(CpuStorage::F64))
            }
            _ => candle_core::bail!("{op}: inputs must both be f32 or both f64"),
        };
        if let Some(slot) = &self.student_grad {
            *slot.lock().expect("unpoisoned") = grad;
        }
        Ok((out, Shape::from((d.0, d.2))))
    }

    fn bwd(
        &self,
        t: &Tensor,
        s: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gt = if t.track_op() {
            Some(t.apply_op3_no_bwd(
                s,
                &grad,
                &AffinityKlTeacherGrad {
                    temperature: self.temperature,
                    log_floor: self.log_floor,
                },
            )?)
        } else {
            None
        };
        let stored = self.student_grad.as_ref().and_then(|m| m.lock().expect("unpoisoned").clone());
        let gs = match stored {
            Some(h) if s.track_op() => {
                let h = match h {
                    CpuStorage::F32(v) => Tensor::from_vec(v, s.shape(), s.device())?,
                    CpuStorage::F64(v) => Tensor::from_vec(v, s.shape(), s.device())?,
                    _ => candle_core::bail!("affinity-kl: unexpected stored dtype"),
                };
                Some(h.broadcast_mul(&grad.unsqueeze(1)?)?)
            }
            _ => None,
        };
        Ok((gt, gs))
    }
}

struct AffinityKlTeacherGrad {
    temperature: f64,
    log_floor: f64,
}

impl CustomOp3 for AffinityKlTeacherGrad {
    fn name(&self) -> &'static str {
        "affinity-kl-teacher-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let op = "affinity-kl-teacher-grad";
        let d = dims3(l1, op)?;
        let (t, f) = (self.temperature, self.log_floor);
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(a), CpuStorage::F32(b), CpuStorage::F32(c)) => CpuStorage::F32(
                affinity_kl_teacher_grad(slice(a, l1, op)?, slice(b, l2, op)?, slice(c, l3, op)?, d, t, f),
            ),
            (CpuStorage::F64(a), CpuStorage::F64(b), CpuStorage::F64(c)) => CpuStorage::F64(
                affinity_kl_teacher_grad(slice(a, l1, op)?, slice(b, l2, op)?, slice(c, l3, op)?, d, t, f),
            ),
            _ => candle_core::bail!("{op}: mixed dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// `T^2 * KL` per position for unit-normalized features `(B, C, N)`; returns `(B, N)`.
///
/// Row `i` compares `softmax(t_i . t_j / T)` with `softmax(s_i . t_j / T)` over `j`.
pub fn affinity_kl_features(
    t_unit: &Tensor,
    s_unit: &Tensor,
    temperature: f64,
    prob_floor: f64,
) -> Result<Tensor> {
    Ok(t_unit.contiguous()?.apply_op2(
        &s_unit.contiguous()?,
        AffinityKl {
            temperature,
            log_floor: prob_floor.ln(),
            student_grad: s_unit.track_op().then(|| Mutex::new(None)),
        },
    )?)
}
