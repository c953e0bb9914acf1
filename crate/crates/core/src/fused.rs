//! Hand-written CPU kernels for the two hot spots of training: the dilated
//! tap stacking that feeds each convolution matmul, and SiLU. Both are cheap
//! elementwise passes, but building them from generic tensor ops costs
//! several temporaries per call in the backward pass.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

trait Real: WithDType + Float {}
impl<T: WithDType + Float> Real for T {}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("fused op needs a contiguous input"),
    }
}

macro_rules! dispatch1 {
    ($s:expr, $l:expr, $f:expr) => {
        match $s {
            CpuStorage::F32(v) => CpuStorage::F32($f(contiguous(v, $l)?)),
            CpuStorage::F64(v) => CpuStorage::F64($f(contiguous(v, $l)?)),
            _ => candle_core::bail!("fused op supports f32 and f64 only"),
        }
    };
}

/// `(B, C, N)` to `(B, K*C, N)` where block `k` is the input shifted by
/// `(k - (K-1)/2) * dilation` samples with zero fill.
struct Taps {
    kernel: usize,
    dilation: usize,
}

/// Adjoint of [`Taps`]: sums the shifted blocks back onto `(B, C, N)`.
struct TapsAdjoint {
    kernel: usize,
    dilation: usize,
}

fn offset(k: usize, kernel: usize, dilation: usize) -> isize {
    (k as isize - ((kernel - 1) / 2) as isize) * dilation as isize
}

/// Source/destination index ranges for copying a row shifted by `off`.
fn shifted(n: usize, off: isize) -> (usize, usize, usize) {
    // out[i] = x[i + off] for i in [lo, hi)
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo.min(hi), hi, (lo as isize + off) as usize)
}

fn taps_fwd<T: WithDType>(x: &[T], b: usize, c: usize, n: usize, kernel: usize, dilation: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * kernel * c * n];
    for bi in 0..b {
        for k in 0..kernel {
            let (lo, hi, src) = shifted(n, offset(k, kernel, dilation));
            if lo >= hi {
                continue;
            }
            for ci in 0..c {
                let row = &x[(bi * c + ci) * n..][..n];
                let dst = &mut out[((bi * kernel + k) * c + ci) * n..][..n];
                dst[lo..hi].copy_from_slice(&row[src..src + hi - lo]);
            }
        }
    }
    out
}

fn taps_adjoint<T: WithDType>(g: &[T], b: usize, c: usize, n: usize, kernel: usize, dilation: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * c * n];
    for bi in 0..b {
        for k in 0..kernel {
            let (lo, hi, src) = shifted(n, offset(k, kernel, dilation));
            if lo >= hi {
                continue;
            }
            for ci in 0..c {
                let row = &g[((bi * kernel + k) * c + ci) * n..][..n];
                let dst = &mut out[(bi * c + ci) * n..][..n];
                for (d, &v) in dst[src..src + hi - lo].iter_mut().zip(&row[lo..hi]) {
                    *d += v;
                }
            }
        }
    }
    out
}

impl CustomOp1 for Taps {
    fn name(&self) -> &'static str {
        "dilated-taps"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, n) = l.shape().dims3()?;
        let (k, d) = (self.kernel, self.dilation);
        let out = dispatch1!(s, l, |x| taps_fwd(x, b, c, n, k, d));
        Ok((out, Shape::from((b, k * c, n))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?.apply_op1_no_bwd(&TapsAdjoint {
            kernel: self.kernel,
            dilation: self.dilation,
        })?;
        Ok(Some(g))
    }
}

impl CustomOp1 for TapsAdjoint {
    fn name(&self) -> &'static str {
        "dilated-taps-adjoint"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, kc, n) = l.shape().dims3()?;
        let (k, d) = (self.kernel, self.dilation);
        let c = kc / k;
        let out = dispatch1!(s, l, |g| taps_adjoint(g, b, c, n, k, d));
        Ok((out, Shape::from((b, c, n))))
    }
}

pub(crate) fn taps(x: &Tensor, kernel: usize, dilation: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Taps { kernel, dilation })
}

struct Silu;
struct SiluGrad;

fn silu_fwd<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v / (T::one() + (-v).exp())).collect()
}

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "fused-silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        Ok((dispatch1!(s, l, silu_fwd), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SiluGrad)?))
    }
}

fn silu_grad<T: Real>(x: &[T], g: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(&v, &g)| {
            let s = T::one() / (T::one() + (-v).exp());
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

impl CustomOp2 for SiluGrad {
    fn name(&self) -> &'static str {
        "fused-silu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(silu_grad(contiguous(x, l1)?, contiguous(g, l2)?)),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(silu_grad(contiguous(x, l1)?, contiguous(g, l2)?)),
            _ => candle_core::bail!("fused silu grad needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }
}

pub(crate) fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Silu)
}

/// `a + upsample(c)`, where `c` is `(B, C, T)` at frame rate, `a` is
/// `(B, C, T*hop)` and frames are linearly interpolated (last frame held).
struct UpsampleAdd {
    hop: usize,
}

/// Adjoint of the interpolation in [`UpsampleAdd`]: `(B, C, T*hop)` to `(B, C, T)`.
struct UpsampleAdjoint {
    hop: usize,
}

fn upsample_add_fwd<T: Real>(a: &[T], c: &[T], rows: usize, frames: usize, hop: usize) -> Vec<T> {
    let n = frames * hop;
    let w: Vec<T> = (0..hop).map(|j| T::from_f64(j as f64 / hop as f64)).collect();
    let mut out = a.to_vec();
    for r in 0..rows {
        let cr = &c[r * frames..][..frames];
        let or = &mut out[r * n..][..n];
        for i in 0..frames {
            let (lo, hi) = (cr[i], cr[(i + 1).min(frames - 1)]);
            let d = hi - lo;
            for (o, &wj) in or[i * hop..][..hop].iter_mut().zip(&w) {
                *o += lo + wj * d;
            }
        }
    }
    out
}

fn upsample_adjoint<T: Real>(g: &[T], rows: usize, frames: usize, hop: usize) -> Vec<T> {
    let n = frames * hop;
    let w: Vec<T> = (0..hop).map(|j| T::from_f64(j as f64 / hop as f64)).collect();
    let mut out = vec![T::zero(); rows * frames];
    for r in 0..rows {
        let gr = &g[r * n..][..n];
        let or = &mut out[r * frames..][..frames];
        for i in 0..frames {
            let (mut sum, mut weighted) = (T::zero(), T::zero());
            for (&v, &wj) in gr[i * hop..][..hop].iter().zip(&w) {
                sum += v;
                weighted += wj * v;
            }
            or[i] += sum - weighted;
            or[(i + 1).min(frames - 1)] += weighted;
        }
    }
    out
}

impl CustomOp2 for UpsampleAdd {
    fn name(&self) -> &'static str {
        "upsample-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ch, n) = l1.shape().dims3()?;
        let (b2, ch2, frames) = l2.shape().dims3()?;
        if b != b2 || ch != ch2 || frames * self.hop != n {
            candle_core::bail!("upsample-add shapes {:?} and {:?} with hop {}", l1.shape(), l2.shape(), self.hop);
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(c)) => {
                CpuStorage::F32(upsample_add_fwd(contiguous(a, l1)?, contiguous(c, l2)?, b * ch, frames, self.hop))
            }
            (CpuStorage::F64(a), CpuStorage::F64(c)) => {
                CpuStorage::F64(upsample_add_fwd(contiguous(a, l1)?, contiguous(c, l2)?, b * ch, frames, self.hop))
            }
            _ => candle_core::bail!("upsample-add needs matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _a: &Tensor, _c: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let gc = grad.contiguous()?.apply_op1_no_bwd(&UpsampleAdjoint { hop: self.hop })?;
        Ok((Some(grad.clone()), Some(gc)))
    }
}

impl CustomOp1 for UpsampleAdjoint {
    fn name(&self) -> &'static str {
        "upsample-adjoint"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, ch, n) = l.shape().dims3()?;
        let frames = n / self.hop;
        let hop = self.hop;
        let out = dispatch1!(s, l, |g| upsample_adjoint(g, b * ch, frames, hop));
        Ok((out, Shape::from((b, ch, frames))))
    }
}

pub(crate) fn upsample_add(a: &Tensor, c: &Tensor, hop: usize) -> candle_core::Result<Tensor> {
    a.contiguous()?.apply_op2(&c.contiguous()?, UpsampleAdd { hop })
}

/// `(B, n)` signal to `(B, frames, width)` where frame `t` holds samples
/// `t * hop + shift ..` with zeros outside the signal.
struct Frames {
    hop: usize,
    shift: isize,
    width: usize,
    frames: usize,
}

/// Adjoint of [`Frames`]: overlap-adds frames back onto `(B, n)`.
struct FramesAdjoint {
    hop: usize,
    shift: isize,
    n: usize,
}

impl Frames {
    /// Valid `(dst range within frame, src start in signal)` for frame `t`.
    fn span(hop: usize, shift: isize, width: usize, n: usize, t: usize) -> Option<(usize, usize, usize)> {
        let start = (t * hop) as isize + shift;
        let lo = (-start).clamp(0, width as isize) as usize;
        let hi = (n as isize - start).clamp(0, width as isize) as usize;
        (lo < hi).then(|| (lo, hi, (start + lo as isize) as usize))
    }
}

fn frames_fwd<T: WithDType>(y: &[T], b: usize, n: usize, op: &Frames) -> Vec<T> {
    let mut out = vec![T::zero(); b * op.frames * op.width];
    for bi in 0..b {
        let row = &y[bi * n..][..n];
        for t in 0..op.frames {
            if let Some((lo, hi, src)) = Frames::span(op.hop, op.shift, op.width, n, t) {
                out[(bi * op.frames + t) * op.width..][lo..hi].copy_from_slice(&row[src..src + hi - lo]);
            }
        }
    }
    out
}

fn frames_adjoint<T: WithDType>(g: &[T], b: usize, frames: usize, width: usize, op: &FramesAdjoint) -> Vec<T> {
    let mut out = vec![T::zero(); b * op.n];
    for bi in 0..b {
        let row = &mut out[bi * op.n..][..op.n];
        for t in 0..frames {
            if let Some((lo, hi, src)) = Frames::span(op.hop, op.shift, width, op.n, t) {
                let f = &g[(bi * frames + t) * width..][lo..hi];
                for (d, &v) in row[src..src + hi - lo].iter_mut().zip(f) {
                    *d += v;
                }
            }
        }
    }
    out
}

impl CustomOp1 for Frames {
    fn name(&self) -> &'static str {
        "frames"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, n) = l.shape().dims2()?;
        let out = dispatch1!(s, l, |y| frames_fwd(y, b, n, self));
        Ok((out, Shape::from((b, self.frames, self.width))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let adj = FramesAdjoint {
            hop: self.hop,
            shift: self.shift,
            n: arg.dims2()?.1,
        };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&adj)?))
    }
}

impl CustomOp1 for FramesAdjoint {
    fn name(&self) -> &'static str {
        "frames-adjoint"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, frames, width) = l.shape().dims3()?;
        let out = dispatch1!(s, l, |g| frames_adjoint(g, b, frames, width, self));
        Ok((out, Shape::from((b, self.n))))
    }
}

/// Overlapping frames of a `(B, n)` signal; see [`Frames`].
pub(crate) fn frames(y: &Tensor, hop: usize, shift: isize, width: usize, frames: usize) -> candle_core::Result<Tensor> {
    y.contiguous()?.apply_op1(Frames { hop, shift, width, frames })
}
