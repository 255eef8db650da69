//! 2-D convolution as patch extraction followed by a matrix product.
//!
//! Patch extraction (`im2col`) is a custom op with scatter-add (`col2im`) as its gradient, so
//! both passes reduce to matrix multiplications.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Visits `(column row offset, input offset)` for every in-bounds patch element. Rows are
    /// ordered `(channel, ky, kx)` to match a `[out, in, kh, kw]` weight reshaped to
    /// `[out, in * kh * kw]`.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_h(), self.out_w());
        let hw = ho * wo;
        for b in 0..self.batch {
            for c in 0..self.channels {
                let src_plane = (b * self.channels + c) * self.height * self.width;
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let row = (c * self.kh + ky) * self.kw + kx;
                        let dst_row = (b * self.rows() + row) * hw;
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let src_row = src_plane + iy as usize * self.width;
                            // Valid ox range: 0 <= ox*stride + kx - pad < width.
                            let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
                            let hi_num = (self.width + self.pad) as isize - kx as isize - 1;
                            if hi_num < 0 {
                                continue;
                            }
                            let hi = (hi_num as usize / self.stride + 1).min(wo);
                            if lo >= hi {
                                continue;
                            }
                            let ix0 = lo * self.stride + kx - self.pad;
                            f(dst_row + oy * wo + lo, src_row + ix0, hi - lo);
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => Err(candle_core::Error::Msg("conv patch ops need contiguous input".into())),
    }
}

struct Im2Col(Geometry);

impl Im2Col {
    fn run<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let g = self.0;
        let mut out = vec![T::default(); g.batch * g.rows() * g.out_h() * g.out_w()];
        let s = g.stride;
        g.for_each(|dst, src_start, n| {
            if s == 1 {
                out[dst..dst + n].copy_from_slice(&src[src_start..src_start + n]);
            } else {
                for i in 0..n {
                    out[dst + i] = src[src_start + i * s];
                }
            }
        });
        out
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.batch, g.rows(), g.out_h() * g.out_w()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous(v, layout)?)),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "im2col"))
            }
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

struct Col2Im(Geometry);

impl Col2Im {
    fn run<T: Copy + Default + std::ops::AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let g = self.0;
        let mut out = vec![T::default(); g.batch * g.channels * g.height * g.width];
        let s = g.stride;
        g.for_each(|dst, src_start, n| {
            for i in 0..n {
                out[src_start + i * s] += cols[dst + i];
            }
        });
        out
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let shape = Shape::from((g.batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous(v, layout)?)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous(v, layout)?)),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "col2im"))
            }
        };
        Ok((out, shape))
    }
}

/// Cross-correlation of `xs` (`B x C x H x W`) with `weight` (`O x C x kh x kw`), zero padding
/// on every side. Differentiable in both arguments.
pub fn conv2d(xs: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (batch, channels, height, width) = xs.dims4()?;
    let (out, cin, kh, kw) = weight.dims4()?;
    if cin != channels {
        return Err(candle_core::Error::Msg(format!(
            "conv2d: input has {channels} channels, weight expects {cin}"
        )));
    }
    if stride == 0 || height + 2 * pad < kh || width + 2 * pad < kw {
        return Err(candle_core::Error::Msg(format!(
            "conv2d: {kh}x{kw} kernel does not fit a {height}x{width} input with padding {pad}"
        )));
    }
    let g = Geometry {
        batch,
        channels,
        height,
        width,
        kh,
        kw,
        stride,
        pad,
    };
    let cols = xs.contiguous()?.apply_op1(Im2Col(g))?;
    let w = weight.reshape((out, g.rows()))?;
    w.broadcast_matmul(&cols)?.reshape((batch, out, g.out_h(), g.out_w()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = crate::params::seeded_rng(seed, 3);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn matches_builtin_forward_and_gradients(
            seed in 0u64..1000,
            c in 1usize..4,
            o in 1usize..4,
            side in 3usize..11,
            k in 1usize..5,
            stride in 1usize..3,
            pad in 0usize..3,
        ) {
            prop_assume!(side + 2 * pad >= k);
            let x = Var::from_tensor(&rand(&[2, c, side, side], seed)).unwrap();
            let w = Var::from_tensor(&rand(&[o, c, k, k], seed + 1)).unwrap();
            let ours = conv2d(&x, &w, stride, pad).unwrap();
            let theirs = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            prop_assert_eq!(ours.dims(), theirs.dims());
            prop_assert!(max_diff(&ours, &theirs) < 1e-12);

            let probe = rand(ours.dims(), seed + 2);
            let g1 = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = (&theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            prop_assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-12);
            prop_assert!(max_diff(g1.get(&w).unwrap(), g2.get(&w).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn rectangular_kernels_and_f32() {
        let x = rand(&[1, 2, 9, 7], 0).to_dtype(DType::F32).unwrap();
        let w = rand(&[3, 2, 1, 5], 1).to_dtype(DType::F32).unwrap();
        let ours = conv2d(&x, &w, 1, 0).unwrap();
        let theirs = x.conv2d(&w, 0, 1, 1, 1).unwrap();
        assert_eq!(ours.dims(), [1, 3, 9, 3]);
        let d = (ours - theirs).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5);
        assert!(conv2d(&x, &rand(&[1, 2, 11, 11], 2).to_dtype(DType::F32).unwrap(), 1, 0).is_err());
    }
}
