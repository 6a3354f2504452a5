//! Convolution kernels built from an `im2col`/`col2im` pair.
//!
//! The two custom ops are adjoint to each other, so each one's backward pass
//! is simply the other. A convolution is `im2col` followed by a matmul and a
//! transposed convolution is a matmul followed by `col2im`; gradients for the
//! weights come out of the matmul for free.

use candle_core::{bail, CpuStorage, CustomOp1, Layout, Result, Shape, Tensor, WithDType};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(b: usize, c: usize, h: usize, w: usize, k: usize, s: usize) -> Result<Self> {
        if k == 0 || s == 0 || h < k || w < k {
            bail!("invalid convolution geometry: {h}x{w} input, kernel {k}, stride {s}");
        }
        Ok(Self {
            b,
            c,
            h,
            w,
            k,
            s,
            ho: (h - k) / s + 1,
            wo: (w - k) / s + 1,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }
}

fn im2col<T: WithDType>(x: &[T], g: Geom) -> Vec<T> {
    let ckk = g.ckk();
    let mut out = vec![T::zero(); g.b * g.ho * g.wo * ckk];
    for b in 0..g.b {
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let row = ((b * g.ho + oh) * g.wo + ow) * ckk;
                for c in 0..g.c {
                    for i in 0..g.k {
                        let src = ((b * g.c + c) * g.h + oh * g.s + i) * g.w + ow * g.s;
                        let dst = row + (c * g.k + i) * g.k;
                        out[dst..dst + g.k].copy_from_slice(&x[src..src + g.k]);
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: WithDType>(cols: &[T], g: Geom) -> Vec<T> {
    let ckk = g.ckk();
    let mut out = vec![T::zero(); g.b * g.c * g.h * g.w];
    for b in 0..g.b {
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let row = ((b * g.ho + oh) * g.wo + ow) * ckk;
                for c in 0..g.c {
                    for i in 0..g.k {
                        let dst = ((b * g.c + c) * g.h + oh * g.s + i) * g.w + ow * g.s;
                        let src = row + (c * g.k + i) * g.k;
                        for (o, v) in out[dst..dst + g.k].iter_mut().zip(&cols[src..src + g.k]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

struct Im2Col(Geom);
struct Col2Im(Geom);

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => bail!("im2col/col2im expect a contiguous input"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        if l.shape().elem_count() != g.b * g.c * g.h * g.w {
            bail!("im2col: input has {} elements", l.shape().elem_count());
        }
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, l)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, l)?, g)),
            _ => bail!("im2col: unsupported dtype"),
        };
        Ok((out, Shape::from((g.b * g.ho * g.wo, g.ckk()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        if l.shape().elem_count() != g.b * g.ho * g.wo * g.ckk() {
            bail!("col2im: input has {} elements", l.shape().elem_count());
        }
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, l)?, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, l)?, g)),
            _ => bail!("col2im: unsupported dtype"),
        };
        Ok((out, Shape::from((g.b, g.c, g.h, g.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Valid (unpadded) 2-d convolution. `weight` is `[out, in·k·k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let g = Geom::new(b, c, h, w, k, stride)?;
    let (out, ckk) = weight.dims2()?;
    if ckk != g.ckk() {
        bail!("conv2d: weight expects {ckk} inputs per patch, got {}", g.ckk());
    }
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    cols.matmul(&weight.t()?)?
        .broadcast_add(bias)?
        .reshape((b, g.ho, g.wo, out))?
        .permute((0, 3, 1, 2))?
        .contiguous()
}

/// Transposed convolution without padding; the output side is
/// `(in − 1)·stride + k`. `weight` is `[in, out·k·k]`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    out_channels: usize,
    k: usize,
    stride: usize,
) -> Result<Tensor> {
    let (b, cin, h, w) = x.dims4()?;
    let (win, cols) = weight.dims2()?;
    if win != cin || cols != out_channels * k * k {
        bail!("conv_transpose2d: weight shape ({win}, {cols}) does not fit input");
    }
    let g = Geom::new(b, out_channels, (h - 1) * stride + k, (w - 1) * stride + k, k, stride)?;
    let rows = x.permute((0, 2, 3, 1))?.reshape((b * h * w, cin))?;
    let y = rows.matmul(weight)?.apply_op1(Col2Im(g))?;
    y.broadcast_add(&bias.reshape((1, out_channels, 1, 1))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    // Naive direct convolution used as the reference.
    fn direct_conv(x: &[f64], dims: (usize, usize, usize, usize), wt: &[f64], o: usize, k: usize, s: usize) -> Vec<f64> {
        let (b, c, h, w) = dims;
        let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
        let mut out = vec![0.0; b * o * ho * wo];
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for i in 0..k {
                                for j in 0..k {
                                    acc += x[((bi * c + ci) * h + y * s + i) * w + xx * s + j]
                                        * wt[oi * c * k * k + (ci * k + i) * k + j];
                                }
                            }
                        }
                        out[((bi * o + oi) * ho + y) * wo + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loop() {
        let dev = Device::Cpu;
        let dims = (2, 3, 9, 9);
        let xs = seq(2 * 3 * 81, 2.0);
        let ws = seq(4 * 3 * 9, 1.0);
        let x = Tensor::from_vec(xs.clone(), dims, &dev).unwrap();
        let w = Tensor::from_vec(ws.clone(), (4, 27), &dev).unwrap();
        let bias = Tensor::zeros(4, DType::F64, &dev).unwrap();
        let y = conv2d(&x, &w, &bias, 3, 2).unwrap();
        assert_eq!(y.dims(), &[2, 4, 4, 4]);
        let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let want = direct_conv(&xs, dims, &ws, 4, 3, 2);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> for a shared weight matrix.
        let dev = Device::Cpu;
        let (c, o, k, s) = (2, 3, 4, 2);
        let x = Tensor::from_vec(seq(c * 12 * 12, 1.0), (1, c, 12, 12), &dev).unwrap();
        let w = Tensor::from_vec(seq(o * c * k * k, 1.0), (o, c * k * k), &dev).unwrap();
        let zo = Tensor::zeros(o, DType::F64, &dev).unwrap();
        let zc = Tensor::zeros(c, DType::F64, &dev).unwrap();
        let cx = conv2d(&x, &w, &zo, k, s).unwrap();
        let y = Tensor::from_vec(seq(cx.elem_count(), 3.0), cx.dims(), &dev).unwrap();
        // convT weight [in=o, out=c·k·k] is the same matrix.
        let ty = conv_transpose2d(&y, &w, &zc, c, k, s).unwrap();
        assert_eq!(ty.dims(), x.dims());
        let lhs = (cx * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (ty * &x).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let dev = Device::Cpu;
        let x = Var::from_vec(seq(2 * 6 * 6, 1.0), (1, 2, 6, 6), &dev).unwrap();
        let w = Var::from_vec(seq(3 * 2 * 9, 1.0), (3, 18), &dev).unwrap();
        let wt = Var::from_vec(seq(3 * 2 * 9, 0.7), (3, 18), &dev).unwrap();
        let b3 = Tensor::zeros(3, DType::F64, &dev).unwrap();
        let b2 = Tensor::zeros(2, DType::F64, &dev).unwrap();
        let f = |x: &Tensor, w: &Tensor, wt: &Tensor| -> Tensor {
            let h = conv2d(x, w, &b3, 3, 1).unwrap().tanh().unwrap();
            let r = conv_transpose2d(&h, wt, &b2, 2, 3, 1).unwrap();
            r.sqr().unwrap().sum_all().unwrap()
        };
        let loss = f(&x, &w, &wt);
        let grads = loss.backward().unwrap();
        let eps = 1e-6;
        for (var, idx) in [(&x, 17usize), (&x, 40), (&w, 5), (&wt, 11)] {
            let g = grads.get(var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx];
            let base = var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let eval = |d: f64| {
                let mut v = base.clone();
                v[idx] += d;
                let t = Tensor::from_vec(v, var.dims(), &dev).unwrap();
                let (xa, wa, wb) = if std::ptr::eq(var, &x) {
                    (t, w.as_tensor().clone(), wt.as_tensor().clone())
                } else if std::ptr::eq(var, &w) {
                    (x.as_tensor().clone(), t, wt.as_tensor().clone())
                } else {
                    (x.as_tensor().clone(), w.as_tensor().clone(), t)
                };
                f(&xa, &wa, &wb).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            assert!((g - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{g} vs {fd}");
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let dev = Device::Cpu;
        let x = Tensor::zeros((1, 1, 2, 2), DType::F32, &dev).unwrap();
        let w = Tensor::zeros((1, 9), DType::F32, &dev).unwrap();
        let b = Tensor::zeros(1, DType::F32, &dev).unwrap();
        assert!(conv2d(&x, &w, &b, 3, 1).is_err());
    }
}
