use super::{Element, Tensor};
use crate::error::{Error, Result};

const TILE_M: usize = 4;
const TILE_N: usize = 8;

/// `out[m×n] = a[m×k] · b[k×n]`, f64 accumulation, k summed in ascending order.
///
/// Operands are packed into zero-padded panels and each `TILE_M×TILE_N`
/// block of outputs is accumulated in registers. Every output element sees
/// the same sequence of additions as a plain triple loop, so results do not
/// depend on the tiling or on the instruction set used.
fn gemm<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2. Without FMA contraction the wider
        // registers perform the same IEEE operations.
        return unsafe { gemm_avx2(m, k, n, a, b) };
    }
    gemm_tiled(m, k, n, a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    gemm_tiled(m, k, n, a, b)
}

#[inline(always)]
fn gemm_tiled<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T]) -> Vec<T> {
    let m_tiles = m.div_ceil(TILE_M);
    let n_tiles = n.div_ceil(TILE_N);
    // A panels: [tile][kk][row]; B panels: [tile][kk][col].
    let mut a_pack = vec![0.0f64; m_tiles * TILE_M * k];
    for i in 0..m {
        let (ti, r) = (i / TILE_M, i % TILE_M);
        let panel = &mut a_pack[ti * TILE_M * k..];
        for (kk, v) in a[i * k..(i + 1) * k].iter().enumerate() {
            panel[kk * TILE_M + r] = v.to_f64();
        }
    }
    let mut b_pack = vec![0.0f64; n_tiles * TILE_N * k];
    for kk in 0..k {
        for (j, v) in b[kk * n..(kk + 1) * n].iter().enumerate() {
            let (tj, c) = (j / TILE_N, j % TILE_N);
            b_pack[(tj * k + kk) * TILE_N + c] = v.to_f64();
        }
    }
    let mut out = vec![T::ZERO; m * n];
    for tj in 0..n_tiles {
        let b_panel = &b_pack[tj * TILE_N * k..(tj + 1) * TILE_N * k];
        let j0 = tj * TILE_N;
        let cols = TILE_N.min(n - j0);
        for ti in 0..m_tiles {
            let tile = gemm_kernel(&a_pack[ti * TILE_M * k..(ti + 1) * TILE_M * k], b_panel);
            let i0 = ti * TILE_M;
            for (r, row) in tile.iter().enumerate().take(m - i0) {
                for (o, &v) in out[(i0 + r) * n + j0..][..cols].iter_mut().zip(row) {
                    *o = T::from_f64(v);
                }
            }
        }
    }
    out
}

#[inline(always)]
fn gemm_kernel(a_panel: &[f64], b_panel: &[f64]) -> [[f64; TILE_N]; TILE_M] {
    let mut acc = [[0.0f64; TILE_N]; TILE_M];
    for (a_col, b_row) in a_panel.chunks_exact(TILE_M).zip(b_panel.chunks_exact(TILE_N)) {
        for r in 0..TILE_M {
            for c in 0..TILE_N {
                acc[r][c] += a_col[r] * b_row[c];
            }
        }
    }
    acc
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new([m, n], gemm(m, k, n, a.data(), b.data()))
}

/// `a[m×k] · bᵀ` for `b[n×k]`.
pub fn matmul_transposed<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = a.dims2()?;
    let (_, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul_transposed inner extents differ: {:?} × {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    matmul(a, &b.transpose()?)
}

/// `aᵀ · b` for `a[k×m]`, `b[k×n]`.
pub fn transposed_matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, _) = a.dims2()?;
    let (k2, _) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "transposed_matmul inner extents differ: {:?}ᵀ × {:?}",
            a.shape(),
            b.shape()
        )));
    }
    matmul(&a.transpose()?, b)
}

fn softmax_row_into<T: Element>(logits: &[T], mask: Option<&[T]>, out: &mut [T]) {
    let shifted = |j: usize| -> Option<f64> {
        match mask {
            Some(m) if m[j] == T::NEG_INFINITY => None,
            Some(m) => Some(logits[j].to_f64() + m[j].to_f64()),
            None => Some(logits[j].to_f64()),
        }
    };
    let max = (0..logits.len())
        .filter_map(shifted)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // Every entry masked: the row carries no attention at all.
        out.iter_mut().for_each(|v| *v = T::ZERO);
        return;
    }
    let mut sum = 0.0;
    let mut exps = vec![0.0f64; logits.len()];
    for (j, e) in exps.iter_mut().enumerate() {
        if let Some(v) = shifted(j) {
            *e = (v - max).exp();
            sum += *e;
        }
    }
    for (o, e) in out.iter_mut().zip(exps) {
        *o = T::from_f64(e / sum);
    }
}

/// Row-wise softmax of `logits + mask`, where `mask` holds `0` (allowed) or
/// `-inf` (blocked). Blocked entries come out exactly zero; a row with every
/// entry blocked comes out all zeros.
pub fn masked_softmax_rows<T: Element>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = logits.dims2()?;
    logits.expect_same_shape(mask)?;
    let mut out = Tensor::zeros([r, c]);
    for i in 0..r {
        let (src, m) = (logits.row(i), mask.row(i));
        softmax_row_into(src, Some(m), out.row_mut(i));
    }
    Ok(out)
}

pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = logits.dims2()?;
    let mut out = Tensor::zeros([r, c]);
    for i in 0..r {
        softmax_row_into(logits.row(i), None, out.row_mut(i));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    /// Stride 1 with the padding that preserves spatial size for a `k×k` kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        (input + 2 * self.pad)
            .checked_sub(kernel)
            .map(|v| v / self.stride + 1)
    }
}

/// 2D cross-correlation of `x[Cin×H×W]` with `weight[Cout×Cin×kh×kw]`,
/// zero padding, optional per-output-channel bias.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let (cin, h, w) = x.dims3()?;
    let (cout, wcin, kh, kw) = match weight.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::dim(format!(
                "conv weight must be rank 4, got {:?}",
                weight.shape()
            )))
        }
    };
    if wcin != cin {
        return Err(Error::dim(format!(
            "conv expects {wcin} input channels, got {cin}"
        )));
    }
    if spec.stride == 0 {
        return Err(Error::dim("conv stride must be positive"));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::dim(format!(
                "conv bias of length {} for {cout} output channels",
                b.len()
            )));
        }
    }
    let (ho, wo) = match (spec.output_extent(h, kh), spec.output_extent(w, kw)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::dim(format!(
                "conv kernel {kh}×{kw} does not fit input {h}×{w} with padding {}",
                spec.pad
            )))
        }
    };
    let k = cin * kh * kw;
    let p = ho * wo;

    let direct = kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0;
    let col_storage;
    let cols: &[T] = if direct {
        x.data()
    } else {
        let mut col = vec![T::ZERO; k * p];
        for ci in 0..cin {
            let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = &mut col[((ci * kh + dy) * kw + dx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * spec.stride + dy) as isize - spec.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * spec.stride + dx) as isize - spec.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col_storage = col;
        &col_storage
    };

    let mut out = gemm(cout, k, p, weight.data(), cols);
    if let Some(b) = bias {
        for (co, plane) in out.chunks_mut(p).enumerate() {
            let bv = b.data()[co];
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Tensor::new([cout, ho, wo], out)
}

fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of `x[C×H×W]` to `C×out_h×out_w` using the
/// half-pixel-center convention (`align_corners = false`), no antialiasing.
pub fn bilinear_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::dim(format!(
            "cannot resize {h}×{w} to {out_h}×{out_w}"
        )));
    }
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let ys = bilinear_taps(out_h, h);
    let xs = bilinear_taps(out_w, w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let a = plane[y0 * w + x0].to_f64();
                let b = plane[y0 * w + x1].to_f64();
                let cc = plane[y1 * w + x0].to_f64();
                let d = plane[y1 * w + x1].to_f64();
                let top = a + lx * (b - a);
                let bottom = cc + lx * (d - cc);
                out.push(T::from_f64(top + ly * (bottom - top)));
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

/// Area (adaptive average) resampling of `x[C×H×W]`: each output cell averages
/// the input cells `floor(i·H/out)..ceil((i+1)·H/out)`.
pub fn area_resize<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim(format!("cannot resize to {out_h}×{out_w}")));
    }
    let span = |o: usize, out_len: usize, in_len: usize| {
        let start = o * in_len / out_len;
        let end = ((o + 1) * in_len).div_ceil(out_len);
        (start, end.max(start + 1).min(in_len))
    };
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1) = span(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1) = span(ox, out_w, w);
                let mut sum = 0.0;
                for y in y0..y1 {
                    for v in &plane[y * w + x0..y * w + x1] {
                        sum += v.to_f64();
                    }
                }
                out.push(T::from_f64(sum / ((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

/// `C×H×W` feature map to `HW×C` tokens.
pub fn chw_to_tokens<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    x.clone().reshape([c, h * w])?.transpose()
}

/// `HW×C` tokens back to a `C×H×W` feature map.
pub fn tokens_to_chw<T: Element>(tokens: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c) = tokens.dims2()?;
    if n != h * w {
        return Err(Error::dim(format!("{n} tokens cannot form a {h}×{w} map")));
    }
    tokens.transpose()?.reshape([c, h, w])
}

/// Concatenates feature maps along the channel axis.
pub fn concat_channels<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (_, h, w) = match parts.first() {
        Some(p) => p.dims3()?,
        None => return Err(Error::dim("concat of zero tensors")),
    };
    let mut c = 0;
    let mut data = Vec::new();
    for p in parts {
        let (pc, ph, pw) = p.dims3()?;
        if (ph, pw) != (h, w) {
            return Err(Error::dim(format!(
                "concat spatial mismatch {ph}×{pw} vs {h}×{w}"
            )));
        }
        c += pc;
        data.extend_from_slice(p.data());
    }
    Tensor::new([c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{uniform, Rng};
    use proptest::prelude::*;

    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2().unwrap();
        let (_, n) = b.dims2().unwrap();
        let mut out = Tensor::zeros([m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for t in 0..k {
                    s += a.at(&[i, t]) * b.at(&[t, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (cin, h, wd) = x.dims3().unwrap();
        let (cout, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([cout, ho, wo]);
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.at(&[co]);
                    for ci in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += w.at(&[co, ci, dy, dx])
                                        * x.at(&[ci, iy as usize, ix as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[co, oy, ox], s);
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_analytic() {
        let eye = Tensor::<f32>::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::<f32>::from_fn([3, 2], |i| i as f32 * 0.5 - 1.0);
        assert_eq!(matmul(&eye, &b).unwrap(), b);

        let a = Tensor::<f32>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let ones = Tensor::<f32>::new([2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::seeded(11);
        let a = uniform::<f32>(&mut rng, [7, 5], -1.0, 1.0);
        let b = uniform::<f32>(&mut rng, [5, 3], -1.0, 1.0);
        let expected = matmul_oracle(&a.cast(), &b.cast());
        assert!(matmul(&a, &b).unwrap().cast::<f64>().max_abs_diff(&expected) < 1e-5);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::<f32>::zeros([2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = Rng::seeded(3);
        let a = uniform::<f64>(&mut rng, [4, 6], -1.0, 1.0);
        let b = uniform::<f64>(&mut rng, [5, 6], -1.0, 1.0);
        let via_t = matmul(&a, &b.transpose().unwrap()).unwrap();
        assert_eq!(matmul_transposed(&a, &b).unwrap(), via_t);
        let c = uniform::<f64>(&mut rng, [4, 2], -1.0, 1.0);
        let expected = matmul_oracle(&a.transpose().unwrap(), &c);
        assert!(transposed_matmul(&a, &c).unwrap().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let zero = Tensor::<f64>::zeros([1, 2]);
        let out = masked_softmax_rows(&Tensor::new([1, 2], vec![1.0, 1.0]).unwrap(), &zero).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);

        let out = masked_softmax_rows(
            &Tensor::new([1, 2], vec![0.0, 3f64.ln()]).unwrap(),
            &zero,
        )
        .unwrap();
        assert!((out.data()[0] - 0.25).abs() < 1e-12 && (out.data()[1] - 0.75).abs() < 1e-12);

        let mask = Tensor::new([1, 2], vec![0.0, f64::NEG_INFINITY]).unwrap();
        let out = masked_softmax_rows(&Tensor::new([1, 2], vec![5.0, 9.0]).unwrap(), &mask).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);

        let mask = Tensor::full([1, 2], f64::NEG_INFINITY);
        let out = masked_softmax_rows(&Tensor::new([1, 2], vec![2.0, -7.0]).unwrap(), &mask).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let x = Tensor::<f32>::new([1, 3], vec![1000.0, 1001.0, -1000.0]).unwrap();
        let out = softmax_rows(&x).unwrap();
        assert!(out.all_finite());
        assert!((out.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conv_identity_and_box_filter() {
        let mut rng = Rng::seeded(5);
        let x = uniform::<f32>(&mut rng, [1, 5, 6], -1.0, 1.0);
        let w = Tensor::full([1, 1, 1, 1], 1.0f32);
        assert_eq!(conv2d(&x, &w, None, Conv2dSpec::same(1)).unwrap(), x);

        let c = 0.75f32;
        let x = Tensor::full([1, 5, 5], c);
        let w = Tensor::full([1, 1, 3, 3], 1.0f32);
        let y = conv2d(&x, &w, None, Conv2dSpec::same(3)).unwrap();
        assert_eq!(y.shape(), &[1, 5, 5]);
        assert_eq!(y.at(&[0, 2, 2]), 9.0 * c);
        assert_eq!(y.at(&[0, 0, 0]), 4.0 * c);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = Rng::seeded(17);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5), (1, 0, 3)] {
            let x = uniform::<f32>(&mut rng, [3, 9, 7], -1.0, 1.0);
            let w = uniform::<f32>(&mut rng, [4, 3, k, k], -0.5, 0.5);
            let b = uniform::<f32>(&mut rng, [4], -0.5, 0.5);
            let got = conv2d(&x, &w, Some(&b), Conv2dSpec { stride, pad }).unwrap();
            let expected = conv_oracle(&x.cast(), &w.cast(), &b.cast(), stride, pad);
            assert_eq!(got.shape(), expected.shape());
            assert!(got.cast::<f64>().max_abs_diff(&expected) < 1e-5, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros([2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, Conv2dSpec::same(3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut rng = Rng::seeded(2);
        let x = uniform::<f32>(&mut rng, [2, 3, 5], -1.0, 1.0);
        assert!(bilinear_resize(&x, 3, 5).unwrap().max_abs_diff(&x) < 1e-6);
        let c = Tensor::full([1, 3, 4], 0.3f32);
        let up = bilinear_resize(&c, 7, 9).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.3));
        assert!(matches!(bilinear_resize(&c, 0, 9), Err(Error::Dimension(_))));
    }

    #[test]
    fn bilinear_2x2_to_4x4_hand_weights() {
        // Half-pixel centers: output 0 samples clamped source 0, output 1 samples
        // 0.25, output 2 samples 0.75, output 3 clamps to 1.
        let (a, b, c, d) = (1.0f64, 2.0, 3.0, 5.0);
        let x = Tensor::new([1, 2, 2], vec![a, b, c, d]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let t = [0.0, 0.25, 0.75, 1.0];
        for (oy, &ty) in t.iter().enumerate() {
            for (ox, &tx) in t.iter().enumerate() {
                let top = a * (1.0 - tx) + b * tx;
                let bottom = c * (1.0 - tx) + d * tx;
                let expected = top * (1.0 - ty) + bottom * ty;
                assert!((y.at(&[0, oy, ox]) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn area_resize_averages_blocks() {
        let x = Tensor::<f64>::from_fn([1, 4, 4], |i| i as f64);
        let y = area_resize(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
        let z = area_resize(&x, 3, 3).unwrap();
        assert_eq!(z.shape(), &[1, 3, 3]);
    }

    #[test]
    fn token_layout_round_trips() {
        let x = Tensor::<f32>::from_fn([3, 2, 4], |i| i as f32);
        let t = chw_to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[8, 3]);
        assert_eq!(t.at(&[5, 2]), x.at(&[2, 1, 1]));
        assert_eq!(tokens_to_chw(&t, 2, 4).unwrap(), x);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            logits in proptest::collection::vec(-20.0f64..20.0, 12),
            blocked in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let x = Tensor::new([3, 4], logits).unwrap();
            let mask = Tensor::new(
                [3, 4],
                blocked.iter().map(|&b| if b { f64::NEG_INFINITY } else { 0.0 }).collect(),
            ).unwrap();
            let out = masked_softmax_rows(&x, &mask).unwrap();
            for r in 0..3 {
                let allowed = mask.row(r).iter().filter(|&&m| m == 0.0).count();
                let sum: f64 = out.row(r).iter().sum();
                if allowed > 0 {
                    prop_assert!((sum - 1.0).abs() < 1e-6);
                } else {
                    prop_assert_eq!(sum, 0.0);
                }
                for (o, m) in out.row(r).iter().zip(mask.row(r)) {
                    if *m == f64::NEG_INFINITY {
                        prop_assert_eq!(*o, 0.0);
                    }
                }
            }
        }

        #[test]
        fn matmul_right_identity(vals in proptest::collection::vec(-5.0f64..5.0, 12)) {
            let a = Tensor::new([3, 4], vals).unwrap();
            let eye = Tensor::<f64>::from_fn([4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
            prop_assert_eq!(matmul(&a, &eye).unwrap(), a.clone());
            let a32 = a.cast::<f32>();
            prop_assert!(matmul(&a32, &eye.cast()).unwrap().max_abs_diff(&a32) < 1e-6);
        }

        #[test]
        fn conv_is_linear(seed in 0u64..1000) {
            let mut rng = Rng::seeded(seed);
            let x1 = uniform::<f32>(&mut rng, [2, 6, 5], -1.0, 1.0);
            let x2 = uniform::<f32>(&mut rng, [2, 6, 5], -1.0, 1.0);
            let w = uniform::<f32>(&mut rng, [3, 2, 3, 3], -1.0, 1.0);
            let spec = Conv2dSpec::same(3);
            let lhs = conv2d(&x1.add(&x2).unwrap(), &w, None, spec).unwrap();
            let rhs = conv2d(&x1, &w, None, spec).unwrap().add(&conv2d(&x2, &w, None, spec).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
        }
    }
}
