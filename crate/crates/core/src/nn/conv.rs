//! 2-D convolution and transposed convolution over `(N, H, W, C)` tensors.
//!
//! Both lower to im2col + gemm. A transposed convolution is implemented as
//! the exact adjoint of the convolution with the same geometry, so
//! `⟨conv(x), y⟩ = ⟨x, conv_transpose(y)⟩` holds up to rounding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl ConvSpec {
    /// 3×3 kernel, "same" padding, square stride.
    pub fn k3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (3, 3),
            stride: (stride, stride),
            padding: Padding::Same,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.kernel.0 * self.kernel.1 * self.in_channels * self.out_channels
    }

    /// Weights plus one bias per output channel.
    pub fn param_count(&self) -> usize {
        self.weight_count() + self.out_channels
    }

    /// Spatial output extent of the forward convolution.
    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_extent(h, self.kernel.0, self.stride.0, self.padding)?,
            conv_extent(w, self.kernel.1, self.stride.1, self.padding)?,
        ))
    }

    /// Spatial output extent of the transposed convolution.
    pub fn transpose_output(&self, h: usize, w: usize) -> (usize, usize) {
        (
            transpose_extent(h, self.kernel.0, self.stride.0, self.padding),
            transpose_extent(w, self.kernel.1, self.stride.1, self.padding),
        )
    }

    fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::InvalidArgument(format!(
                "kernel {:?} and stride {:?} must be positive",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }
}

fn conv_extent(n: usize, k: usize, s: usize, padding: Padding) -> Result<usize> {
    match padding {
        Padding::Same => Ok(n.div_ceil(s)),
        Padding::Valid if n >= k => Ok((n - k) / s + 1),
        Padding::Valid => Err(Error::InvalidArgument(format!(
            "extent {n} smaller than kernel {k} with valid padding"
        ))),
    }
}

fn transpose_extent(n: usize, k: usize, s: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => n * s,
        Padding::Valid => (n.max(1) - 1) * s + k,
    }
}

fn pad_before(big: usize, small: usize, k: usize, s: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => (((small.max(1) - 1) * s + k).saturating_sub(big)) / 2,
        Padding::Valid => 0,
    }
}

/// Geometry of a convolution from a `big` image to a `small` one.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub big_h: usize,
    pub big_w: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pad_t: usize,
    pub pad_l: usize,
    /// Channels of the big image.
    pub c: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, big: (usize, usize), small: (usize, usize), c: usize) -> Self {
        let (kh, kw) = spec.kernel;
        let (sh, sw) = spec.stride;
        Geometry {
            big_h: big.0,
            big_w: big.1,
            small_h: small.0,
            small_w: small.1,
            kh,
            kw,
            sh,
            sw,
            pad_t: pad_before(big.0, small.0, kh, sh, spec.padding),
            pad_l: pad_before(big.1, small.1, kw, sw, spec.padding),
            c,
        }
    }

    pub fn patches(&self) -> usize {
        self.small_h * self.small_w
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }

    /// Input row/col under kernel tap `k` for output position `o`.
    #[inline]
    fn source(o: usize, s: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * s + k).checked_sub(pad)?;
        (pos < limit).then_some(pos)
    }

    /// Unfolds one big image into `(patches, kh·kw·c)` rows.
    pub fn im2col<F: Element>(&self, img: &[F], cols: &mut [F]) {
        let c = self.c;
        let row_len = self.patch_len();
        for oy in 0..self.small_h {
            for ox in 0..self.small_w {
                let row = &mut cols[(oy * self.small_w + ox) * row_len..][..row_len];
                for ky in 0..self.kh {
                    let iy = Self::source(oy, self.sh, ky, self.pad_t, self.big_h);
                    for kx in 0..self.kw {
                        let dst = &mut row[(ky * self.kw + kx) * c..][..c];
                        match (iy, Self::source(ox, self.sw, kx, self.pad_l, self.big_w)) {
                            (Some(iy), Some(ix)) => {
                                dst.copy_from_slice(&img[(iy * self.big_w + ix) * c..][..c])
                            }
                            _ => dst.fill(F::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-adds rows back into the image.
    pub fn col2im<F: Element>(&self, cols: &[F], img: &mut [F]) {
        let c = self.c;
        let row_len = self.patch_len();
        for oy in 0..self.small_h {
            for ox in 0..self.small_w {
                let row = &cols[(oy * self.small_w + ox) * row_len..][..row_len];
                for ky in 0..self.kh {
                    let Some(iy) = Self::source(oy, self.sh, ky, self.pad_t, self.big_h) else {
                        continue;
                    };
                    for kx in 0..self.kw {
                        let Some(ix) = Self::source(ox, self.sw, kx, self.pad_l, self.big_w)
                        else {
                            continue;
                        };
                        let dst = &mut img[(iy * self.big_w + ix) * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(&row[(ky * self.kw + kx) * c..][..c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn nhwc(x: &Tensor<impl Element>, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, h, w, c] => Ok((n, h, w, c)),
        ref s => Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: format!("{op} expects (batch, height, width, channels)"),
        }),
    }
}

fn check_params<F: Element>(
    op: &'static str,
    spec: &ConvSpec,
    channels: usize,
    weight: &Tensor<F>,
    weight_shape: [usize; 4],
    bias: &Tensor<F>,
) -> Result<()> {
    spec.validate()?;
    if channels != spec.in_channels {
        return Err(Error::shape(op, &[channels], &[spec.in_channels]));
    }
    if weight.shape() != weight_shape {
        return Err(Error::shape(op, weight.shape(), &weight_shape));
    }
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape(op, bias.shape(), &[spec.out_channels]));
    }
    Ok(())
}

fn bias_grad<F: Element>(g: &Tensor<F>, channels: usize) -> Tensor<F> {
    let mut acc = vec![F::zero(); channels];
    for px in g.data().chunks(channels) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v;
        }
    }
    Tensor::from_parts(vec![channels], acc)
}

fn add_bias_rows<F: Element>(out: &mut [F], bias: &[F]) {
    for px in out.chunks_mut(bias.len()) {
        for (o, &b) in px.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Cross-correlation (no kernel flip). `weight: (kh, kw, in, out)`.
pub fn conv2d<'t, F: Element>(
    x: &Var<'t, F>,
    weight: &Var<'t, F>,
    bias: &Var<'t, F>,
    spec: &ConvSpec,
) -> Result<Var<'t, F>> {
    let xv = x.value();
    let wv = weight.value();
    let bv = bias.value();
    let (n, h, w, c) = nhwc(&xv, "conv2d")?;
    let (kh, kw) = spec.kernel;
    let co = spec.out_channels;
    check_params("conv2d", spec, c, &wv, [kh, kw, c, co], &bv)?;
    let (oh, ow) = spec.conv_output(h, w)?;
    let geo = Geometry::new(spec, (h, w), (oh, ow), c);
    let (p, k) = (geo.patches(), geo.patch_len());
    let in_len = h * w * c;

    let mut out = vec![F::zero(); n * p * co];
    let mut cols = vec![F::zero(); p * k];
    for i in 0..n {
        geo.im2col(&xv.data()[i * in_len..][..in_len], &mut cols);
        let dst = &mut out[i * p * co..][..p * co];
        F::gemm(p, k, co, &cols, false, wv.data(), false, dst, false);
        add_bias_rows(dst, bv.data());
    }
    let value = Tensor::from_parts(vec![n, oh, ow, co], out);
    Ok(x.tape().record(
        value,
        &[*x, *weight, *bias],
        Box::new(move |g, needs| {
            let gd = g.data();
            let mut gx = needs[0].then(|| vec![F::zero(); n * in_len]);
            let mut gw = needs[1].then(|| vec![F::zero(); k * co]);
            let mut cols = vec![F::zero(); p * k];
            let mut dcols = vec![F::zero(); p * k];
            for i in 0..n {
                let gi = &gd[i * p * co..][..p * co];
                if let Some(gw) = gw.as_mut() {
                    geo.im2col(&xv.data()[i * in_len..][..in_len], &mut cols);
                    F::gemm(k, p, co, &cols, true, gi, false, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    F::gemm(p, co, k, gi, false, wv.data(), true, &mut dcols, false);
                    geo.col2im(&dcols, &mut gx[i * in_len..][..in_len]);
                }
            }
            vec![
                gx.map(|d| Tensor::from_parts(vec![n, h, w, c], d)),
                gw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
                needs[2].then(|| bias_grad(g, co)),
            ]
        }),
    ))
}

/// Transposed convolution. `weight: (kh, kw, out, in)`, as in Keras.
pub fn conv2d_transpose<'t, F: Element>(
    x: &Var<'t, F>,
    weight: &Var<'t, F>,
    bias: &Var<'t, F>,
    spec: &ConvSpec,
) -> Result<Var<'t, F>> {
    let xv = x.value();
    let wv = weight.value();
    let bv = bias.value();
    let (n, h, w, ci) = nhwc(&xv, "conv2d_transpose")?;
    let (kh, kw) = spec.kernel;
    let co = spec.out_channels;
    check_params("conv2d_transpose", spec, ci, &wv, [kh, kw, co, ci], &bv)?;
    let (oh, ow) = spec.transpose_output(h, w);
    // The adjoint convolution maps the (oh, ow, co) output down to (h, w).
    let geo = Geometry::new(spec, (oh, ow), (h, w), co);
    let (p, k) = (geo.patches(), geo.patch_len());
    let in_len = h * w * ci;
    let out_len = oh * ow * co;

    let mut out = vec![F::zero(); n * out_len];
    let mut dcols = vec![F::zero(); p * k];
    for i in 0..n {
        F::gemm(p, ci, k, &xv.data()[i * in_len..][..in_len], false, wv.data(), true, &mut dcols, false);
        let dst = &mut out[i * out_len..][..out_len];
        geo.col2im(&dcols, dst);
        add_bias_rows(dst, bv.data());
    }
    let value = Tensor::from_parts(vec![n, oh, ow, co], out);
    Ok(x.tape().record(
        value,
        &[*x, *weight, *bias],
        Box::new(move |g, needs| {
            let gd = g.data();
            let mut gx = needs[0].then(|| vec![F::zero(); n * in_len]);
            let mut gw = needs[1].then(|| vec![F::zero(); k * ci]);
            let mut cols = vec![F::zero(); p * k];
            if gx.is_some() || gw.is_some() {
                for i in 0..n {
                    geo.im2col(&gd[i * out_len..][..out_len], &mut cols);
                    if let Some(gx) = gx.as_mut() {
                        F::gemm(p, k, ci, &cols, false, wv.data(), false, &mut gx[i * in_len..][..in_len], false);
                    }
                    if let Some(gw) = gw.as_mut() {
                        F::gemm(k, p, ci, &cols, true, &xv.data()[i * in_len..][..in_len], false, gw, true);
                    }
                }
            }
            vec![
                gx.map(|d| Tensor::from_parts(vec![n, h, w, ci], d)),
                gw.map(|d| Tensor::from_parts(wv.shape().to_vec(), d)),
                needs[2].then(|| bias_grad(g, co)),
            ]
        }),
    ))
}
