use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Max pooling over `(N, H, W, C)` with implicit "same" padding by −∞.
///
/// The gradient of each window goes to its first maximum in row-major order.
pub fn maxpool2d<'t, F: Element>(
    x: &Var<'t, F>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Var<'t, F>> {
    let xv = x.value();
    let [n, h, w, c] = *xv.shape() else {
        return Err(Error::InvalidShape {
            shape: xv.shape().to_vec(),
            reason: "maxpool2d expects (batch, height, width, channels)".into(),
        });
    };
    let (ph, pw) = window;
    let (sh, sw) = stride;
    if ph == 0 || pw == 0 || sh == 0 || sw == 0 {
        return Err(Error::InvalidArgument(
            "pool window and stride must be positive".into(),
        ));
    }
    let (oh, ow) = (h.div_ceil(sh), w.div_ceil(sw));
    let pad_t = ((oh.max(1) - 1) * sh + ph).saturating_sub(h) / 2;
    let pad_l = ((ow.max(1) - 1) * sw + pw).saturating_sub(w) / 2;

    let xd = xv.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = F::neg_infinity();
                    let mut at = usize::MAX;
                    for ky in 0..ph {
                        let Some(iy) = (oy * sh + ky).checked_sub(pad_t).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..pw {
                            let Some(ix) = (ox * sw + kx).checked_sub(pad_l).filter(|&v| v < w)
                            else {
                                continue;
                            };
                            let idx = ((b * h + iy) * w + ix) * c + ch;
                            if at == usize::MAX || xd[idx] > best {
                                best = xd[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
    }
    let value = Tensor::from_parts(vec![n, oh, ow, c], out);
    let in_shape = xv.shape().to_vec();
    Ok(x.tape().record(
        value,
        &[*x],
        Box::new(move |g, _| {
            let mut gx = vec![F::zero(); in_shape.iter().product()];
            for (&at, &gv) in argmax.iter().zip(g.data()) {
                if at != usize::MAX {
                    gx[at] += gv;
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
        }),
    ))
}
