use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside [`bce`].
pub const BCE_EPS: f64 = 1e-7;

fn batch_of(shape: &[usize]) -> usize {
    if shape.len() >= 2 {
        shape[0].max(1)
    } else {
        1
    }
}

/// Binary cross-entropy summed over each sample's elements and averaged
/// over the leading batch axis (rank ≥ 2; rank 1 is a single sample).
///
/// `x_hat` must lie in `[0, 1]`; it is clamped away from the endpoints and
/// the gradient is zero where the clamp is active.
pub fn bce<'t, F: Element>(x: &Var<'t, F>, x_hat: &Var<'t, F>) -> Result<Var<'t, F>> {
    let xv = x.value();
    let pv = x_hat.value();
    if xv.shape() != pv.shape() {
        return Err(Error::shape("bce", xv.shape(), pv.shape()));
    }
    if let Some(bad) = pv.data().iter().find(|&&p| !(p >= F::zero() && p <= F::one())) {
        return Err(Error::Domain {
            op: "bce",
            reason: format!("prediction {:?} outside [0, 1]", bad),
        });
    }
    let n = batch_of(xv.shape());
    let inv_n = F::one() / F::lit(n as f64);
    let lo = F::lit(BCE_EPS);
    let hi = F::one() - lo;
    let mut total = F::zero();
    for (&t, &p) in xv.data().iter().zip(pv.data()) {
        let q = p.max(lo).min(hi);
        total -= t * q.ln() + (F::one() - t) * (F::one() - q).ln();
    }
    let value = Tensor::scalar(total * inv_n);
    Ok(x.tape().record(
        value,
        &[*x, *x_hat],
        Box::new(move |g, needs| {
            let g = g.data()[0] * inv_n;
            let gx = needs[0].then(|| {
                let d = pv
                    .data()
                    .iter()
                    .map(|&p| {
                        let q = p.max(lo).min(hi);
                        g * ((F::one() - q).ln() - q.ln())
                    })
                    .collect();
                Tensor::new(xv.shape().to_vec(), d).expect("shape")
            });
            let gp = needs[1].then(|| {
                let d = xv
                    .data()
                    .iter()
                    .zip(pv.data())
                    .map(|(&t, &p)| {
                        if p < lo || p > hi {
                            F::zero()
                        } else {
                            g * ((F::one() - t) / (F::one() - p) - t / p)
                        }
                    })
                    .collect();
                Tensor::new(pv.shape().to_vec(), d).expect("shape")
            });
            vec![gx, gp]
        }),
    ))
}

/// Same objective as [`bce`] with `x_hat = sigmoid(logits)`, evaluated
/// stably from the logits and without clamping.
pub fn bce_with_logits<'t, F: Element>(x: &Var<'t, F>, logits: &Var<'t, F>) -> Result<Var<'t, F>> {
    let xv = x.value();
    let lv = logits.value();
    if xv.shape() != lv.shape() {
        return Err(Error::shape("bce_with_logits", xv.shape(), lv.shape()));
    }
    let n = batch_of(xv.shape());
    let inv_n = F::one() / F::lit(n as f64);
    let mut total = F::zero();
    for (&t, &l) in xv.data().iter().zip(lv.data()) {
        // softplus(l) - t·l
        total += l.max(F::zero()) + (-l.abs()).exp().ln_1p() - t * l;
    }
    let value = Tensor::scalar(total * inv_n);
    Ok(x.tape().record(
        value,
        &[*x, *logits],
        Box::new(move |g, needs| {
            let g = g.data()[0] * inv_n;
            let gx = needs[0].then(|| lv.map(|l| -g * l));
            let gl = needs[1].then(|| {
                let d = xv
                    .data()
                    .iter()
                    .zip(lv.data())
                    .map(|(&t, &l)| g * (crate::tensor::ops::sigmoid(l) - t))
                    .collect();
                Tensor::new(lv.shape().to_vec(), d).expect("shape")
            });
            vec![gx, gl]
        }),
    ))
}

/// `−½ Σ (1 + v − μ² − eᵛ)` summed over the latent axis and averaged over
/// the batch.
pub fn kl_divergence<'t, F: Element>(mu: &Var<'t, F>, logvar: &Var<'t, F>) -> Result<Var<'t, F>> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape("kl_divergence", &mu.shape(), &logvar.shape()));
    }
    let n = batch_of(&mu.shape());
    // ½ Σ (μ² + eᵛ − 1 − v)
    let terms = mu
        .square()
        .add(&logvar.exp())?
        .sub(&logvar.add_scalar(1.0))?;
    Ok(terms.sum().scale(0.5 / n as f64))
}

/// `z = μ + ε ⊙ exp(v / 2)` with `ε` held constant.
pub fn sample_latent<'t, F: Element>(
    mu: &Var<'t, F>,
    logvar: &Var<'t, F>,
    eps: &Tensor<F>,
) -> Result<Var<'t, F>> {
    if mu.shape() != logvar.shape() || mu.shape() != eps.shape() {
        return Err(Error::shape("sample_latent", &mu.shape(), &logvar.shape()));
    }
    let eps = mu.tape().constant(eps.clone());
    mu.add(&logvar.scale(0.5).exp().mul(&eps)?)
}

/// Loss terms of one batch; `total = reconstruction + kl`.
#[derive(Clone, Copy, Debug)]
pub struct Elbo<'t, F: Element> {
    pub total: Var<'t, F>,
    pub reconstruction: Var<'t, F>,
    pub kl: Var<'t, F>,
}

pub fn elbo_loss<'t, F: Element>(
    x: &Var<'t, F>,
    x_hat: &Var<'t, F>,
    mu: &Var<'t, F>,
    logvar: &Var<'t, F>,
) -> Result<Elbo<'t, F>> {
    let reconstruction = bce(x, x_hat)?;
    let kl = kl_divergence(mu, logvar)?;
    Ok(Elbo {
        total: reconstruction.add(&kl)?,
        reconstruction,
        kl,
    })
}

/// [`elbo_loss`] computed from decoder logits.
pub fn elbo_loss_from_logits<'t, F: Element>(
    x: &Var<'t, F>,
    logits: &Var<'t, F>,
    mu: &Var<'t, F>,
    logvar: &Var<'t, F>,
) -> Result<Elbo<'t, F>> {
    let reconstruction = bce_with_logits(x, logits)?;
    let kl = kl_divergence(mu, logvar)?;
    Ok(Elbo {
        total: reconstruction.add(&kl)?,
        reconstruction,
        kl,
    })
}
