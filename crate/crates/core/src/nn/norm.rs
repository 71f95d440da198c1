use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Hyperparameters of a batch-normalization layer (Keras defaults).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSpec {
    pub channels: usize,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormSpec {
    pub fn new(channels: usize) -> Self {
        BatchNormSpec {
            channels,
            momentum: 0.99,
            epsilon: 1e-3,
        }
    }

    /// gamma, beta, running mean and running variance.
    pub fn param_count(&self) -> usize {
        4 * self.channels
    }

    pub fn trainable_count(&self) -> usize {
        2 * self.channels
    }
}

/// Running statistics carried between batches.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F: Element> {
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
}

/// Batch normalization over the trailing (channel) axis.
///
/// In train mode the batch statistics normalize the input and updated
/// running statistics are returned; infer mode uses `running` only.
pub fn batchnorm<'t, F: Element>(
    x: &Var<'t, F>,
    gamma: &Var<'t, F>,
    beta: &Var<'t, F>,
    running: &RunningStats<F>,
    spec: &BatchNormSpec,
    mode: Mode,
) -> Result<(Var<'t, F>, Option<RunningStats<F>>)> {
    let xv = x.value();
    let c = spec.channels;
    if xv.shape().last() != Some(&c) {
        return Err(Error::shape("batchnorm", xv.shape(), &[c]));
    }
    for t in [&gamma.value(), &beta.value(), &running.mean, &running.var] {
        if t.shape() != [c] {
            return Err(Error::shape("batchnorm", t.shape(), &[c]));
        }
    }
    let m = xv.len() / c.max(1);
    if mode == Mode::Train && m == 0 {
        return Err(Error::InvalidArgument(
            "batch normalization over an empty batch".into(),
        ));
    }
    let eps = F::lit(spec.epsilon);
    let xd = xv.data();

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![F::zero(); c];
            for px in xd.chunks(c) {
                for (a, &v) in mean.iter_mut().zip(px) {
                    *a += v;
                }
            }
            let inv_m = F::one() / F::lit(m as f64);
            mean.iter_mut().for_each(|v| *v *= inv_m);
            let mut var = vec![F::zero(); c];
            for px in xd.chunks(c) {
                for ((a, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
                    *a += (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_m);
            (mean, var)
        }
        Mode::Infer => (running.mean.to_vec(), running.var.to_vec()),
    };
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let gv = gamma.value();
    let bv = beta.value();
    let mut xhat = Vec::with_capacity(xd.len());
    let mut out = Vec::with_capacity(xd.len());
    for px in xd.chunks(c) {
        for ch in 0..c {
            let h = (px[ch] - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(gv.data()[ch] * h + bv.data()[ch]);
        }
    }

    let updated = (mode == Mode::Train).then(|| {
        let mom = F::lit(spec.momentum);
        let keep = F::one() - mom;
        let bessel = if m > 1 {
            F::lit(m as f64 / (m as f64 - 1.0))
        } else {
            F::one()
        };
        RunningStats {
            mean: Tensor::from_parts(
                vec![c],
                running
                    .mean
                    .data()
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| mom * r + keep * b)
                    .collect(),
            ),
            var: Tensor::from_parts(
                vec![c],
                running
                    .var
                    .data()
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| mom * r + keep * b * bessel)
                    .collect(),
            ),
        }
    });

    let shape = xv.shape().to_vec();
    let value = Tensor::from_parts(shape.clone(), out);
    let y = x.tape().record(
        value,
        &[*x, *gamma, *beta],
        Box::new(move |g, needs| {
            let gd = g.data();
            let mut dgamma = vec![F::zero(); c];
            let mut dbeta = vec![F::zero(); c];
            for (gp, hp) in gd.chunks(c).zip(xhat.chunks(c)) {
                for ch in 0..c {
                    dbeta[ch] += gp[ch];
                    dgamma[ch] += gp[ch] * hp[ch];
                }
            }
            let gx = needs[0].then(|| {
                let gam = gv.data();
                let mut dx = Vec::with_capacity(gd.len());
                match mode {
                    Mode::Train => {
                        let mf = F::lit(m as f64);
                        for (gp, hp) in gd.chunks(c).zip(xhat.chunks(c)) {
                            for ch in 0..c {
                                let scale = gam[ch] * inv_std[ch] / mf;
                                dx.push(scale * (mf * gp[ch] - dbeta[ch] - hp[ch] * dgamma[ch]));
                            }
                        }
                    }
                    Mode::Infer => {
                        for gp in gd.chunks(c) {
                            for ch in 0..c {
                                dx.push(gp[ch] * gam[ch] * inv_std[ch]);
                            }
                        }
                    }
                }
                Tensor::from_parts(shape.clone(), dx)
            });
            vec![
                gx,
                needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
                needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
            ]
        }),
    );
    Ok((y, updated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::{Rng, Tape};

    fn identity_stats(c: usize) -> RunningStats<f64> {
        RunningStats {
            mean: Tensor::zeros([c]),
            var: Tensor::ones([c]),
        }
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = Rng::new(1);
        let tape = Tape::<f64>::new();
        let raw: Tensor<f64> = rng.randn([4, 3, 5, 2]);
        let x = tape.constant(raw.map(|v| 3.0 * v + 2.0));
        let gamma = tape.constant(Tensor::ones([2]));
        let beta = tape.constant(Tensor::zeros([2]));
        let spec = BatchNormSpec::new(2);
        let (y, stats) =
            batchnorm(&x, &gamma, &beta, &identity_stats(2), &spec, Mode::Train).unwrap();
        assert!(stats.is_some());
        let yv = y.value();
        for ch in 0..2 {
            let vals: Vec<f64> = yv.data().iter().skip(ch).step_by(2).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            // epsilon shifts the variance slightly below one
            let expected = {
                let raw_var: f64 = {
                    let xs: Vec<f64> = x.value().data().iter().skip(ch).step_by(2).copied().collect();
                    let m = xs.iter().sum::<f64>() / xs.len() as f64;
                    xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / xs.len() as f64
                };
                raw_var / (raw_var + spec.epsilon)
            };
            assert!((var - expected).abs() < 1e-5, "var {var}");
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn infer_mode_with_unit_stats_is_identity_up_to_epsilon() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([2, 2], &[1., -2., 0.5, 4.]).unwrap());
        let gamma = tape.constant(Tensor::ones([2]));
        let beta = tape.constant(Tensor::zeros([2]));
        let spec = BatchNormSpec::new(2);
        let (y, stats) =
            batchnorm(&x, &gamma, &beta, &identity_stats(2), &spec, Mode::Infer).unwrap();
        assert!(stats.is_none());
        let scale = 1.0 / (1.0 + spec.epsilon).sqrt();
        for (a, b) in y.value().data().iter().zip(x.value().data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_mode_is_batch_independent() {
        let tape = Tape::<f64>::new();
        let stats = RunningStats {
            mean: Tensor::from_f64([1], &[0.3]).unwrap(),
            var: Tensor::from_f64([1], &[2.0]).unwrap(),
        };
        let spec = BatchNormSpec::new(1);
        let gamma = tape.constant(Tensor::ones([1]));
        let beta = tape.constant(Tensor::zeros([1]));
        let single = tape.constant(Tensor::from_f64([1, 1], &[1.5]).unwrap());
        let pair = tape.constant(Tensor::from_f64([2, 1], &[1.5, -9.0]).unwrap());
        let (a, _) = batchnorm(&single, &gamma, &beta, &stats, &spec, Mode::Infer).unwrap();
        let (b, _) = batchnorm(&pair, &gamma, &beta, &stats, &spec, Mode::Infer).unwrap();
        assert_eq!(a.value().data()[0], b.value().data()[0]);
    }

    #[test]
    fn state_count_for_64_channels() {
        assert_eq!(BatchNormSpec::new(64).param_count(), 256);
        assert_eq!(BatchNormSpec::new(64).trainable_count(), 128);
    }

    #[test]
    fn empty_batch_rejected_in_train_mode() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([0, 2]));
        let gamma = tape.constant(Tensor::ones([2]));
        let beta = tape.constant(Tensor::zeros([2]));
        let r = batchnorm(&x, &gamma, &beta, &identity_stats(2), &BatchNormSpec::new(2), Mode::Train);
        assert!(r.is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(9);
        let spec = BatchNormSpec::new(3);
        let stats = RunningStats {
            mean: rng.randn([3]),
            var: rng.rand_uniform([3], 0.5, 2.0),
        };
        let inputs = vec![
            rng.randn([2, 2, 3, 3]),
            rng.randn([3]),
            rng.randn([3]),
            rng.randn([2, 2, 3, 3]),
        ];
        for mode in [Mode::Train, Mode::Infer] {
            let err = gradcheck::check(&inputs, |_, v| {
                let (y, _) = batchnorm(&v[0], &v[1], &v[2], &stats, &spec, mode).unwrap();
                y.mul(&v[3]).unwrap().sum()
            });
            assert!(err < 1e-4, "{mode:?}: relative error {err}");
        }
    }
}
