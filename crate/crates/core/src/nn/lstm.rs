use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops::sigmoid, Element, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmSpec {
    pub input_size: usize,
    pub hidden_size: usize,
    pub bidirectional: bool,
    pub return_sequences: bool,
}

impl LstmSpec {
    pub fn new(input_size: usize, hidden_size: usize) -> Self {
        LstmSpec {
            input_size,
            hidden_size,
            bidirectional: true,
            return_sequences: true,
        }
    }

    pub fn final_state(mut self) -> Self {
        self.return_sequences = false;
        self
    }

    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn per_direction_params(&self) -> usize {
        let (n, h) = (self.input_size, self.hidden_size);
        4 * ((n + h) * h + h)
    }

    pub fn param_count(&self) -> usize {
        self.directions() * self.per_direction_params()
    }

    pub fn output_width(&self) -> usize {
        self.directions() * self.hidden_size
    }
}

/// One direction of an LSTM over `x: (N, T, n)`.
///
/// `kernel: (n, 4h)`, `recurrent: (h, 4h)`, `bias: (4h)`, gate blocks ordered
/// input, forget, cell, output. Returns every hidden state as `(N, T, h)`;
/// with `reverse` the sequence is consumed from the last step and each
/// state is written back at its own time index.
pub fn lstm_direction<'t, F: Element>(
    x: &Var<'t, F>,
    kernel: &Var<'t, F>,
    recurrent: &Var<'t, F>,
    bias: &Var<'t, F>,
    reverse: bool,
) -> Result<Var<'t, F>> {
    let xv = x.value();
    let kv = kernel.value();
    let rv = recurrent.value();
    let bv = bias.value();
    let [n, t_len, ni] = *xv.shape() else {
        return Err(Error::InvalidShape {
            shape: xv.shape().to_vec(),
            reason: "lstm expects (batch, time, features)".into(),
        });
    };
    if t_len == 0 {
        return Err(Error::InvalidArgument(
            "lstm over an empty sequence".into(),
        ));
    }
    let [kn, g4] = *kv.shape() else {
        return Err(Error::shape("lstm kernel", kv.shape(), &[ni, 0]));
    };
    if kn != ni || g4 % 4 != 0 || g4 == 0 {
        return Err(Error::shape("lstm kernel", kv.shape(), &[ni, g4]));
    }
    let h = g4 / 4;
    if rv.shape() != [h, g4] {
        return Err(Error::shape("lstm recurrent", rv.shape(), &[h, g4]));
    }
    if bv.shape() != [g4] {
        return Err(Error::shape("lstm bias", bv.shape(), &[g4]));
    }

    // Input projections for every (sample, step) at once: (N*T, 4h).
    let rows = n * t_len;
    let mut proj = vec![F::zero(); rows * g4];
    F::gemm(rows, ni, g4, xv.data(), false, kv.data(), false, &mut proj, false);

    // acts[(step, sample)] holds activated gates i, f, g, o.
    let mut acts = vec![F::zero(); t_len * n * g4];
    let mut cells = vec![F::zero(); t_len * n * h];
    let mut hs = vec![F::zero(); t_len * n * h];
    let mut h_prev = vec![F::zero(); n * h];
    let mut c_prev = vec![F::zero(); n * h];
    let mut z = vec![F::zero(); n * g4];
    let order: Vec<usize> = if reverse {
        (0..t_len).rev().collect()
    } else {
        (0..t_len).collect()
    };
    for (step, &t) in order.iter().enumerate() {
        for b in 0..n {
            let src = &proj[(b * t_len + t) * g4..][..g4];
            let dst = &mut z[b * g4..][..g4];
            for ((d, &s), &bb) in dst.iter_mut().zip(src).zip(bv.data()) {
                *d = s + bb;
            }
        }
        if step > 0 {
            F::gemm(n, h, g4, &h_prev, false, rv.data(), false, &mut z, true);
        }
        let a = &mut acts[step * n * g4..][..n * g4];
        let cs = &mut cells[step * n * h..][..n * h];
        let hh = &mut hs[step * n * h..][..n * h];
        for b in 0..n {
            let zb = &z[b * g4..][..g4];
            let ab = &mut a[b * g4..][..g4];
            for j in 0..h {
                let i = sigmoid(zb[j]);
                let f = sigmoid(zb[h + j]);
                let g = zb[2 * h + j].tanh();
                let o = sigmoid(zb[3 * h + j]);
                ab[j] = i;
                ab[h + j] = f;
                ab[2 * h + j] = g;
                ab[3 * h + j] = o;
                let c = f * c_prev[b * h + j] + i * g;
                cs[b * h + j] = c;
                hh[b * h + j] = o * c.tanh();
            }
        }
        h_prev.copy_from_slice(hh);
        c_prev.copy_from_slice(cs);
    }

    let mut out = vec![F::zero(); rows * h];
    for (step, &t) in order.iter().enumerate() {
        for b in 0..n {
            out[(b * t_len + t) * h..][..h].copy_from_slice(&hs[(step * n + b) * h..][..h]);
        }
    }
    let value = Tensor::from_parts(vec![n, t_len, h], out);

    Ok(x.tape().record(
        value,
        &[*x, *kernel, *recurrent, *bias],
        Box::new(move |grad, needs| {
            let gd = grad.data();
            // dz rows in (sample, time) order so the kernel gradient is one gemm.
            let mut dz_all = vec![F::zero(); rows * g4];
            let mut dwr = vec![F::zero(); h * g4];
            let mut dh_next = vec![F::zero(); n * h];
            let mut dc_next = vec![F::zero(); n * h];
            let mut dz = vec![F::zero(); n * g4];
            for step in (0..t_len).rev() {
                let t = order[step];
                let a = &acts[step * n * g4..][..n * g4];
                let cs = &cells[step * n * h..][..n * h];
                for b in 0..n {
                    for j in 0..h {
                        let k = b * h + j;
                        let ab = &a[b * g4..][..g4];
                        let (i, f, g, o) = (ab[j], ab[h + j], ab[2 * h + j], ab[3 * h + j]);
                        let c = cs[k];
                        let c_before = if step > 0 {
                            cells[(step - 1) * n * h + k]
                        } else {
                            F::zero()
                        };
                        let dh = gd[(b * t_len + t) * h + j] + dh_next[k];
                        let tc = c.tanh();
                        let dc = dc_next[k] + dh * o * (F::one() - tc * tc);
                        let zb = &mut dz[b * g4..][..g4];
                        zb[j] = dc * g * i * (F::one() - i);
                        zb[h + j] = dc * c_before * f * (F::one() - f);
                        zb[2 * h + j] = dc * i * (F::one() - g * g);
                        zb[3 * h + j] = dh * tc * o * (F::one() - o);
                        dc_next[k] = dc * f;
                    }
                }
                if step > 0 {
                    let h_before = &hs[(step - 1) * n * h..][..n * h];
                    F::gemm(h, n, g4, h_before, true, &dz, false, &mut dwr, true);
                    F::gemm(n, g4, h, &dz, false, rv.data(), true, &mut dh_next, false);
                } else {
                    dh_next.iter_mut().for_each(|v| *v = F::zero());
                }
                for b in 0..n {
                    dz_all[(b * t_len + t) * g4..][..g4].copy_from_slice(&dz[b * g4..][..g4]);
                }
            }
            let gx = needs[0].then(|| {
                let mut dx = vec![F::zero(); rows * ni];
                F::gemm(rows, g4, ni, &dz_all, false, kv.data(), true, &mut dx, false);
                Tensor::from_parts(vec![n, t_len, ni], dx)
            });
            let gk = needs[1].then(|| {
                let mut dk = vec![F::zero(); ni * g4];
                F::gemm(ni, rows, g4, xv.data(), true, &dz_all, false, &mut dk, false);
                Tensor::from_parts(vec![ni, g4], dk)
            });
            let gb = needs[3].then(|| {
                let mut db = vec![F::zero(); g4];
                for row in dz_all.chunks(g4) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                Tensor::from_parts(vec![g4], db)
            });
            vec![
                gx,
                gk,
                needs[2].then(|| Tensor::from_parts(vec![h, g4], dwr)),
                gb,
            ]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::{Rng, Tape};

    #[test]
    fn paper_parameter_counts() {
        assert_eq!(LstmSpec::new(32_768, 256).param_count(), 67_635_200);
        assert_eq!(LstmSpec::new(512, 128).param_count(), 656_384);
        assert_eq!(LstmSpec::new(512, 128).output_width(), 256);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut rng = Rng::new(3);
        let tape = Tape::<f64>::new();
        let x = tape.constant(rng.randn([2, 5, 3]));
        let k = tape.constant(Tensor::zeros([3, 8]));
        let r = tape.constant(Tensor::zeros([2, 8]));
        let b = tape.constant(Tensor::zeros([8]));
        for reverse in [false, true] {
            let y = lstm_direction(&x, &k, &r, &b, reverse).unwrap();
            assert_eq!(y.shape(), vec![2, 5, 2]);
            assert!(y.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 0, 3]));
        let k = tape.constant(Tensor::zeros([3, 8]));
        let r = tape.constant(Tensor::zeros([2, 8]));
        let b = tape.constant(Tensor::zeros([8]));
        assert!(lstm_direction(&x, &k, &r, &b, false).is_err());
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64([1, 1, 1], &[0.5]).unwrap());
        let k = tape.constant(Tensor::from_f64([1, 4], &[1.0, -1.0, 2.0, 0.5]).unwrap());
        let r = tape.constant(Tensor::zeros([1, 4]));
        let b = tape.constant(Tensor::from_f64([4], &[0.0, 1.0, 0.0, 0.0]).unwrap());
        let y = lstm_direction(&x, &k, &r, &b, false).unwrap();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let c = s(0.5) * (1.0f64).tanh();
        let expected = s(0.25) * c.tanh();
        assert!((y.value().data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn multi_step_batch_matches_scalar_recurrence() {
        let mut rng = Rng::new(5);
        let (n, t_len, ni, h) = (2, 4, 3, 2);
        let xs: Tensor<f64> = rng.randn([n, t_len, ni]);
        let (kt, rt, bt): (Tensor<f64>, Tensor<f64>, Tensor<f64>) =
            (rng.randn([ni, 4 * h]), rng.randn([h, 4 * h]), rng.randn([4 * h]));
        let tape = Tape::<f64>::new();
        let y = lstm_direction(
            &tape.constant(xs.clone()),
            &tape.constant(kt.clone()),
            &tape.constant(rt.clone()),
            &tape.constant(bt.clone()),
            false,
        )
        .unwrap()
        .value();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (x, k, r, b) = (xs.data(), kt.data(), rt.data(), bt.data());
        for bi in 0..n {
            let (mut hp, mut cp) = (vec![0.0; h], vec![0.0; h]);
            for t in 0..t_len {
                let mut z = b.to_vec();
                for (g, zg) in z.iter_mut().enumerate() {
                    for i in 0..ni {
                        *zg += x[(bi * t_len + t) * ni + i] * k[i * 4 * h + g];
                    }
                    for j in 0..h {
                        *zg += hp[j] * r[j * 4 * h + g];
                    }
                }
                for j in 0..h {
                    let c = s(z[h + j]) * cp[j] + s(z[j]) * z[2 * h + j].tanh();
                    cp[j] = c;
                    hp[j] = s(z[3 * h + j]) * c.tanh();
                }
                for j in 0..h {
                    let got = y.data()[(bi * t_len + t) * h + j];
                    assert!((got - hp[j]).abs() < 1e-12, "sample {bi} step {t}: {got} vs {}", hp[j]);
                }
            }
        }
    }

    #[test]
    fn reverse_direction_equals_forward_on_flipped_input() {
        let mut rng = Rng::new(11);
        let tape = Tape::<f64>::new();
        let raw: Tensor<f64> = rng.randn([1, 4, 2]);
        let flipped: Vec<f64> = raw.data().chunks(2).rev().flatten().copied().collect();
        let k = tape.constant(rng.randn([2, 12]));
        let r = tape.constant(rng.randn([3, 12]));
        let b = tape.constant(rng.randn([12]));
        let x = tape.constant(raw);
        let xf = tape.constant(Tensor::new([1, 4, 2], flipped).unwrap());
        let back = lstm_direction(&x, &k, &r, &b, true).unwrap().value();
        let fwd = lstm_direction(&xf, &k, &r, &b, false).unwrap().value();
        let refl: Vec<f64> = fwd.data().chunks(3).rev().flatten().copied().collect();
        assert_eq!(back.data(), refl.as_slice());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(21);
        let inputs = vec![
            rng.randn([2, 4, 3]),
            rng.randn([3, 8]).map(|v| 0.5 * v),
            rng.randn([2, 8]).map(|v| 0.5 * v),
            rng.randn([8]),
            rng.randn([2, 4, 2]),
        ];
        for reverse in [false, true] {
            let err = gradcheck::check(&inputs, |_, v| {
                lstm_direction(&v[0], &v[1], &v[2], &v[3], reverse)
                    .unwrap()
                    .mul(&v[4])
                    .unwrap()
                    .sum()
            });
            assert!(err < 1e-4, "reverse={reverse}: relative error {err}");
        }
    }
}
