//! Layers shared by both networks, named parameter storage, and the
//! per-step [`Session`] that binds parameters to a tape.

mod conv;
mod lstm;
mod norm;
mod pool;

use std::cell::RefCell;
use std::collections::BTreeMap;

pub use conv::{conv2d, conv2d_transpose, ConvSpec, Padding};
pub use lstm::{lstm_direction, LstmSpec};
pub use norm::{batchnorm, BatchNormSpec, Mode, RunningStats};
pub use pool::maxpool2d;

use crate::error::{Error, Result};
use crate::tensor::{Element, Gradients, Rng, Tape, Tensor, Var};

/// Affine map over the trailing axis: `x (…, n) · w (n, m) + b (m)`.
pub fn dense<'t, F: Element>(x: &Var<'t, F>, w: &Var<'t, F>, b: &Var<'t, F>) -> Result<Var<'t, F>> {
    let shape = x.shape();
    let wshape = w.shape();
    let (Some(&n), [wn, m]) = (shape.last(), wshape.as_slice()) else {
        return Err(Error::shape("dense", &shape, &wshape));
    };
    if n != *wn {
        return Err(Error::shape("dense", &shape, &wshape));
    }
    let rows = shape.iter().product::<usize>() / n.max(1);
    let mut out_shape = shape.clone();
    *out_shape.last_mut().expect("nonempty") = *m;
    x.reshape([rows, n])?
        .matmul(w)?
        .add_bias(b)?
        .reshape(out_shape)
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
pub fn dropout<'t, F: Element>(x: &Var<'t, F>, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var<'t, F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(*x);
    }
    let keep = F::lit(1.0 / (1.0 - rate));
    let shape = x.shape();
    let mask: Vec<F> = (0..shape.iter().product::<usize>())
        .map(|_| if rng.uniform() < rate { F::zero() } else { keep })
        .collect();
    x.mul(&x.tape().constant(Tensor::new(shape, mask)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<F: Element = f32> {
    pub value: Tensor<F>,
    pub trainable: bool,
}

/// Named parameters (trainable weights and non-trainable layer state),
/// kept in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Element = f32> {
    entries: BTreeMap<String, Param<F>>,
}

fn glorot<F: Element>(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    rng.rand_uniform(shape.to_vec(), -limit, limit)
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<F>> {
        self.entries.get(name)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::shape("set parameter", slot.value.shape(), value.shape()));
        }
        slot.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scalar count over every tensor, trainable or not.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<G: Element>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.all_finite())
    }

    /// `{prefix}.kernel (kh, kw, in, out)` and `{prefix}.bias`.
    pub fn add_conv(&mut self, prefix: &str, spec: &ConvSpec, rng: &mut Rng) -> Result<()> {
        let (kh, kw) = spec.kernel;
        let (ci, co) = (spec.in_channels, spec.out_channels);
        let w = glorot(rng, &[kh, kw, ci, co], kh * kw * ci, kh * kw * co);
        self.insert(format!("{prefix}.kernel"), w, true)?;
        self.insert(format!("{prefix}.bias"), Tensor::zeros([co]), true)
    }

    /// `{prefix}.kernel (kh, kw, out, in)` and `{prefix}.bias`.
    pub fn add_conv_transpose(&mut self, prefix: &str, spec: &ConvSpec, rng: &mut Rng) -> Result<()> {
        let (kh, kw) = spec.kernel;
        let (ci, co) = (spec.in_channels, spec.out_channels);
        let w = glorot(rng, &[kh, kw, co, ci], kh * kw * ci, kh * kw * co);
        self.insert(format!("{prefix}.kernel"), w, true)?;
        self.insert(format!("{prefix}.bias"), Tensor::zeros([co]), true)
    }

    pub fn add_dense(&mut self, prefix: &str, n: usize, m: usize, rng: &mut Rng) -> Result<()> {
        self.insert(format!("{prefix}.kernel"), glorot(rng, &[n, m], n, m), true)?;
        self.insert(format!("{prefix}.bias"), Tensor::zeros([m]), true)
    }

    pub fn add_batchnorm(&mut self, prefix: &str, spec: &BatchNormSpec) -> Result<()> {
        let c = spec.channels;
        self.insert(format!("{prefix}.gamma"), Tensor::ones([c]), true)?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros([c]), true)?;
        self.insert(format!("{prefix}.moving_mean"), Tensor::zeros([c]), false)?;
        self.insert(format!("{prefix}.moving_var"), Tensor::ones([c]), false)
    }

    /// Per direction `{prefix}.{fw|bw}.{kernel, recurrent, bias}`; weights
    /// uniform in ±√(1/h), forget-gate bias one.
    pub fn add_lstm(&mut self, prefix: &str, spec: &LstmSpec, rng: &mut Rng) -> Result<()> {
        let (n, h) = (spec.input_size, spec.hidden_size);
        let limit = (1.0 / h.max(1) as f64).sqrt();
        let dirs: &[&str] = if spec.bidirectional { &["fw", "bw"] } else { &["fw"] };
        for d in dirs {
            self.insert(
                format!("{prefix}.{d}.kernel"),
                rng.rand_uniform([n, 4 * h], -limit, limit),
                true,
            )?;
            self.insert(
                format!("{prefix}.{d}.recurrent"),
                rng.rand_uniform([h, 4 * h], -limit, limit),
                true,
            )?;
            let mut bias = vec![F::zero(); 4 * h];
            bias[h..2 * h].iter_mut().for_each(|v| *v = F::one());
            self.insert(format!("{prefix}.{d}.bias"), Tensor::new([4 * h], bias)?, true)?;
        }
        Ok(())
    }
}

/// Binds a [`ParamStore`] to a tape for one forward/backward pass.
///
/// Trainable tensors become tape parameters, the rest are read as plain
/// values. Batch-norm running statistics computed in train mode are
/// collected and can be written back with [`Session::apply_updates`].
pub struct Session<'t, F: Element = f32> {
    tape: &'t Tape<F>,
    vars: BTreeMap<String, Var<'t, F>>,
    state: BTreeMap<String, Tensor<F>>,
    updates: RefCell<BTreeMap<String, Tensor<F>>>,
    rng: RefCell<Rng>,
    mode: Mode,
}

impl<'t, F: Element> Session<'t, F> {
    pub fn new(tape: &'t Tape<F>, store: &ParamStore<F>, mode: Mode, rng: Rng) -> Self {
        let mut vars = BTreeMap::new();
        let mut state = BTreeMap::new();
        for (name, p) in store.iter() {
            if p.trainable {
                vars.insert(name.to_string(), tape.param(p.value.clone()));
            } else {
                state.insert(name.to_string(), p.value.clone());
            }
        }
        Session {
            tape,
            vars,
            state,
            updates: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(rng),
            mode,
        }
    }

    /// Session over vars that are already on the tape, e.g. perturbed
    /// copies inside a gradient check.
    pub fn from_vars(
        tape: &'t Tape<F>,
        vars: BTreeMap<String, Var<'t, F>>,
        state: BTreeMap<String, Tensor<F>>,
        mode: Mode,
        rng: Rng,
    ) -> Self {
        Session {
            tape,
            vars,
            state,
            updates: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(rng),
            mode,
        }
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, F>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn state(&self, name: &str) -> Result<Tensor<F>> {
        self.state
            .get(name)
            .cloned()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn params(&self) -> &BTreeMap<String, Var<'t, F>> {
        &self.vars
    }

    /// Gradient of every trainable parameter, by name.
    pub fn gradients(&self, grads: &Gradients<F>) -> BTreeMap<String, Tensor<F>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get(*v)))
            .collect()
    }

    pub fn with_rng<R>(&self, f: impl FnOnce(&mut Rng) -> R) -> R {
        f(&mut self.rng.borrow_mut())
    }

    pub fn updates(&self) -> BTreeMap<String, Tensor<F>> {
        self.updates.borrow().clone()
    }

    pub fn apply_updates(&self, store: &mut ParamStore<F>) -> Result<()> {
        for (name, value) in self.updates.borrow().iter() {
            store.set(name, value.clone())?;
        }
        Ok(())
    }

    pub fn conv2d(&self, prefix: &str, x: &Var<'t, F>, spec: &ConvSpec) -> Result<Var<'t, F>> {
        conv2d(
            x,
            &self.param(&format!("{prefix}.kernel"))?,
            &self.param(&format!("{prefix}.bias"))?,
            spec,
        )
    }

    pub fn conv2d_transpose(&self, prefix: &str, x: &Var<'t, F>, spec: &ConvSpec) -> Result<Var<'t, F>> {
        conv2d_transpose(
            x,
            &self.param(&format!("{prefix}.kernel"))?,
            &self.param(&format!("{prefix}.bias"))?,
            spec,
        )
    }

    pub fn dense(&self, prefix: &str, x: &Var<'t, F>) -> Result<Var<'t, F>> {
        dense(
            x,
            &self.param(&format!("{prefix}.kernel"))?,
            &self.param(&format!("{prefix}.bias"))?,
        )
    }

    pub fn batchnorm(&self, prefix: &str, x: &Var<'t, F>, spec: &BatchNormSpec) -> Result<Var<'t, F>> {
        let mean_key = format!("{prefix}.moving_mean");
        let var_key = format!("{prefix}.moving_var");
        let running = RunningStats {
            mean: self.state(&mean_key)?,
            var: self.state(&var_key)?,
        };
        let (y, updated) = batchnorm(
            x,
            &self.param(&format!("{prefix}.gamma"))?,
            &self.param(&format!("{prefix}.beta"))?,
            &running,
            spec,
            self.mode,
        )?;
        if let Some(stats) = updated {
            let mut u = self.updates.borrow_mut();
            u.insert(mean_key, stats.mean);
            u.insert(var_key, stats.var);
        }
        Ok(y)
    }

    pub fn dropout(&self, x: &Var<'t, F>, rate: f64) -> Result<Var<'t, F>> {
        dropout(x, rate, self.mode, &mut self.rng.borrow_mut())
    }

    /// Runs a (bi)directional LSTM over `x: (N, T, n)`. Returns `(N, T, dirs·h)`
    /// or, without `return_sequences`, the final states `(N, dirs·h)` taken
    /// from the last step forward and the first step backward.
    pub fn lstm(&self, prefix: &str, x: &Var<'t, F>, spec: &LstmSpec) -> Result<Var<'t, F>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != spec.input_size {
            return Err(Error::shape(
                "lstm",
                &shape,
                &[shape.first().copied().unwrap_or(0), 0, spec.input_size],
            ));
        }
        let run = |d: &str, reverse: bool| {
            lstm_direction(
                x,
                &self.param(&format!("{prefix}.{d}.kernel"))?,
                &self.param(&format!("{prefix}.{d}.recurrent"))?,
                &self.param(&format!("{prefix}.{d}.bias"))?,
                reverse,
            )
        };
        let t_len = shape[1];
        let fw = run("fw", false)?;
        let bw = if spec.bidirectional {
            Some(run("bw", true)?)
        } else {
            None
        };
        if spec.return_sequences {
            return match bw {
                Some(bw) => Var::concat(&[fw, bw], 2),
                None => Ok(fw),
            };
        }
        let last = fw.select(1, t_len - 1)?;
        match bw {
            Some(bw) => Var::concat(&[last, bw.select(1, 0)?], 1),
            None => Ok(last),
        }
    }
}
