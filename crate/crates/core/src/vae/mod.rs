//! Convolutional/bidirectional-LSTM variational autoencoder that turns a
//! dot-matrix date image into its solid rendering.

mod loss;

use serde::{Deserialize, Serialize};

pub use loss::{
    bce, bce_with_logits, elbo_loss, elbo_loss_from_logits, kl_divergence, sample_latent, Elbo,
    BCE_EPS,
};

use crate::error::{Error, Result};
use crate::nn::{BatchNormSpec, ConvSpec, LstmSpec, Mode, ParamStore, Session};
use crate::tensor::{Element, Rng, Tape, Tensor, Var};

/// What sits between the flattened feature map and the mean/variance heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentHead {
    Bilstm,
    Dense,
}

pub const STANDARD_LATENT_SIZES: [usize; 6] = [32, 64, 128, 256, 512, 1024];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// `(height, width)`; images have one channel.
    pub input_shape: (usize, usize),
    pub encoder_filters: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    /// Per-direction hidden sizes of the two recurrent layers.
    pub bilstm_hidden: [usize; 2],
    pub dropout_rate: f64,
    pub latent_dim: usize,
    pub latent_head: LatentHead,
    /// `(height, width, channels)` the decoder's dense output is folded into.
    pub decoder_dense_shape: (usize, usize, usize),
    pub decoder_filters: Vec<usize>,
    pub decoder_strides: Vec<usize>,
}

impl VaeConfig {
    pub fn paper() -> Self {
        VaeConfig {
            input_shape: (64, 256),
            encoder_filters: vec![64, 128, 256, 512],
            encoder_strides: vec![2, 2, 2, 2],
            bilstm_hidden: [256, 128],
            dropout_rate: 0.2,
            latent_dim: 1024,
            latent_head: LatentHead::Bilstm,
            decoder_dense_shape: (16, 64, 64),
            decoder_filters: vec![64, 128, 256, 512, 1],
            decoder_strides: vec![2, 2, 1, 1, 1],
        }
    }

    /// Desk-scale preset on a 32×128 canvas.
    pub fn toy() -> Self {
        VaeConfig {
            input_shape: (32, 128),
            encoder_filters: vec![8, 16, 32, 64],
            encoder_strides: vec![2, 2, 2, 2],
            bilstm_hidden: [32, 16],
            dropout_rate: 0.2,
            latent_dim: 64,
            latent_head: LatentHead::Bilstm,
            decoder_dense_shape: (8, 32, 8),
            decoder_filters: vec![8, 16, 32, 64, 1],
            decoder_strides: vec![2, 2, 1, 1, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let (h, w) = self.input_shape;
        if h == 0 || w == 0 {
            return bad("input shape must be nonempty".into());
        }
        if self.encoder_filters.is_empty() || self.encoder_filters.len() != self.encoder_strides.len() {
            return bad("encoder filters and strides must be nonempty and of equal length".into());
        }
        if self.decoder_filters.is_empty() || self.decoder_filters.len() != self.decoder_strides.len() {
            return bad("decoder filters and strides must be nonempty and of equal length".into());
        }
        if self.encoder_strides.iter().chain(&self.decoder_strides).any(|&s| s == 0)
            || self.encoder_filters.iter().chain(&self.decoder_filters).any(|&f| f == 0)
        {
            return bad("filters and strides must be positive".into());
        }
        if *self.decoder_filters.last().expect("nonempty") != 1 {
            return bad("the last decoder layer must have one filter".into());
        }
        let body = &self.decoder_filters[..self.decoder_filters.len() - 1];
        if body.windows(2).any(|p| p[1] < p[0]) {
            return bad(format!(
                "decoder filters {:?} must be non-decreasing before the output layer",
                self.decoder_filters
            ));
        }
        let up: usize = self.decoder_strides.iter().product();
        let (dh, dw, dc) = self.decoder_dense_shape;
        if dh * up != h || dw * up != w || dc == 0 {
            return bad(format!(
                "decoder dense shape {:?} upsampled by {up} does not give {h}x{w}",
                self.decoder_dense_shape
            ));
        }
        if self.bilstm_hidden.contains(&0) || self.latent_dim == 0 {
            return bad("hidden and latent sizes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if !STANDARD_LATENT_SIZES.contains(&self.latent_dim) {
            log::warn!(
                "latent size {} is outside the usual {:?}",
                self.latent_dim,
                STANDARD_LATENT_SIZES
            );
        }
        Ok(())
    }

    fn encoder_convs(&self) -> Vec<ConvSpec> {
        let mut c = 1;
        self.encoder_filters
            .iter()
            .zip(&self.encoder_strides)
            .map(|(&f, &s)| {
                let spec = ConvSpec::k3(c, f, s);
                c = f;
                spec
            })
            .collect()
    }

    fn decoder_convs(&self) -> Vec<ConvSpec> {
        let mut c = self.decoder_dense_shape.2;
        self.decoder_filters
            .iter()
            .zip(&self.decoder_strides)
            .map(|(&f, &s)| {
                let spec = ConvSpec::k3(c, f, s);
                c = f;
                spec
            })
            .collect()
    }

    /// `(height, width, channels)` of the last encoder feature map.
    fn encoder_map(&self) -> (usize, usize, usize) {
        let (mut h, mut w) = self.input_shape;
        for &s in &self.encoder_strides {
            h = h.div_ceil(s);
            w = w.div_ceil(s);
        }
        (h, w, *self.encoder_filters.last().expect("validated"))
    }

    fn flat_width(&self) -> usize {
        let (h, w, c) = self.encoder_map();
        h * w * c
    }

    fn lstm_specs(&self) -> [LstmSpec; 2] {
        let [h0, h1] = self.bilstm_hidden;
        [
            LstmSpec::new(self.flat_width(), h0),
            LstmSpec::new(2 * h0, h1).final_state(),
        ]
    }

    /// Width of `H_enc`, the input of the mean/variance heads.
    pub fn encoding_width(&self) -> usize {
        2 * self.bilstm_hidden[1]
    }

    /// Freshly initialized parameters.
    pub fn init_params<F: Element>(&self, seed: u64) -> Result<ParamStore<F>> {
        self.validate()?;
        let mut rng = Rng::new(seed);
        let mut p = ParamStore::new();
        for (i, spec) in self.encoder_convs().iter().enumerate() {
            p.add_conv(&format!("enc.conv{i}"), spec, &mut rng)?;
            p.add_batchnorm(&format!("enc.bn{i}"), &BatchNormSpec::new(spec.out_channels))?;
        }
        let [l0, l1] = self.lstm_specs();
        match self.latent_head {
            LatentHead::Bilstm => {
                p.add_lstm("enc.rnn0", &l0, &mut rng)?;
                p.add_lstm("enc.rnn1", &l1, &mut rng)?;
            }
            LatentHead::Dense => {
                p.add_dense("enc.fc0", l0.input_size, l0.output_width(), &mut rng)?;
                p.add_dense("enc.fc1", l1.input_size, l1.output_width(), &mut rng)?;
            }
        }
        let e = self.encoding_width();
        p.add_dense("enc.mean", e, self.latent_dim, &mut rng)?;
        p.add_dense("enc.logvar", e, self.latent_dim, &mut rng)?;
        let (dh, dw, dc) = self.decoder_dense_shape;
        p.add_dense("dec.dense", self.latent_dim, dh * dw * dc, &mut rng)?;
        for (i, spec) in self.decoder_convs().iter().enumerate() {
            p.add_conv_transpose(&format!("dec.deconv{i}"), spec, &mut rng)?;
        }
        Ok(p)
    }

    /// Layer table: name, output shape without the batch axis, parameter
    /// count and the parameter-name prefix it covers.
    pub fn summary(&self) -> Result<Vec<LayerRow>> {
        self.validate()?;
        let mut enc = Vec::new();
        let (mut h, mut w) = self.input_shape;
        enc.push(LayerRow::new("encoder", "InputLayer", vec![h, w, 1], 0, ""));
        for (i, spec) in self.encoder_convs().iter().enumerate() {
            (h, w) = spec.conv_output(h, w)?;
            let c = spec.out_channels;
            enc.push(LayerRow::new("encoder", "Conv2D", vec![h, w, c], spec.param_count(), &format!("enc.conv{i}.")));
            enc.push(LayerRow::new(
                "encoder",
                "BatchNormalization",
                vec![h, w, c],
                BatchNormSpec::new(c).param_count(),
                &format!("enc.bn{i}."),
            ));
        }
        let flat = self.flat_width();
        enc.push(LayerRow::new("encoder", "Flatten", vec![flat], 0, ""));
        enc.push(LayerRow::new("encoder", "Reshape", vec![1, flat], 0, ""));
        let [l0, l1] = self.lstm_specs();
        let (kind, p0, p1) = match self.latent_head {
            LatentHead::Bilstm => ("Bidirectional", l0.param_count(), l1.param_count()),
            LatentHead::Dense => (
                "Dense",
                (flat + 1) * l0.output_width(),
                (l1.input_size + 1) * l1.output_width(),
            ),
        };
        let (pre0, pre1) = match self.latent_head {
            LatentHead::Bilstm => ("enc.rnn0.", "enc.rnn1."),
            LatentHead::Dense => ("enc.fc0.", "enc.fc1."),
        };
        enc.push(LayerRow::new("encoder", kind, vec![1, l0.output_width()], p0, pre0));
        enc.push(LayerRow::new("encoder", "Dropout", vec![1, l0.output_width()], 0, ""));
        enc.push(LayerRow::new("encoder", kind, vec![l1.output_width()], p1, pre1));
        let e = self.encoding_width();
        let head = (e + 1) * self.latent_dim;
        enc.push(LayerRow::new("encoder", "mean", vec![self.latent_dim], head, "enc.mean."));
        enc.push(LayerRow::new("encoder", "Variance", vec![self.latent_dim], head, "enc.logvar."));
        enc.push(LayerRow::new("encoder", "Sampling", vec![self.latent_dim], 0, ""));

        let (dh, dw, dc) = self.decoder_dense_shape;
        enc.push(LayerRow::new("decoder", "InputLayer", vec![self.latent_dim], 0, ""));
        enc.push(LayerRow::new(
            "decoder",
            "Dense",
            vec![dh * dw * dc],
            (self.latent_dim + 1) * dh * dw * dc,
            "dec.dense.",
        ));
        enc.push(LayerRow::new("decoder", "Reshape", vec![dh, dw, dc], 0, ""));
        let (mut h, mut w) = (dh, dw);
        for (i, spec) in self.decoder_convs().iter().enumerate() {
            (h, w) = spec.transpose_output(h, w);
            enc.push(LayerRow::new(
                "decoder",
                "Conv2DTranspose",
                vec![h, w, spec.out_channels],
                spec.param_count(),
                &format!("dec.deconv{i}."),
            ));
        }
        Ok(enc)
    }

    /// Encoder: strided conv + batch norm + ReLU blocks, a length-one
    /// sequence through two recurrent layers, then the two affine heads.
    pub fn encode<'t, F: Element>(
        &self,
        s: &Session<'t, F>,
        x: &Var<'t, F>,
    ) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let (h, w) = self.input_shape;
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != [h, w, 1] {
            return Err(Error::shape("vae encode", &shape, &[shape.first().copied().unwrap_or(0), h, w, 1]));
        }
        let n = shape[0];
        let mut y = *x;
        for (i, spec) in self.encoder_convs().iter().enumerate() {
            y = s.conv2d(&format!("enc.conv{i}"), &y, spec)?;
            y = s
                .batchnorm(&format!("enc.bn{i}"), &y, &BatchNormSpec::new(spec.out_channels))?
                .relu();
        }
        let flat = self.flat_width();
        let [l0, l1] = self.lstm_specs();
        let enc = match self.latent_head {
            LatentHead::Bilstm => {
                let seq = y.reshape([n, 1, flat])?;
                let r0 = s.lstm("enc.rnn0", &seq, &l0)?;
                let r0 = s.dropout(&r0, self.dropout_rate)?;
                s.lstm("enc.rnn1", &r0, &l1)?
            }
            LatentHead::Dense => {
                let v = y.reshape([n, flat])?;
                let d0 = s.dense("enc.fc0", &v)?.relu();
                let d0 = s.dropout(&d0, self.dropout_rate)?;
                s.dense("enc.fc1", &d0)?.relu()
            }
        };
        Ok((s.dense("enc.mean", &enc)?, s.dense("enc.logvar", &enc)?))
    }

    /// Decoder up to the pre-sigmoid logits, shaped `(N, H, W, 1)`.
    pub fn decode_logits<'t, F: Element>(&self, s: &Session<'t, F>, z: &Var<'t, F>) -> Result<Var<'t, F>> {
        let shape = z.shape();
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(Error::shape("vae decode", &shape, &[shape.first().copied().unwrap_or(0), self.latent_dim]));
        }
        let (dh, dw, dc) = self.decoder_dense_shape;
        let mut y = s.dense("dec.dense", z)?.relu().reshape([shape[0], dh, dw, dc])?;
        let convs = self.decoder_convs();
        for (i, spec) in convs.iter().enumerate() {
            y = s.conv2d_transpose(&format!("dec.deconv{i}"), &y, spec)?;
            if i + 1 < convs.len() {
                y = y.relu();
            }
        }
        Ok(y)
    }

    pub fn decode<'t, F: Element>(&self, s: &Session<'t, F>, z: &Var<'t, F>) -> Result<Var<'t, F>> {
        Ok(self.decode_logits(s, z)?.sigmoid())
    }

    /// One training/evaluation pass: encode `x`, sample `z` with noise from
    /// the session RNG, decode, and score the result against `target`.
    pub fn loss<'t, F: Element>(
        &self,
        s: &Session<'t, F>,
        x: &Var<'t, F>,
        target: &Var<'t, F>,
    ) -> Result<Elbo<'t, F>> {
        let (mu, logvar) = self.encode(s, x)?;
        let eps: Tensor<F> = s.with_rng(|r| r.randn(mu.shape()));
        let z = sample_latent(&mu, &logvar, &eps)?;
        let logits = self.decode_logits(s, &z)?;
        elbo_loss_from_logits(target, &logits, &mu, &logvar)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRow {
    pub part: String,
    pub kind: String,
    pub output_shape: Vec<usize>,
    pub params: usize,
    /// Parameter-name prefix owned by this layer (empty when it has none).
    pub prefix: String,
}

impl LayerRow {
    pub(crate) fn new(part: &str, kind: &str, output_shape: Vec<usize>, params: usize, prefix: &str) -> Self {
        LayerRow {
            part: part.into(),
            kind: kind.into(),
            output_shape,
            params,
            prefix: prefix.into(),
        }
    }

    /// `(None, 32, 128, 64)`.
    pub fn shape_string(&self) -> String {
        let dims: Vec<String> = self.output_shape.iter().map(|d| d.to_string()).collect();
        format!("(None, {})", dims.join(", "))
    }
}

/// Encoder outputs for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample<F: Element = f32> {
    pub z_mean: Tensor<F>,
    pub z_logvar: Tensor<F>,
    pub z: Tensor<F>,
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Vae<F: Element = f32> {
    pub config: VaeConfig,
    pub params: ParamStore<F>,
}

impl<F: Element> Vae<F> {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Vae { config, params })
    }

    /// Inference-mode encoding plus a latent draw; `eps = None` gives
    /// `z = z_mean`.
    pub fn encode_sample(&self, x: &Tensor<F>, eps: Option<&Tensor<F>>) -> Result<LatentSample<F>> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.params, Mode::Infer, Rng::new(0));
        let (mu, lv) = self.config.encode(&s, &tape.constant(x.clone()))?;
        let z = match eps {
            Some(e) => sample_latent(&mu, &lv, e)?.value(),
            None => mu.value(),
        };
        Ok(LatentSample {
            z_mean: mu.value(),
            z_logvar: lv.value(),
            z,
        })
    }

    /// Decodes latent codes `(N, latent)` into images `(N, H, W, 1)`.
    pub fn decode(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.params, Mode::Infer, Rng::new(0));
        Ok(self.config.decode(&s, &tape.constant(z.clone()))?.value())
    }

    /// Dot-matrix batch `(N, H, W, 1)` to filled-in batch. Deterministic
    /// mode decodes `z_mean`; otherwise `z` is sampled from `rng`.
    pub fn translate(&self, x: &Tensor<F>, deterministic: bool, rng: &mut Rng) -> Result<Tensor<F>> {
        let eps = if deterministic {
            None
        } else {
            let n = x.shape().first().copied().unwrap_or(0);
            Some(rng.randn([n, self.config.latent_dim]))
        };
        let lat = self.encode_sample(x, eps.as_ref())?;
        self.decode(&lat.z)
    }
}
