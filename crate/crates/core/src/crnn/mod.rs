//! Compact CRNN recognizer: a shrinking conv stack, three bidirectional
//! LSTMs over image columns, and a per-column softmax trained with CTC.

mod ctc;

use serde::{Deserialize, Serialize};

pub use ctc::{ctc_greedy_decode, ctc_loss, min_frames};

use crate::error::{Error, Result};
use crate::nn::{maxpool2d, ConvSpec, LstmSpec, Mode, ParamStore, Session};
use crate::synth::{char_index, ALPHABET};
use crate::tensor::{Element, Rng, Tape, Tensor, Var};
use crate::vae::LayerRow;

/// Ten Arabic-Indic digits and `/`, then the CTC blank.
pub const NUM_CLASSES: usize = ALPHABET.len() + 1;
pub const BLANK: usize = ALPHABET.len();

/// Alphabet indices of a label; never contains [`BLANK`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelSeq(Vec<usize>);

impl LabelSeq {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= BLANK) {
            return Err(Error::InvalidLabel {
                label: format!("{indices:?}"),
                reason: format!("index {i} is not an alphabet symbol"),
            });
        }
        Ok(LabelSeq(indices))
    }

    pub fn encode(text: &str) -> Result<Self> {
        text.chars()
            .map(|c| {
                char_index(c).ok_or_else(|| Error::InvalidLabel {
                    label: text.to_string(),
                    reason: format!("{c:?} is not in the alphabet"),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(LabelSeq)
    }

    pub fn decode(&self) -> String {
        decode_indices(&self.0)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

/// Maps alphabet indices back to text, skipping blanks and anything out of
/// range.
pub fn decode_indices(indices: &[usize]) -> String {
    indices.iter().filter_map(|&i| ALPHABET.get(i)).collect()
}

/// Fraction of exact string matches; a single wrong character fails the
/// whole date.
pub fn sequence_accuracy<S: AsRef<str>, T: AsRef<str>>(predictions: &[S], truths: &[T]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::shape("sequence_accuracy", &[predictions.len()], &[truths.len()]));
    }
    if truths.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p.as_ref() == t.as_ref())
        .count();
    Ok(hits as f64 / truths.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrnnConfig {
    /// `(height, width)` of the single-channel input image.
    pub input_shape: (usize, usize),
    /// 1, or 3 to replicate the gray channel into a three-channel first conv.
    pub input_channels: usize,
    /// 3×3 stride-1 convs; a 2×2 max pool follows every conv but the last.
    pub conv_maps: Vec<usize>,
    pub lstm_layers: usize,
    /// Per direction.
    pub lstm_hidden: usize,
    pub classes: usize,
}

impl CrnnConfig {
    pub fn paper() -> Self {
        CrnnConfig {
            input_shape: (64, 256),
            input_channels: 1,
            conv_maps: vec![16, 8, 4],
            lstm_layers: 3,
            lstm_hidden: 16,
            classes: NUM_CLASSES,
        }
    }

    pub fn toy() -> Self {
        CrnnConfig {
            input_shape: (32, 128),
            ..Self::paper()
        }
    }

    /// Full-size preset with a three-channel first layer.
    pub fn rgb() -> Self {
        CrnnConfig {
            input_channels: 3,
            ..Self::paper()
        }
    }

    fn pools(&self) -> usize {
        self.conv_maps.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.conv_maps.is_empty() || self.conv_maps.contains(&0) {
            return bad("conv maps must be nonempty and positive".into());
        }
        if self.conv_maps.windows(2).any(|p| p[1] >= p[0]) {
            return bad(format!("conv maps {:?} must be strictly decreasing", self.conv_maps));
        }
        if !matches!(self.input_channels, 1 | 3) {
            return bad(format!("input channels must be 1 or 3, got {}", self.input_channels));
        }
        let f = 1 << self.pools();
        let (h, w) = self.input_shape;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return bad(format!("input {h}x{w} must be a positive multiple of {f}"));
        }
        if self.lstm_layers == 0 || self.lstm_hidden == 0 || self.classes < 2 {
            return bad("recurrent stack and class count must be nonempty".into());
        }
        Ok(())
    }

    /// CTC frames per image: one per column after pooling.
    pub fn time_steps(&self) -> usize {
        self.input_shape.1 >> self.pools()
    }

    fn convs(&self) -> Vec<ConvSpec> {
        let mut c = self.input_channels;
        self.conv_maps
            .iter()
            .map(|&m| {
                let s = ConvSpec::k3(c, m, 1);
                c = m;
                s
            })
            .collect()
    }

    /// Features per frame: pooled height × last conv maps.
    pub fn frame_features(&self) -> usize {
        (self.input_shape.0 >> self.pools()) * self.conv_maps.last().copied().unwrap_or(0)
    }

    fn lstms(&self) -> Vec<LstmSpec> {
        (0..self.lstm_layers)
            .map(|i| {
                let n = if i == 0 { self.frame_features() } else { 2 * self.lstm_hidden };
                LstmSpec::new(n, self.lstm_hidden)
            })
            .collect()
    }

    pub fn conv_param_count(&self) -> usize {
        self.convs().iter().map(ConvSpec::param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        self.conv_param_count()
            + self.lstms().iter().map(LstmSpec::param_count).sum::<usize>()
            + (2 * self.lstm_hidden + 1) * self.classes
    }

    /// Layer table in forward order; params sum to [`Self::param_count`].
    pub fn summary(&self) -> Result<Vec<LayerRow>> {
        self.validate()?;
        let (mut h, mut w) = self.input_shape;
        let mut rows = Vec::new();
        let convs = self.convs();
        for (i, spec) in convs.iter().enumerate() {
            let name = format!("crnn.conv{i}");
            rows.push(LayerRow::new("crnn", "Conv2D", vec![h, w, spec.out_channels], spec.param_count(), &name));
            if i + 1 < convs.len() {
                h /= 2;
                w /= 2;
                rows.push(LayerRow::new("crnn", "MaxPooling2D", vec![h, w, spec.out_channels], 0, ""));
            }
        }
        let t = self.time_steps();
        rows.push(LayerRow::new("crnn", "Reshape", vec![t, self.frame_features()], 0, ""));
        for (i, spec) in self.lstms().iter().enumerate() {
            let name = format!("crnn.rnn{i}");
            rows.push(LayerRow::new("crnn", "Bidirectional", vec![t, 2 * self.lstm_hidden], spec.param_count(), &name));
        }
        rows.push(LayerRow::new("crnn", "Dense", vec![t, self.classes], (2 * self.lstm_hidden + 1) * self.classes, "crnn.out"));
        Ok(rows)
    }

    pub fn init_params<F: Element>(&self, seed: u64) -> Result<ParamStore<F>> {
        self.validate()?;
        let mut rng = Rng::new(seed);
        let mut p = ParamStore::new();
        for (i, s) in self.convs().iter().enumerate() {
            p.add_conv(&format!("crnn.conv{i}"), s, &mut rng)?;
        }
        for (i, s) in self.lstms().iter().enumerate() {
            p.add_lstm(&format!("crnn.rnn{i}"), s, &mut rng)?;
        }
        p.add_dense("crnn.out", 2 * self.lstm_hidden, self.classes, &mut rng)?;
        Ok(p)
    }

    /// `(N, H, W, 1)` images to `(N, T, classes)` log-probabilities.
    pub fn forward<'t, F: Element>(&self, s: &Session<'t, F>, x: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (h, w) = self.input_shape;
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != [h, w, 1] {
            return Err(Error::shape("crnn forward", &shape, &[shape.first().copied().unwrap_or(0), h, w, 1]));
        }
        let n = shape[0];
        let mut y = if self.input_channels == 3 {
            Var::concat(&[*x, *x, *x], 3)?
        } else {
            *x
        };
        let convs = self.convs();
        for (i, spec) in convs.iter().enumerate() {
            y = s.conv2d(&format!("crnn.conv{i}"), &y, spec)?.relu();
            if i + 1 < convs.len() {
                y = maxpool2d(&y, (2, 2), (2, 2))?;
            }
        }
        // Columns become frames: (N, H', W', C) -> (N, W', H' * C).
        let t = self.time_steps();
        let mut seq = y.permute(&[0, 2, 1, 3])?.reshape([n, t, self.frame_features()])?;
        for (i, spec) in self.lstms().iter().enumerate() {
            seq = s.lstm(&format!("crnn.rnn{i}"), &seq, spec)?;
        }
        Ok(s.dense("crnn.out", &seq)?.log_softmax())
    }

    /// Mean CTC loss of a batch against its labels.
    pub fn loss<'t, F: Element>(
        &self,
        s: &Session<'t, F>,
        x: &Var<'t, F>,
        labels: &[LabelSeq],
    ) -> Result<Var<'t, F>> {
        let lp = self.forward(s, x)?;
        let raw: Vec<Vec<usize>> = labels.iter().map(|l| l.indices().to_vec()).collect();
        ctc_loss(&lp, &raw)
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Crnn<F: Element = f32> {
    pub config: CrnnConfig,
    pub params: ParamStore<F>,
}

impl<F: Element> Crnn<F> {
    pub fn new(config: CrnnConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Crnn { config, params })
    }

    pub fn log_probs(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let s = Session::new(&tape, &self.params, Mode::Infer, Rng::new(0));
        Ok(self.config.forward(&s, &tape.constant(x.clone()))?.value())
    }

    /// Greedy-decoded text for every image in the batch.
    pub fn recognize(&self, x: &Tensor<F>) -> Result<Vec<String>> {
        let lp = self.log_probs(x)?;
        Ok(ctc_greedy_decode(&lp)?.iter().map(|p| decode_indices(p)).collect())
    }
}

/// The classic scene-text CRNN, kept only to compare sizes.
///
/// Input is `W × 32` gray. Layers bottom-up: conv64, pool 2×2, conv128,
/// pool 2×2, two conv512, pool (halving height only), two conv512, pool
/// (height only), conv512 with a 2×2 valid kernel, then two BiLSTMs with
/// 256 units per direction and a projection to the class count.
pub fn reference_crnn_param_count(classes: usize) -> usize {
    let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
    let convs = conv(3, 1, 64)
        + conv(3, 64, 128)
        + conv(3, 128, 512)
        + 3 * conv(3, 512, 512)
        + conv(2, 512, 512);
    // Height 32 -> 16 -> 8 -> 4 -> 2 -> 1, so each frame carries 512 features.
    let lstm = LstmSpec::new(512, 256).param_count() + LstmSpec::new(512, 256).param_count();
    convs + lstm + (512 + 1) * classes
}
