//! End-to-end reading: translate a dot-matrix image with the VAE, then
//! recognize the filled-in result with the CRNN.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::crnn::{sequence_accuracy, Crnn};
use crate::error::{Error, Result};
use crate::synth::{Bitmap, Dataset, DateKind, Which, ALPHABET};
use crate::tensor::{Rng, Tensor};
use crate::train::Checkpoint;
use crate::vae::Vae;

/// Column label used in the confusion matrix for a missing prediction.
pub const MISSING: &str = "<none>";

/// Per-position character confusion. Rows are truth symbols, columns are
/// predicted symbols plus [`MISSING`] for positions past the end of a short
/// prediction; every row sums to that symbol's count in the truths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub symbols: Vec<String>,
    pub columns: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    /// Predicted characters beyond the truth length.
    pub insertions: u64,
}

impl Confusion {
    pub fn new() -> Self {
        let symbols: Vec<String> = ALPHABET.iter().map(|c| c.to_string()).collect();
        let mut columns = symbols.clone();
        columns.push(MISSING.into());
        Confusion {
            counts: vec![vec![0; columns.len()]; symbols.len()],
            symbols,
            columns,
            insertions: 0,
        }
    }

    fn index(&self, c: char) -> Option<usize> {
        ALPHABET.iter().position(|&a| a == c)
    }

    /// Compares position by position. Truth characters outside the alphabet
    /// are skipped; unknown predicted characters count as missing.
    pub fn record(&mut self, truth: &str, predicted: &str) {
        let pred: Vec<char> = predicted.chars().collect();
        let missing = self.columns.len() - 1;
        let mut n = 0;
        for (i, t) in truth.chars().enumerate() {
            n = i + 1;
            let Some(row) = self.index(t) else { continue };
            let col = pred.get(i).and_then(|&p| self.index(p)).unwrap_or(missing);
            self.counts[row][col] += 1;
        }
        self.insertions += pred.len().saturating_sub(n) as u64;
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        self.counts[row].iter().sum()
    }

    /// Fraction of truth characters predicted correctly at their position.
    pub fn character_accuracy(&self) -> f64 {
        let total: u64 = (0..self.symbols.len()).map(|r| self.row_sum(r)).sum();
        let diag: u64 = (0..self.symbols.len()).map(|r| self.counts[r][r]).sum();
        if total == 0 {
            0.0
        } else {
            diag as f64 / total as f64
        }
    }
}

impl Default for Confusion {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub path: String,
    pub samples: usize,
    pub realistic: usize,
    pub unrealistic: usize,
    pub height: usize,
    pub width: usize,
}

impl DatasetSummary {
    pub fn of(ds: &Dataset, path: &str) -> Self {
        let realistic = ds.kinds.iter().filter(|&&k| k == DateKind::Realistic).count();
        DatasetSummary {
            path: path.to_string(),
            samples: ds.len(),
            realistic,
            unrealistic: ds.len() - realistic,
            height: ds.height,
            width: ds.width,
        }
    }
}

/// A checkpoint file named by path and CRC-32 of its bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointId {
    pub path: String,
    pub crc32: String,
}

impl CheckpointId {
    pub fn of_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self::of_bytes(&path.display().to_string(), &bytes))
    }

    pub fn of_bytes(path: &str, bytes: &[u8]) -> Self {
        CheckpointId {
            path: path.to_string(),
            crc32: format!("{:08x}", crc32fast::hash(bytes)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mistake {
    pub index: usize,
    pub truth: String,
    pub predicted: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub dataset: DatasetSummary,
    pub vae_checkpoint: CheckpointId,
    pub crnn_checkpoint: CheckpointId,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub character_accuracy: f64,
    pub confusion: Confusion,
    /// Mean wall-clock translate + recognize time per image.
    pub mean_latency_ms: f64,
    pub mistakes: Vec<Mistake>,
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// A few lines for people.
    pub fn summary(&self, ascii: bool) -> String {
        let show = |s: &str| if ascii { crate::synth::to_ascii(s) } else { s.to_string() };
        let mut out = format!(
            "samples      {} ({} realistic, {} unrealistic) from {}\n\
             accuracy     {:.2}% ({}/{})\n\
             characters   {:.2}%\n\
             latency      {:.2} ms/image\n",
            self.dataset.samples,
            self.dataset.realistic,
            self.dataset.unrealistic,
            self.dataset.path,
            100.0 * self.accuracy,
            self.correct,
            self.total,
            100.0 * self.character_accuracy,
            self.mean_latency_ms,
        );
        for m in self.mistakes.iter().take(5) {
            out.push_str(&format!("  #{:<5} {} -> {}\n", m.index, show(&m.truth), show(&m.predicted)));
        }
        out
    }
}

/// The trained pair of models.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub vae: Vae<f32>,
    pub crnn: Crnn<f32>,
    pub vae_id: CheckpointId,
    pub crnn_id: CheckpointId,
}

impl Pipeline {
    pub fn new(vae: Vae<f32>, crnn: Crnn<f32>) -> Result<Self> {
        if vae.config.input_shape != crnn.config.input_shape {
            return Err(Error::shape(
                "pipeline",
                &[vae.config.input_shape.0, vae.config.input_shape.1],
                &[crnn.config.input_shape.0, crnn.config.input_shape.1],
            ));
        }
        let vae_id = CheckpointId::of_bytes("<memory>", &Checkpoint::from_vae(&vae, Default::default())?.to_bytes());
        let crnn_id = CheckpointId::of_bytes("<memory>", &Checkpoint::from_crnn(&crnn, Default::default())?.to_bytes());
        Ok(Pipeline {
            vae,
            crnn,
            vae_id,
            crnn_id,
        })
    }

    pub fn load(vae_path: &Path, crnn_path: &Path) -> Result<Self> {
        let vae = Checkpoint::load(vae_path)?.into_vae()?;
        let crnn = Checkpoint::load(crnn_path)?.into_crnn()?;
        let mut p = Pipeline::new(vae, crnn)?;
        p.vae_id = CheckpointId::of_file(vae_path)?;
        p.crnn_id = CheckpointId::of_file(crnn_path)?;
        Ok(p)
    }

    pub fn input_shape(&self) -> (usize, usize) {
        self.vae.config.input_shape
    }

    /// Deterministic translation of an `(N, H, W, 1)` batch.
    pub fn translate(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.vae.translate(x, true, &mut Rng::new(0))
    }

    /// Returns the decoded text and the reconstruction for each image.
    pub fn read(&self, x: &Tensor<f32>) -> Result<(Vec<String>, Tensor<f32>)> {
        let y = self.translate(x)?;
        Ok((self.crnn.recognize(&y)?, y))
    }

    /// Reads one image file. The image must already have the model's size.
    pub fn infer_file(&self, path: &Path) -> Result<(String, Tensor<f32>)> {
        let img = Bitmap::load_png(path)?;
        let (h, w) = self.input_shape();
        if (img.height, img.width) != (h, w) {
            return Err(Error::InvalidShape {
                shape: vec![img.height, img.width],
                reason: format!(
                    "{} is {}x{} (height x width), the models expect {h}x{w}",
                    path.display(),
                    img.height,
                    img.width
                ),
            });
        }
        let x = img.to_tensor::<f32>().reshape([1, h, w, 1])?;
        let (mut text, y) = self.read(&x)?;
        Ok((text.remove(0), y))
    }

    /// Reads every input image of `ds` one at a time and scores the result.
    pub fn evaluate(&self, ds: &Dataset, dataset_path: &str) -> Result<(PipelineReport, Vec<Tensor<f32>>)> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (h, w) = self.input_shape();
        if (ds.height, ds.width) != (h, w) {
            return Err(Error::shape("evaluation images", &[ds.height, ds.width], &[h, w]));
        }
        let mut preds = Vec::with_capacity(ds.len());
        let mut recons = Vec::with_capacity(ds.len());
        let mut elapsed = 0.0;
        for i in 0..ds.len() {
            let x = ds.batch::<f32>(Which::Input, &[i]);
            let start = Instant::now();
            let (mut text, y) = self.read(&x)?;
            elapsed += start.elapsed().as_secs_f64();
            preds.push(text.remove(0));
            recons.push(y);
        }
        let accuracy = sequence_accuracy(&preds, &ds.labels)?;
        let mut confusion = Confusion::new();
        let mut mistakes = Vec::new();
        for (i, (p, t)) in preds.iter().zip(&ds.labels).enumerate() {
            confusion.record(t, p);
            if p != t {
                mistakes.push(Mistake {
                    index: i,
                    truth: t.clone(),
                    predicted: p.clone(),
                });
            }
        }
        let report = PipelineReport {
            dataset: DatasetSummary::of(ds, dataset_path),
            vae_checkpoint: self.vae_id.clone(),
            crnn_checkpoint: self.crnn_id.clone(),
            accuracy,
            correct: ds.len() - mistakes.len(),
            total: ds.len(),
            character_accuracy: confusion.character_accuracy(),
            confusion,
            mean_latency_ms: 1e3 * elapsed / ds.len() as f64,
            mistakes,
        };
        Ok((report, recons))
    }
}

fn to_gray(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn write_gray(path: &Path, pixels: &[u8], width: usize, height: usize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    image::save_buffer(path, pixels, width as u32, height as u32, image::ColorType::L8).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// Saves an `(H, W)`, `(H, W, 1)` or `(1, H, W, 1)` image with values in
/// `[0, 1]` as 8-bit gray.
pub fn save_gray_png(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = match *t.shape() {
        [h, w] | [h, w, 1] | [1, h, w, 1] => (h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "expected a single gray image".into(),
            })
        }
    };
    write_gray(path, &to_gray(t), w, h)
}

/// Gap between grid cells, in pixels of mid gray.
pub const GRID_GAP: usize = 2;

/// One row per sample: input | reconstruction | target.
pub fn write_grid(ds: &Dataset, recons: &[Tensor<f32>], rows: usize, path: &Path) -> Result<PathBuf> {
    let rows = rows.min(ds.len()).min(recons.len());
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let (h, w, g) = (ds.height, ds.width, GRID_GAP);
    let width = 3 * w + 4 * g;
    let height = rows * h + (rows + 1) * g;
    let mut px = vec![128u8; width * height];
    for r in 0..rows {
        let cells = [
            ds.inputs[r].pixels.iter().map(|&p| p * 255).collect::<Vec<u8>>(),
            to_gray(&recons[r]),
            ds.targets[r].pixels.iter().map(|&p| p * 255).collect(),
        ];
        let top = g + r * (h + g);
        for (c, cell) in cells.iter().enumerate() {
            let left = g + c * (w + g);
            for y in 0..h {
                px[(top + y) * width + left..][..w].copy_from_slice(&cell[y * w..][..w]);
            }
        }
    }
    write_gray(path, &px, width, height)?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{from_ascii, make_sample, GlyphAtlas};

    #[test]
    fn confusion_rows_sum_to_occurrences() {
        let mut c = Confusion::new();
        let t = from_ascii("2019/01/01");
        c.record(&t, &from_ascii("2019/07/01"));
        c.record(&t, &from_ascii("2019/0"));
        c.record(&t, &from_ascii("2019/01/0199"));
        let one = 1;
        // '1' appears 3 times per truth: once read as 7, twice missing.
        assert_eq!(c.row_sum(one), 9);
        assert_eq!(c.counts[one][7], 1);
        assert_eq!(c.counts[one][11], 2);
        assert_eq!(c.insertions, 2);
        let slash = 10;
        assert_eq!(c.row_sum(slash), 6);
        assert_eq!(c.counts[slash][slash], 5);
        assert!((c.character_accuracy() - 25.0 / 30.0).abs() < 1e-12);
    }

    fn sample_report() -> PipelineReport {
        let mut confusion = Confusion::new();
        confusion.record(&from_ascii("2020/02/29"), &from_ascii("2020/02/28"));
        PipelineReport {
            dataset: DatasetSummary {
                path: "data/test".into(),
                samples: 3,
                realistic: 3,
                unrealistic: 0,
                height: 32,
                width: 128,
            },
            vae_checkpoint: CheckpointId::of_bytes("v.ckpt", b"abc"),
            crnn_checkpoint: CheckpointId::of_bytes("c.ckpt", b"def"),
            accuracy: 2.0 / 3.0,
            correct: 2,
            total: 3,
            character_accuracy: 0.1 + 0.2,
            confusion,
            mean_latency_ms: 6.1,
            mistakes: vec![Mistake {
                index: 1,
                truth: from_ascii("2020/02/29"),
                predicted: from_ascii("2020/02/28"),
            }],
        }
    }

    #[test]
    fn report_json_round_trip() {
        let r = sample_report();
        let json = r.to_json().unwrap();
        assert_eq!(PipelineReport::from_json(&json).unwrap(), r);
        assert_eq!(r.vae_checkpoint.crc32, "352441c2");
        assert!(r.summary(true).contains("2020/02/29 -> 2020/02/28"));
    }

    fn tiny_pipeline() -> Pipeline {
        use crate::crnn::CrnnConfig;
        use crate::vae::VaeConfig;
        Pipeline::new(
            Vae::new(VaeConfig::toy(), 1).unwrap(),
            Crnn::new(CrnnConfig::toy(), 2).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn evaluation_and_grid() {
        let atlas = GlyphAtlas::for_canvas(32, 128).unwrap();
        let pairs: Vec<_> = (0..3)
            .map(|i| make_sample(DateKind::Realistic, 1, i, &atlas, (32, 128)).unwrap())
            .collect();
        let ds = Dataset::from_pairs(&pairs).unwrap();
        let p = tiny_pipeline();
        let (report, recons) = p.evaluate(&ds, "mem").unwrap();
        assert_eq!(report.total, 3);
        assert!((0.0..=1.0).contains(&report.accuracy));
        assert_eq!(report.correct + report.mistakes.len(), 3);
        for row in 0..11 {
            let occurrences: usize = ds
                .labels
                .iter()
                .map(|l| l.chars().filter(|&c| c == ALPHABET[row]).count())
                .sum();
            assert_eq!(report.confusion.row_sum(row), occurrences as u64);
        }
        assert!(report.mean_latency_ms > 0.0);
        let dir = tempfile::tempdir().unwrap();
        let grid = dir.path().join("grid.png");
        write_grid(&ds, &recons, 3, &grid).unwrap();
        let img = image::open(&grid).unwrap();
        assert_eq!((img.width(), img.height()), (3 * 128 + 8, 3 * 32 + 8));
        let dump = dir.path().join("r.png");
        save_gray_png(&recons[0], &dump).unwrap();
        assert_eq!(image::open(&dump).unwrap().width(), 128);
    }

    #[test]
    fn infer_checks_image_size() {
        let p = tiny_pipeline();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("small.png");
        Bitmap::blank(16, 64).save_png(&path).unwrap();
        let err = p.infer_file(&path).unwrap_err().to_string();
        assert!(err.contains("16x64") && err.contains("32x128"), "{err}");
        let ok = dir.path().join("ok.png");
        Bitmap::blank(32, 128).save_png(&ok).unwrap();
        let (_, y) = p.infer_file(&ok).unwrap();
        assert_eq!(y.shape(), &[1, 32, 128, 1]);
    }

    #[test]
    fn mismatched_models_are_rejected() {
        use crate::crnn::CrnnConfig;
        use crate::vae::VaeConfig;
        let vae = Vae::new(VaeConfig::toy(), 1).unwrap();
        let crnn = Crnn::new(CrnnConfig::paper(), 1).unwrap();
        assert!(Pipeline::new(vae, crnn).is_err());
    }
}
