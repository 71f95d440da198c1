use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::date::{sample_date, DateKind, DateText};
use super::glyphs::GlyphAtlas;
use super::render::{render_dotmatrix, render_filled, Bitmap};
use crate::error::{Error, Result};
use crate::tensor::{Element, Rng, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One generated example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePair {
    pub input: Bitmap,
    pub target: Bitmap,
    pub label: DateText,
    pub offset: (usize, usize),
}

/// Builds sample `index` of a dataset; depends only on `(seed, index)`.
pub fn make_sample(
    kind: DateKind,
    seed: u64,
    index: u64,
    atlas: &GlyphAtlas,
    canvas: (usize, usize),
) -> Result<SamplePair> {
    let mut rng = Rng::derive(seed, index);
    let label = sample_date(kind, &mut rng);
    let (tw, th) = atlas.text_size(label.as_str())?;
    let (h, w) = canvas;
    if tw > w || th > h {
        return Err(Error::TextOverflow {
            required_width: tw,
            required_height: th,
            available_width: w,
            available_height: h,
        });
    }
    let dx = rng.below((w - tw + 1) as u64) as usize;
    let dy = rng.below((h - th + 1) as u64) as usize;
    let offset = (dx, dy);
    Ok(SamplePair {
        input: render_dotmatrix(label.as_str(), atlas, canvas, offset)?,
        target: render_filled(label.as_str(), atlas, canvas, offset)?,
        label,
        offset,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub input: String,
    pub target: String,
    pub label: String,
    pub kind: DateKind,
    pub offset: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads `dir/manifest.jsonl`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let file = fs::File::open(&path)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| Error::Manifest {
                    path: path.clone(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            records.push(rec);
        }
        Ok(DatasetManifest {
            root: dir.to_path_buf(),
            records,
        })
    }

    pub fn write(&self) -> Result<()> {
        let mut out = BufWriter::new(fs::File::create(self.path())?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GenerateOptions {
    pub count: usize,
    pub kind: DateKind,
    pub seed: u64,
    /// `(height, width)`.
    pub canvas: (usize, usize),
    /// Worker threads; 0 picks the rayon default.
    pub threads: usize,
}

/// Renders `count` pairs into `out_dir/{input,target}/NNNNNN.png` and
/// writes the manifest. Output bytes do not depend on `threads`.
pub fn generate_dataset(opts: &GenerateOptions, out_dir: &Path) -> Result<DatasetManifest> {
    if opts.count == 0 {
        return Err(Error::EmptyDataset);
    }
    let atlas = GlyphAtlas::for_canvas(opts.canvas.0, opts.canvas.1)?;
    let widest = atlas.text_size(&super::glyphs::from_ascii("3333/33/33"))?;
    if widest.0 > opts.canvas.1 || widest.1 > opts.canvas.0 {
        return Err(Error::TextOverflow {
            required_width: widest.0,
            required_height: widest.1,
            available_width: opts.canvas.1,
            available_height: opts.canvas.0,
        });
    }
    fs::create_dir_all(out_dir.join("input"))?;
    fs::create_dir_all(out_dir.join("target"))?;

    let work = |i: usize| -> Result<ManifestRecord> {
        let s = make_sample(opts.kind, opts.seed, i as u64, &atlas, opts.canvas)?;
        let name = format!("{i:06}.png");
        let input = format!("input/{name}");
        let target = format!("target/{name}");
        s.input.save_png(&out_dir.join(&input))?;
        s.target.save_png(&out_dir.join(&target))?;
        Ok(ManifestRecord {
            input,
            target,
            label: s.label.as_str().to_string(),
            kind: opts.kind,
            offset: [s.offset.0, s.offset.1],
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let records = pool.install(|| {
        (0..opts.count)
            .into_par_iter()
            .map(work)
            .collect::<Result<Vec<_>>>()
    })?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.write()?;
    Ok(manifest)
}

/// Decoded dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub inputs: Vec<Bitmap>,
    pub targets: Vec<Bitmap>,
    pub labels: Vec<String>,
    pub kinds: Vec<DateKind>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Input,
    Target,
}

impl Dataset {
    /// Loads every image listed in `dir/manifest.jsonl`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        Self::from_manifest(&manifest)
    }

    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let loaded: Vec<(Bitmap, Bitmap)> = manifest
            .records
            .par_iter()
            .map(|r| {
                Ok((
                    Bitmap::load_png(&manifest.root.join(&r.input))?,
                    Bitmap::load_png(&manifest.root.join(&r.target))?,
                ))
            })
            .collect::<Result<_>>()?;
        let (height, width) = (loaded[0].0.height, loaded[0].0.width);
        for (i, (a, b)) in loaded.iter().enumerate() {
            for img in [a, b] {
                if (img.height, img.width) != (height, width) {
                    return Err(Error::Manifest {
                        path: manifest.path(),
                        line: i + 1,
                        reason: format!(
                            "image is {}x{}, expected {}x{}",
                            img.height, img.width, height, width
                        ),
                    });
                }
            }
        }
        let (inputs, targets) = loaded.into_iter().unzip();
        Ok(Dataset {
            height,
            width,
            inputs,
            targets,
            labels: manifest.records.iter().map(|r| r.label.clone()).collect(),
            kinds: manifest.records.iter().map(|r| r.kind).collect(),
        })
    }

    pub fn from_pairs(pairs: &[SamplePair]) -> Result<Self> {
        let first = pairs.first().ok_or(Error::EmptyDataset)?;
        Ok(Dataset {
            height: first.input.height,
            width: first.input.width,
            inputs: pairs.iter().map(|p| p.input.clone()).collect(),
            targets: pairs.iter().map(|p| p.target.clone()).collect(),
            labels: pairs.iter().map(|p| p.label.as_str().to_string()).collect(),
            kinds: pairs.iter().map(|p| p.label.kind()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(N, H, W, 1)` batch of the chosen images, values 0.0 / 1.0.
    pub fn batch<F: Element>(&self, which: Which, indices: &[usize]) -> Tensor<F> {
        let src = match which {
            Which::Input => &self.inputs,
            Which::Target => &self.targets,
        };
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            data.extend(src[i].pixels.iter().map(|&p| F::lit(p as f64)));
        }
        Tensor::new([indices.len(), self.height, self.width, 1], data).expect("consistent size")
    }
}
