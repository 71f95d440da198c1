use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use expdate_core::pipeline::{save_gray_png, write_grid, Pipeline};
use expdate_core::synth::{generate_dataset, to_ascii, Dataset, DateKind, GenerateOptions};
use expdate_core::train::{
    metrics_path, train_crnn, train_vae, OptimizerKind, Scale, TrainConfig, TrainOptions,
};
use expdate_core::vae::LayerRow;
use expdate_core::Result;

#[derive(Parser)]
#[command(name = "expdate", version, about = "Read dot-matrix Arabic-Indic expiry dates")]
struct Cli {
    /// Print dates with ASCII digits instead of Arabic-Indic ones.
    #[arg(long, global = true)]
    ascii_digits: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Realistic,
    Unrealistic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Vae,
    Crnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Paper,
    Toy,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptArg {
    Sgd,
    SgdMomentum,
    Adam,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired dot-matrix / filled-in images with a manifest.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 256)]
        width: usize,
        /// Worker threads (0 = all cores); output does not depend on it.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Train the translator (vae) or the recognizer (crnn).
    Train {
        #[arg(value_enum)]
        model: Model,
        #[arg(long, required_unless_present = "dry_run")]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        scale: ScaleArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "adam")]
        optimizer: OptArg,
        #[arg(long, required_unless_present = "dry_run")]
        out: Option<PathBuf>,
        /// Held-out set scored after every CRNN epoch.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Print the layer table and parameter counts, then stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run both models over a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        crnn: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// PNG with input | reconstruction | target rows.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        grid_rows: usize,
    },
    /// Read the date from one image.
    Infer {
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        crnn: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        dump_reconstruction: Option<PathBuf>,
    },
}

fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn print_table(title: &str, rows: &[&LayerRow]) -> usize {
    println!("{title}");
    println!("  {:<20} {:<24} {:>12}", "layer", "output shape", "params");
    for r in rows {
        println!("  {:<20} {:<24} {:>12}", r.kind, r.shape_string(), thousands(r.params));
    }
    let total = rows.iter().map(|r| r.params).sum();
    println!("  {:<20} {:<24} {:>12}", "total", "", thousands(total));
    total
}

fn dry_run(model: Model, scale: Scale) -> Result<()> {
    match model {
        Model::Vae => {
            let cfg = scale.vae();
            let rows = cfg.summary()?;
            let enc: Vec<&LayerRow> = rows.iter().filter(|r| r.part == "encoder").collect();
            let dec: Vec<&LayerRow> = rows.iter().filter(|r| r.part == "decoder").collect();
            let total = print_table("encoder", &enc) + print_table("decoder", &dec);
            // Instantiating checks the table against real tensors.
            let built = cfg.init_params::<f32>(0)?.param_count();
            println!("total params {} (built {})", thousands(total), thousands(built));
        }
        Model::Crnn => {
            let cfg = scale.crnn();
            let rows = cfg.summary()?;
            let total = print_table("crnn", &rows.iter().collect::<Vec<_>>());
            let built = cfg.init_params::<f32>(0)?.param_count();
            println!("total params {} (built {})", thousands(total), thousands(built));
        }
    }
    Ok(())
}

fn show(text: &str, ascii: bool) -> String {
    if ascii {
        to_ascii(text)
    } else {
        text.to_string()
    }
}

fn run(cli: Cli) -> Result<()> {
    let ascii = cli.ascii_digits;
    match cli.command {
        Command::GenData {
            kind,
            count,
            seed,
            out,
            height,
            width,
            threads,
        } => {
            let kind = match kind {
                Kind::Realistic => DateKind::Realistic,
                Kind::Unrealistic => DateKind::Unrealistic,
            };
            let opts = GenerateOptions {
                count: count as usize,
                kind,
                seed,
                canvas: (height, width),
                threads,
            };
            let manifest = generate_dataset(&opts, &out)?;
            println!("{} {} pairs -> {}", manifest.len(), kind, manifest.path().display());
        }
        Command::Train {
            model,
            data,
            scale,
            epochs,
            batch,
            lr,
            seed,
            optimizer,
            out,
            eval,
            dry_run: dry,
        } => {
            let scale = match scale {
                ScaleArg::Paper => Scale::Paper,
                ScaleArg::Toy => Scale::Toy,
            };
            if dry {
                return dry_run(model, scale);
            }
            let (data, out) = (data.expect("required by clap"), out.expect("required by clap"));
            let base = match model {
                Model::Vae => TrainConfig::vae(scale),
                Model::Crnn => TrainConfig::crnn(scale),
            };
            let config = TrainConfig {
                batch_size: batch,
                epochs: epochs.unwrap_or(base.epochs),
                learning_rate: lr,
                optimizer: match optimizer {
                    OptArg::Sgd => OptimizerKind::Sgd,
                    OptArg::SgdMomentum => OptimizerKind::SgdMomentum,
                    OptArg::Adam => OptimizerKind::Adam,
                },
                seed,
                ..base
            };
            let ds = Dataset::load(&data)?;
            let eval_set = eval.as_deref().map(Dataset::load).transpose()?;
            let opts = TrainOptions {
                checkpoint_path: Some(&out),
                eval_set: eval_set.as_ref(),
            };
            let result = match model {
                Model::Vae => train_vae(&ds, scale.vae(), &config, opts)?,
                Model::Crnn => train_crnn(&ds, scale.crnn(), &config, opts)?,
            };
            for r in result.metrics.rows() {
                println!("epoch {:>3}  loss {:.4}  {:.1}s", r.epoch, r.loss_total, r.seconds);
            }
            println!("checkpoint {}", out.display());
            println!("metrics    {}", metrics_path(&out).display());
        }
        Command::Eval {
            vae,
            crnn,
            data,
            report,
            grid,
            grid_rows,
        } => {
            let pipeline = Pipeline::load(&vae, &crnn)?;
            let ds = Dataset::load(&data)?;
            let (rep, recons) = pipeline.evaluate(&ds, &data.display().to_string())?;
            write_file(&report, rep.to_json()?.as_bytes())?;
            if let Some(g) = grid {
                write_grid(&ds, &recons, grid_rows, &g)?;
            }
            print!("{}", rep.summary(ascii));
            println!("report {}", report.display());
        }
        Command::Infer {
            vae,
            crnn,
            image,
            dump_reconstruction,
        } => {
            let pipeline = Pipeline::load(&vae, &crnn)?;
            let (text, recon) = pipeline.infer_file(&image)?;
            if let Some(p) = dump_reconstruction {
                save_gray_png(&recon, &p)?;
            }
            println!("{}", show(&text, ascii));
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digit_grouping() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(70_371_584), "70,371,584");
    }

    #[test]
    fn grammar_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
