use clap::{Parser, Subcommand};
use refseg::config::{Precision, TrainConfig};
use refseg::data::{generate, load_dataset, write_dataset, DataConfig};
use refseg::error::{Error, Result};
use refseg::eval::{evaluate_detailed, render_report};
use refseg::imgio::{read_ppm, write_pgm, GrayImage};
use refseg::lang::{tokenize, Vocabulary};
use refseg::model::{Network, Variant};
use refseg::scalar::Scalar;
use refseg::tensor::Tensor;
use refseg::{ablate, checkpoint, train};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "refseg",
    about = "Referring-expression segmentation with sentence-generated dynamic filters \
             and a caption-consistency branch, on a synthetic shapes benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shapes benchmark.
    GenData {
        #[arg(long, default_value_t = 2000)]
        n_train: usize,
        #[arg(long, default_value_t = 500)]
        n_test: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0.35)]
        duplicate_prob: f64,
    },
    /// Train one variant with the three-stage schedule.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's variant id.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's data_dir.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to config.txt next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for predicted-mask PGM dumps (paths land in the report).
        #[arg(long)]
        dump_masks: Option<PathBuf>,
    },
    /// Train and evaluate all five variants over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed list, e.g. 1,2,3.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one image + expression through a trained model.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expr: String,
        /// Directory for response-map and mask dumps.
        #[arg(long)]
        dump_maps: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { n_train, n_test, seed, out, image_size, duplicate_prob } => {
            let cfg = DataConfig {
                n_train,
                n_test,
                seed,
                image_size,
                duplicate_prob,
                ..DataConfig::default()
            };
            let ds = generate(&cfg)?;
            write_dataset(&ds, &cfg, &out)?;
            println!(
                "wrote {} train and {} test samples to {}",
                ds.train.len(),
                ds.test.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train { config, variant, out, data } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            if let Some(v) = variant {
                cfg.variant = Variant::parse(&v)?;
            }
            if let Some(d) = data {
                cfg.data_dir = Some(d);
            }
            let data_dir = cfg.data_dir.clone().ok_or_else(|| {
                Error::InvalidConfig("no data_dir in config and no --data given".into())
            })?;
            let ds = load_dataset(&data_dir)?;
            match cfg.precision {
                Precision::F32 => run_train::<f32>(&cfg, &ds, &out),
                Precision::F64 => run_train::<f64>(&cfg, &ds, &out),
            }
        }
        Command::Eval { ckpt, split, report, data, config, dump_masks } => {
            let cfg_path = config.unwrap_or_else(|| sibling(&ckpt, "config.txt"));
            let cfg = TrainConfig::from_file(&cfg_path)?;
            let data_dir = data.or(cfg.data_dir.clone()).ok_or_else(|| {
                Error::InvalidConfig("no data_dir in config and no --data given".into())
            })?;
            let ds = load_dataset(&data_dir)?;
            match cfg.precision {
                Precision::F32 => {
                    run_eval::<f32>(&cfg, &ds, &ckpt, &split, &report, dump_masks.as_deref())
                }
                Precision::F64 => {
                    run_eval::<f64>(&cfg, &ds, &ckpt, &split, &report, dump_masks.as_deref())
                }
            }
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad seed '{s}'")))
                })
                .collect::<Result<_>>()?;
            let table = match cfg.precision {
                Precision::F32 => ablate::ablate::<f32>(&cfg, &seeds, Some(&out))?,
                Precision::F64 => ablate::ablate::<f64>(&cfg, &seeds, Some(&out))?,
            };
            println!("{}", table.render());
            Ok(())
        }
        Command::Infer { ckpt, image, expr, dump_maps, config } => {
            let cfg_path = config.unwrap_or_else(|| sibling(&ckpt, "config.txt"));
            let cfg = TrainConfig::from_file(&cfg_path)?;
            match cfg.precision {
                Precision::F32 => run_infer::<f32>(&cfg, &ckpt, &image, &expr, dump_maps.as_deref()),
                Precision::F64 => run_infer::<f64>(&cfg, &ckpt, &image, &expr, dump_maps.as_deref()),
            }
        }
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or_else(|| Path::new(".")).join(name)
}

fn run_train<T: Scalar>(cfg: &TrainConfig, ds: &refseg::data::Dataset, out: &Path) -> Result<()> {
    let outcome = train::train::<T>(cfg, ds, Some(out))?;
    println!(
        "trained variant {} for {} steps; final total loss {:.4}",
        cfg.variant.id(),
        cfg.stage_steps.iter().sum::<usize>(),
        outcome.final_loss.total
    );
    let metrics = refseg::eval::evaluate(&outcome.net, &ds.test, &ds.vocab)?;
    println!(
        "test: precision@0.5 {:.4}  mask IoU {:.4}  caption exact {:.4}",
        metrics.precision, metrics.mean_mask_iou, metrics.caption_exact
    );
    Ok(())
}

fn load_network<T: Scalar>(cfg: &TrainConfig, ckpt: &Path, vocab: &Vocabulary) -> Result<Network<T>> {
    let mut net = Network::new(cfg.dims(vocab.len()), cfg.variant, cfg.seed);
    checkpoint::load_into(&mut net.store, ckpt)?;
    Ok(net)
}

fn run_eval<T: Scalar>(
    cfg: &TrainConfig,
    ds: &refseg::data::Dataset,
    ckpt: &Path,
    split: &str,
    report_path: &Path,
    dump_masks: Option<&Path>,
) -> Result<()> {
    let net = load_network::<T>(cfg, ckpt, &ds.vocab)?;
    let samples = ds.split(split)?;
    let (report, evals) = evaluate_detailed(&net, samples, &ds.vocab, dump_masks)?;
    std::fs::write(report_path, render_report(&report, &evals))?;
    println!(
        "{split}: n {}  precision@0.5 {:.4}  mask IoU {:.4}  res {:.4}  cap {:.4}  exact {:.4}",
        report.n,
        report.precision,
        report.mean_mask_iou,
        report.mean_res_loss,
        report.mean_cap_loss,
        report.caption_exact
    );
    Ok(())
}

fn run_infer<T: Scalar>(
    cfg: &TrainConfig,
    ckpt: &Path,
    image_path: &Path,
    expr: &str,
    dump: Option<&Path>,
) -> Result<()> {
    let vocab = Vocabulary::load(&sibling(ckpt, "vocab.txt"))?;
    let net = load_network::<T>(cfg, ckpt, &vocab)?;
    let image = read_ppm(image_path)?;
    let tokens = tokenize(expr, &vocab)?;
    let inf = net.infer(&image, &tokens)?;
    let b = &inf.detection.bbox;
    println!(
        "detection: score {:.4}  box [{:.1}, {:.1}, {:.1}, {:.1}]  cell ({}, {})",
        inf.detection.score, b.x0, b.y0, b.x1, b.y1, inf.detection.cell.0, inf.detection.cell.1
    );
    println!("caption: {}", vocab.decode(&inf.caption).join(" "));
    if let Some(dir) = dump {
        std::fs::create_dir_all(dir)?;
        write_pgm(&dir.join("response.pgm"), &map_to_pgm(&inf.response, false))?;
        for (i, m) in inf.region_maps.iter().enumerate() {
            write_pgm(&dir.join(format!("region_{}.pgm", i + 1)), &map_to_pgm(m, true))?;
        }
        let mask = inf.detection.mask_image(image.width, image.height);
        write_pgm(&dir.join("mask.pgm"), &mask)?;
        println!("maps written to {}", dir.display());
    }
    Ok(())
}

/// Response maps are already in (0,1); raw region maps get min-max scaled.
fn map_to_pgm(map: &Tensor<f64>, normalize: bool) -> GrayImage {
    let (h, w) = (map.shape[1], map.shape[2]);
    let mut g = GrayImage::zeros(w, h);
    let (lo, hi) = if normalize {
        let lo = map.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = map.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if (hi - lo).abs() < 1e-12 {
            (lo - 1.0, lo + 1.0)
        } else {
            (lo, hi)
        }
    } else {
        (0.0, 1.0)
    };
    for (i, &v) in map.data.iter().enumerate() {
        g.pixels[i] = (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    g
}
