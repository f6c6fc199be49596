use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use orthomix::cipher::io::{read_image, read_key, read_ppm, write_image, write_key};
use orthomix::cipher::{conventional_encrypt, encrypt_image, generate_orthogonal, ImageKind, SecretKey};
use orthomix::eval::{accuracy_matrix, export_ppm, leakage_report, normalize_for_view, LeakageReport};
use orthomix::model::io::{read_model, write_model};
use orthomix::model::{transform_model, Geometry};
use orthomix::nnengine::{forward, gen_toy_dataset, read_dataset, train, write_dataset, TrainConfig};
use orthomix::protocol::{serve, thirdparty_provision, KeyedClient, Provider};

#[derive(Parser)]
#[command(name = "orthomix", version, about = "Block-wise orthogonal encryption for ConvMixer inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a secret key file.
    Keygen {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        patch: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a plain model from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training set; overrides `dataset` in the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Held-out set for per-epoch accuracy; overrides `test_dataset`.
        #[arg(long)]
        test_dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transform a plain model with a key.
    TransformModel {
        #[arg(long)]
        key: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Key generation and model transformation in one step.
    Provision {
        #[arg(long)]
        seed: u64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        key_out: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encrypt a PPM image.
    Encrypt {
        #[arg(long)]
        key: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify a CMXE image locally.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Serve a transformed model.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
    },
    /// Encrypt a PPM image locally and classify it remotely.
    Client {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        server: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        timeout_ms: u64,
    },
    /// Accuracy matrix and leakage metrics for a plain model and a key.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
        /// Number of images used for the leakage metrics.
        #[arg(long, default_value_t = 50)]
        leakage_images: usize,
        /// Write plain / proposed / conventional PPMs of the first image here.
        #[arg(long)]
        export_dir: Option<PathBuf>,
    },
    /// Generate the toy dataset.
    GenDataset {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        per_class: usize,
        /// Training split.
        #[arg(long)]
        out: PathBuf,
        /// Test split; defaults to `<out stem>-test.cmxd`.
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Tsv,
    Kv,
}

/// Training config file: optimizer settings under `[train]`, model shape
/// under `[geometry]`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    train: TrainConfig,
    #[serde(default = "toy_geometry")]
    geometry: Geometry,
    dataset: Option<PathBuf>,
    test_dataset: Option<PathBuf>,
}

fn toy_geometry() -> Geometry {
    Geometry::TOY
}

fn default_test_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    out.with_file_name(format!("{stem}-test.cmxd"))
}

fn print_logits(class: usize, logits: &[f64]) {
    println!("class={class}");
    let joined: Vec<String> = logits.iter().map(|v| format!("{v:.9}")).collect();
    println!("logits={}", joined.join(","));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Keygen { seed, patch, channels, out } => {
            let key = SecretKey::new(seed, patch, channels)?;
            write_key(&out, &key).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}-dimensional key to {}", key.dim(), out.display());
        }
        Command::Train { config, dataset, test_dataset, out } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let file: TrainFile = toml::from_str(&text).with_context(|| format!("parsing {}", config.display()))?;
            let base = config.parent().unwrap_or(Path::new("."));
            let train_path = match (dataset, file.dataset) {
                (Some(p), _) => p,
                (None, Some(p)) => base.join(p),
                (None, None) => bail!("no training dataset: pass --dataset or set `dataset` in the config"),
            };
            let test_path = test_dataset.or_else(|| file.test_dataset.map(|p| base.join(p)));
            let data = read_dataset(&train_path).with_context(|| format!("reading {}", train_path.display()))?;
            let test = test_path.map(|p| read_dataset(&p).with_context(|| format!("reading {}", p.display()))).transpose()?;
            let outcome = train(&file.train, file.geometry, &data, test.as_ref())?;
            println!("epoch\tloss\ttrain_acc\ttest_acc");
            for report in &outcome.log {
                println!("{report}");
            }
            write_model(&out, &outcome.model)?;
        }
        Command::TransformModel { key, input, out } => {
            let key = read_key(&key)?;
            let model = read_model(&input)?;
            let g = model.geometry;
            if (g.patch, g.channels) != (key.patch, key.channels) {
                bail!("key block {}x{}x{} does not match model block {}x{}x{}", key.patch, key.patch, key.channels, g.patch, g.patch, g.channels);
            }
            write_model(&out, &transform_model(&model, &generate_orthogonal(&key))?)?;
        }
        Command::Provision { seed, input, key_out, out } => {
            let g = read_model(&input)?.geometry;
            thirdparty_provision(seed, g.patch, g.channels, &input, &key_out, &out)?;
        }
        Command::Encrypt { key, input, out } => {
            let key = read_key(&key)?;
            let x = read_ppm(&input)?;
            let xhat = encrypt_image(&x, &generate_orthogonal(&key))?;
            write_image(&out, &xhat, key.patch)?;
        }
        Command::Infer { model, input } => {
            let model = read_model(&model)?;
            let (x, _) = read_image(&input)?;
            if model.encrypted != (x.kind() == ImageKind::Encrypted) {
                log::warn!("model and image disagree on encryption; the prediction is meaningless");
            }
            let logits = forward(&model, &x)?;
            print_logits(logits.argmax(), &logits.0);
        }
        Command::Serve { model, bind } => {
            let provider = Provider::load(&model)?;
            let handle = serve(provider, bind.as_str())?;
            eprintln!("listening on {}", handle.local_addr());
            handle.wait();
        }
        Command::Client { key, server, input, timeout_ms } => {
            let key = read_key(&key)?;
            let x = read_ppm(&input)?;
            let mut client = KeyedClient::connect(server.as_str(), key, Duration::from_millis(timeout_ms))?;
            let r = client.classify(&x)?;
            print_logits(r.class as usize, &r.logits);
        }
        Command::Evaluate { model, key, dataset, format, leakage_images, export_dir } => {
            let model = read_model(&model)?;
            if model.encrypted {
                bail!("evaluate expects the plain model; it derives the transformed one from the key");
            }
            let key = read_key(&key)?;
            let a = generate_orthogonal(&key);
            let data = read_dataset(&dataset)?;
            let acc = accuracy_matrix(&model, &a, &data)?;
            let n = leakage_images.min(data.len());
            let (mut proposed, mut conventional) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for x in &data.images()[..n] {
                let (p, c) = leakage_report(x, &encrypt_image(x, &a)?, &conventional_encrypt(x, &key)?)?;
                proposed.push(p);
                conventional.push(c);
            }
            let (p, c) = (LeakageReport::mean(&proposed), LeakageReport::mean(&conventional));
            match format {
                ReportFormat::Table => {
                    print!("{}", acc.to_table());
                    println!("\nLeakage vs. plain (mean over {n} images)");
                    println!("{:<14}{:>10}{:>10}{:>12}", "cipher", "MSE", "SSIM", "hist-corr");
                    println!("{:<14}{:>10.4}{:>10.4}{:>12.4}", "proposed", p.mse, p.ssim, p.hist_corr);
                    println!("{:<14}{:>10.4}{:>10.4}{:>12.4}", "conventional", c.mse, c.ssim, c.hist_corr);
                    println!();
                    print!("{}", acc.to_key_values());
                }
                ReportFormat::Tsv => print!("{}", acc.to_tsv()),
                ReportFormat::Kv => print!("{}", acc.to_key_values()),
            }
            if !matches!(format, ReportFormat::Tsv) {
                println!("leakage_images={n}");
                println!("ssim_proposed={}\nssim_conventional={}", p.ssim, c.ssim);
                println!("mse_proposed={}\nmse_conventional={}", p.mse, c.mse);
                println!("histcorr_proposed={}\nhistcorr_conventional={}", p.hist_corr, c.hist_corr);
            }
            if let Some(dir) = export_dir {
                std::fs::create_dir_all(&dir)?;
                let x = data.images().first().context("dataset is empty")?;
                export_ppm(x, dir.join("plain.ppm"))?;
                export_ppm(&normalize_for_view(&encrypt_image(x, &a)?)?, dir.join("proposed.ppm"))?;
                export_ppm(&normalize_for_view(&conventional_encrypt(x, &key)?)?, dir.join("conventional.ppm"))?;
            }
        }
        Command::GenDataset { seed, per_class, out, test_out } => {
            let (train_set, test_set) = gen_toy_dataset(seed, per_class)?;
            let test_out = test_out.unwrap_or_else(|| default_test_path(&out));
            write_dataset(&out, &train_set)?;
            write_dataset(&test_out, &test_set)?;
            println!("wrote {} training images to {} and {} test images to {}", train_set.len(), out.display(), test_set.len(), test_out.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    run(Cli::parse())
}
