use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cipherpatch::adapt::{
    adapt_model, unadapt_params, verify_equivalence, AdaptedModel, Provenance,
};
use cipherpatch::blockcodec::format::{read_image, write_image};
use cipherpatch::blockcodec::{decrypt_image, encrypt_image, EncryptionKeys};
use cipherpatch::harness::{
    pretrain_source, records_to_csv, run_scenario, ExperimentConfig, Scenario, TrainOptions,
};
use cipherpatch::keyperm::KeyStream;
use cipherpatch::vit::{argmax, forward, load_params, save_params, SgdConfig};

#[derive(Parser)]
#[command(
    name = "cipherpatch",
    version,
    about = "Keyed block-wise image encryption and ViT embedding adaptation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive a key pair from a seed.
    Keygen {
        #[arg(long)]
        seed: u64,
    },
    /// Encrypt an image (PPM or IMGT).
    Encrypt(CodecArgs),
    /// Decrypt an image produced by `encrypt`.
    Decrypt(CodecArgs),
    /// Permute a model's embeddings so it accepts encrypted images.
    Adapt {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        keys: KeyArgs,
    },
    /// Print logits and the predicted class for one image.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Check plain-vs-encrypted logit equivalence over a directory of images.
    ///
    /// Plain weights are adapted with the given keys. Weights written by
    /// `adapt` (with a `.keys` sidecar) are used as is, and the given keys
    /// only encrypt the test images.
    Verify {
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        keys: KeyArgs,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        tol: f32,
        /// Also write the CSV report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune on the synthetic task and write per-epoch metrics.
    Train(TrainArgs),
}

#[derive(Args)]
struct KeyArgs {
    #[arg(long)]
    k1: u64,
    #[arg(long)]
    k2: u64,
    #[arg(long)]
    block: u32,
}

impl KeyArgs {
    fn keys(&self) -> EncryptionKeys {
        EncryptionKeys::new(self.k1, self.k2, self.block as usize)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Block,
    Pixel,
    Both,
}

#[derive(Args)]
struct CodecArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    keys: KeyArgs,
    #[arg(long, value_enum, default_value_t = Mode::Both)]
    mode: Mode,
}

impl CodecArgs {
    fn keys(&self) -> EncryptionKeys {
        let mut keys = self.keys.keys();
        match self.mode {
            Mode::Block => keys.k2 = None,
            Mode::Pixel => keys.k1 = None,
            Mode::Both => {}
        }
        keys
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    /// Omitted keys leave that encryption stage out.
    #[arg(long)]
    k1: Option<u64>,
    #[arg(long)]
    k2: Option<u64>,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    weight_decay: f64,
    /// Block size; defaults to the model's patch size.
    #[arg(long)]
    block: Option<u32>,
    /// Source model to fine-tune. Without it one is pretrained from `--seed`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Write the fine-tuned weights here.
    #[arg(long)]
    save: Option<PathBuf>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.parse().map_err(|e: cipherpatch::Error| e.to_string())
}

fn read(path: &Path) -> anyhow::Result<cipherpatch::blockcodec::ImageTensor> {
    read_image(path).with_context(|| format!("reading {}", path.display()))
}

fn codec(args: &CodecArgs, encrypt: bool) -> anyhow::Result<()> {
    let x = read(&args.input)?;
    let keys = args.keys();
    let y = if encrypt {
        encrypt_image(&x, &keys)?
    } else {
        decrypt_image(&x, &keys)?
    };
    write_image(&args.out, &y).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".keys");
    PathBuf::from(s)
}

fn list_images(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    paths.retain(|p| p.is_file());
    paths.sort();
    if paths.is_empty() {
        bail!("no images in {}", dir.display());
    }
    Ok(paths)
}

fn train_cmd(args: &TrainArgs) -> anyhow::Result<()> {
    let exp = ExperimentConfig::default();
    let block = args.block.map_or(exp.model.patch_size, |b| b as usize);
    let keys = EncryptionKeys {
        k1: args.k1,
        k2: args.k2,
        block_size: block,
    };
    let opts = TrainOptions {
        epochs: args.epochs,
        batch_size: args.batch,
        sgd: SgdConfig {
            lr: args.lr,
            momentum: args.momentum,
            weight_decay: args.weight_decay,
        },
        seed: args.seed,
    };
    let (cfg, source) = match &args.weights {
        Some(path) => load_params(path).with_context(|| format!("loading {}", path.display()))?,
        None => (exp.model, pretrain_source(&exp, args.seed)?.params),
    };
    let exp = ExperimentConfig { model: cfg, ..exp };
    let run = run_scenario(args.scenario, &source, &keys, &exp, &opts)?;
    fs::write(&args.out, records_to_csv(&run.records))
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(path) = &args.save {
        save_params(path, &exp.model, &run.params)?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.cmd {
        Command::Keygen { seed } => {
            let mut s = KeyStream::new(seed);
            println!("k1={}", s.next().unwrap());
            println!("k2={}", s.next().unwrap());
        }
        Command::Encrypt(args) => codec(&args, true)?,
        Command::Decrypt(args) => codec(&args, false)?,
        Command::Adapt { weights, out, keys } => {
            let (cfg, params) =
                load_params(&weights).with_context(|| format!("loading {}", weights.display()))?;
            let adapted = adapt_model(&params, &keys.keys(), &cfg)?;
            save_params(&out, &cfg, &adapted.params)?;
            fs::write(sidecar_path(&out), Provenance(adapted.keys).to_string())?;
        }
        Command::Infer { weights, image } => {
            let (cfg, params) =
                load_params(&weights).with_context(|| format!("loading {}", weights.display()))?;
            let logits = forward(&read(&image)?, &params, &cfg)?;
            let text: Vec<String> = logits.iter().map(|v| v.to_string()).collect();
            println!("logits {}", text.join(" "));
            println!("argmax {}", argmax(&logits));
        }
        Command::Verify {
            weights,
            keys,
            images,
            tol,
            out,
        } => {
            let (cfg, params) =
                load_params(&weights).with_context(|| format!("loading {}", weights.display()))?;
            let keys = keys.keys();
            let (source, adapted) = match fs::read_to_string(sidecar_path(&weights)) {
                // adapted weights: test images are encrypted with the given keys,
                // which must match the ones the model was adapted with
                Ok(text) => {
                    let Provenance(trained) = text.parse()?;
                    let source = unadapt_params(&params, &trained, &cfg)?;
                    (
                        source,
                        AdaptedModel {
                            params,
                            keys: trained,
                        },
                    )
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    let adapted = adapt_model(&params, &keys, &cfg)?;
                    (params, adapted)
                }
                Err(e) => return Err(e.into()),
            };
            let imgs = list_images(&images)?
                .into_iter()
                .map(|p| {
                    let id = p
                        .file_name()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned();
                    Ok((id, read(&p)?))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let report = verify_equivalence(&source, &adapted, &imgs, &keys, &cfg, tol)?;
            let csv = report.to_csv();
            print!("{csv}");
            if let Some(path) = out {
                fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            }
            return Ok(report.all_pass());
        }
        Command::Train(args) => train_cmd(&args)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    cipherpatch::init_thread_pool();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
