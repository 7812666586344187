use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latentswap::encoder::EncoderConfig;
use latentswap::generator::{load_generator, GeneratorConfig, GeneratorHandle};
use latentswap::pipeline::{self, Pipeline, PipelineConfig};
use latentswap::train::{self, FaceSource, FaceStream, SyntheticFaces, TrainLog};
use latentswap::transfer::{FtmParams, IdInjectionParams, Manipulator, ManipulatorKind};
use latentswap::{Error, LatentSpace, Result};

#[derive(Parser)]
#[command(name = "latentswap", version, about = "Face swapping in a hierarchical latent space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Put the identity of SOURCE onto TARGET.
    Swap {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Swap every `source,target` row of a pair list.
    Batch {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Overrides `workers` from the config.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Reconstruct an image through encoder and generator.
    Invert {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a directory of swaps written by `batch`.
    Eval {
        #[arg(long)]
        swapped: PathBuf,
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Oracle choice; toy oracles at the image size when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stage 1: fit the encoder.
    TrainEncoder(TrainArgs),
    /// Stage 2: fit the manipulator with encoder and generator frozen.
    TrainFtm {
        #[command(flatten)]
        common: TrainArgs,
        /// Overrides `checkpoints.encoder` from the config.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Write a randomly initialised toy generator checkpoint.
    InitGenerator {
        #[arg(long)]
        resolution: usize,
        #[arg(long, default_value_t = 8)]
        code_dim: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render procedural faces as PNGs.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resolution: usize,
        #[arg(long, default_value_t = 16)]
        count: u64,
        #[arg(long, default_value_t = 8)]
        identities: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// PNG training images; procedural faces when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides `checkpoints.generator` from the config.
    #[arg(long)]
    generator: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
}

struct TrainSetup {
    cfg: PipelineConfig,
    gen: GeneratorHandle,
    data: FaceStream,
}

impl TrainArgs {
    fn setup(&self) -> Result<TrainSetup> {
        let mut cfg = PipelineConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(steps) = self.steps {
            cfg.train.steps = steps;
        }
        let gen = match &self.generator {
            Some(dir) => load_generator(dir, cfg.resolution)?,
            None => cfg.load_generator()?,
        };
        let source = match &self.data {
            Some(dir) => FaceSource::Images(pipeline::load_image_dir(dir)?.into_iter().map(|(_, img)| img).collect()),
            None => FaceSource::Synthetic(SyntheticFaces::new(cfg.resolution, 16, cfg.train.seed)),
        };
        let data = FaceStream::new(vec![(source, 1.0)], cfg.train.seed)?;
        fs::create_dir_all(&self.out).map_err(|e| io_err(&self.out, e))?;
        Ok(TrainSetup { cfg, gen, data })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn finish_log(log: &TrainLog, out: &Path) -> Result<()> {
    log.write_ndjson(&out.join("train_log.ndjson"))?;
    println!(
        "{} steps in {:.1}s, loss {:.4} -> {:.4}",
        log.records.len(),
        log.wall_clock_s,
        log.smoothed_initial(10),
        log.smoothed_final(10)
    );
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Swap {
            source,
            target,
            out,
            config,
        } => {
            let p = Pipeline::from_config(&PipelineConfig::load(&config)?)?;
            let r = p.swap(&pipeline::load_image(&source)?, &pipeline::load_image(&target)?)?;
            pipeline::save_image(&r.image, &out)?;
            let t = r.timings;
            println!(
                "wrote {} (encode {:?}, manipulate {:?}, generate {:?})",
                out.display(),
                t.encode,
                t.manipulate,
                t.generate
            );
        }
        Command::Batch {
            pairs,
            out_dir,
            config,
            workers,
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let p = Pipeline::from_config(&cfg)?;
            let m = pipeline::batch_generate(&pairs, &p, &out_dir, workers.unwrap_or(cfg.workers))?;
            println!("{} ok, {} failed; manifest in {}", m.ok_count(), m.failed_count(), out_dir.display());
        }
        Command::Invert { image, out, config } => {
            let p = Pipeline::from_config(&PipelineConfig::load(&config)?)?;
            pipeline::save_image(&p.invert(&pipeline::load_image(&image)?)?, &out)?;
        }
        Command::Eval {
            swapped,
            sources,
            targets,
            report,
            config,
        } => {
            let oracles = match config {
                Some(c) => PipelineConfig::load(&c)?.oracle_set()?,
                None => {
                    let side = pipeline::load_image_dir(&sources)?
                        .first()
                        .map(|(_, img)| img.resolution())
                        .ok_or_else(|| Error::Argument("no source images".into()))?;
                    latentswap::oracles::OracleSet::toy(latentswap::oracles::OracleSizes::uniform(side), 0)
                }
            };
            let r = pipeline::evaluate_dirs(&swapped, &sources, &targets, &oracles)?;
            fs::write(&report, r.to_text()).map_err(|e| io_err(&report, e))?;
            print!("{}", r.to_text());
        }
        Command::TrainEncoder(args) => {
            let TrainSetup { cfg, gen, mut data } = args.setup()?;
            let ecfg = match cfg.encoder_preset.as_str() {
                "standard" => EncoderConfig::standard(cfg.resolution, cfg.latent_space)?,
                _ => EncoderConfig::toy(cfg.resolution, gen.code_dim(), cfg.latent_space)?,
            };
            let mut enc = latentswap::encoder::EncoderState::init(ecfg, cfg.train.seed)?;
            if cfg.latent_space == LatentSpace::WPlusPlus {
                enc.warm_start_constant(&gen)?;
            }
            let (enc, log) = train::train_hierfe(&mut data, &gen, &cfg.oracle_set()?, enc, &cfg.train)?;
            enc.save(&args.out)?;
            finish_log(&log, &args.out)?;
        }
        Command::TrainFtm { common, encoder } => {
            let TrainSetup { cfg, gen, mut data } = common.setup()?;
            let enc = match encoder {
                Some(dir) => latentswap::encoder::EncoderState::load(&dir)?,
                None => cfg.load_encoder()?,
            };
            let (n_high, d) = (enc.config().high_code_count()?, enc.config().code_dim);
            let m = match cfg.manipulator {
                ManipulatorKind::Ftm => Manipulator::Ftm(FtmParams::init(n_high, d, cfg.train.seed)),
                ManipulatorKind::IdInjection => Manipulator::IdInjection(IdInjectionParams::init(
                    n_high,
                    d,
                    cfg.id_hidden.unwrap_or(d),
                    cfg.train.seed,
                )),
                ManipulatorKind::Lcr => {
                    return Err(Error::Config("manipulator 'lcr' has nothing to train".into()));
                }
            };
            let (m, log) = train::train_ftm(&mut data, &enc, &gen, &cfg.oracle_set()?, m, &cfg.train)?;
            train::save_manipulator(&m, &common.out)?;
            finish_log(&log, &common.out)?;
        }
        Command::InitGenerator {
            resolution,
            code_dim,
            out,
            seed,
        } => {
            GeneratorHandle::init(GeneratorConfig::toy(resolution, code_dim)?, seed)?.save(&out)?;
        }
        Command::SynthData {
            out,
            resolution,
            count,
            identities,
            seed,
        } => {
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let faces = SyntheticFaces::new(resolution, identities, seed);
            for i in 0..count {
                let (id, variant) = (i % faces.identities, i / faces.identities);
                pipeline::save_image(&faces.render(id, variant), &out.join(format!("id{id:03}_v{variant:03}.png")))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
