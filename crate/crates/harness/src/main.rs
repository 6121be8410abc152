use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use semlink::analysis::{extract_attention_map, probe_profiles, probe_similarity, LayerId};
use semlink::codec::count_cost;
use semlink::{ArchSpec, ChannelConfig, CodecConfig, Equalization, ImpairmentConfig};
use semlink_harness::config::{Preset, TrainConfig};
use semlink_harness::dataset::load_split;
use semlink_harness::emulator::{emulator_serve, Emulator, EmulatorClient, Transport};
use semlink_harness::evaluate::evaluate;
use semlink_harness::linksim::{linksim, LinkConfig};
use semlink_harness::report::{write_profiles_csv, write_similarity_csv};
use semlink_harness::sweep::{sweep, write_sweep_csv, SweepGrid};
use semlink_harness::train::{load_model, train_any};
use semlink_tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "semlink",
    version,
    about = "Train, analyse and link-test semantic image codecs"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (train, sweep) or file (analyze, eval, linksim, cost).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    snr_db: Option<f64>,
    /// Bandwidth ratio such as 1/6.
    #[arg(long, global = true)]
    ratio: Option<String>,
    /// Stage code such as C-C-V-V-C-C.
    #[arg(long, global = true)]
    arch: Option<String>,
    #[arg(long, global = true)]
    gdn: Option<bool>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Toy,
    Paper,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a codec and write config, checkpoint and reports to --out.
    Train,
    /// Evaluate a trained model on the validation set.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        rayleigh: bool,
    },
    /// Feature analyses of a trained model.
    Analyze {
        #[command(subcommand)]
        what: Analysis,
    },
    /// Encode, frame, send through the emulator, recover and decode.
    Linksim {
        #[arg(long)]
        model: PathBuf,
        /// host:port of a running emulator; in-process when absent.
        #[arg(long)]
        emulator: Option<String>,
        #[arg(long, default_value_t = 64)]
        images: usize,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        #[command(flatten)]
        hw: Hardware,
    },
    /// Run the UDP channel emulator.
    Emulate {
        #[arg(long, default_value = "127.0.0.1:5000")]
        bind: String,
        #[arg(long)]
        rayleigh: bool,
        #[command(flatten)]
        hw: Hardware,
    },
    /// Train and evaluate a grid of configurations.
    Sweep {
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "10")]
        snrs: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1/6")]
        ratios: Vec<String>,
        /// Architecture codes; a `+` or `-` suffix sets GDN on or off.
        #[arg(long, value_delimiter = ',')]
        archs: Vec<String>,
        /// Use the ten-architecture study grid.
        #[arg(long)]
        study: bool,
    },
    /// Parameter and FLOP counts at full width on 32x32 images.
    Cost {
        /// Every architecture of the study grid.
        #[arg(long)]
        study: bool,
    },
}

#[derive(Subcommand)]
enum Analysis {
    /// Average cosine similarity per layer.
    Cossim {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
        layers: Vec<LayerId>,
        #[arg(long, default_value_t = 64)]
        images: usize,
    },
    /// Half-diagonal log-amplitude spectrum per layer.
    Fourier {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
        layers: Vec<LayerId>,
        #[arg(long, default_value_t = 64)]
        images: usize,
    },
    /// Attention weights of one query position, averaged over heads.
    Attention {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        row: usize,
        #[arg(long, default_value_t = 0)]
        col: usize,
        #[arg(long, default_value_t = 64)]
        images: usize,
    },
}

#[derive(Args)]
struct Hardware {
    /// Disable clipping, quantisation and I/Q imbalance.
    #[arg(long)]
    ideal: bool,
    #[arg(long, default_value_t = 3.0)]
    clip: f64,
    #[arg(long, default_value_t = 12)]
    dac_bits: u32,
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    k_i: f64,
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    k_q: f64,
}

impl Hardware {
    fn impairments(&self) -> Option<ImpairmentConfig> {
        (!self.ideal).then_some(ImpairmentConfig {
            clip_threshold: self.clip,
            dac_bits: self.dac_bits,
            k_i: self.k_i,
            k_q: self.k_q,
        })
    }
}

fn resolve_config(c: &Common) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => {
            let arch = ArchSpec::parse(c.arch.as_deref().unwrap_or("CCVVCC"), c.gdn.unwrap_or(false))?;
            let ratio = c.ratio.as_deref().unwrap_or("1/6");
            let snr = c.snr_db.unwrap_or(10.0);
            match c.preset.unwrap_or(PresetArg::Toy) {
                PresetArg::Toy => TrainConfig::toy(arch, ratio, snr),
                PresetArg::Paper => TrainConfig::paper(arch, ratio, snr),
            }
        }
    };
    if let Some(a) = &c.arch {
        cfg.arch = a.clone();
    }
    if let Some(g) = c.gdn {
        cfg.gdn = g;
    }
    if let Some(r) = &c.ratio {
        cfg.ratio = r.clone();
    }
    if let Some(s) = c.snr_db {
        cfg.channel.snr_db = s;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    if let (Some(p), Some(_)) = (c.preset, &c.config) {
        cfg.preset = match p {
            PresetArg::Toy => Preset::Toy,
            PresetArg::Paper => Preset::Paper,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_arch(s: &str) -> anyhow::Result<ArchSpec> {
    let (code, gdn) = match s.strip_suffix('+') {
        Some(c) => (c, true),
        None => (s.strip_suffix('-').unwrap_or(s), false),
    };
    Ok(ArchSpec::parse(code, gdn)?)
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn json_out(path: Option<&Path>, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

fn validation_images(cfg: &TrainConfig, n: usize) -> anyhow::Result<Vec<Tensor<f64>>> {
    let mut data = cfg.data.clone();
    data.val_images = n;
    // Toy validation images follow the training images in the sequence.
    let (_, val) = load_split(&data, cfg.seed)?;
    Ok(val)
}

fn channel_for(cfg: &TrainConfig, snr: Option<f64>, rayleigh: bool) -> ChannelConfig {
    let snr = snr.unwrap_or(cfg.channel.snr_db);
    if rayleigh {
        ChannelConfig::rayleigh(snr, Equalization::Perfect)
    } else {
        ChannelConfig {
            snr_db: snr,
            ..cfg.channel
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    let out = c.out.as_deref();
    match &cli.cmd {
        Cmd::Train => {
            let cfg = resolve_config(c)?;
            let (train, val) = load_split(&cfg.data, cfg.seed)?;
            let dir = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("runs/latest"));
            let report = train_any(&cfg, &train, &val, Some(&dir))?;
            println!(
                "final val PSNR {:.3} dB after {} epochs; run written to {}",
                report.final_eval.mean_psnr,
                report.epochs.len(),
                dir.display()
            );
        }
        Cmd::Eval {
            model,
            images,
            rayleigh,
        } => {
            let (cfg, codec) = load_model::<f32>(model)?;
            let val = validation_images(&cfg, images.unwrap_or(cfg.data.val_images))?;
            let channel = channel_for(&cfg, c.snr_db, *rayleigh);
            json_out(out, &evaluate(&codec, &val, &channel, c.seed.unwrap_or(cfg.seed))?)?;
        }
        Cmd::Analyze { what } => match what {
            Analysis::Cossim { model, layers, images } => {
                let (cfg, codec) = load_model::<f32>(model)?;
                let imgs: Vec<Tensor<f32>> = validation_images(&cfg, *images)?.iter().map(|t| t.cast()).collect();
                write_similarity_csv(output(out)?, &probe_similarity(&codec, &imgs, layers)?)?;
            }
            Analysis::Fourier { model, layers, images } => {
                let (cfg, codec) = load_model::<f32>(model)?;
                let imgs: Vec<Tensor<f32>> = validation_images(&cfg, *images)?.iter().map(|t| t.cast()).collect();
                write_profiles_csv(output(out)?, &probe_profiles(&codec, &imgs, layers)?)?;
            }
            Analysis::Attention {
                model,
                layer,
                row,
                col,
                images,
            } => {
                let (cfg, codec) = load_model::<f32>(model)?;
                let imgs: Vec<Tensor<f32>> = validation_images(&cfg, *images)?.iter().map(|t| t.cast()).collect();
                let map = extract_attention_map(&codec, *layer, (*row, *col), &imgs)?;
                let mut w = csv::Writer::from_writer(output(out)?);
                w.write_record(["row", "col", "weight"])?;
                for (i, v) in map.grid.iter().enumerate() {
                    w.write_record([(i / map.w).to_string(), (i % map.w).to_string(), v.to_string()])?;
                }
                w.flush()?;
            }
        },
        Cmd::Linksim {
            model,
            emulator,
            images,
            amplitude,
            hw,
        } => {
            let (cfg, codec) = load_model::<f32>(model)?;
            let val = validation_images(&cfg, *images)?;
            let transport = match emulator {
                Some(addr) => Transport::Udp(EmulatorClient::connect(addr.as_str(), Duration::from_secs(2))?),
                None => Transport::InProcess(Emulator::new(
                    ChannelConfig::awgn(c.snr_db.unwrap_or(cfg.channel.snr_db)),
                    hw.impairments(),
                    c.seed.unwrap_or(cfg.seed),
                )?),
            };
            let link = LinkConfig {
                pilots: cfg.pilots,
                amplitude: *amplitude,
                ..LinkConfig::default()
            };
            let report = linksim(&codec, &val, &transport, &link)?;
            eprintln!(
                "{} images, {} failed, mean PSNR {:.3} dB, payload SNR {:.2} dB",
                report.n_images, report.n_failed, report.mean_psnr, report.payload_snr_db
            );
            json_out(out, &report)?;
        }
        Cmd::Emulate { bind, rayleigh, hw } => {
            let snr = c.snr_db.unwrap_or(10.0);
            let channel = if *rayleigh {
                ChannelConfig::rayleigh(snr, Equalization::None)
            } else {
                ChannelConfig::awgn(snr)
            };
            emulator_serve(
                bind.as_str(),
                Emulator::new(channel, hw.impairments(), c.seed.unwrap_or(0))?,
            )?;
        }
        Cmd::Sweep {
            snrs,
            ratios,
            archs,
            study,
        } => {
            let base = resolve_config(c)?;
            let archs = if *study {
                ArchSpec::study_grid()
            } else if archs.is_empty() {
                vec![base.arch_spec()?]
            } else {
                archs.iter().map(|a| parse_arch(a)).collect::<anyhow::Result<_>>()?
            };
            let (train, val) = load_split(&base.data, base.seed)?;
            let grid = SweepGrid {
                archs,
                snrs_db: snrs.clone(),
                ratios: ratios.clone(),
                base,
            };
            let dir = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("runs/sweep"));
            std::fs::create_dir_all(&dir)?;
            let rows = sweep(&grid, &train, &val, Some(&dir));
            let csv_path = dir.join("sweep.csv");
            write_sweep_csv(File::create(&csv_path)?, &rows)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} cells, {failed} failed; table at {}", rows.len(), csv_path.display());
        }
        Cmd::Cost { study } => {
            let ratio = semlink::parse_ratio(c.ratio.as_deref().unwrap_or("1/6"))?;
            let archs = if *study {
                ArchSpec::study_grid()
            } else {
                vec![parse_arch(c.arch.as_deref().unwrap_or("CCVVCC-"))?]
            };
            let mut w = csv::Writer::from_writer(output(out)?);
            w.write_record(["arch", "gdn", "params_m", "gflops"])?;
            for a in archs {
                let cost = count_cost(&CodecConfig::paper(a, ratio))?;
                w.write_record([
                    a.to_string(),
                    a.use_gdn.to_string(),
                    format!("{:.2}", cost.mparams()),
                    format!("{:.2}", cost.gflops()),
                ])?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
