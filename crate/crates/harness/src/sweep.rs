//! Grid of trainings over architecture, SNR and bandwidth ratio.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use semlink::codec::count_cost;
use semlink::{ArchSpec, ChannelConfig, CodecConfig};
use semlink_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{Precision, TrainConfig};
use crate::error::Result;
use crate::evaluate::{evaluate, EvalReport};
use crate::report::float;
use crate::train::{load_model, train, CONFIG_FILE, MODEL_FILE};

#[derive(Clone, Debug)]
pub struct SweepGrid {
    pub archs: Vec<ArchSpec>,
    pub snrs_db: Vec<f64>,
    pub ratios: Vec<String>,
    /// Everything except arch, SNR and ratio.
    pub base: TrainConfig,
}

impl SweepGrid {
    /// Cells in row-major order: arch, then ratio, then SNR.
    pub fn cells(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for a in &self.archs {
            for r in &self.ratios {
                for &snr in &self.snrs_db {
                    let mut c = self.base.clone();
                    c.arch = a.to_string();
                    c.gdn = a.use_gdn;
                    c.ratio = r.clone();
                    c.channel = ChannelConfig {
                        snr_db: snr,
                        ..c.channel
                    };
                    out.push(c);
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub arch: String,
    pub gdn: bool,
    #[serde(with = "float")]
    pub snr_db: f64,
    pub ratio: String,
    #[serde(with = "float::opt", default)]
    pub psnr: Option<f64>,
    #[serde(with = "float::opt", default)]
    pub psnr_std: Option<f64>,
    #[serde(with = "float::opt", default)]
    pub ssim: Option<f64>,
    /// Cost of the codec actually trained.
    pub params: Option<u64>,
    pub flops: Option<u64>,
    /// Cost of the same architecture at full width on 32x32 images.
    pub paper_params: Option<u64>,
    pub paper_flops: Option<u64>,
    pub error: Option<String>,
}

pub fn cell_name(cfg: &TrainConfig) -> String {
    format!(
        "{}{}_r{}_snr{}",
        cfg.arch.replace('-', ""),
        if cfg.gdn { "" } else { "_nogdn" },
        cfg.ratio.replace('/', "-"),
        cfg.channel.snr_db
    )
}

fn run_cell(
    cfg: &TrainConfig,
    train_set: &[Tensor<f64>],
    val_set: &[Tensor<f64>],
    out_dir: Option<&Path>,
) -> Result<(u64, u64, EvalReport)> {
    let dir: Option<PathBuf> = out_dir.map(|d| d.join(cell_name(cfg)));
    let reuse = dir
        .as_deref()
        .is_some_and(|d| d.join(MODEL_FILE).is_file() && d.join(CONFIG_FILE).is_file());
    macro_rules! at {
        ($t:ty) => {{
            let codec = if reuse {
                let (saved, codec) = load_model::<$t>(dir.as_deref().expect("checked"))?;
                if saved != *cfg {
                    log::warn!("{}: saved config differs, using the saved model", cell_name(cfg));
                }
                codec
            } else {
                train::<$t>(cfg, train_set, val_set, dir.as_deref())?.0
            };
            let c = codec.cost();
            (
                c.param_count,
                c.flop_count,
                evaluate(&codec, val_set, &cfg.channel, cfg.seed)?,
            )
        }};
    }
    Ok(match cfg.precision {
        Precision::F32 => at!(f32),
        Precision::F64 => at!(f64),
    })
}

/// Trains (or loads from `out_dir/<cell>`) and evaluates every cell. Cells
/// run in parallel; a failing cell becomes a row with `error` set.
pub fn sweep(
    grid: &SweepGrid,
    train_set: &[Tensor<f64>],
    val_set: &[Tensor<f64>],
    out_dir: Option<&Path>,
) -> Vec<SweepRow> {
    grid.cells()
        .par_iter()
        .map(|cfg| {
            let paper = cfg
                .arch_spec()
                .and_then(|a| Ok(count_cost(&CodecConfig::paper(a, cfg.ratio()?))?));
            let mut row = SweepRow {
                arch: cfg.arch.clone(),
                gdn: cfg.gdn,
                snr_db: cfg.channel.snr_db,
                ratio: cfg.ratio.clone(),
                psnr: None,
                psnr_std: None,
                ssim: None,
                params: None,
                flops: None,
                paper_params: paper.as_ref().ok().map(|c| c.param_count),
                paper_flops: paper.as_ref().ok().map(|c| c.flop_count),
                error: None,
            };
            match run_cell(cfg, train_set, val_set, out_dir) {
                Ok((p, f, e)) => {
                    row.params = Some(p);
                    row.flops = Some(f);
                    row.psnr = Some(e.mean_psnr);
                    row.psnr_std = e.std_psnr;
                    row.ssim = e.mean_ssim;
                }
                Err(e) => {
                    log::error!("{}: {e}", cell_name(cfg));
                    row.error = Some(e.to_string());
                }
            }
            row
        })
        .collect()
}

pub const SWEEP_CSV_HEADER: [&str; 12] = [
    "arch",
    "gdn",
    "snr_db",
    "ratio",
    "psnr",
    "psnr_std",
    "ssim",
    "params",
    "gflops",
    "paper_params",
    "paper_gflops",
    "error",
];

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let opt_u = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
    let gf = |v: Option<u64>| opt(v.map(|x| x as f64 / 1e9));
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SWEEP_CSV_HEADER)?;
    for r in rows {
        out.write_record([
            r.arch.clone(),
            r.gdn.to_string(),
            r.snr_db.to_string(),
            r.ratio.clone(),
            opt(r.psnr),
            opt(r.psnr_std),
            opt(r.ssim),
            opt_u(r.params),
            gf(r.flops),
            opt_u(r.paper_params),
            gf(r.paper_flops),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_order_and_names() {
        let grid = SweepGrid {
            archs: vec![ArchSpec::semvit(), ArchSpec::deepjscc()],
            snrs_db: vec![0.0, 10.0],
            ratios: vec!["1/6".into()],
            base: TrainConfig::toy(ArchSpec::semvit(), "1/6", 0.0),
        };
        let cells = grid.cells();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].channel.snr_db, 10.0);
        assert_eq!(cells[2].arch, ArchSpec::deepjscc().to_string());
        assert_eq!(cell_name(&cells[1]), "CCVVCC_nogdn_r1-6_snr10");
    }
}
