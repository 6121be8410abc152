//! Mini-batch Adam training of the codec through a differentiable channel.
//!
//! Each image of a batch gets its own tape and runs on the rayon pool.
//! Per-image gradients come back in batch order and are summed on one
//! thread, so a run is bit-reproducible regardless of thread count.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use semlink::analysis::probe_similarity;
use semlink::channel::graph_channel;
use semlink::{ChannelConfig, Codec};
use semlink_tensor::rng::streams;
use semlink_tensor::{checkpoint, AdamConfig, AdamState, Graph, RngStream, Scalar, Tensor};

use crate::config::{Precision, TrainConfig};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvalReport};
use crate::report::{EpochRecord, LayerSimilarity, RunReport, REPORT_SCHEMA_VERSION};

pub const CONFIG_FILE: &str = "config.toml";
pub const MODEL_FILE: &str = "model.ckpt";
pub const DIVERGED_FILE: &str = "diverged.ckpt";

/// Loss and parameter gradients for one image.
pub fn image_gradients<T: Scalar>(
    codec: &Codec<T>,
    image: &Tensor<T>,
    channel: &ChannelConfig,
    channel_rng: RngStream,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let b = codec.params.bind(&mut g);
    let x = g.constant(image.clone());
    let mut rng = channel_rng.rng();
    let t = codec.forward(&mut g, &b, x, |g, s| graph_channel(g, s, channel, &mut rng))?;
    let loss = g.mse(t.image, x)?;
    g.backward(loss)?;
    let value = g.value(loss).data()[0].as_f64();
    Ok((value, codec.params.grads(&g, &b)))
}

fn accumulate<T: Scalar>(acc: &mut Option<Vec<Tensor<T>>>, grads: Vec<Tensor<T>>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (t, g) in a.iter_mut().zip(grads) {
                t.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += *y);
            }
        }
    }
}

fn record<T: Scalar>(
    codec: &Codec<T>,
    cfg: &TrainConfig,
    epoch: usize,
    train_loss: Option<f64>,
    val: &[Tensor<f64>],
    probe: &[Tensor<T>],
) -> Result<(EpochRecord, Option<EvalReport>)> {
    let eval = if val.is_empty() {
        None
    } else {
        Some(evaluate(codec, val, &cfg.channel, cfg.seed)?)
    };
    let similarity = if probe.is_empty() || cfg.hooks.similarity_layers.is_empty() {
        Vec::new()
    } else {
        probe_similarity(codec, probe, &cfg.hooks.similarity_layers)?
            .iter()
            .map(LayerSimilarity::from)
            .collect()
    };
    let rec = EpochRecord {
        epoch,
        train_loss,
        val_psnr: eval.as_ref().map_or(f64::NAN, |e| e.mean_psnr),
        val_ssim: eval.as_ref().and_then(|e| e.mean_ssim),
        similarity,
    };
    Ok((rec, eval))
}

fn diverged<T: Scalar>(codec: &Codec<T>, out_dir: Option<&Path>, epoch: usize, step: usize, loss: f64) -> Error {
    let checkpoint = out_dir.and_then(|d| {
        let p = d.join(DIVERGED_FILE);
        checkpoint::save(&p, &codec.params).ok().map(|_| p)
    });
    Error::Diverged {
        epoch,
        step,
        loss,
        checkpoint,
    }
}

/// Trains a fresh codec built from `cfg.seed`. Epoch `e` shuffles with child
/// `e` of the `SHUFFLE` stream; the `k`-th image seen in training draws its
/// channel from child `k` of the `CHANNEL` stream.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train_set: &[Tensor<f64>],
    val_set: &[Tensor<f64>],
    out_dir: Option<&Path>,
) -> Result<(Codec<T>, RunReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|source| Error::Io {
            path: d.to_path_buf(),
            source,
        })?;
    }
    let start = Instant::now();
    let mut codec: Codec<T> = Codec::build(cfg.codec_config()?, cfg.seed)?;
    let mut adam = AdamState::new(
        &codec.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let images: Vec<Tensor<T>> = train_set.iter().map(|t| t.cast()).collect();
    let probe: Vec<Tensor<T>> = val_set.iter().take(cfg.hooks.probe_size).map(|t| t.cast()).collect();
    let shuffle = RngStream::new(cfg.seed, streams::SHUFFLE);
    let channel = RngStream::new(cfg.seed, streams::CHANNEL);
    let n = images.len();

    let (initial, mut last_eval) = record(&codec, cfg, 0, None, val_set, &probe)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle.child(epoch as u64).rng().shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let first = ((epoch - 1) * n + b * cfg.batch_size) as u64;
            let results = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| image_gradients(&codec, &images[i], &cfg.channel, channel.child(first + j as u64)))
                .collect::<Result<Vec<_>>>()?;
            let mut acc = None;
            let mut batch_loss = 0.0;
            for (loss, grads) in results {
                batch_loss += loss;
                accumulate(&mut acc, grads);
            }
            let mut grads = acc.expect("non-empty batch");
            if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(&codec, out_dir, epoch, step, batch_loss));
            }
            let inv = T::of(1.0 / batch.len() as f64);
            grads
                .iter_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            adam.step(&mut codec.params, &grads)?;
            loss_sum += batch_loss;
            step += 1;
        }
        let (rec, eval) = record(&codec, cfg, epoch, Some(loss_sum / n as f64), val_set, &probe)?;
        log::info!(
            "epoch {epoch}: loss {:.6} val psnr {:.3} dB",
            loss_sum / n as f64,
            rec.val_psnr
        );
        epochs.push(rec);
        last_eval = eval;
        if let Some(d) = out_dir {
            if cfg.hooks.checkpoint_every > 0 && epoch % cfg.hooks.checkpoint_every == 0 {
                checkpoint::save(d.join(format!("epoch{epoch}.ckpt")), &codec.params)?;
            }
        }
    }
    let final_eval = match last_eval {
        Some(e) => e,
        None => evaluate(&codec, train_set, &cfg.channel, cfg.seed)?,
    };
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        cost: codec.cost(),
        initial,
        epochs,
        final_eval,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    if let Some(d) = out_dir {
        save_model(d, cfg, &codec)?;
        report.save_json(d.join("report.json"))?;
        report.save_epochs_csv(d.join("epochs.csv"))?;
    }
    Ok((codec, report))
}

/// [`train`] at the precision named in the config.
pub fn train_any(
    cfg: &TrainConfig,
    train_set: &[Tensor<f64>],
    val_set: &[Tensor<f64>],
    out_dir: Option<&Path>,
) -> Result<RunReport> {
    Ok(match cfg.precision {
        Precision::F32 => train::<f32>(cfg, train_set, val_set, out_dir)?.1,
        Precision::F64 => train::<f64>(cfg, train_set, val_set, out_dir)?.1,
    })
}

/// Writes `config.toml` and `model.ckpt` into `dir`.
pub fn save_model<T: Scalar>(dir: &Path, cfg: &TrainConfig, codec: &Codec<T>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    cfg.save(dir.join(CONFIG_FILE))?;
    checkpoint::save(dir.join(MODEL_FILE), &codec.params)?;
    Ok(())
}

/// Loads a model saved by [`save_model`] (or a run directory from [`train`]).
pub fn load_model<T: Scalar>(dir: &Path) -> Result<(TrainConfig, Codec<T>)> {
    let cfg = TrainConfig::load(dir.join(CONFIG_FILE))?;
    let mut codec = Codec::build(cfg.codec_config()?, cfg.seed)?;
    checkpoint::load(dir.join(MODEL_FILE), &mut codec.params)?;
    Ok((cfg, codec))
}
