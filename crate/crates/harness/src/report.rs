//! Run reports: JSON documents plus CSV traces.

use std::io::Write;
use std::path::Path;

use semlink::analysis::{LayerId, SimilarityReport, SpectrumProfile};
use semlink::CostReport;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{IoContext, Result};
use crate::evaluate::EvalReport;

/// Bumped whenever a report field changes meaning.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Serde adapter writing non-finite floats as the strings `"inf"`, `"-inf"`
/// and `"nan"`, since JSON numbers cannot hold them.
pub mod float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float {other:?}"))),
            },
        }
    }

    pub mod opt {
        use serde::{Deserialize, Deserializer, Serializer};

        #[derive(Deserialize)]
        struct Wrap(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(x) => super::serialize(x, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

/// Similarity of one layer at one point in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    pub layer: LayerId,
    #[serde(with = "float")]
    pub s: f64,
}

impl From<&SimilarityReport> for LayerSimilarity {
    fn from(r: &SimilarityReport) -> Self {
        Self { layer: r.layer, s: r.s }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the untrained model; training epochs count from 1.
    pub epoch: usize,
    /// Mean per-image MSE over the epoch; absent for epoch 0.
    #[serde(with = "float::opt", default)]
    pub train_loss: Option<f64>,
    #[serde(with = "float")]
    pub val_psnr: f64,
    #[serde(with = "float::opt", default)]
    pub val_ssim: Option<f64>,
    pub similarity: Vec<LayerSimilarity>,
}

impl EpochRecord {
    pub fn similarity_of(&self, layer: LayerId) -> Option<f64> {
        self.similarity.iter().find(|s| s.layer == layer).map(|s| s.s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub cost: CostReport,
    pub initial: EpochRecord,
    pub epochs: Vec<EpochRecord>,
    pub final_eval: EvalReport,
    /// Excluded from equality; everything else is a function of the config.
    #[serde(with = "float")]
    pub wall_clock_s: f64,
}

impl PartialEq for RunReport {
    fn eq(&self, o: &Self) -> bool {
        self.schema_version == o.schema_version
            && self.config == o.config
            && self.cost == o.cost
            && self.initial == o.initial
            && self.epochs == o.epochs
            && self.final_eval == o.final_eval
    }
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).at(path)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).at(path)?)
    }

    /// Epoch 0 followed by every training epoch.
    pub fn trace(&self) -> impl Iterator<Item = &EpochRecord> {
        std::iter::once(&self.initial).chain(&self.epochs)
    }

    pub fn write_epochs_csv<W: Write>(&self, w: W) -> Result<()> {
        write_epochs_csv(w, &self.config.hooks.similarity_layers, self.trace())
    }

    pub fn save_epochs_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).at(path)?;
        self.write_epochs_csv(f)
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

pub fn epochs_csv_header(layers: &[LayerId]) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "train_loss", "val_psnr", "val_ssim"].map(String::from).into();
    h.extend(layers.iter().map(|l| format!("s_{l}")));
    h
}

pub fn write_epochs_csv<'a, W: Write>(
    w: W,
    layers: &[LayerId],
    rows: impl IntoIterator<Item = &'a EpochRecord>,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(epochs_csv_header(layers))?;
    for r in rows {
        let mut row = vec![
            r.epoch.to_string(),
            fmt_opt(r.train_loss),
            fmt_f(r.val_psnr),
            fmt_opt(r.val_ssim),
        ];
        row.extend(layers.iter().map(|&l| fmt_opt(r.similarity_of(l))));
        out.write_record(row)?;
    }
    out.flush()?;
    Ok(())
}

/// Long format: one row per (layer, bin).
pub fn write_profiles_csv<W: Write>(w: W, profiles: &[SpectrumProfile]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "bin", "log_amplitude"])?;
    for p in profiles {
        for (i, y) in p.y.iter().enumerate() {
            out.write_record([p.layer.to_string(), i.to_string(), fmt_f(*y)])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_similarity_csv<W: Write>(w: W, reports: &[SimilarityReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["layer", "s", "n_positions", "excluded"])?;
    for r in reports {
        out.write_record([
            r.layer.to_string(),
            fmt_f(r.s),
            r.n_positions.to_string(),
            r.excluded.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
