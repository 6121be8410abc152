use semlink::analysis::LayerId;
use semlink::{ArchSpec, ChannelConfig};
use semlink_harness::config::TrainConfig;
use semlink_harness::report::{epochs_csv_header, RunReport};
use semlink_harness::sweep::SWEEP_CSV_HEADER;

fn golden(name: &str) -> String {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    std::fs::read_to_string(path).unwrap().trim_end().to_owned()
}

#[test]
fn epochs_header_matches_golden() {
    let cfg = TrainConfig::toy(ArchSpec::semvit(), "1/6", 10.0);
    assert_eq!(
        epochs_csv_header(&cfg.hooks.similarity_layers).join(","),
        golden("epochs_header.csv")
    );
    assert_eq!(
        cfg.hooks.similarity_layers,
        [LayerId::Stage(0), LayerId::Stage(1), LayerId::Stage(2)]
    );
}

#[test]
fn sweep_header_matches_golden() {
    assert_eq!(SWEEP_CSV_HEADER.join(","), golden("sweep_header.csv"));
}

#[test]
fn noiseless_config_survives_json_and_toml() {
    let mut cfg = TrainConfig::toy(ArchSpec::semvit(), "1/6", 10.0);
    cfg.channel = ChannelConfig::awgn(f64::INFINITY);
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
    cfg.channel.snr_db = f64::NEG_INFINITY;
    assert!(serde_json::to_string(&cfg).is_err());
}

#[test]
fn run_report_json_round_trip_with_infinite_psnr() {
    let mut cfg = TrainConfig::toy(ArchSpec::semvit(), "1/6", f64::INFINITY);
    cfg.epochs = 1;
    cfg.data.train_images = 4;
    cfg.data.val_images = 2;
    cfg.hooks.probe_size = 2;
    let (t, v) = semlink_harness::dataset::load_split(&cfg.data, 0).unwrap();
    let (_, mut report) = semlink_harness::train::train::<f64>(&cfg, &t, &v, None).unwrap();
    report.final_eval.mean_psnr = f64::INFINITY;
    report.final_eval.per_image[0].psnr = f64::INFINITY;
    let json = report.to_json().unwrap();
    assert!(json.contains("\"inf\""));
    let back = RunReport::from_json(&json).unwrap();
    assert_eq!(back.final_eval.mean_psnr, f64::INFINITY);
    assert!(back.initial.train_loss.is_none());
    assert_eq!(back, report);
    let mut later = report.clone();
    later.wall_clock_s += 5.0;
    assert_eq!(later, report);
}
