use std::io::Write;

use semlink_harness::config::{DataConfig, DataSource};
use semlink_harness::dataset::{decode_cifar_record, load_cifar_binary, load_split, CifarReader, CIFAR_RECORD};

/// Record whose pixel values encode their own position: R = row, G = col,
/// B = 200 + (row + col) % 50.
fn synthetic_record(label: u8) -> Vec<u8> {
    let mut b = vec![label];
    for c in 0..3 {
        for r in 0..32u32 {
            for col in 0..32u32 {
                b.push(match c {
                    0 => r as u8,
                    1 => col as u8,
                    _ => (200 + (r + col) % 50) as u8,
                });
            }
        }
    }
    b
}

#[test]
fn two_record_file_decodes_planes_to_hwc() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    let mut f = std::fs::File::create(&path).unwrap();
    f.write_all(&synthetic_record(3)).unwrap();
    f.write_all(&synthetic_record(9)).unwrap();
    drop(f);
    let recs = load_cifar_binary(&path).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!((recs[0].label, recs[1].label), (3, 9));
    let px = &recs[1].pixels;
    assert_eq!(px.shape(), &[32, 32, 3]);
    for (r, c) in [(0, 0), (5, 17), (31, 2)] {
        let at = |ch: usize| px.data()[(r * 32 + c) * 3 + ch];
        assert_eq!(at(0), r as f64 / 255.0);
        assert_eq!(at(1), c as f64 / 255.0);
        assert_eq!(at(2), (200 + (r + c) % 50) as f64 / 255.0);
    }
}

#[test]
fn bad_sizes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.bin");
    let mut bytes = synthetic_record(0);
    bytes.pop();
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_cifar_binary(&path).is_err());
    assert!(decode_cifar_record(&bytes).is_err());
    assert!(load_cifar_binary(dir.path().join("missing.bin")).is_err());
}

#[test]
fn reader_reports_truncated_tail() {
    let mut bytes = synthetic_record(1);
    bytes.extend_from_slice(&synthetic_record(2)[..CIFAR_RECORD / 2]);
    let out: Vec<_> = CifarReader::new(&bytes[..]).collect();
    assert_eq!(out.len(), 2);
    assert!(out[0].is_ok());
    assert!(out[1].is_err());
    assert_eq!(CifarReader::new(&[][..]).count(), 0);
}

#[test]
fn toy_split_sizes() {
    let cfg = DataConfig {
        source: DataSource::Toy,
        train_images: 10,
        val_images: 4,
        image_size: 16,
    };
    let (t, v) = load_split(&cfg, 2).unwrap();
    assert_eq!((t.len(), v.len()), (10, 4));
    assert_eq!(t[0].shape(), &[16, 16, 3]);
}

#[test]
fn cifar_requires_32px() {
    let cfg = DataConfig {
        source: DataSource::Cifar,
        train_images: 1,
        val_images: 1,
        image_size: 8,
    };
    assert!(load_split(&cfg, 0).is_err());
}
