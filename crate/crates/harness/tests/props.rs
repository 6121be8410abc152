use num_complex::Complex64;
use proptest::prelude::*;
use semlink::{ArchSpec, ChannelConfig};
use semlink_harness::config::TrainConfig;
use semlink_harness::emulator::{Message, HEADER_LEN};

fn f32_symbols() -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-1e6f32..1e6, -1e6f32..1e6), 0..300)
        .prop_map(|v| v.into_iter().map(|(a, b)| Complex64::new(a as f64, b as f64)).collect())
}

proptest! {
    /// Symbols representable in f32 survive the wire unchanged.
    #[test]
    fn message_round_trip(seq in any::<u32>(), flags in any::<u8>(), symbols in f32_symbols()) {
        let m = Message { flags, seq, symbols };
        let bytes = m.encode().unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + 8 * m.symbols.len());
        prop_assert_eq!(Message::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn decode_rejects_without_panicking(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = Message::decode(&bytes);
    }

    #[test]
    fn truncation_is_an_error(symbols in f32_symbols(), cut in 1usize..16) {
        let bytes = Message::new(3, symbols).encode().unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(Message::decode(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn config_toml_round_trip(seed in any::<u32>(), lr in 1e-6f64..1.0, snr in -20.0f64..40.0, noiseless in any::<bool>()) {
        let mut c = TrainConfig::toy(ArchSpec::semvit(), "1/12", snr);
        c.seed = seed as u64;
        c.lr = lr;
        if noiseless {
            c.channel = ChannelConfig::awgn(f64::INFINITY);
        }
        prop_assert_eq!(TrainConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }
}
