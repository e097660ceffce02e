mod common;

use common::*;
use patchcert::config::RunConfig;
use patchcert::weights::{decode_model, decode_tensor, encode_model, encode_tensor, load_model, save_model};
use patchcert::{Error, Tensor};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn model_bytes_round_trip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let c = r.gen_range(1..=3);
        let (h, w, k) = (r.gen_range(6..=12), r.gen_range(6..=12), r.gen_range(2..=5));
        let model = tiny_model(&mut r, c, h, w, k);
        let bytes = encode_model(&model).unwrap();
        let back = decode_model(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn any_flipped_byte_is_rejected(seed in any::<u64>(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut r = rng(seed);
        let model = tiny_model(&mut r, 1, 6, 6, 2);
        let mut bytes = encode_model(&model).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_model(&bytes).is_err());
    }

    #[test]
    fn tensor_bytes_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape, (0..n).map(|_| r.gen_range(-1e3f32..1e3)).collect()).unwrap();
        prop_assert_eq!(decode_tensor(&encode_tensor(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn canonical_config_parses_back(tau in 0.0f64..=1.0, kappa in 0.01f32..=1.0, patch in 1usize..6, seed in any::<u64>()) {
        let text = format!("tau = {tau}\nwinner_rate={kappa}\npatch={patch}\nseed={seed}\n# comment\n");
        let cfg = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(cfg.tau, tau);
        prop_assert_eq!(cfg.winner_rate, kappa);
        let again = RunConfig::parse(&cfg.canonical()).unwrap();
        prop_assert_eq!(again.fingerprint(), cfg.fingerprint());
        prop_assert_eq!(again, cfg);
    }
}

#[test]
fn model_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pcrt");
    let model = tiny_model(&mut rng(3), 3, 10, 10, 4);
    save_model(&model, &path).unwrap();
    assert_eq!(load_model(&path).unwrap(), model);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    assert!(matches!(RunConfig::parse("nonsense = 1"), Err(Error::Config(_))));
}
