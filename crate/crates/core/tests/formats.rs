mod common;

use common::random_model;
use orthomix::cipher::io::{decode_image, decode_key, decode_ppm, encode_image, encode_key, encode_ppm};
use orthomix::cipher::{ImageKind, ImageTensor, SecretKey};
use orthomix::model::io::{deserialize_model, read_model, serialize_model, write_model};
use orthomix::model::Geometry;
use orthomix::nnengine::{decode_dataset, encode_dataset, gen_toy_dataset, read_dataset, write_dataset};
use proptest::prelude::*;

fn image_strategy() -> impl Strategy<Value = (ImageTensor, usize)> {
    (1usize..6, 1usize..6, 1usize..4, any::<bool>(), 1usize..9).prop_flat_map(|(h, w, c, enc, p)| {
        prop::collection::vec(-1e3f64..1e3, h * w * c).prop_map(move |data| {
            let data = if enc { data } else { data.into_iter().map(|v| (v / 2e3 + 0.5).clamp(0.0, 1.0)).collect() };
            let kind = if enc { ImageKind::Encrypted } else { ImageKind::Plain };
            (ImageTensor::new(h, w, c, data, kind).unwrap(), p)
        })
    })
}

proptest! {
    #[test]
    fn encrypted_image_files_round_trip_bit_exact((x, p) in image_strategy()) {
        let bytes = encode_image(&x, p);
        let (back, patch) = decode_image(&bytes).unwrap();
        prop_assert_eq!(patch, p);
        prop_assert_eq!(back.kind(), x.kind());
        prop_assert_eq!(encode_image(&back, patch), bytes.clone());
        // every strict prefix is rejected rather than misread
        let cut = bytes.len() * 3 / 4;
        prop_assert!(decode_image(&bytes[..cut]).is_err());
    }

    #[test]
    fn key_files_round_trip(seed in any::<u64>(), patch in 1usize..16, channels in 1usize..5) {
        let key = SecretKey::new(seed, patch, channels).unwrap();
        prop_assert_eq!(decode_key(&encode_key(&key)).unwrap(), key);
    }

    #[test]
    fn ppm_round_trip_within_quantization(bytes in prop::collection::vec(any::<u8>(), 3 * 4 * 5)) {
        let x = ImageTensor::plain(4, 5, 3, bytes.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
        let encoded = encode_ppm(&x).unwrap();
        prop_assert_eq!(&encoded[encoded.len() - bytes.len()..], &bytes[..]);
        prop_assert!(decode_ppm(&encoded).unwrap().max_abs_diff(&x) <= 1e-12);
    }
}

#[test]
fn model_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    for (seed, geometry) in [(1u64, Geometry::TOY), (2, Geometry { patch: 2, channels: 1, dim: 5, depth: 3, kernel: 5, classes: 4 })] {
        let m = random_model(geometry, seed);
        let path = dir.path().join(format!("{seed}.cmxm"));
        write_model(&path, &m).unwrap();
        let back = read_model(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(serialize_model(&back), std::fs::read(&path).unwrap());
    }
}

#[test]
fn corrupted_model_bytes_are_rejected() {
    let bytes = serialize_model(&random_model(Geometry::TOY, 3));
    assert!(deserialize_model(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(deserialize_model(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(deserialize_model(&magic).is_err());
    let mut version = bytes;
    version[4] = 99;
    assert!(deserialize_model(&version).is_err());
}

#[test]
fn dataset_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = gen_toy_dataset(9, 4).unwrap();
    for (name, d) in [("train", &train), ("test", &test)] {
        let path = dir.path().join(format!("{name}.cmxd"));
        write_dataset(&path, d).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.labels(), d.labels());
        assert_eq!(encode_dataset(&back), encode_dataset(d));
    }
    let bytes = encode_dataset(&train);
    assert!(decode_dataset(&bytes[..bytes.len() - 4]).is_err());
}
