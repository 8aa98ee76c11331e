use std::path::Path;

use maskclip::data::pnm::{decode_pgm, decode_ppm, encode_pgm16, encode_ppm};
use maskclip::data::tensorfile::{decode, encode};
use maskclip::data::{
    generate_synthetic_dataset, load_dataset, mask_to_token_grid, read_tensor, write_tensor, Mask,
    SyntheticDatasetSpec,
};
use proptest::prelude::*;

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generation_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticDatasetSpec::four_category(6, 3, 42);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ia = generate_synthetic_dataset(&spec, &a).unwrap();
    let ib = generate_synthetic_dataset(&spec, &b).unwrap();
    assert_eq!(ia, ib);
    assert_eq!(tree(&a), tree(&b));

    let c = tmp.path().join("c");
    generate_synthetic_dataset(&SyntheticDatasetSpec { seed: 43, ..spec }, &c).unwrap();
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn loaded_dataset_re_encodes_to_the_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticDatasetSpec::four_category(8, 4, 3);
    let index = generate_synthetic_dataset(&spec, tmp.path()).unwrap();
    let ds = load_dataset(tmp.path()).unwrap();
    assert_eq!(ds.vocab.names(), spec.categories().as_slice());
    assert_eq!(ds.samples.len(), 12);
    assert_eq!(ds.split("train").len(), 8);
    for (s, entry) in ds.samples.iter().zip(&index.samples) {
        assert_eq!(s.labels, entry.labels);
        let ppm = std::fs::read(tmp.path().join(&entry.image)).unwrap();
        assert_eq!(encode_ppm(s.image.width, s.image.height, &s.image.rgb), ppm);
        // instance ids are 1-based positions in the label list
        let ids: Vec<u16> = (0..s.image.width * s.image.height)
            .map(|px| {
                s.masks
                    .iter()
                    .position(|m| m.values[px] > 0.0)
                    .map_or(0, |i| i as u16 + 1)
            })
            .collect();
        let pgm = std::fs::read(tmp.path().join(&entry.mask)).unwrap();
        assert_eq!(encode_pgm16(s.image.width, s.image.height, &ids), pgm);
        for m in &s.masks {
            assert!(m.values.iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(m.area() > 0);
        }
    }
}

#[test]
fn truncated_tensor_file_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("t.mcpp");
    write_tensor(&p, &[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
    let err = read_tensor(&p).unwrap_err().to_string();
    assert!(err.contains("t.mcpp"), "{err}");
}

#[test]
fn token_grid_keeps_the_pixel_fraction() {
    let m = Mask::from_fn(8, 8, |x, y| f64::from(u8::from(x < 3 && y < 4)));
    let row = mask_to_token_grid(&m, (2, 2)).unwrap();
    assert_eq!(row, vec![0.75, 0.0, 0.0, 0.0]);
}

fn finite_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn tensor_file_round_trip_is_bit_exact(
        dims in prop::collection::vec(0usize..5, 0..4),
        seed in prop::collection::vec(finite_f64(), 64),
    ) {
        let n: usize = dims.iter().product();
        let values: Vec<f64> = (0..n).map(|i| seed[i % seed.len()]).collect();
        let bytes = encode(&dims, &values).unwrap();
        let t = decode(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(&t.dims, &dims);
        let back: Vec<u64> = t.values.iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(back, orig);
        prop_assert_eq!(encode(&t.dims, &t.values).unwrap(), bytes);
    }

    #[test]
    fn non_finite_values_survive_too(bits in prop::collection::vec(any::<u64>(), 1..20)) {
        let values: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
        let bytes = encode(&[values.len()], &values).unwrap();
        let t = decode(&bytes, Path::new("mem")).unwrap();
        let back: Vec<u64> = t.values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(back, bits);
    }

    #[test]
    fn pnm_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rgb: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let ids: Vec<u16> = (0..w * h).map(|_| rng.gen()).collect();
        prop_assert_eq!(decode_ppm(&encode_ppm(w, h, &rgb), Path::new("x")).unwrap(), (w, h, rgb));
        prop_assert_eq!(decode_pgm(&encode_pgm16(w, h, &ids), Path::new("x")).unwrap(), (w, h, ids));
    }
}
