use eresfd::image::{decode_image, encode_ppm, load_image};
use eresfd::weights::{self, ContainerError, WeightStore};
use eresfd::{Error, Shape, Tensor};
use proptest::prelude::*;

#[test]
fn empty_store_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.erfd");
    weights::save_weights(&WeightStore::new(), &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 12);
    assert!(weights::load_weights(&path).unwrap().is_empty());
}

#[test]
fn byte_accounting() {
    let name = "stem.conv0";
    let mut s = WeightStore::new();
    s.insert(name, vec![16, 3, 5, 5], vec![0.5; 1200]).unwrap();
    let bytes = s.to_bytes(false).unwrap();
    assert_eq!(bytes.len(), 4 + 4 + 4 + (2 + name.len()) + 1 + 16 + 4 * 1200);
    assert_eq!(&bytes[..4], b"ERFD");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
}

#[test]
fn checksum_audit_flags_corruption() {
    let mut s = WeightStore::new();
    s.insert("a", vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    s.insert("b", vec![2, 2], vec![5.0; 4]).unwrap();
    let mut bytes = s.to_bytes(true).unwrap();
    let clean = WeightStore::from_bytes(&bytes).unwrap();
    assert!(clean.audit().is_empty());
    // first payload byte of `a`: header 12, name len 2 + 1, rank 1, dims 4
    bytes[12 + 3 + 1 + 4] ^= 0x40;
    let loaded = WeightStore::from_bytes(&bytes).unwrap();
    assert_eq!(loaded.audit(), ["a"]);
    // without the section nothing can be audited
    let plain = s.to_bytes(false).unwrap();
    assert!(WeightStore::from_bytes(&plain).unwrap().checksums.is_none());
}

#[test]
fn distinct_container_errors() {
    let mut s = WeightStore::new();
    s.insert("w", vec![2], vec![1.0, 2.0]).unwrap();
    let good = s.to_bytes(false).unwrap();

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(matches!(WeightStore::from_bytes(&bad), Err(ContainerError::BadMagic(_))));
    assert!(matches!(WeightStore::from_bytes(&good[..good.len() - 1]), Err(ContainerError::Truncated(_))));
    let mut trailing = good.clone();
    trailing.extend_from_slice(&[0, 1, 2]);
    assert!(matches!(WeightStore::from_bytes(&trailing), Err(ContainerError::TrailingBytes(_))));
    let mut version = good.clone();
    version[4] = 9;
    assert!(matches!(WeightStore::from_bytes(&version), Err(ContainerError::UnsupportedVersion(9))));

    // a hand-built file with the same name twice
    let mut dup = good[..12].to_vec();
    dup[8] = 2;
    let entry = &good[12..];
    dup.extend_from_slice(entry);
    dup.extend_from_slice(entry);
    assert!(matches!(WeightStore::from_bytes(&dup), Err(ContainerError::DuplicateName(n)) if n == "w"));

    assert!(matches!(s.insert("w", vec![1], vec![0.0]), Err(ContainerError::DuplicateName(_))));
    assert!(matches!(s.insert("x", vec![3], vec![0.0]), Err(ContainerError::LengthMismatch { .. })));
}

#[test]
fn missing_file_is_a_file_error() {
    let err = weights::load_weights("/nonexistent/w.erfd").unwrap_err();
    assert!(matches!(err, Error::File { .. }));
    assert!(err.to_string().contains("/nonexistent/w.erfd"));
}

fn arb_store() -> impl Strategy<Value = Vec<(String, Vec<usize>, Vec<f32>)>> {
    prop::collection::vec(
        ("[a-z][a-z0-9._]{0,12}", prop::collection::vec(1usize..4, 0..=4)),
        0..6,
    )
    .prop_flat_map(|entries| {
        let mut seen = std::collections::HashSet::new();
        let unique: Vec<_> = entries.into_iter().filter(|(n, _)| seen.insert(n.clone())).collect();
        unique
            .into_iter()
            .map(|(n, dims)| {
                let len: usize = dims.iter().product();
                (Just(n), Just(dims), prop::collection::vec(any::<f32>(), len))
            })
            .collect::<Vec<_>>()
    })
}

proptest! {
    #[test]
    fn container_roundtrip_is_bit_exact(entries in arb_store(), checksums in any::<bool>()) {
        let mut s = WeightStore::new();
        for (n, d, v) in &entries {
            s.insert(n.clone(), d.clone(), v.clone()).unwrap();
        }
        let bytes = s.to_bytes(checksums).unwrap();
        let back = WeightStore::from_bytes(&bytes).unwrap();
        prop_assert!(back.audit().is_empty());
        let names: Vec<&str> = back.store.iter().map(|(n, _)| n).collect();
        prop_assert_eq!(names, entries.iter().map(|(n, _, _)| n.as_str()).collect::<Vec<_>>());
        for ((_, t), (_, d, v)) in back.store.iter().zip(&entries) {
            prop_assert_eq!(&t.dims, d);
            let a: Vec<u32> = t.data.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = v.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
        prop_assert_eq!(back.store.to_bytes(checksums).unwrap(), bytes);
    }
}

#[test]
fn ppm_preprocessing() {
    let white = decode_image(&encode_ppm(1, 1, &[255, 255, 255])).unwrap();
    assert_eq!(white.data(), &[151.0, 138.0, 132.0]);
    // RGB (123, 117, 104) is the mean in BGR order
    let mean = decode_image(&encode_ppm(1, 1, &[123, 117, 104])).unwrap();
    assert_eq!(mean.data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn blob_and_unsupported_files() {
    let dir = tempfile::tempdir().unwrap();
    let blob = dir.path().join("x.bin");
    let t = Tensor::from_vec(Shape::new(1, 3, 2, 2), (0..12).map(|i| i as f32 * 1.5).collect()).unwrap();
    t.write_blob(&blob).unwrap();
    assert_eq!(load_image(&blob).unwrap(), t);

    let jpeg = dir.path().join("x.jpg");
    std::fs::write(&jpeg, [0xff, 0xd8, 0xff, 0xe0, 0, 0]).unwrap();
    let err = load_image(&jpeg).unwrap_err();
    assert!(matches!(err, Error::UnsupportedImage { .. }), "{err}");
    let gif = dir.path().join("x.gif");
    std::fs::write(&gif, b"GIF89a....").unwrap();
    assert!(load_image(&gif).unwrap_err().to_string().contains("GI"));
    assert!(matches!(load_image(dir.path().join("none.ppm")), Err(Error::File { .. })));
}
