use proptest::prelude::*;

use lqer_core::calibration::{scale_matrix, CalibrationProfile, DeadChannelPolicy};
use lqer_core::io::{
    decode_matrix, encode_matrix, load_bundle, load_matrix, load_profile, profile_to_string,
    save_bundle, save_matrix, save_profile, Bundle, BundleLayer, DType, CONTAINER_HEADER_LEN,
};
use lqer_core::layer::{build_layer, LayerConfig, LayerMethod};
use lqer_core::linalg::DenseMatrix;
use lqer_core::{LqerError, Nonlinearity};

fn bits(m: &DenseMatrix) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

fn finite_f64() -> impl Strategy<Value = f64> {
    any::<f64>().prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn container_round_trip_is_bitwise(
        (r, c, data) in (1usize..=9, 1usize..=9).prop_flat_map(|(r, c)| {
            (Just(r), Just(c), prop::collection::vec(finite_f64(), r * c))
        })
    ) {
        let m = DenseMatrix::new(r, c, data).unwrap();
        let bytes = encode_matrix(&m, DType::F64);
        prop_assert_eq!(bytes.len(), CONTAINER_HEADER_LEN + 8 * r * c);
        let (back, dtype) = decode_matrix(&bytes).unwrap();
        prop_assert_eq!(dtype, DType::F64);
        prop_assert_eq!(back.shape(), m.shape());
        prop_assert_eq!(bits(&back), bits(&m));
    }

    #[test]
    fn profile_text_round_trip(a in prop::collection::vec(1e-6f64..1e6, 1..=40), n in 1usize..100) {
        let p = CalibrationProfile::from_a_bar(&a, n, DeadChannelPolicy::Reject).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_profile(&path, &p).unwrap();
        prop_assert_eq!(load_profile(&path).unwrap(), p);
    }
}

#[test]
fn unit_matrix_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.lqmx");
    let m = DenseMatrix::zeros(1, 1);
    save_matrix(&path, &m).unwrap();
    assert_eq!(load_matrix(&path).unwrap(), m);
}

#[test]
fn corrupted_files_report_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lqmx");
    save_matrix(&path, &DenseMatrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap()).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(
        load_matrix(&path),
        Err(LqerError::Format { offset: 0, .. })
    ));

    let mut bad_version = good.clone();
    bad_version[4] = 9;
    std::fs::write(&path, &bad_version).unwrap();
    assert!(matches!(
        load_matrix(&path),
        Err(LqerError::Format { offset: 4, .. })
    ));

    std::fs::write(&path, &good[..good.len() - 3]).unwrap();
    assert!(matches!(load_matrix(&path), Err(LqerError::Format { .. })));

    let mut text = profile_to_string(&scale_matrix(&[1.0, 2.0]).unwrap());
    text.insert(text.len() / 2, '}');
    let ppath = dir.path().join("p.json");
    std::fs::write(&ppath, text).unwrap();
    assert!(matches!(
        load_profile(&ppath),
        Err(LqerError::Format { .. })
    ));
}

#[test]
fn failed_save_keeps_previous_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lqmx");
    let m = DenseMatrix::from_rows(&[[4.0]]).unwrap();
    save_matrix(&path, &m).unwrap();
    let missing = dir.path().join("no-such-dir").join("m.lqmx");
    assert!(save_matrix(&missing, &m).is_err());
    assert_eq!(load_matrix(&path).unwrap(), m);
}

#[test]
fn bundle_forward_survives_reload() {
    let w = lqer_core::synth_weights(20, 20, 3).unwrap();
    let x = lqer_core::synth_weights(6, 20, 4).unwrap();
    let profile = scale_matrix(&(1..=20).map(|v| v as f64).collect::<Vec<_>>()).unwrap();
    let layers = [LayerMethod::Plain, LayerMethod::Lqer, LayerMethod::L2qer]
        .into_iter()
        .map(|method| BundleLayer {
            name: method.to_string(),
            method,
            nonlinearity: Nonlinearity::Relu,
            layer: build_layer(
                &w,
                &LayerConfig {
                    rank: 5,
                    ..LayerConfig::w4a8(method)
                },
                Some(&profile),
            )
            .unwrap(),
        })
        .collect();
    let bundle = Bundle {
        seed: 42,
        profile_hash: None,
        layers,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.lqbn");
    save_bundle(&path, &bundle).unwrap();
    let loaded = load_bundle(&path).unwrap();
    assert_eq!(
        bits(&loaded.forward(&x).unwrap()),
        bits(&bundle.forward(&x).unwrap())
    );
    assert_eq!(loaded.seed, 42);
    assert_eq!(
        loaded
            .layers
            .iter()
            .map(|l| l.name.as_str())
            .collect::<Vec<_>>(),
        ["plain", "lqer", "l2qer"]
    );

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    assert!(matches!(
        Bundle::from_bytes(&bytes),
        Err(LqerError::Format { .. })
    ));
}
