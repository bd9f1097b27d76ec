use proptest::prelude::*;
use zkd_core::data::{generate, load_csv, parse_csv, DataSpec, Dataset, Generator};
use zkd_core::nn::{load_checkpoint, save_checkpoint, Activation, Checkpoint, Mlp, MlpSpec};
use zkd_core::Error;

#[test]
fn checkpoint_file_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, act) in [Activation::Relu, Activation::Tanh].into_iter().enumerate() {
        let net = Mlp::init(&MlpSpec::new(vec![5, 7, 6, 3], act, i as u64).unwrap()).unwrap();
        let path = dir.path().join(format!("net{i}.json"));
        save_checkpoint(&net, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let bits = |n: &Mlp| n.parameters().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&net), bits(&back));
        assert_eq!(net.spec(), back.spec());
        let x = [0.3, -1.2, 0.0, 2.5, 1e-3];
        assert_eq!(net.forward_raw(&x).unwrap(), back.forward_raw(&x).unwrap());
    }
}

#[test]
fn truncated_and_future_checkpoints_are_rejected() {
    let net = Mlp::init(&MlpSpec::new(vec![2, 3, 2], Activation::Relu, 0).unwrap()).unwrap();
    let text = Checkpoint::of(&net).to_json().unwrap();
    let cut = &text[..text.len() / 2];
    assert!(matches!(Checkpoint::from_json(cut), Err(Error::MalformedCheckpoint(_))));
    let future = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
    assert!(matches!(
        Checkpoint::from_json(&future),
        Err(Error::CheckpointVersion { found: 2, .. })
    ));
}

#[test]
fn csv_file_roundtrip() {
    let (train, _) = generate(&DataSpec {
        generator: Generator::Spirals,
        k: 3,
        d: 2,
        n: 90,
        class_separation: 1.0,
        noise_std: 0.1,
        seed: 8,
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    train.write_csv(&path).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back.labels(), train.labels());
    for (a, b) in back.features().iter().zip(train.features()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-15);
        }
    }
}

#[test]
fn csv_crlf_and_header() {
    let d = parse_csv("x1,x2,label\r\n1.5,2,0\r\n-1,0.25,1\r\n3,4,2\r\n").unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.num_classes(), 3);
    assert_eq!(d.features()[1], vec![-1.0, 0.25]);
}

#[test]
fn csv_row_numbers_in_errors() {
    match parse_csv("1,2,0\n3,x,1\n") {
        Err(Error::Parse { row: 2, .. }) => {}
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_text_roundtrip(
        rows in prop::collection::vec((prop::collection::vec(-1e6f64..1e6, 3), 0usize..4), 1..30)
    ) {
        let feats: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let d = Dataset::new(feats, labels, 4).unwrap();
        let back = parse_csv(&d.to_csv()).unwrap();
        prop_assert_eq!(back.features(), d.features());
        prop_assert_eq!(back.labels(), d.labels());
    }

    #[test]
    fn checkpoint_json_roundtrip(seed in any::<u64>(), h in 1usize..6, tanh in any::<bool>()) {
        let act = if tanh { Activation::Tanh } else { Activation::Relu };
        let net = Mlp::init(&MlpSpec::new(vec![3, h, 2], act, seed).unwrap()).unwrap();
        let back = Checkpoint::from_json(&Checkpoint::of(&net).to_json().unwrap())
            .unwrap()
            .into_mlp()
            .unwrap();
        prop_assert_eq!(net, back);
    }
}
