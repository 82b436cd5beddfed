use std::fs;
use std::path::Path;

use proptest::prelude::*;
use styleless::checkpoint::Checkpoint;
use styleless::eval::{evaluate, MetricsReport};
use styleless::filters::{FilterConfig, FilterKind};
use styleless::model::{FilterHook, ForwardOptions, LayeredNetwork};
use styleless::stls;
use styleless::toyscenes::{CorruptionKind, CorruptionSpec, Dataset, Split};
use styleless::Tensor;

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn reports_are_reproducible_and_roundtrip() {
    let mut net = LayeredNetwork::new(21).unwrap();
    net.insert_styleless(21).unwrap();
    let ckpt = Checkpoint::new(net, 2, 21, String::new());
    let data = Dataset::generate(Split::Test, 4, 21).unwrap().corrupted(&CorruptionSpec::new(CorruptionKind::Rain, 2, 3).unwrap()).unwrap();
    let noisy = ForwardOptions {
        filter: Some(FilterHook { config: FilterConfig { kind: FilterKind::Noise, p: 10.0, tau: 2.0, seed: 5 }, layers: vec![1, 3] }),
    };
    for opts in [ForwardOptions::default(), noisy] {
        let hash = ckpt.hash().unwrap();
        let a = evaluate("m", &ckpt.network, &hash, &data, &opts, 21).unwrap();
        let b = evaluate("m", &ckpt.network, &hash, &data, &opts, 21).unwrap();
        assert_eq!(a.canonical(), b.canonical());
        assert_eq!(a.canonical().to_json().unwrap(), b.canonical().to_json().unwrap());
        let back = MetricsReport::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
    }
}

#[test]
fn checkpoint_and_dataset_directories_roundtrip_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint::new(LayeredNetwork::new(4).unwrap(), 1, 4, "cfg".into());
    ckpt.save(tmp.path().join("c1")).unwrap();
    Checkpoint::load(tmp.path().join("c1")).unwrap().save(tmp.path().join("c2")).unwrap();
    assert_eq!(dir_bytes(&tmp.path().join("c1")), dir_bytes(&tmp.path().join("c2")));

    let ds = Dataset::generate(Split::Val, 3, 4).unwrap();
    ds.save(tmp.path().join("d1")).unwrap();
    let back = Dataset::load(tmp.path().join("d1")).unwrap();
    assert_eq!(back.id(), ds.id());
    back.save(tmp.path().join("d2")).unwrap();
    assert_eq!(dir_bytes(&tmp.path().join("d1")), dir_bytes(&tmp.path().join("d2")));
}

#[test]
fn generated_data_is_seed_deterministic() {
    let a = Dataset::generate(Split::Train, 3, 8).unwrap();
    let b = Dataset::generate(Split::Train, 3, 8).unwrap();
    assert_eq!(a.samples.iter().map(|s| &s.image).collect::<Vec<_>>(), b.samples.iter().map(|s| &s.image).collect::<Vec<_>>());
    let spec = CorruptionSpec::new(CorruptionKind::GaussNoise, 4, 1).unwrap();
    let (ca, cb) = (a.corrupted(&spec).unwrap(), b.corrupted(&spec).unwrap());
    for (x, y) in ca.samples.iter().zip(&cb.samples) {
        assert_eq!(x.image, y.image);
    }
}

proptest! {
    #[test]
    fn stls_roundtrip_is_byte_identical(
        dims in prop::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = dims.iter().product();
        let f32s = Tensor::new(dims.clone(), (0..n).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap();
        let f64s = Tensor::new(dims.clone(), (0..n).map(|_| rng.random::<f64>() * 1e6).collect()).unwrap();
        let u8s = Tensor::new(dims.clone(), (0..n).map(|_| rng.random::<u8>()).collect()).unwrap();
        let b = stls::encode(&f32s).unwrap();
        prop_assert_eq!(stls::encode(&stls::decode::<f32>(&b).unwrap()).unwrap(), b);
        let b = stls::encode(&f64s).unwrap();
        prop_assert_eq!(stls::encode(&stls::decode::<f64>(&b).unwrap()).unwrap(), b);
        let b = stls::encode(&u8s).unwrap();
        prop_assert_eq!(&stls::decode::<u8>(&b).unwrap(), &u8s);
        prop_assert_eq!(stls::encode(&stls::decode::<u8>(&b).unwrap()).unwrap(), b);
    }
}
