use std::sync::OnceLock;

use styleless::model::LayeredNetwork;
use styleless::style::style_transfer;
use styleless::toyscenes::{corrupt, generate_scene, CorruptionKind, CorruptionSpec, Dataset, Split};
use styleless::train::{train_stage1, TrainConfig};

fn trained() -> &'static LayeredNetwork<f32> {
    static NET: OnceLock<LayeredNetwork<f32>> = OnceLock::new();
    NET.get_or_init(|| {
        let data = Dataset::generate(Split::Train, 16, 9).unwrap();
        let cfg = TrainConfig { batch_size: 4, ..TrainConfig::stage1(3, 9) };
        train_stage1(LayeredNetwork::new(9).unwrap(), &data, &cfg).unwrap().checkpoint.network
    })
}

#[test]
fn zero_steps_returns_input() {
    let x = generate_scene(1).image;
    let hazy = corrupt(&x, &CorruptionSpec::new(CorruptionKind::Haze, 3, 0).unwrap()).unwrap();
    let out = style_transfer(&x, &hazy, trained(), 0, 1.0, None).unwrap();
    assert_eq!(out.image, x);
    assert_eq!(out.losses.len(), 1);
}

#[test]
fn own_style_is_a_fixed_point() {
    let x = generate_scene(2).image;
    let out = style_transfer(&x, &x, trained(), 5, 1.0, None).unwrap();
    assert!(out.losses.iter().all(|&l| l == 0.0));
    assert_eq!(out.image, x);
}

#[test]
fn transfer_to_hazy_style_halves_the_loss() {
    for seed in [3, 4, 5] {
        let x = generate_scene(seed).image;
        let hazy = corrupt(&x, &CorruptionSpec::new(CorruptionKind::Haze, 3, 0).unwrap()).unwrap();
        let out = style_transfer(&x, &hazy, trained(), 200, 4.0, None).unwrap();
        let (first, last) = (out.losses[0], *out.losses.last().unwrap());
        assert_eq!(out.losses.len(), 201);
        assert!(first > 0.0);
        assert!(last < 0.5 * first, "scene {seed}: {last} vs initial {first}");
        assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
