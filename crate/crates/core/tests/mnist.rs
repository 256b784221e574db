//! Slow runs on the real MNIST files; `cargo test -- --ignored` runs them.

use std::path::Path;

use featlens::analysis::{evaluate_accuracy, EvalSpec, PlainPipeline};
use featlens::data::{data_dir, load_mnist_dir, CanvasPolicy, Dataset, Split};
use featlens::host::HostConfig;
use featlens::lens::{Lens, LensInit, LensShape, RotationLens};
use featlens::loss::{LossConfig, LossMode};
use featlens::train::{train_host, train_lens, TrainConfig};
use featlens::transform::LensBin;

fn mnist(split: Split) -> Dataset {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    load_mnist_dir(&data_dir(&root), split).expect("MNIST files under data/mnist")
}

#[test]
#[ignore = "trains on all of MNIST for three epochs"]
fn host_reaches_98_percent_in_three_epochs() {
    let cfg = TrainConfig {
        epochs: 3,
        initial_lr: 0.03,
        ..TrainConfig::default()
    };
    let (host, _) = train_host(HostConfig::default(), &mnist(Split::Train), &cfg).unwrap();
    let host = host.freeze();
    let r = evaluate_accuracy(&PlainPipeline(&host), &mnist(Split::Test), &EvalSpec::unfiltered((56, 56))).unwrap();
    eprintln!("upright test accuracy {:.4}", r.accuracy);
    assert!(r.accuracy >= 0.98, "{}", r.accuracy);
}

#[test]
#[ignore = "trains a host and a lens on MNIST"]
fn tac_halves_the_rot90_loss_in_500_steps() {
    let train = mnist(Split::Train).take(10_000);
    let host_cfg = TrainConfig {
        initial_lr: 0.03,
        ..TrainConfig::default()
    };
    let host = train_host(HostConfig::default(), &train, &host_cfg).unwrap().0.freeze();
    let shape = LensShape::for_host(host.config(), 4);
    let init = LensInit::from_host(&host, 0.01).unwrap();
    let mut lens = Lens::Rotation(RotationLens::new(LensBin::Rot90, shape, &init, 0).unwrap());
    let cfg = TrainConfig {
        epochs: 4,
        max_steps: Some(500),
        initial_lr: 0.003,
        decay_period: 1.0,
        loss: LossConfig {
            mode: LossMode::Tac,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let log = train_lens(&host, LensBin::Rot90, Some(&mut lens), &train, &cfg, CanvasPolicy::PadToCanvas).unwrap();
    let (first, last) = log.smoothed_ends(20).unwrap();
    eprintln!("smoothed TAC loss {first:.1} -> {last:.1}");
    assert!(last < 0.5 * first, "{first} -> {last}");
}
