mod common;

use dflow::data::Samples;
use dflow::denoiser::DenoiserConfig;
use dflow::eval::{oracle_kl, ValidationGrid};
use dflow::flow::NoiseSchedule;
use dflow::numeric::RngStream;
use dflow::oracle::DiscreteDataset;
use dflow::router::router_toy;
use dflow::toy::ToySpec;
use dflow::trainer::{train_expert, train_router, LrSchedule, TrainConfig};

fn blob_shard(seed: u64) -> Samples {
    let s = ToySpec::blobs(1, vec![2, 4, 4], 128, seed).generate().unwrap();
    Samples::new(s.data, s.sample_shape, Some(vec![0; 128])).unwrap()
}

#[test]
fn accumulated_micro_batches_match_one_large_batch() {
    let data = blob_shard(2);
    let config = DenoiserConfig::dit_toy();
    let run = |batch_size, accumulation| {
        let cfg = TrainConfig {
            batch_size,
            accumulation,
            steps: 3,
            seed: 5,
            ..TrainConfig::expert()
        };
        train_expert(&data, &config, &cfg, Some(0), 1, &mut |_| {}).unwrap()
    };
    let big = run(32, 1);
    let small = run(8, 4);
    let mut worst = 0.0f64;
    for (a, b) in big.params.tensors().iter().zip(small.params.tensors()) {
        worst = worst.max(a.max_abs_diff(b));
    }
    assert!(worst <= 1e-10, "{worst}");
}

#[test]
fn toy_loss_descends_across_decades() {
    let _g = common::serial();
    let data = blob_shard(3);
    let cfg = TrainConfig {
        steps: 1000,
        seed: 2,
        ..TrainConfig::expert()
    };
    let mut losses = Vec::new();
    train_expert(&data, &DenoiserConfig::dit_toy(), &cfg, Some(0), 1, &mut |r| {
        losses.push(r.loss)
    })
    .unwrap();
    let mean = |a: usize, b: usize| losses[a..b].iter().sum::<f64>() / (b - a) as f64;
    let (first, mid, last) = (mean(0, 10), mean(10, 100), mean(100, 1000));
    assert!(first >= mid && mid >= last, "{first} {mid} {last}");
}

#[test]
fn router_oracle_kl_falls_with_training() {
    let _g = common::serial();
    let spec = ToySpec {
        samples: 512,
        ..ToySpec::default()
    };
    let data = spec.generate().unwrap();
    let oracle = DiscreteDataset::uniform(&data.data)
        .unwrap()
        .with_labels(data.labels.clone().unwrap(), 8)
        .unwrap();
    let x0 = data.gather(&(0..48).collect::<Vec<_>>());
    let grid = ValidationGrid::new(
        &x0,
        &ValidationGrid::times(6, NoiseSchedule::default()),
        &RngStream::from_label(1, "kl-grid"),
    )
    .unwrap();
    let kls: Vec<f64> = [5, 50, 500]
        .iter()
        .map(|&steps| {
            let cfg = TrainConfig {
                steps,
                seed: 4,
                schedule: LrSchedule::Constant,
                ..TrainConfig::router()
            };
            let r = train_router(&data, &router_toy(), 8, &cfg, &mut |_| {}).unwrap();
            oracle_kl(&r.router(false).unwrap(), &oracle, &grid).unwrap()
        })
        .collect();
    assert!(kls[0] > kls[1] && kls[1] > kls[2], "{kls:?}");
}

#[test]
fn checkpoints_depend_only_on_shard_config_and_seed() {
    let data = blob_shard(4);
    let cfg = TrainConfig {
        steps: 5,
        seed: 9,
        ..TrainConfig::expert()
    };
    let config = DenoiserConfig::dit_toy();
    let a = train_expert(&data, &config, &cfg, Some(0), 1, &mut |_| {}).unwrap();
    let b = train_expert(&data, &config, &cfg, Some(0), 1, &mut |_| {}).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let other = TrainConfig { seed: 10, ..cfg };
    let c = train_expert(&data, &config, &other, Some(0), 1, &mut |_| {}).unwrap();
    assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
}
