mod common;

use candle_core::Device;
use scmis::checkpoint::{decode, encode, read_checkpoint, save_checkpoint, MAGIC};
use scmis::dataio::{load_dataset, Split};
use scmis::trainer::{Batch, StepStats, Trainer, TrainerConfig};
use scmis::Error;

use common::{scaled_config, write_dataset, SMALL_SIZE};

const N: usize = 5;

fn fixture(n: usize) -> (tempfile::TempDir, scmis::dataio::DatasetIndex) {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), n, SMALL_SIZE, N, 7);
    let index = load_dataset(dir.path(), Split::Train, N).unwrap();
    (dir, index)
}

fn batch_for(t: &Trainer, data: &scmis::dataio::DatasetIndex, step: u64) -> Batch {
    let samples: Vec<_> = t
        .batch_indices(data, step)
        .into_iter()
        .map(|i| data.load(i, SMALL_SIZE, 10.0).unwrap())
        .collect();
    Batch::new(&samples, t.dtype(), t.device()).unwrap()
}

fn run_steps(t: &mut Trainer, data: &scmis::dataio::DatasetIndex, steps: u64) -> Vec<StepStats> {
    (0..steps)
        .map(|_| {
            let b = batch_for(t, data, t.step());
            t.train_step(&b).unwrap()
        })
        .collect()
}

fn trainer(cfg: TrainerConfig) -> Trainer {
    Trainer::new(cfg, &Device::Cpu).unwrap()
}

#[test]
fn step_counter_and_finite_losses() {
    let (_d, data) = fixture(3);
    let mut t = trainer(scaled_config(N, 1));
    let stats = run_steps(&mut t, &data, 2);
    assert_eq!(t.step(), 2);
    assert_eq!(stats[1].step, 1);
    for s in &stats {
        for (name, v) in s.parts().named() {
            assert!(v.is_finite() && v >= 0.0, "{name} = {v}");
        }
    }
}

#[test]
fn zero_learning_rates_freeze_parameters() {
    let (_d, data) = fixture(2);
    let mut cfg = scaled_config(N, 2);
    cfg.train.lr_g = 0.0;
    cfg.train.lr_d = 0.0;
    let mut t = trainer(cfg);
    let (g, d) = (t.generator().store().fingerprint().unwrap(), t.discriminator().store().fingerprint().unwrap());
    run_steps(&mut t, &data, 1);
    assert_eq!(t.generator().store().fingerprint().unwrap(), g);
    assert_eq!(t.discriminator().store().fingerprint().unwrap(), d);
}

#[test]
fn each_phase_only_updates_its_own_network() {
    let (_d, data) = fixture(2);
    for (lr_g, lr_d) in [(0.0, 2e-4), (1e-4, 0.0)] {
        let mut cfg = scaled_config(N, 3);
        cfg.train.lr_g = lr_g;
        cfg.train.lr_d = lr_d;
        let mut t = trainer(cfg);
        let g = t.generator().store().fingerprint().unwrap();
        let d = t.discriminator().store().fingerprint().unwrap();
        run_steps(&mut t, &data, 1);
        assert_eq!(t.generator().store().fingerprint().unwrap() == g, lr_g == 0.0);
        assert_eq!(t.discriminator().store().fingerprint().unwrap() == d, lr_d == 0.0);
    }
}

#[test]
fn same_seed_same_statistics() {
    let (_d, data) = fixture(3);
    let a = run_steps(&mut trainer(scaled_config(N, 4)), &data, 3);
    let b = run_steps(&mut trainer(scaled_config(N, 4)), &data, 3);
    assert_eq!(a, b);
    let c = run_steps(&mut trainer(scaled_config(N, 5)), &data, 1);
    assert_ne!(a[0], c[0]);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (_d, data) = fixture(2);
    let mut t = trainer(scaled_config(N, 6));
    run_steps(&mut t, &data, 2);
    let first = encode(&t).unwrap();
    let restored = decode(&first).unwrap().into_trainer(&Device::Cpu).unwrap();
    assert_eq!(encode(&restored).unwrap(), first);
}

#[test]
fn resume_reproduces_the_next_steps() {
    let (dir, data) = fixture(3);
    let mut t = trainer(scaled_config(N, 8));
    run_steps(&mut t, &data, 2);
    let path = dir.path().join("ckpt/state.ckpt");
    save_checkpoint(&t, &path).unwrap();
    let expected = run_steps(&mut t, &data, 3);
    let mut resumed = read_checkpoint(&path).unwrap().into_trainer(&Device::Cpu).unwrap();
    assert_eq!(resumed.step(), 2);
    assert_eq!(run_steps(&mut resumed, &data, 3), expected);
}

#[test]
fn checkpoint_errors_are_distinct() {
    let t = trainer(scaled_config(N, 9));
    let bytes = encode(&t).unwrap();

    let mut other = trainer(scaled_config(N + 1, 9));
    match decode(&bytes).unwrap().restore_into(&mut other) {
        Err(Error::CheckpointManifest { name, .. }) => assert!(name.starts_with("generator/encoder"), "{name}"),
        other => panic!("expected manifest error, got {other:?}"),
    }

    let mut wrong_version = bytes.clone();
    wrong_version[8..12].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(
        decode(&wrong_version),
        Err(Error::CheckpointVersion { found: 99, expected: 1 })
    ));

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    assert!(matches!(decode(&flipped), Err(Error::CheckpointCorrupt(_))));
    assert!(matches!(decode(&bytes[..bytes.len() / 2]), Err(Error::CheckpointCorrupt(_))));
    assert!(matches!(decode(b"not a checkpoint at all"), Err(Error::CheckpointCorrupt(_))));
    assert_eq!(&bytes[..8], MAGIC);
}

#[test]
fn run_loop_stops_at_max_steps() {
    let (_d, data) = fixture(3);
    let mut cfg = scaled_config(N, 10);
    cfg.train.max_steps = 3;
    let mut t = trainer(cfg);
    let mut seen = Vec::new();
    t.run(&data, |_, s| {
        seen.push(s.step);
        Ok(true)
    })
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(t.step(), 3);
}
