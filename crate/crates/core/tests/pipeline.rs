use fudsa::checkpoint;
use fudsa::data::{filter_lesion_slices, mask_to_pgm, resize_pair, split_dataset, synth_phantom, Dataset, PhantomConfig, HI_HU, LO_HU};
use fudsa::net::{Model, NetworkConfig};
use fudsa::train::{evaluate, train, TrainConfig};

fn small() -> NetworkConfig {
    NetworkConfig { levels: 3, base_channels: 4, ..NetworkConfig::default() }
}

#[test]
fn raw_dataset_to_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut raw = Dataset::create(dir.path().join("raw")).unwrap();
    for k in 0..8u64 {
        let lesions = if k % 4 == 3 { (0, 0) } else { (1, 2) };
        let p = synth_phantom(format!("s{k}"), 1000 + k, 64, &PhantomConfig { lesions, ..PhantomConfig::default() }).unwrap();
        raw.write_raw(&p.slice, &mask_to_pgm(&p.mask_tensor::<f32>())).unwrap();
    }
    raw.save_manifest().unwrap();

    let raw = Dataset::open(dir.path().join("raw")).unwrap();
    let pairs: Vec<_> = raw
        .manifest
        .ids
        .iter()
        .map(|id| resize_pair(raw.load_pair::<f32>(id, LO_HU, HI_HU).unwrap(), 32, 3).unwrap())
        .collect();
    let kept = filter_lesion_slices(pairs);
    assert_eq!(kept.len(), 6);
    let ids: Vec<String> = kept.iter().map(|p| p.id.clone()).collect();
    let split = split_dataset(&ids, 2).unwrap();
    assert_eq!((split.train_ids.len(), split.val_ids.len()), (5, 1));

    let mut pre = Dataset::create(dir.path().join("pre")).unwrap();
    for p in &kept {
        pre.write_pair(p).unwrap();
    }
    pre.manifest.split = Some(split);
    pre.save_manifest().unwrap();

    let pre = Dataset::open(dir.path().join("pre")).unwrap();
    let train_set = pre.load_all::<f32>(&pre.ids("train").unwrap(), LO_HU, HI_HU).unwrap();
    let val_set = pre.load_all::<f32>(&pre.ids("val").unwrap(), LO_HU, HI_HU).unwrap();
    for p in train_set.iter().chain(&val_set) {
        let original = kept.iter().find(|k| k.id == p.id).unwrap();
        assert_eq!(p, original);
    }

    let mut model = Model::<f32>::build(small(), 0).unwrap();
    let cfg = TrainConfig { max_epochs: 4, ..TrainConfig::default() };
    let out = train(&mut model, &train_set, &val_set, &cfg, None, None).unwrap();
    assert_eq!(out.report.epochs.len(), 4);
    let val = evaluate(&model, &val_set, &cfg.loss, 1).unwrap();
    assert_eq!(val.loss, out.report.best_val_loss);

    let ckpt = dir.path().join("best.ckpt");
    checkpoint::save(&ckpt, &out.best.params, &out.best.state).unwrap();
    let mut restored = Model::<f32>::build(small(), 9).unwrap();
    let state = checkpoint::load_into(&ckpt, &mut restored.params).unwrap();
    assert_eq!(state, out.best.state);
    assert_eq!(evaluate(&restored, &val_set, &cfg.loss, 1).unwrap(), val);
}

#[test]
fn resumed_training_continues_the_step_counter() {
    let set: Vec<_> = (0..4u64)
        .map(|k| synth_phantom(format!("r{k}"), 1000 + k, 32, &PhantomConfig::default()).unwrap().pair::<f64>(LO_HU, HI_HU).unwrap())
        .collect();
    let mut model = Model::<f64>::build(small(), 1).unwrap();
    let cfg = TrainConfig { max_epochs: 2, batch_size: 2, ..TrainConfig::default() };
    let first = train(&mut model, &set, &set, &cfg, None, None).unwrap();
    assert_eq!(first.last.state.t, 4);
    model.params.copy_values_from(&first.last.params).unwrap();
    let second = train(&mut model, &set, &set, &cfg, Some(first.last.state.clone()), None).unwrap();
    assert_eq!(second.last.state.t, 8);
}
