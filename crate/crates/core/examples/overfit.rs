//! Fits the default network to a handful of phantoms and reports the
//! training-set metrics every few epochs.
//!
//! `cargo run --release -p fudsa --example overfit -- [images] [epochs] [lr] [batch]`

use std::time::Instant;

use fudsa::data::{synth_phantom, PhantomConfig, HI_HU, LO_HU};
use fudsa::net::{Model, NetworkConfig};
use fudsa::train::{evaluate, train, AdamConfig, EpochRecord, TrainConfig};

fn main() -> fudsa::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map_or(8, |a| a.parse().unwrap());
    let epochs: usize = args.get(1).map_or(300, |a| a.parse().unwrap());
    let lr: f64 = args.get(2).map_or(1e-4, |a| a.parse().unwrap());
    let batch: usize = args.get(3).map_or(4, |a| a.parse().unwrap());
    let set = (0..n)
        .map(|k| synth_phantom(format!("p{k}"), 1000 + k as u64, 64, &PhantomConfig::default())?.pair::<f32>(LO_HU, HI_HU))
        .collect::<fudsa::Result<Vec<_>>>()?;
    let mut model = Model::<f32>::build(NetworkConfig::default(), 0)?;
    let cfg = TrainConfig {
        max_epochs: epochs,
        patience: epochs,
        batch_size: batch,
        adam: AdamConfig { learning_rate: lr, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut hook = |r: &EpochRecord| {
        if r.epoch % 5 == 0 || r.epoch == 1 {
            println!(
                "epoch {:>3} {:>6.1}s train {:.4} dsc {:.4} ftl {:.4}",
                r.epoch,
                start.elapsed().as_secs_f64(),
                r.train_loss,
                r.val.metrics.dsc,
                r.val.final_ftl
            );
        }
        !(r.val.metrics.dsc >= 0.95 && r.val.final_ftl <= 0.05)
    };
    let out = train(&mut model, &set, &set, &cfg, None, Some(&mut hook))?;
    let e = evaluate(&model, &set, &cfg.loss, 1)?;
    println!("{} epochs, best {}: {} ftl {:.4}", out.report.epochs.len(), out.report.best_epoch, e.metrics, e.final_ftl);
    Ok(())
}
