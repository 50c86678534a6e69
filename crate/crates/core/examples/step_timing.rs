//! Times one forward/backward pass of the default network.
//!
//! `cargo run --release -p fudsa --example step_timing -- [size] [batch]`

use std::time::Instant;

use fudsa::loss::{supervised_loss, LossConfig};
use fudsa::net::{Model, NetworkConfig};
use fudsa::{Init, Tape, Tensor};

fn main() -> fudsa::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let size = args.next().unwrap_or(64);
    let batch = args.next().unwrap_or(4);
    let model = Model::<f32>::build(NetworkConfig::default(), 0)?;
    let x: Tensor<f32> = Tensor::create([batch, 1, size, size], Init::Uniform { lo: 0.0, hi: 1.0, seed: 1 })?;
    let y: Tensor<f32> = Tensor::create([batch, 1, size, size], Init::Zeros)?;
    println!("parameters: {}", model.parameter_count());
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new(&model.params);
        let v = tape.constant(x.clone());
        let out = model.forward(&mut tape, v)?;
        let t1 = Instant::now();
        let loss = supervised_loss(&mut tape, &out, &y, &LossConfig::default())?;
        let grads = tape.backward(loss)?;
        let t2 = Instant::now();
        println!(
            "forward {:.1} ms, backward {:.1} ms, {} nodes, {} param grads",
            (t1 - t0).as_secs_f64() * 1e3,
            (t2 - t1).as_secs_f64() * 1e3,
            tape.len(),
            grads.params().count()
        );
    }
    Ok(())
}
