//! One forward/backward pass of the tiny model on random volumes, with timing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfcnext::model::{collect_grads, forward, init_params, param_count, ModelConfig};
use sfcnext::tensor::{Tape, Tensor};

fn main() -> anyhow::Result<()> {
    let config = ModelConfig::tiny();
    let mut params = init_params(&config, 7)?;
    println!("parameters: {}", param_count(&config)?);
    let [d, h, w] = config.input_dims;
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let volume: Vec<f32> = (0..n * d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let sex: Vec<f32> = (0..n).map(|i| (i % 2) as f32).collect();
    for _ in 0..3 {
        let start = Instant::now();
        let mut tape = Tape::<f32>::new();
        let volume = Tensor::new(vec![n, 1, d, h, w], volume.clone())?;
        let out = forward(&mut tape, &params, volume, Tensor::new(vec![n, 1], sex.clone())?, true)?;
        let fwd = start.elapsed();
        let loss = tape.sum(out.output)?;
        tape.backward(loss)?;
        collect_grads(&tape, &out.params, &mut params.store)?;
        println!(
            "batch {n}: forward {:.1} ms, forward+backward {:.1} ms, {} tape nodes",
            fwd.as_secs_f64() * 1e3,
            start.elapsed().as_secs_f64() * 1e3,
            tape.len()
        );
    }
    Ok(())
}
