//! Saves freshly initialized parameters, reloads them and checks that the
//! predictions agree bit for bit.

use sfcnext::model::{init_params, load_checkpoint, predict, save_checkpoint, ModelConfig};
use sfcnext::tensor::Tensor;

fn main() -> anyhow::Result<()> {
    let config = ModelConfig::tiny().with_input_dims([32, 32, 32]);
    let mut params = init_params(&config, 3)?;
    params.target_mean = 40.0;
    params.target_std = 12.0;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.sfxc");
    save_checkpoint(&path, &params)?;
    let bytes = std::fs::metadata(&path)?.len();
    let loaded = load_checkpoint(&path)?;
    println!("{} tensors, {} bytes on disk", loaded.store.len(), bytes);

    let vol: Vec<f32> = (0..2 * 32 * 32 * 32).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    let sex = Tensor::new(vec![2, 1], vec![0.0, 1.0])?;
    let a = predict(&params, Tensor::new(vec![2, 1, 32, 32, 32], vol.clone())?, sex.clone())?;
    let b = predict(&loaded, Tensor::new(vec![2, 1, 32, 32, 32], vol)?, sex)?;
    println!("predictions {a:?} / {b:?}, identical: {}", a == b);
    Ok(())
}
