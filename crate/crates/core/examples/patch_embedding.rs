//! Shows that a patch embedding depends only on the samples inside its patch.
//!
//! cargo run --release --example patch_embedding

use icsid::model::{MetaModel, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> icsid::Result<()> {
    let cfg = ModelConfig { patch_len: 4, ..ModelConfig::tiny() };
    let model = MetaModel::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1))?;
    let u: Vec<f64> = (0..16).map(|t| (t as f64 * 0.4).sin()).collect();
    let y: Vec<f64> = (0..16).map(|t| (t as f64 * 0.4).cos()).collect();
    let base = model.embed_context(&u, &y)?;
    println!("16 context samples -> {:?} patch embeddings", base.shape());

    let mut y2 = y.clone();
    y2[9] += 1.0;
    let moved = model.embed_context(&u, &y2)?;
    for i in 0..base.rows() {
        let diff = base
            .row(i)
            .iter()
            .zip(moved.row(i))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!("patch {i}: max change {diff:.3e}");
    }
    Ok(())
}
