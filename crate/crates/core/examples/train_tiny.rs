//! Trains a small meta-model on low-order systems and reports validation RMSE.
//!
//! cargo run --release --example train_tiny -- [iters] [lr] [m] [seed]

use icsid::datagen::{StreamConfig, TestSet};
use icsid::model::{MetaModel, ModelConfig};
use icsid::train::{train, TrainConfig, TrainRun};
use icsid::wh::WhClass;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> icsid::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let iters: u64 = arg(0, "2000").parse().expect("iters");
    let lr: f64 = arg(1, "1e-3").parse().expect("lr");
    let m: usize = arg(2, "128").parse().expect("m");
    let seed: u64 = arg(3, "0").parse().expect("seed");

    let mut class = WhClass::default();
    class.lti.order_max = 2;
    let stream = StreamConfig { m, n: 60, n_in: 4, b: 16, seed, class, ..StreamConfig::default() };
    let val_cfg = StreamConfig { seed: 1000 + seed, ..stream.clone() };
    let val = TestSet::generate(&val_cfg, 256, false)?;

    let model_cfg = ModelConfig {
        d_model: 32,
        n_layers: 4,
        n_heads: 4,
        d_ff: 128,
        n_in: 4,
        patch_len: 4,
        ..ModelConfig::default()
    };
    let model = MetaModel::init(&model_cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    println!("parameters: {}", model.param_count());

    let train_cfg = TrainConfig { total_iters: iters, lr, val_every: (iters / 10).max(1), seed, ..TrainConfig::default() };
    let out = std::env::temp_dir().join(format!("icsid_train_tiny_{m}_{seed}"));
    let mut run = TrainRun::new(stream, train_cfg, &val, &out);
    run.verbose = true;
    let s = train(model, &run)?;
    println!(
        "iterations {} final val RMSE {:.4} best {:.4} ({})",
        s.iterations,
        s.last_val_rmse.unwrap_or(f64::NAN),
        s.best_val_rmse.unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}
