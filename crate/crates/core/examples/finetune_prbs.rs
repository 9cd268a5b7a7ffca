//! Trains briefly on white-noise inputs, then fine-tunes on PRBS inputs and
//! compares PRBS test RMSE before and after.
//!
//! cargo run --release --example finetune_prbs -- [pretrain_iters] [finetune_iters]

use icsid::datagen::{StreamConfig, TestSet};
use icsid::eval::{evaluate, EvalConfig};
use icsid::model::{Checkpoint, MetaModel, ModelConfig};
use icsid::train::{fine_tune, train, TrainConfig, TrainRun};
use icsid::wh::InputSignal;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> icsid::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let pre = args.first().copied().unwrap_or(1500);
    let post = args.get(1).copied().unwrap_or(500);

    let mut white = StreamConfig { m: 32, n: 24, n_in: 4, b: 8, ..StreamConfig::default() };
    white.class.lti.order_max = 2;
    let prbs = StreamConfig { input: InputSignal::prbs(), ..white.clone() };
    let model_cfg = ModelConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 64, n_in: 4, patch_len: 4, ..ModelConfig::default() };
    let cfg = |iters| TrainConfig { total_iters: iters, lr: 3e-3, val_every: iters.max(1), ..TrainConfig::default() };

    let white_val = TestSet::generate(&StreamConfig { seed: 1, ..white.clone() }, 64, false)?;
    let prbs_val = TestSet::generate(&StreamConfig { seed: 1, ..prbs.clone() }, 64, false)?;
    let dir = std::env::temp_dir().join("icsid_example_finetune");

    let model = MetaModel::init(&model_cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let base = train(model, &TrainRun::new(white, cfg(pre), &white_val, &dir.join("white")))?;
    let parent = Checkpoint::load(&base.latest)?;
    let ev = EvalConfig::default();
    println!("after {pre} white-noise iterations:");
    println!("  white RMSE {:.4}", evaluate(&parent, &white_val, &ev)?.rmse);
    println!("  PRBS  RMSE {:.4}", evaluate(&parent, &prbs_val, &ev)?.rmse);

    let tuned = fine_tune(&parent, &TrainRun::new(prbs, cfg(post), &prbs_val, &dir.join("prbs")))?;
    let child = Checkpoint::load(&tuned.latest)?;
    println!("after {post} PRBS iterations:");
    println!("  PRBS  RMSE {:.4}", evaluate(&child, &prbs_val, &ev)?.rmse);
    println!("  parent {}", child.lineage.parent_hash.as_deref().unwrap_or("none"));
    Ok(())
}
