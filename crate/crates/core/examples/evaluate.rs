//! Scores a checkpoint on a freshly generated test set and writes traces.
//!
//! cargo run --release --example evaluate -- [checkpoint]
//!
//! Without a checkpoint an untrained tiny model is scored.

use std::path::PathBuf;

use icsid::datagen::{StreamConfig, TestSet};
use icsid::eval::{export_traces, EvalConfig};
use icsid::model::{Checkpoint, MetaModel, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> icsid::Result<()> {
    let ckpt = match std::env::args().nth(1) {
        Some(p) => Checkpoint::load(&PathBuf::from(p))?,
        None => Checkpoint::new(MetaModel::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(0))?),
    };
    let m = ckpt.model.config();
    let stream = StreamConfig {
        m: 16 * m.patch_len,
        n: m.n_in + 20,
        n_in: m.n_in,
        seed: 9,
        ..StreamConfig::default()
    };
    let set = TestSet::generate(&stream, 64, false)?;
    let traces = std::env::temp_dir().join("icsid_example_traces.csv");
    let report = export_traces(&ckpt, &set, &EvalConfig::default(), &traces)?;
    println!("RMSE {:.4}  NLL {:.4}", report.rmse, report.nll);
    for c in &report.coverage {
        println!("coverage at {:.2} sigma: {:.3}", c.k, c.fraction);
    }
    println!("traces: {}", traces.display());
    Ok(())
}
