//! Finite-difference check of the full meta-model gradient in 64-bit.
//!
//! cargo run --release --example gradcheck

use icsid::backend::grad_check;
use icsid::datagen::{sample_dataset, sample_rng, Domain, StreamConfig};
use icsid::model::{BatchInputs, MetaModel, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> icsid::Result<()> {
    let cfg = ModelConfig::tiny();
    let model = MetaModel::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let stream = StreamConfig { m: 16, n: 12, n_in: 2, b: 2, ..StreamConfig::default() };
    let samples = (0..2)
        .map(|i| sample_dataset(&mut sample_rng(0, Domain::Train, 0, i), &stream))
        .collect::<icsid::Result<Vec<_>>>()?;
    let x = BatchInputs::<f64>::from_samples(&samples)?;

    let report = grad_check(model.params(), 1e-5, |tape, vars| {
        model.loss_tape::<ChaCha8Rng>(tape, vars, &x, None)
    })?;
    println!("checked {} parameters", report.checked);
    println!("max relative error {:.3e}", report.max_rel_err);
    if let Some((name, i)) = report.worst {
        println!(
            "worst at {name}[{i}]: analytic {:.6e}, numeric {:.6e}",
            report.worst_analytic, report.worst_numeric
        );
    }
    Ok(())
}
