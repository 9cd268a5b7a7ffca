//! Draws a few Wiener-Hammerstein systems and prints their structure and a
//! short simulated response.
//!
//! cargo run --release --example sample_systems -- [count] [seed]

use icsid::wh::{gen_signal, sample_wh, InputSignal, WhClass};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> icsid::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let count = args.first().copied().unwrap_or(3);
    let mut rng = ChaCha8Rng::seed_from_u64(args.get(1).copied().unwrap_or(0));
    let class = WhClass::default();

    for i in 0..count {
        let sys = sample_wh(&mut rng, &class)?;
        println!("system {i}");
        for (name, g) in [("G1", &sys.g1), ("G2", &sys.g2)] {
            let poles: Vec<String> = g
                .poles()
                .iter()
                .map(|p| format!("{:.3}∠{:.3}", p.norm(), p.arg()))
                .collect();
            println!("  {name}: order {}, dc gain {:.3}, poles [{}]", g.order(), g.dc_gain(), poles.join(", "));
        }
        println!("  F: {} hidden units, standardization mean {:.3}, std {:.3}", sys.f.hidden(), sys.out_mean, sys.out_std);

        let u = gen_signal(&mut rng, &InputSignal::default().with_length(12));
        let y = sys.simulate(&u, &mut rng, true, class.burn_in)?;
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:+.2}")).collect::<Vec<_>>().join(" ");
        println!("  u: {}", fmt(&u));
        println!("  y: {}", fmt(&y));
    }
    Ok(())
}
