//! Writes a fixed test set, reads it back and prints its summary.
//!
//! cargo run --release --example generate_testset -- [count] [path]

use std::path::PathBuf;

use icsid::datagen::{read_testset, write_testset, StreamConfig};

fn main() -> icsid::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(16);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("icsid_example.icsd"));

    let cfg = StreamConfig::default();
    let set = write_testset(&path, &cfg, count)?;
    let back = read_testset(&path)?;
    assert_eq!(set, back);

    println!("{} samples at {}", back.len(), path.display());
    println!("m={} N={} n_in={} seed={}", cfg.m, cfg.n, cfg.n_in, cfg.seed);
    println!("sha256 {}", back.content_hash());
    if let Some(s) = back.samples.first() {
        let (mean, max) = s.ctx_y.iter().fold((0.0f32, 0.0f32), |(m, x), y| (m + y, x.max(y.abs())));
        println!("sample 0: context mean {:.3}, max |y| {:.3}", mean / s.m() as f32, max);
    }
    Ok(())
}
