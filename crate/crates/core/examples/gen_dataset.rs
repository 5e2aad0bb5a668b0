//! Render a few synthetic samples, write them as PPM/PGM and read them back.
//!
//! ```text
//! cargo run --release --example gen_dataset [OUT_DIR] [COUNT]
//! ```

use std::path::PathBuf;

use segvit::config::SegVitConfig;
use segvit::data::{self, Dataset};

fn main() -> segvit::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("segvit_shapes"));
    let count: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);

    let cfg = SegVitConfig::default();
    let dc = cfg.data_config();
    let samples = data::generate_range(&dc, cfg.data.train_seed, 0..count)?;
    data::write_split(&out, &samples)?;
    let back = Dataset::read_split(&out)?;
    assert_eq!(back.labels, samples.iter().map(|s| s.labels.clone()).collect::<Vec<_>>());

    println!("{count} samples in {}", out.display());
    let first = &samples[0];
    for s in &first.shapes {
        println!("class {} {:?}", s.class, s.geometry);
    }
    println!("{}", first.labels.to_ascii());
    let again = data::generate(&dc, cfg.data.train_seed, 0)?;
    println!("regenerated sample 0 identical: {}", again == *first);
    Ok(())
}
