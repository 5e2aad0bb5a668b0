//! Train the toy model on in-memory synthetic data and report eval mIoU.
//!
//! ```text
//! cargo run --release --example train_toy [ITERATIONS] [cascade|single|shrunk|naive] [SEED]
//! ```

use segvit::config::SegVitConfig;
use segvit::data::{self, Dataset};
use segvit::shrunk::ShrunkConfig;
use segvit::train::{PreparedData, Trainer};

fn main() -> segvit::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let variant = args.next().unwrap_or_else(|| "cascade".into());
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    let mut cfg = SegVitConfig::parse(include_str!("../../../configs/toy.cfg"))?;
    cfg.train.iterations = iterations;
    cfg.train.seed = seed;
    cfg.train.eval_every = 0;
    match variant.as_str() {
        "cascade" => {}
        "single" => cfg.model.cascade_layers = vec![cfg.model.encoder.depth],
        "shrunk" | "naive" => {
            cfg.model.shrunk = Some(ShrunkConfig {
                use_qu: variant == "shrunk",
                ..ShrunkConfig::for_depth(cfg.model.encoder.depth)
            })
        }
        other => {
            eprintln!("unknown variant {other}");
            std::process::exit(2);
        }
    }

    let dc = cfg.data_config();
    let k = cfg.model.num_classes;
    let train = Dataset::from_samples(data::generate_range(&dc, cfg.data.train_seed, 0..cfg.data.train_images as u64)?);
    let eval = Dataset::from_samples(data::generate_range(&dc, cfg.data.eval_seed, 0..cfg.data.eval_images as u64)?);
    let train = PreparedData::new(&train, k)?;
    let eval = PreparedData::new(&eval, k)?;

    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.losses.clone(), &train)?;
    trainer.run(|line| println!("{line}"))?;
    println!("variant={variant} seed={seed} eval_miou={:.4}", trainer.evaluate(&eval, eval.len())?);
    Ok(())
}
