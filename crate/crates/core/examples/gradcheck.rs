//! Tape gradients of the full segmentation loss against finite differences,
//! in f64, for a small plain and shrunk model.
//!
//! ```text
//! cargo run --release --example gradcheck [PER_PARAM]
//! ```

use segvit::cli;
use segvit::config::SegVitConfig;

fn main() -> segvit::Result<()> {
    let per: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let mut cfg = SegVitConfig::default();
    for kv in ["model.image_height=16", "model.image_width=16", "model.width=16", "model.heads=2"] {
        cfg.apply_override(kv)?;
    }
    for (path, r) in cli::gradcheck(&cfg, Some(per), 0)? {
        let (name, i) = r.worst.clone().unwrap_or_default();
        println!(
            "{path:6} checked {:4} coordinates, max rel err {:.2e} at {name}[{i}] (tape {:.6e}, fd {:.6e})",
            r.checked, r.max_rel_err, r.worst_values.0, r.worst_values.1
        );
    }
    Ok(())
}
