//! MAC counts for ViT-Large at 640×640, plain cascade vs. shrunk backbone.
//!
//! ```text
//! cargo run --release --example flops_report [CROP]
//! ```

use segvit::encoder::EncoderConfig;
use segvit::flops::{self, giga};
use segvit::model::ModelConfig;
use segvit::shrunk::ShrunkConfig;

fn main() -> segvit::Result<()> {
    let crop: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(640);
    let plain = ModelConfig {
        encoder: EncoderConfig {
            image_height: crop,
            image_width: crop,
            patch_size: 16,
            depth: 24,
            width: 1024,
            heads: 16,
            mlp_ratio: 4,
        },
        num_classes: 150,
        cascade_layers: vec![8, 16, 24],
        shrunk: None,
    };
    let shrunk = ModelConfig {
        shrunk: Some(ShrunkConfig::for_depth(24)),
        ..plain.clone()
    };

    let cmp = flops::compare(&plain, &shrunk, (crop, crop))?;
    println!("plain ({crop}x{crop})\n{}", cmp.plain);
    println!("shrunk, QD after layer 8\n{}", cmp.shrunk);
    println!("{:<18}  {:>10}", "component", "delta G");
    for (name, d) in &cmp.deltas {
        println!("{name:<18}  {:>10.3}", *d as f64 / 1e9);
    }
    println!("\nbackbone alone: {:.1} GMACs", giga(cmp.plain.backbone_total()));
    println!("shrunk / plain:  {:.3}", cmp.ratio);
    Ok(())
}
