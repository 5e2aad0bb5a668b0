//! Token schedule and feature grids of the shrunk backbone, plain vs. QD+QU.

use segvit::config::SegVitConfig;
use segvit::data;
use segvit::model;
use segvit::numerics::Graph;
use segvit::shrunk::{self, ShrunkConfig};

fn main() -> segvit::Result<()> {
    let cfg = SegVitConfig::default();
    let enc = &cfg.model.encoder;
    let image = data::generate(&cfg.data_config(), 1, 0)?.image.to_tensor::<f32>();

    for variant in [None, Some(false), Some(true)] {
        let s = variant.map(|use_qu| ShrunkConfig {
            use_qu,
            ..ShrunkConfig::for_depth(enc.depth)
        });
        let m = segvit::model::ModelConfig {
            shrunk: s.clone(),
            ..cfg.model.clone()
        };
        let params = model::init_params::<f32>(&m, 0)?;
        let g = Graph::new();
        let p = params.bind(&g);
        let feats = shrunk::shrunk_forward(&p, &image, enc, s.as_ref())?;
        let name = match variant {
            None => "plain",
            Some(false) => "QD only",
            Some(true) => "QD + QU",
        };
        let grids: Vec<String> = feats.layers.iter().map(|l| format!("{}x{}", l.grid.0, l.grid.1)).collect();
        println!(
            "{name:8} layers [{}] -> decoder input {}x{} ({} tokens)",
            grids.join(", "),
            feats.decoder_input.grid.0,
            feats.decoder_input.grid.1,
            feats.decoder_input.len()
        );
    }

    let deep = ShrunkConfig::for_depth(24);
    let mut vit_l = enc.clone();
    vit_l.depth = 24;
    vit_l.image_height = 640;
    vit_l.image_width = 640;
    vit_l.patch_size = 16;
    println!("ViT-L tokens per layer: {:?}", deep.token_schedule(&vit_l));
    Ok(())
}
