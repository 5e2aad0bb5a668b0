//! mIoU from a confusion matrix: hand-made label maps, then predictions of an
//! untrained model on a few synthetic images.

use segvit::config::SegVitConfig;
use segvit::data;
use segvit::eval::{self, ConfusionMatrix};
use segvit::labels::LabelMap;
use segvit::model;

fn main() -> segvit::Result<()> {
    let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1])?;
    let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1])?;
    let mut cm = ConfusionMatrix::new(2);
    cm.add(&pred, &gt)?;
    println!("hand case\n{}", cm.report());

    let cfg = SegVitConfig::default();
    let params = model::init_params::<f32>(&cfg.model, 0)?;
    let samples = data::generate_range(&cfg.data_config(), cfg.data.eval_seed, 0..4)?;
    let mut cm = ConfusionMatrix::new(cfg.model.num_classes);
    for s in &samples {
        let pred = eval::infer(&params, &cfg.model, &s.image.to_tensor())?;
        cm.add(&pred, &s.labels)?;
    }
    println!("untrained model on 4 images\n{}", cm.report());
    Ok(())
}
