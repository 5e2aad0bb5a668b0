//! One attention-to-mask block on random features: the same similarity map
//! gives the softmax attention and, through a sigmoid, the class masks.

use segvit::atm::{self, ClassTokens, DecoderConfig};
use segvit::encoder::TokenSequence;
use segvit::labels::LabelMap;
use segvit::numerics::{Graph, Init, ParamStore, Tensor};

fn main() -> segvit::Result<()> {
    let cfg = DecoderConfig {
        num_classes: 3,
        width: 16,
        heads: 2,
        mlp_ratio: 2,
        stages: 1,
    };
    let grid = (6, 8);
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(7);
    atm::init_decoder(&mut store, &mut init, &cfg)?;

    // Three "regions" of features so each class token has something to find.
    let mut feats = Init::new(1).normal::<f64>(&[grid.0 * grid.1, cfg.width], 0.3);
    for (i, row) in feats.data_mut().chunks_mut(cfg.width).enumerate() {
        let region = (i % grid.1) * 3 / grid.1;
        row[region] += 3.0;
    }

    let g = Graph::new();
    let p = store.bind(&g);
    let features = TokenSequence::new(g.constant(feats), grid, 1)?;
    let tokens = ClassTokens {
        tokens: p.get("decoder.class_tokens")?,
    };
    let out = atm::atm_block(&p, "decoder.stage1.atm", tokens, &features, cfg.heads)?;

    let s = out.similarity.values.value();
    let a = out.attention.value();
    let resoftmax = s.softmax(2)?;
    let gap = a.data().iter().zip(resoftmax.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("similarity {:?}, attention {:?}", s.shape(), a.shape());
    println!("max |attention - softmax(similarity)| = {gap:.2e}");

    let summed = segvit::numerics::tensor::sum_axis(&s, 0)?;
    let logits = out.masks.logits.value();
    let gap = summed.data().iter().zip(logits.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    println!("max |mask logits - sum_heads(similarity)| = {gap:.2e}");

    let probs = out.masks.probs()?.value();
    for c in 0..cfg.num_classes {
        let m: Vec<f64> = probs.data()[c * grid.0 * grid.1..][..grid.0 * grid.1].to_vec();
        let mean = m.iter().sum::<f64>() / m.len() as f64;
        println!("class {c}: mean mask prob {mean:.3}");
    }
    let flat: Vec<f64> = vec![1.0; cfg.num_classes];
    let masks = Tensor::new(&[cfg.num_classes, grid.0, grid.1], probs.data().to_vec())?;
    let labels: LabelMap = atm::assign_labels(&flat, &masks)?;
    println!("argmax over untrained masks (class 0 drawn as '.'):\n{}", labels.to_ascii());
    Ok(())
}
