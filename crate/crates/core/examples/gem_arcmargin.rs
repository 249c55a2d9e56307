//! GeM pooling of a small feature map, then ArcMargin logits and loss for
//! the pooled descriptor.

use landmark_core::descriptor_math::{
    arcmargin_logits, arcmargin_loss, gem_pool, gem_pool_grad, ArcMarginParams, FeatureMap, GemParams,
};

fn unit(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn main() -> landmark_core::Result<()> {
    // 4 channels on a 3x3 grid
    let data: Vec<f32> = (0..36).map(|i| ((i * 7) % 11) as f32 / 10.0).collect();
    let map = FeatureMap::new(4, 3, 3, data)?;
    for p in [1.0, 3.0, 64.0] {
        let pooled = gem_pool(&map, &GemParams::with_p(p))?;
        println!("p={p:<4} pooled {:.4?}", pooled);
    }
    let grad = gem_pool_grad(&map, &GemParams::default(), &[1.0, 0.0, 0.0, 0.0])?;
    println!("d pooled[0] / d map[0..9] {:.4?}", &grad[..9]);

    let emb = unit(gem_pool(&map, &GemParams::default())?);
    let weights: Vec<f32> = [
        vec![1.0, 0.2, 0.1, 0.3],
        vec![0.1, 1.0, 0.4, 0.0],
        vec![0.3, 0.3, 0.3, 1.0],
    ]
    .into_iter()
    .flat_map(unit)
    .collect();
    let mut params = ArcMarginParams::new(3, 4);
    for m in [0.0, 0.3] {
        params.margin = m;
        let logits = arcmargin_logits(&emb, &weights, 0, &params)?;
        let loss = arcmargin_loss(&emb, &weights, &[0], &params)?;
        println!("margin {m}: logits {logits:.3?} loss {loss:.4}");
    }
    Ok(())
}
