//! Exact top-k inner-product search over random unit vectors, with and
//! without tuning knobs.

use landmark_core::{l2_normalize, top_k_search, top_k_search_with, DescriptorSet, SearchParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize, prefix: &str) -> landmark_core::Result<DescriptorSet> {
    let data = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let ids = (0..n).map(|i| format!("{prefix}{i}")).collect();
    l2_normalize(&DescriptorSet::new(ids, None, data, dim)?)
}

fn main() -> landmark_core::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let index = random_set(&mut rng, 20_000, 128, "img")?;
    let queries = random_set(&mut rng, 200, 128, "q")?;

    let start = std::time::Instant::now();
    let results = top_k_search(&queries, &index, 10)?;
    println!("200 x 20000 x 128, k=10 in {:.2?}", start.elapsed());
    for (row, sim) in results[0].iter().take(5) {
        println!("  {} -> {} ({sim:.4})", queries.ids()[0], index.ids()[row]);
    }

    let tuned = SearchParams { workers: Some(2), query_block: 16, index_tile: 512 };
    assert_eq!(top_k_search_with(&queries, &index, 10, &tuned)?, results);
    println!("2 workers, other block sizes: identical output");
    Ok(())
}
