//! Nearest training images by pixel-space cosine similarity, and the
//! Fréchet distance between two feature sets.

use mambo::metrics::{nearest_neighbors, FeatureMetric, FeatureSet, Frechet};
use mambo::synth::striped_breast;
use rand::{Rng, SeedableRng};

fn main() -> mambo::Result<()> {
    let corpus: Vec<_> = (0..6).map(|i| striped_breast(96, i)).collect();
    let query = striped_breast(96, 4).map(|v| 0.9 * v + 0.05);
    for n in nearest_neighbors(&query, &corpus, 3)? {
        println!("corpus[{}] similarity {:.4}", n.index, n.similarity);
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut set = |shift: f32| -> mambo::Result<FeatureSet> {
        let mut f = FeatureSet::new(8);
        for i in 0..200 {
            f.push(format!("x{i}"), (0..8).map(|_| shift + rng.random::<f32>()).collect())?;
        }
        Ok(f)
    };
    let (a, b, c) = (set(0.0)?, set(0.0)?, set(0.5)?);
    println!("{}(a, b) = {:.4}", Frechet.name(), Frechet.compute(&a, &b)?);
    println!("{}(a, c) = {:.4}", Frechet.name(), Frechet.compute(&a, &c)?);
    Ok(())
}
