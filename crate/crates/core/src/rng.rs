use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random stream for `(seed, stream)`; lets parallel work units
/// draw numbers without depending on scheduling order.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn shuffled(mut idx: Vec<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    idx.shuffle(rng);
    idx
}
