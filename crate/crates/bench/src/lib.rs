//! Shared fixtures for the benches.

use pmtf_core::data::{generate_synthetic, split};
use pmtf_core::objectives::TripleSample;
use pmtf_core::trainer::{initialize, sample_triples, RatingLookup};
use pmtf_core::{CovMatrix, GenConfig, Hyperparams, ModelParams, SplitDataset, SplitSpec, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub data: SplitDataset,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub sigma_g: CovMatrix,
    pub triples: Vec<TripleSample>,
}

/// Synthetic data at the default generator size with an initialized model
/// and a batch of `batch` triples.
pub fn fixture(batch: usize) -> Fixture {
    let (ds, _) = generate_synthetic(&GenConfig::default()).expect("generator defaults are valid");
    let data = split(&ds, &SplitSpec::default()).expect("default split fits");
    let config = TrainConfig { hp: Hyperparams { d: 5, nu_g: 5.0, ..Default::default() }, ..Default::default() };
    let (params, emp) = initialize(&config, &data).expect("initializes");
    let lookup = RatingLookup::new(data.num_users(), &[&data.train]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let triples = sample_triples(&data.train, &lookup, data.num_items(), &mut rng, batch).expect("samples");
    Fixture { data, config, params, sigma_g: emp, triples }
}
