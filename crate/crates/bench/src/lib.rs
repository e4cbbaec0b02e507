//! Fixtures shared by the benchmarks.

use fewshot_gmm::data::Domain;
use fewshot_gmm::synth_bench::{gen_domains, SynthConfig};

/// Synthetic domains with the default generator settings.
pub fn domains(n: usize) -> Vec<Domain> {
    let config = SynthConfig {
        n_domains: n,
        ..SynthConfig::default()
    };
    gen_domains(&config)
        .expect("synthetic domains")
        .into_iter()
        .map(|s| s.domain)
        .collect()
}
