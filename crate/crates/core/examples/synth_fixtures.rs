//! Write a planted synthetic corpus: `synth_fixtures <dir> [seed]`.

use neuron_lens::RandomCorpusSpec;

fn main() {
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "fixtures".into());
    let seed = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let corpus = RandomCorpusSpec {
        n_samples: 50,
        height: 16,
        width: 16,
        n_objects: 12,
        n_attributes: 6,
        n_neurons: 4,
        n_cls: 5,
        planted_per_neuron: 3,
        max_plant_arity: 2,
        background_rate: 0.03,
        dropout: 0.0,
        seed,
    }
    .generate()
    .expect("default plan is feasible");
    corpus.write(&dir).expect("fixtures written");
    for t in corpus.truth.iter().filter(|t| t.formula.is_some()) {
        println!("neuron {} cluster {}: {}", t.neuron, t.cluster_index, t.formula.as_deref().unwrap());
    }
}
