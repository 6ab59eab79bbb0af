//! Fixtures shared by the benchmarks.

use pathmask_core::corpus::prepare;
use pathmask_core::datagen::{generate, SynthSpec};
use pathmask_core::labelseq::TargetFormat;
use pathmask_core::{Example, LabelHierarchy, Model, ModelConfig, Vocabulary};

pub struct Fixture {
    pub hierarchy: LabelHierarchy,
    pub vocab: Vocabulary,
    pub examples: Vec<Example>,
    pub model: Model,
}

/// A small default-spec corpus and a desk-scale model.
pub fn fixture(samples: usize) -> Fixture {
    let data = generate(&SynthSpec {
        train: samples,
        val: 0,
        test: 0,
        ..Default::default()
    })
    .expect("default spec is valid");
    let vocab = Vocabulary::build(&data.hierarchy, pathmask_core::corpus::words(&data.train));
    let examples = prepare(&data.train, &data.hierarchy, &vocab, TargetFormat::Hierarchical, 300, 0)
        .expect("generated corpus is consistent");
    let model = Model::new(ModelConfig::new(vocab.len(), vocab.decoder_size()), 0).expect("default config");
    Fixture {
        hierarchy: data.hierarchy,
        vocab,
        examples,
        model,
    }
}
