//! Tiny models and batches shared by the integration tests.
#![allow(dead_code)]

pub mod checks;

use std::collections::BTreeMap;

use omreid::assembler::{Sample, TokenizerConfig};
use omreid::encoder::EncoderConfig;
use omreid::fusion::MixtureConfig;
use omreid::model::{to_sample, Model, ModelConfig};
use omreid::synthgen::{self, SynthConfig};
use omreid::Modality;

/// 16×8 images in 8-pixel patches (3 tokens), width-8 towers.
pub fn tiny_config(n_classes: usize, layers: usize, rank: usize) -> ModelConfig {
    let tower = |experts: Vec<Modality>| EncoderConfig {
        layers,
        width: 8,
        heads: 2,
        mlp_ratio: 2,
        rank,
        expert_modalities: experts,
        projection_dim: 6,
        fused_qkv: true,
    };
    ModelConfig {
        tokenizer: TokenizerConfig {
            image_height: 16,
            image_width: 8,
            patch_size: 8,
            width: 8,
            text_width: 8,
            vocab_size: 64,
            max_text_len: 24,
            bos_id: synthgen::BOS,
            eos_id: synthgen::EOS,
            replicate_gray_to_rgb: false,
        },
        visual: tower(Modality::VISUAL.to_vec()),
        text: tower(Vec::new()),
        mixture: MixtureConfig {
            hidden: 8,
            heads: 2,
            mlp_ratio: 2,
        },
        n_classes,
        routing: true,
        mask_id: synthgen::MASK,
    }
}

pub fn tiny_model(n_classes: usize) -> Model {
    Model::new(tiny_config(n_classes, 1, 2)).unwrap()
}

/// One sample per modality for each of `n` synthetic identities, labelled
/// `0..n`.
pub fn tiny_batch(n: usize, seed: u64) -> (BTreeMap<Modality, Vec<Sample>>, Vec<usize>) {
    let ds = synthgen::generate(&SynthConfig {
        n_identities: n,
        views: 1,
        height: 16,
        width: 8,
        patch_size: 8,
        vocab_size: 64,
        n_cameras: 1,
        seed,
    })
    .unwrap();
    let mut batch: BTreeMap<Modality, Vec<Sample>> = BTreeMap::new();
    for rec in &ds.samples {
        batch.entry(rec.modality).or_default().push(to_sample(rec, rec.identity));
    }
    (batch, (0..n).collect())
}
