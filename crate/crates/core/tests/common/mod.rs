#![allow(dead_code)]

use std::path::{Path, PathBuf};

use postermaker::datasynth::{self, SynthConfig};
use postermaker::genmodel::ModelConfig;
use postermaker::trainer::{Stage, StageConfig};

pub fn small_synth() -> SynthConfig {
    SynthConfig { image_size: 32, alphabet_size: 8, max_chars: 3, max_lines: 2, ..SynthConfig::default() }
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        patch: 8,
        width: 32,
        heads: 2,
        mlp_ratio: 2,
        base_blocks: 2,
        scene_blocks: 2,
        text_blocks: 1,
        alphabet_size: 8,
        glyph_dim: 8,
        ..ModelConfig::default()
    }
}

pub fn dataset(root: &Path, split: &str, count: usize, cfg: &SynthConfig) -> PathBuf {
    datasynth::write_dataset(root, count, split, 3, cfg, false).unwrap();
    root.join(split)
}

pub fn stage(stage: Stage, data: &Path, out: &Path, init: Option<PathBuf>, steps: usize) -> StageConfig {
    StageConfig {
        stage,
        steps,
        batch_size: 4,
        lr: 1e-3,
        alphabet_size: 8,
        image_size: 32,
        seed: 11,
        data_dir: data.to_path_buf(),
        out_dir: out.to_path_buf(),
        from_scratch: init.is_none(),
        init,
        model: small_model(),
        log_every: 1,
        t_prime: 6,
        t1: 3,
        ..StageConfig::default()
    }
}
