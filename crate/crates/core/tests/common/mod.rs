#![allow(dead_code)]

use std::path::{Path, PathBuf};
use streamst::config::RunConfig;
use streamst::pipeline::{self, Layout};
use streamst::prompt::{ChatClient, MockChatClient};

pub fn toy_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

/// The shipped toy configuration with its data and work directories moved under `root`.
pub fn toy_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&toy_config_path()).expect("toy config");
    cfg.data.data_dir = root.join("data");
    cfg.data.work_dir = root.join("work");
    cfg
}

/// A few recordings and one epoch per stage: seconds instead of minutes.
pub fn mini_config(root: &Path) -> RunConfig {
    let mut cfg = toy_config(root);
    let toy = cfg.toy.as_mut().unwrap();
    toy.train_recordings = 5;
    toy.heldout_recordings = 2;
    cfg.data.simulated_segments = 8;
    for t in [&mut cfg.train.stage0, &mut cfg.train.stage1, &mut cfg.train.stage2] {
        t.epochs = 1;
        t.warmup_steps = 2;
    }
    cfg
}

pub fn write_config(cfg: &RunConfig, path: &Path) {
    std::fs::write(path, toml::to_string(cfg).unwrap()).unwrap();
}

pub fn mock_client(cfg: &RunConfig) -> MockChatClient {
    let text = std::fs::read_to_string(Layout::new(cfg).mock_answers()).unwrap();
    MockChatClient { answers: serde_json::from_str(&text).unwrap() }
}

/// Corpus, synthesis and the three training stages.
pub fn prepare(cfg: &RunConfig) -> streamst::Result<()> {
    pipeline::write_toy_data(cfg.toy.as_ref().unwrap(), &cfg.data.data_dir)?;
    let client = mock_client(cfg);
    pipeline::synthesize(cfg, Some(&client as &dyn ChatClient))?;
    for stage in 0..=2 {
        pipeline::train_stage(cfg, stage, None, None)?;
    }
    Ok(())
}
