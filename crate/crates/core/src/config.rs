//! Run configuration loaded from TOML.

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::generation::GenConfig;
use crate::streaming::CostModel;
use crate::toy::ToyConfig;
use crate::trainer::{LoraConfig, TrainConfig};
use crate::trajectory::SynthesisConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub instruction: String,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { encoder: EncoderConfig::default(), decoder: DecoderConfig::default(), instruction: "translate".into(), seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Input directory: `recordings.jsonl`, `alignments.jsonl`, `features/`.
    pub data_dir: PathBuf,
    /// Everything the runs write.
    pub work_dir: PathBuf,
    /// Segments drawn from the utterance pool on top of the sliced ones.
    pub simulated_segments: usize,
    pub target_language: String,
    pub translation_concurrency: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            work_dir: "work".into(),
            simulated_segments: 0,
            target_language: "Chinese".into(),
            translation_concurrency: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stage0: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub lora: LoraConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { stage0: TrainConfig::for_stage(0), stage1: TrainConfig::for_stage(1), stage2: TrainConfig::for_stage(2), lora: LoraConfig::default() }
    }
}

impl TrainSection {
    pub fn stage(&self, s: u8) -> Result<&TrainConfig> {
        match s {
            0 => Ok(&self.stage0),
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            _ => Err(Error::Config(format!("unknown stage {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub latency_multiplier: usize,
    pub data: DataSection,
    pub model: ModelSection,
    pub synthesis: SynthesisConfig,
    pub train: TrainSection,
    pub generation: GenConfig,
    pub cost: CostModel,
    /// Present when the data directory holds the synthetic toy corpus.
    pub toy: Option<ToyConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            latency_multiplier: 3,
            data: DataSection::default(),
            model: ModelSection::default(),
            synthesis: SynthesisConfig::default(),
            train: TrainSection::default(),
            generation: GenConfig::default(),
            cost: CostModel::default(),
            toy: None,
        }
    }
}

impl RunConfig {
    /// Parses a TOML file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })?;
        cfg.train.stage0.stage = 0;
        cfg.train.stage1.stage = 1;
        cfg.train.stage2.stage = 2;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.data_dir, &mut cfg.data.work_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets every seed from one value.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.data.seed = seed;
        for t in [&mut self.train.stage0, &mut self.train.stage1, &mut self.train.stage2] {
            t.seed = seed;
        }
        if let Some(t) = &mut self.toy {
            t.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latency_multiplier == 0 {
            return Err(Error::Config("latency_multiplier must be at least 1".into()));
        }
        self.model.encoder.validate()?;
        self.synthesis.validate()?;
        self.generation.validate()?;
        self.cost.validate()?;
        self.train.lora.validate()?;
        for (s, t) in [(0, &self.train.stage0), (1, &self.train.stage1), (2, &self.train.stage2)] {
            t.validate()?;
            if t.stage != s {
                return Err(Error::Config(format!("train.stage{s} declares stage {}", t.stage)));
            }
        }
        if let Some(t) = &self.toy {
            t.validate()?;
            if t.d_in != self.model.encoder.d_in || t.frame_ms != self.model.encoder.frame_ms {
                return Err(Error::Config("toy frames must match the encoder input".into()));
            }
        }
        if self.model.encoder.chunk_ms() != self.synthesis.chunk_ms {
            return Err(Error::Config(format!(
                "encoder chunk of {} ms differs from the synthesis chunk of {} ms",
                self.model.encoder.chunk_ms(),
                self.synthesis.chunk_ms
            )));
        }
        if self.model.decoder.turn_reserve < self.generation.max_new_tokens + 1 {
            return Err(Error::Config("decoder.turn_reserve must cover max_new_tokens plus the read token".into()));
        }
        Ok(())
    }

    /// Checks that an input path exists.
    pub fn require(path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Config(format!("{} does not exist", path.display())))
        }
    }
}
