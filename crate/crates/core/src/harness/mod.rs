//! Experiment orchestration behind the `egl` command line.
//!
//! ```text
//! <out>/data/                       scenes, images and masks per split
//! <out>/encoders/encoders.ckpt      pretrained frozen encoders (+ meta.json)
//! <out>/models/<arm>/seed<N>/       LMM checkpoint, train log, meta.json
//! <out>/dumps/<arm>/seed<N>/        per-scene grounding dumps and masks
//! <out>/reports/<command>.json      run reports
//! <out>/overlays/                   PPM overlays
//! ```

mod commands;
pub mod config;
pub mod overlay;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use commands::{ArmRow, ConfigEcho, GcgMetrics, InstsegMetrics, RunReport, SeedStats};
pub use config::ExperimentConfig;

use crate::encoders::{pretrain_encoders, EncoderConfig, EncoderSet, NoiseSchedule, VisualInput, VisualStack};
use crate::error::{Error, Result};
use crate::lmm::{train_lmm, Lmm, PromptLayout, TrainConfig, TrainLog};
use crate::numerics::{checkpoint, ParamStore, Sampler, Tensor};
use crate::parallel;
use crate::scene::{io, make_splits, Splits, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    AttnNorm,
    PromptMode,
    EncoderVariant,
    NoiseStep,
    TapBlock,
    PerHead,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "attn_norm" => Self::AttnNorm,
            "prompt_mode" => Self::PromptMode,
            "encoder_variant" => Self::EncoderVariant,
            "noise_step" => Self::NoiseStep,
            "tap_block" => Self::TapBlock,
            "per_head" => Self::PerHead,
            _ => return Err(Error::Config(format!("unknown ablation axis {s:?}"))),
        })
    }
}

/// Training budget a model was built with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    Full,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    fingerprint: String,
    hash: String,
}

/// A trained model ready for evaluation.
pub struct LoadedModel {
    pub store: ParamStore,
    pub lmm: Lmm,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub log: TrainLog,
}

fn fingerprint(cfg: &ExperimentConfig, prefixes: &[&str], extra: &str) -> String {
    let mut h = Sha256::new();
    for (k, v) in &cfg.values {
        if prefixes.iter().any(|p| k.starts_with(p)) {
            h.update(format!("{k}={v}\n").as_bytes());
        }
    }
    h.update(extra.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn read_meta(dir: &Path) -> Option<Meta> {
    serde_json::from_slice(&std::fs::read(dir.join("meta.json")).ok()?).ok()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub struct Harness {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
    pub vocab: Vocabulary,
    schedule: NoiseSchedule,
}

impl Harness {
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>, force: bool) -> Self {
        Self {
            config,
            out: out.into(),
            force,
            vocab: Vocabulary::standard(),
            schedule: NoiseSchedule::default(),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn encoder_dir(&self) -> PathBuf {
        self.out.join("encoders")
    }

    pub fn arm_name(enc: &EncoderConfig, budget: Budget) -> String {
        let b = match budget {
            Budget::Full => "full",
            Budget::Fixed => "fixed",
        };
        format!("{}-t{}-b{}-{b}", enc.variant, enc.noise_step, enc.tap_block)
    }

    pub fn model_dir(&self, enc: &EncoderConfig, budget: Budget, seed: u64) -> PathBuf {
        self.out.join("models").join(Self::arm_name(enc, budget)).join(format!("seed{seed}"))
    }

    pub fn dump_dir(&self, arm: &str, seed: u64) -> PathBuf {
        self.out.join("dumps").join(arm).join(format!("seed{seed}"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.out.join("reports").join(format!("{name}.json"))
    }

    /// Writes the three splits; refuses a non-empty data directory unless forced.
    pub fn generate_data(&self) -> Result<Splits> {
        let dir = self.data_dir();
        if dir.exists() && std::fs::read_dir(&dir)?.next().is_some() {
            if !self.force {
                return Err(Error::State(format!("{} is not empty; pass --force to overwrite", dir.display())));
            }
            std::fs::remove_dir_all(&dir)?;
        }
        let c = &self.config;
        let splits = make_splits(
            c.get("data.n_train")?,
            c.get("data.n_val")?,
            c.get("data.n_test")?,
            c.get("data.seed")?,
            &c.scene_config()?,
            &self.vocab,
        )?;
        for (name, scenes) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
            io::write_split(&dir, name, scenes, &self.vocab)?;
        }
        write_json(
            &dir.join("meta.json"),
            &Meta {
                fingerprint: fingerprint(c, &["data."], ""),
                hash: String::new(),
            },
        )?;
        Ok(splits)
    }

    /// Reads the dataset, checking it was generated from the current `data.*` keys.
    pub fn load_data(&self) -> Result<Splits> {
        let dir = self.data_dir();
        let meta = read_meta(&dir).ok_or_else(|| Error::State(format!("no dataset in {}; run gen-data first", dir.display())))?;
        if meta.fingerprint != fingerprint(&self.config, &["data."], "") {
            return Err(Error::State("dataset was generated with different data.* settings; rerun gen-data --force".into()));
        }
        Ok(Splits {
            train: io::read_split(&dir, "train", &self.vocab)?,
            val: io::read_split(&dir, "val", &self.vocab)?,
            test: io::read_split(&dir, "test", &self.vocab)?,
        })
    }

    /// Pretrained encoder parameters, trained and cached on first use.
    pub fn encoders(&self, splits: &Splits) -> Result<(Vec<(String, Tensor)>, String)> {
        let dir = self.encoder_dir();
        let path = dir.join("encoders.ckpt");
        let fp = fingerprint(&self.config, &["data.", "encoder.seed", "encoder.unet_steps", "encoder.clip_steps", "encoder.vision_steps"], "");
        match read_meta(&dir) {
            Some(m) if m.fingerprint == fp && !self.force && path.exists() => {
                let bytes = std::fs::read(&path)?;
                if checkpoint::content_hash(&bytes) != m.hash {
                    return Err(Error::State(format!("{} does not match its recorded hash", path.display())));
                }
                return Ok((checkpoint::decode(&bytes)?, m.hash));
            }
            Some(_) if !self.force => {
                return Err(Error::State("encoders were trained with different settings; rerun train --force".into()));
            }
            _ => {}
        }
        let seed: u64 = self.config.get("encoder.seed")?;
        let mut store = ParamStore::new();
        let mut rng = Sampler::derived(seed, 0xe1);
        let base = self.config.encoder_config()?;
        let set = EncoderSet::register(&mut store, &base, true, &mut rng);
        log::info!("pretraining encoders on {} scenes", splits.train.len());
        let losses = pretrain_encoders(
            &mut store,
            &set,
            &self.schedule,
            &splits.train,
            &self.config.encoder_budgets()?,
            &self.vocab,
            seed,
        )?;
        std::fs::create_dir_all(&dir)?;
        let bytes = checkpoint::encode(&checkpoint::records_of(&store));
        let hash = checkpoint::content_hash(&bytes);
        std::fs::write(&path, &bytes)?;
        write_json(
            &dir.join("losses.json"),
            &serde_json::json!({"unet": losses.unet, "clip": losses.clip, "vision": losses.vision}),
        )?;
        write_json(&dir.join("meta.json"), &Meta { fingerprint: fp, hash: hash.clone() })?;
        Ok((checkpoint::decode(&bytes)?, hash))
    }

    /// Fresh model for `enc` and `seed` with the pretrained encoders loaded.
    pub fn build_model(&self, enc: &EncoderConfig, seed: u64, encoders: &[(String, Tensor)]) -> Result<(ParamStore, Lmm)> {
        let mut store = ParamStore::new();
        let mut rng = Sampler::derived(seed, 0x1a);
        let visual = VisualStack::new(&mut store, enc.clone(), self.schedule.clone(), &mut rng)?;
        let lmm = Lmm::new(&mut store, visual, self.config.lm_config()?, PromptLayout::standard(&self.vocab), &mut rng)?;
        let wanted: Vec<(String, Tensor)> = encoders
            .iter()
            .filter(|(n, _)| EncoderSet::is_encoder_param(n))
            .cloned()
            .collect();
        store.load_values(&wanted)?;
        EncoderSet::freeze(&mut store);
        Ok((store, lmm))
    }

    pub fn prepare_inputs(&self, store: &ParamStore, lmm: &Lmm, scenes: &[crate::scene::SceneGroundTruth]) -> Result<Vec<VisualInput>> {
        parallel::map(scenes, |s| lmm.visual.prepare(store, &s.image))
            .into_iter()
            .collect()
    }

    fn train_config(&self, budget: Budget, seed: u64) -> Result<TrainConfig> {
        match budget {
            Budget::Full => self.config.train_config(seed),
            Budget::Fixed => self.config.pretrain_config(seed),
        }
    }

    fn model_fingerprint(&self, enc: &EncoderConfig, budget: Budget, seed: u64, encoder_hash: &str) -> String {
        let train = match budget {
            Budget::Full => "train.",
            Budget::Fixed => "pretrain.",
        };
        let extra = format!(
            "{}|{}|{}|{:?}|{}|{seed}|{encoder_hash}",
            enc.variant, enc.noise_step, enc.tap_block, enc.ic_pooling, enc.eval_eps_seed
        );
        let mut prefixes = vec!["data.", "lmm.", train];
        if budget == Budget::Fixed {
            prefixes.extend(["train.batch", "train.lr", "train.clip"]);
        }
        fingerprint(&self.config, &prefixes, &extra)
    }

    /// Loads the model for (`enc`, `budget`, `seed`), training it when absent.
    ///
    /// With `train_missing == false` a missing checkpoint is a state error. A
    /// checkpoint built from different settings is an error unless forced.
    pub fn model(
        &self,
        splits: &Splits,
        encoders: &(Vec<(String, Tensor)>, String),
        enc: &EncoderConfig,
        budget: Budget,
        seed: u64,
        train_missing: bool,
    ) -> Result<LoadedModel> {
        let dir = self.model_dir(enc, budget, seed);
        let fp = self.model_fingerprint(enc, budget, seed, &encoders.1);
        let (mut store, lmm) = self.build_model(enc, seed, &encoders.0)?;
        let path = dir.join("lmm.ckpt");
        match read_meta(&dir) {
            Some(m) if m.fingerprint == fp && path.exists() && !self.force => {
                let bytes = std::fs::read(&path)?;
                if checkpoint::content_hash(&bytes) != m.hash {
                    return Err(Error::State(format!("{} does not match its recorded hash", path.display())));
                }
                store.load_values(&checkpoint::decode(&bytes)?)?;
                let log: TrainLog = serde_json::from_slice(&std::fs::read(dir.join("train_log.json"))?)?;
                return Ok(LoadedModel {
                    store,
                    lmm,
                    seed,
                    checkpoint_hash: m.hash,
                    log,
                });
            }
            Some(_) if !self.force => {
                return Err(Error::State(format!(
                    "{} was trained with different settings; rerun with --force",
                    dir.display()
                )))
            }
            None if !train_missing => {
                return Err(Error::State(format!("no checkpoint in {}; run train first", dir.display())));
            }
            _ => {}
        }
        let inputs = self.prepare_inputs(&store, &lmm, &splits.train)?;
        let tc = self.train_config(budget, seed)?;
        log::info!("training {} seed {seed}", Self::arm_name(enc, budget));
        let log = train_lmm(&mut store, &lmm, &splits.train, &inputs, self.vocab.eos(), &tc)?;
        std::fs::create_dir_all(&dir)?;
        let bytes = checkpoint::encode(&checkpoint::records_of(&store));
        let hash = checkpoint::content_hash(&bytes);
        std::fs::write(&path, &bytes)?;
        write_json(&dir.join("train_log.json"), &log)?;
        write_json(&dir.join("meta.json"), &Meta { fingerprint: fp, hash: hash.clone() })?;
        Ok(LoadedModel {
            store,
            lmm,
            seed,
            checkpoint_hash: hash,
            log,
        })
    }
}

/// Whether the `window`-step trailing moving average never increases.
pub fn smoothed_monotone(losses: &[f64], window: usize) -> bool {
    if losses.len() < window || window == 0 {
        return true;
    }
    let ma: Vec<f64> = losses.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
    ma.windows(2).all(|p| p[1] <= p[0])
}
