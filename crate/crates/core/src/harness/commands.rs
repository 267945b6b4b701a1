//! The six subcommands and their reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::overlay::{render_overlay, OverlayItem};
use super::{smoothed_monotone, write_json, AblationAxis, Budget, Harness, LoadedModel};
use crate::encoders::{EncoderConfig, Variant};
use crate::error::{Error, Result};
use crate::grounding::{GroundedPhrase, GroundingOptions, HeadSelection, PromptMode};
use crate::imaging::Mask;
use crate::lmm::pretrain_loss_report;
use crate::metrics::{
    caption_f1, evaluate, grounding_mask_recall, mean_iou, random_point_baseline, BucketValues, Prediction,
    SynonymTable,
};
use crate::pipeline::{ground_scenes, regrounded, SceneResult};
use crate::scene::{Category, SceneGroundTruth, Splits};
use crate::segmenter::is_single_component;

/// Values over seeds with their mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SeedStats {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n.max(1.0);
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { values, mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcgMetrics {
    pub seed: u64,
    pub miou: f64,
    pub recall: f64,
    pub recall_at_025: f64,
    /// Unigram F1 against the reference caption; reported only.
    pub caption_f1: f64,
    pub n_scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstsegMetrics {
    pub seed: Option<u64>,
    pub pacc: Option<f64>,
    pub ap: f64,
    pub ar: f64,
    pub per_bucket: BucketValues,
    pub n_scenes: usize,
}

/// One arm of an ablation with a metric over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: String,
    pub metric: String,
    pub stats: SeedStats,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub source: String,
    pub effective: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: ConfigEcho,
    /// Content hash of every checkpoint used, keyed by role.
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
    pub wall_clock_s: f64,
    pub dumps: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DumpPhrase {
    text: String,
    span: [usize; 2],
    point: [usize; 2],
    mask_path: Option<String>,
    matched_category: Option<Category>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SceneDump {
    scene_id: u64,
    response: String,
    phrases: Vec<DumpPhrase>,
}

struct Evaluated {
    seed: u64,
    results: Vec<SceneResult>,
}

fn predictions(results: &[SceneResult], scenes: &[SceneGroundTruth], table: &SynonymTable) -> Vec<Prediction> {
    results.iter().zip(scenes).map(|(r, s)| r.prediction(s, table)).collect()
}

fn with_phrases(results: &[SceneResult], phrases: Vec<Vec<GroundedPhrase>>) -> Vec<SceneResult> {
    results
        .iter()
        .zip(phrases)
        .map(|(r, phrases)| SceneResult { phrases, ..r.clone() })
        .collect()
}

fn instseg_row(seed: Option<u64>, preds: &[Prediction], scenes: &[SceneGroundTruth], iou: f64, h: &Harness) -> Result<InstsegMetrics> {
    let m = evaluate(preds, scenes, iou, &h.config.buckets()?);
    Ok(InstsegMetrics {
        seed,
        pacc: m.pacc,
        ap: m.ap,
        ar: m.ar,
        per_bucket: m.per_bucket,
        n_scenes: m.n_scenes,
    })
}

impl Harness {
    fn report(&self, command: &str, started: Instant, checkpoints: BTreeMap<String, String>, metrics: serde_json::Value, dumps: Vec<String>) -> Result<RunReport> {
        let report = RunReport {
            command: command.to_string(),
            config: ConfigEcho {
                source: self.config.source.clone(),
                effective: self.config.effective_text(),
            },
            checkpoints,
            metrics,
            wall_clock_s: started.elapsed().as_secs_f64(),
            dumps,
        };
        write_json(&self.report_path(command), &report)?;
        write_json(&self.report_path(&format!("{command}.metrics")), &report.metrics)?;
        Ok(report)
    }

    fn default_arm(&self) -> Result<(EncoderConfig, String)> {
        let enc = self.config.encoder_config()?;
        let arm = Self::arm_name(&enc, Budget::Full);
        Ok((enc, arm))
    }

    fn fixed_losses(&self, splits: &Splits, encoders: &(Vec<(String, crate::numerics::Tensor)>, String), arms: &[(String, EncoderConfig)], checkpoints: &mut BTreeMap<String, String>) -> Result<serde_json::Value> {
        let mut runs = Vec::new();
        for (name, enc) in arms {
            let mut logs = Vec::new();
            for seed in self.config.seeds()? {
                let m = self.model(splits, encoders, enc, Budget::Fixed, seed, true)?;
                checkpoints.insert(format!("{}/seed{seed}", Self::arm_name(enc, Budget::Fixed)), m.checkpoint_hash.clone());
                logs.push(m.log);
            }
            runs.push((name.clone(), logs));
        }
        let window: f64 = self.config.get("pretrain.window")?;
        let rows: Vec<ArmRow> = pretrain_loss_report(&runs, window)
            .into_iter()
            .map(|s| ArmRow {
                arm: s.variant,
                metric: "converged_loss".into(),
                stats: SeedStats::of(s.losses),
            })
            .collect();
        Ok(serde_json::json!({ "steps": self.config.get::<usize>("pretrain.steps")?, "window": window, "rows": rows }))
    }

    fn evaluate_seeds(&self, scenes: &[SceneGroundTruth], options: &GroundingOptions, checkpoints: &mut BTreeMap<String, String>) -> Result<Vec<Evaluated>> {
        let splits = self.load_data()?;
        let encoders = self.encoders_existing(&splits)?;
        checkpoints.insert("encoders".into(), encoders.1.clone());
        let (enc, arm) = self.default_arm()?;
        let table = SynonymTable::default();
        let max_tokens: usize = self.config.get("gen.max_tokens")?;
        let mut out = Vec::new();
        for seed in self.config.seeds()? {
            let LoadedModel { store, lmm, checkpoint_hash, .. } = self.model(&splits, &encoders, &enc, Budget::Full, seed, false)?;
            checkpoints.insert(format!("{arm}/seed{seed}"), checkpoint_hash);
            log::info!("evaluating {arm} seed {seed} on {} scenes", scenes.len());
            let results = ground_scenes(&store, &lmm, scenes, &self.vocab, options, &table, max_tokens)?;
            out.push(Evaluated { seed, results });
        }
        Ok(out)
    }

    /// Encoders that must already exist on disk.
    fn encoders_existing(&self, splits: &Splits) -> Result<(Vec<(String, crate::numerics::Tensor)>, String)> {
        if !self.out.join("encoders").join("encoders.ckpt").exists() {
            return Err(Error::State("no pretrained encoders; run train first".into()));
        }
        let forced = Harness {
            force: false,
            config: self.config.clone(),
            out: self.out.clone(),
            vocab: self.vocab.clone(),
            schedule: self.schedule.clone(),
        };
        forced.encoders(splits)
    }

    fn write_dumps(&self, arm: &str, seed: u64, results: &[SceneResult]) -> Result<Vec<String>> {
        let dir = self.dump_dir(arm, seed);
        std::fs::create_dir_all(&dir)?;
        let traces: bool = self.config.get("gen.dump_traces")?;
        let mut paths = Vec::new();
        for r in results {
            let mut phrases = Vec::new();
            for (k, p) in r.phrases.iter().enumerate() {
                let mask_path = match &p.mask {
                    Some(m) => {
                        let name = format!("scene{}_p{k}.pgm", r.scene_id);
                        m.write_pgm(&dir.join(&name))?;
                        Some(name)
                    }
                    None => None,
                };
                phrases.push(DumpPhrase {
                    text: p.phrase.text.clone(),
                    span: [p.phrase.span.start, p.phrase.span.end],
                    point: [p.point.0, p.point.1],
                    mask_path,
                    matched_category: p.matched_category,
                });
            }
            let dump = SceneDump {
                scene_id: r.scene_id,
                response: self.vocab.detokenize(&r.generation.tokens),
                phrases,
            };
            let path = dir.join(format!("scene{}.json", r.scene_id));
            write_json(&path, &dump)?;
            if traces {
                std::fs::write(dir.join(format!("scene{}_trace.json", r.scene_id)), r.generation.dump_json()?)?;
            }
            paths.push(path.display().to_string());
        }
        Ok(paths)
    }

    pub fn cmd_gen_data(&self) -> Result<RunReport> {
        let t = Instant::now();
        let s = self.generate_data()?;
        let metrics = serde_json::json!({"n_train": s.train.len(), "n_val": s.val.len(), "n_test": s.test.len()});
        self.report("gen-data", t, BTreeMap::new(), metrics, Vec::new())
    }

    /// Pretrains the encoders if needed, then trains the default arm for every seed.
    pub fn cmd_train(&self) -> Result<RunReport> {
        let t = Instant::now();
        let splits = self.load_data()?;
        let encoders = self.encoders(&splits)?;
        let mut checkpoints = BTreeMap::from([("encoders".to_string(), encoders.1.clone())]);
        let (enc, arm) = self.default_arm()?;
        let mut rows = Vec::new();
        for seed in self.config.seeds()? {
            let m = self.model(&splits, &encoders, &enc, Budget::Full, seed, true)?;
            checkpoints.insert(format!("{arm}/seed{seed}"), m.checkpoint_hash.clone());
            rows.push(serde_json::json!({
                "seed": seed,
                "steps": m.log.losses.len(),
                "initial_loss": m.log.losses.first(),
                "final_loss": m.log.final_loss(0.1),
                "monotone_ma32": smoothed_monotone(&m.log.losses, 32),
            }));
        }
        self.report("train", t, checkpoints, serde_json::json!({ "arm": arm, "seeds": rows }), Vec::new())
    }

    /// Point accuracy, AP and AR for the trained seeds next to the random-point baseline.
    pub fn cmd_eval_instseg(&self) -> Result<RunReport> {
        let t = Instant::now();
        let test = self.load_data()?.test;
        let options = self.config.grounding_options()?;
        let mut checkpoints = BTreeMap::new();
        let evals = self.evaluate_seeds(&test, &options, &mut checkpoints)?;
        let (_, arm) = self.default_arm()?;
        let table = SynonymTable::default();
        let iou: f64 = self.config.get("metrics.iou_thresh")?;
        let mut rows = Vec::new();
        let mut dumps = Vec::new();
        let mut connected = true;
        for e in &evals {
            let preds = predictions(&e.results, &test, &table);
            connected &= preds.iter().flat_map(|p| &p.items).filter_map(|i| i.mask()).all(is_single_component);
            rows.push(instseg_row(Some(e.seed), &preds, &test, iou, self)?);
            dumps.extend(self.write_dumps(&arm, e.seed, &e.results)?);
        }
        let baseline_preds = random_point_baseline(&test, self.config.get("baseline.seed")?, options.color_tol)?;
        let baseline = instseg_row(None, &baseline_preds, &test, iou, self)?;
        let pacc = SeedStats::of(rows.iter().map(|r| r.pacc.unwrap_or(0.0)).collect());
        let metrics = serde_json::json!({
            "arm": arm,
            "model": rows,
            "model_pacc": pacc,
            "baseline": baseline,
            "masks_connected": connected,
        });
        self.report("eval-instseg", t, checkpoints, metrics, dumps)
    }

    /// Mask IoU, grounding recall and caption overlap on the test split.
    pub fn cmd_eval_gcg(&self) -> Result<RunReport> {
        let t = Instant::now();
        let test = self.load_data()?.test;
        let options = self.config.grounding_options()?;
        let mut checkpoints = BTreeMap::new();
        let evals = self.evaluate_seeds(&test, &options, &mut checkpoints)?;
        let (_, arm) = self.default_arm()?;
        let table = SynonymTable::default();
        let iou: f64 = self.config.get("metrics.iou_thresh")?;
        let special = [self.vocab.bos(), self.vocab.eos()];
        let words = |ids: &[usize]| -> Vec<String> {
            ids.iter().filter(|i| !special.contains(i)).map(|&i| self.vocab.word(i).to_string()).collect()
        };
        let mut rows = Vec::new();
        let mut dumps = Vec::new();
        for e in &evals {
            let preds = predictions(&e.results, &test, &table);
            let f1: f64 = e
                .results
                .iter()
                .zip(&test)
                .map(|(r, s)| {
                    let (g, c) = (words(&r.generation.tokens), words(&s.caption));
                    caption_f1(&g.iter().map(String::as_str).collect::<Vec<_>>(), &c.iter().map(String::as_str).collect::<Vec<_>>())
                })
                .sum::<f64>()
                / test.len() as f64;
            rows.push(GcgMetrics {
                seed: e.seed,
                miou: mean_iou(&preds, &test),
                recall: grounding_mask_recall(&preds, &test, iou),
                recall_at_025: grounding_mask_recall(&preds, &test, iou.min(0.25)),
                caption_f1: f1,
                n_scenes: test.len(),
            });
            dumps.extend(self.write_dumps(&arm, e.seed, &e.results)?);
        }
        let metrics = serde_json::json!({
            "arm": arm,
            "iou_thresh": iou,
            "seeds": rows,
            "miou": SeedStats::of(rows.iter().map(|r| r.miou).collect()),
            "recall": SeedStats::of(rows.iter().map(|r| r.recall).collect()),
            "caption_f1": SeedStats::of(rows.iter().map(|r| r.caption_f1).collect()),
        });
        self.report("eval-gcg", t, checkpoints, metrics, dumps)
    }

    /// Compares arms along `axis`. Grounding axes regroup the default arm's
    /// generations; encoder axes train fixed-budget models and compare losses.
    pub fn cmd_ablate(&self, axis: AblationAxis) -> Result<RunReport> {
        let t = Instant::now();
        let name = format!("ablate-{}", serde_json::to_value(axis)?.as_str().unwrap_or("axis"));
        let mut checkpoints = BTreeMap::new();
        let metrics = match axis {
            AblationAxis::AttnNorm | AblationAxis::PromptMode | AblationAxis::PerHead => {
                self.ablate_grounding(axis, &mut checkpoints)?
            }
            AblationAxis::EncoderVariant | AblationAxis::NoiseStep | AblationAxis::TapBlock => {
                let splits = self.load_data()?;
                let encoders = self.encoders(&splits)?;
                checkpoints.insert("encoders".into(), encoders.1.clone());
                let base = self.config.encoder_config()?;
                let arms: Vec<(String, EncoderConfig)> = match axis {
                    AblationAxis::EncoderVariant => self
                        .config
                        .list::<Variant>("ablate.variants")?
                        .into_iter()
                        .map(|v| (v.to_string(), EncoderConfig { variant: v, ..base.clone() }))
                        .collect(),
                    AblationAxis::NoiseStep => self
                        .config
                        .list::<usize>("ablate.noise_steps")?
                        .into_iter()
                        .map(|n| (format!("t={n}"), EncoderConfig { noise_step: n, ..base.clone() }))
                        .collect(),
                    _ => self
                        .config
                        .list::<usize>("ablate.tap_blocks")?
                        .into_iter()
                        .map(|b| (format!("block={b}"), EncoderConfig { tap_block: b, ..base.clone() }))
                        .collect(),
                };
                for (_, e) in &arms {
                    e.validate(&self.schedule)?;
                }
                self.fixed_losses(&splits, &encoders, &arms, &mut checkpoints)?
            }
        };
        self.report(&name, t, checkpoints, metrics, Vec::new())
    }

    fn ablate_grounding(&self, axis: AblationAxis, checkpoints: &mut BTreeMap<String, String>) -> Result<serde_json::Value> {
        let splits = self.load_data()?;
        let test = &splits.test;
        let base = self.config.grounding_options()?;
        let evals = self.evaluate_seeds(test, &base, checkpoints)?;
        let encoders = self.encoders_existing(&splits)?;
        let (enc, _) = self.default_arm()?;
        let table = SynonymTable::default();
        let iou: f64 = self.config.get("metrics.iou_thresh")?;
        let lm = self.config.lm_config()?;
        let arms: Vec<(String, GroundingOptions)> = match axis {
            AblationAxis::AttnNorm => vec![
                ("normalize=on".into(), GroundingOptions { normalize: true, ..base }),
                ("normalize=off".into(), GroundingOptions { normalize: false, ..base }),
            ],
            AblationAxis::PromptMode => vec![
                ("prompt_mode=point".into(), GroundingOptions { prompt_mode: PromptMode::Point, ..base }),
                ("prompt_mode=mask".into(), GroundingOptions { prompt_mode: PromptMode::Mask, ..base }),
            ],
            _ => {
                let mut v = vec![("all_heads".to_string(), GroundingOptions { heads: HeadSelection::Mean, ..base })];
                for layer in 0..lm.n_layer {
                    for head in 0..lm.n_head {
                        v.push((format!("layer{layer}_head{head}"), GroundingOptions { heads: HeadSelection::Single { layer, head }, ..base }));
                    }
                }
                v
            }
        };
        let mut recalls: Vec<Vec<f64>> = vec![Vec::new(); arms.len()];
        for e in &evals {
            let model = self.model(&splits, &encoders, &enc, Budget::Full, e.seed, false)?;
            for (a, (_, opts)) in arms.iter().enumerate() {
                let phrases = crate::parallel::map(&e.results.iter().zip(test).collect::<Vec<_>>(), |(r, s)| {
                    regrounded(s, &r.generation, &model.lmm, &self.vocab, opts, &table)
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
                let preds = predictions(&with_phrases(&e.results, phrases), test, &table);
                recalls[a].push(grounding_mask_recall(&preds, test, iou));
            }
        }
        let rows: Vec<ArmRow> = arms
            .iter()
            .zip(recalls)
            .map(|((arm, _), r)| ArmRow {
                arm: arm.clone(),
                metric: "recall".into(),
                stats: SeedStats::of(r),
            })
            .collect();
        if axis != AblationAxis::PerHead {
            return Ok(serde_json::json!({ "rows": rows }));
        }
        let grid: Vec<Vec<f64>> = (0..lm.n_layer)
            .map(|l| (0..lm.n_head).map(|h| rows[1 + l * lm.n_head + h].stats.mean).collect())
            .collect();
        let heads = SeedStats::of(rows[1..].iter().map(|r| r.stats.mean).collect());
        Ok(serde_json::json!({
            "rows": rows,
            "grid": grid,
            "all_heads": rows[0].stats,
            "individual_heads": { "mean": heads.mean, "std": heads.std },
        }))
    }

    /// Renders overlays for the configured test scenes from the dumps of each seed.
    pub fn cmd_overlay(&self) -> Result<RunReport> {
        let t = Instant::now();
        let test = self.load_data()?.test;
        let (_, arm) = self.default_arm()?;
        let mut ids: Vec<u64> = self.config.list("overlay.scenes")?;
        if ids.is_empty() {
            ids = test.iter().take(4).map(|s| s.id).collect();
        }
        let max_masks: usize = self.config.get("overlay.max_masks")?;
        let scale: usize = self.config.get("overlay.scale")?;
        let dir = self.out.join("overlays");
        std::fs::create_dir_all(&dir)?;
        let mut written = Vec::new();
        for seed in self.config.seeds()? {
            let dump_dir = self.dump_dir(&arm, seed);
            for &id in &ids {
                let scene = test
                    .iter()
                    .find(|s| s.id == id)
                    .ok_or_else(|| Error::Config(format!("scene {id} is not in the test split")))?;
                let items = read_dump(&dump_dir, id)?;
                let img = render_overlay(&scene.image, &items, max_masks, scale);
                let path = dir.join(format!("{arm}-seed{seed}-scene{id}.ppm"));
                img.write_ppm(&path)?;
                written.push(path.display().to_string());
            }
        }
        let metrics = serde_json::json!({ "arm": arm, "scenes": ids, "images": written.len() });
        self.report("overlay", t, BTreeMap::new(), metrics, written)
    }
}

fn read_dump(dir: &Path, id: u64) -> Result<Vec<OverlayItem>> {
    let path: PathBuf = dir.join(format!("scene{id}.json"));
    let bytes = std::fs::read(&path).map_err(|_| Error::State(format!("no grounding dump {}; run eval-gcg first", path.display())))?;
    let dump: SceneDump = serde_json::from_slice(&bytes)?;
    dump.phrases
        .into_iter()
        .map(|p| {
            let mask = p.mask_path.map(|m| Mask::read_pgm(&dir.join(m))).transpose()?;
            Ok(OverlayItem {
                text: p.text,
                point: (p.point[0], p.point[1]),
                mask,
                score: 1.0,
            })
        })
        .collect()
}
