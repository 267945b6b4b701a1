//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Trained models are cached under the cargo target tmp directory (or
//! `EGL_ACCEPT_DIR`), so only the first run pays for training. Setting
//! `EGL_ACCEPT_QUICK` runs only the criteria that need no trained model.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::oracles::reduce_oracle;
use common::random_trace;
use egl_core::encoders::{EncoderConfig, NoiseDraw, NoiseSchedule, UNetConfig, UNetToy, VisualStack};
use egl_core::grounding::{normalize_sequence, per_head_map, reduce_attention};
use egl_core::harness::{AblationAxis, ExperimentConfig, Harness};
use egl_core::lmm::{train_lmm, DecoderLayer, LmConfig, Lmm, PromptLayout};
use egl_core::numerics::{check_gradient, ParamId, ParamStore, Sampler, Tensor};
use egl_core::scene::Vocabulary;
use egl_core::segmenter::{segment_point, DEFAULT_COLOR_TOL};
use serde_json::Value;

struct Tally {
    failed: usize,
}

impl Tally {
    fn line(&mut self, id: usize, pass: bool, what: &str, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} criterion {id}: {what} ({detail})", if pass { "PASS" } else { "FAIL" });
    }

    fn error(&mut self, id: usize, what: &str, e: impl std::fmt::Display) {
        self.line(id, false, what, format!("error: {e}"));
    }
}

fn ids_with(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
    store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect()
}

fn criterion_1(t: &mut Tally) {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut single_zero = true;
    for s in 0..200u64 {
        let steps = 1 + (s as usize % 9);
        let trace = random_trace(s, 2, 3, 4, 4, steps);
        let maps: Vec<_> = (0..steps).map(|k| reduce_attention(&trace, k, (4, 4)).unwrap()).collect();
        let norm = normalize_sequence(&maps).unwrap();
        for c in 0..16 {
            worst = worst.max(norm.iter().map(|m| m.data[c]).sum::<f64>().abs());
        }
        if steps == 1 {
            single_zero &= norm[0].data.iter().all(|&v| v == 0.0);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    t.line(1, worst < 1e-9 && single_zero && secs < 1.0, "normalized maps sum to zero", format!("max |sum| {worst:.1e}, r=1 zero {single_zero}, {secs:.2}s"));
}

fn criterion_2(t: &mut Tally) {
    let (mut red, mut heads): (f64, f64) = (0.0, 0.0);
    for s in 0..100u64 {
        let (l, h, gh, gw) = (1 + s as usize % 4, 1 + s as usize % 3, 2 + s as usize % 3, 3);
        let trace = random_trace(1000 + s, l, h, gh, gw, 3);
        for k in 0..3 {
            let got = reduce_attention(&trace, k, (gh, gw)).unwrap();
            let want = reduce_oracle(&trace, k, gh, gw);
            red = red.max(got.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            let mut mean = vec![0.0; gh * gw];
            for li in 0..l {
                for hi in 0..h {
                    let m = per_head_map(&trace, k, li, hi, (gh, gw)).unwrap();
                    mean.iter_mut().zip(&m.data).for_each(|(a, b)| *a += b);
                }
            }
            let n = (l * h) as f64;
            heads = heads.max(got.data.iter().zip(&mean).map(|(a, b)| (a - b / n).abs()).fold(0.0, f64::max));
        }
    }
    t.line(2, red < 1e-12 && heads < 1e-12, "reduction equals the triple-loop oracle", format!("max diff {red:.1e}, head-mean diff {heads:.1e}"));
}

fn criterion_3(t: &mut Tally) {
    let start = Instant::now();
    let mut results = Vec::new();

    // (a) one decoder layer on a random sequence
    let mut store = ParamStore::new();
    let mut rng = Sampler::new(31);
    let cfg = LmConfig { d_model: 16, n_layer: 1, n_head: 2, d_mlp: 32, ..LmConfig::default() };
    let layer = DecoderLayer::new(&mut store, "blk", &cfg, &mut rng);
    let x = rng.gaussian_tensor(&[10, 16], 1.0);
    let target = rng.gaussian_tensor(&[10, 16], 1.0);
    let ids = ids_with(&store, "blk.");
    results.push(("decoder layer", check_gradient(&mut store, &ids, 60, 1, |g| {
        let xv = g.constant(x.clone());
        let out = layer.forward(g, xv, 2, 2)?;
        let tv = g.constant(target.clone());
        g.mse(out.x, tv)
    })));

    // (b) U-Net with caption cross-attention
    let mut store = ParamStore::new();
    let ucfg = UNetConfig { resolution: 8, c1: 4, c2: 6, c3: 8, cond_dim: 8, temb_dim: 8, vocab: 36 };
    let unet = UNetToy::new(&mut store, ucfg, &mut rng);
    let schedule = NoiseSchedule::default();
    let planes = vec![rng.gaussian_vec(8 * 8 * 3, 0.5)];
    let eps = vec![rng.gaussian_vec(8 * 8 * 3, 1.0)];
    let vocab = Vocabulary::standard();
    let cond = vocab.tokenize("a red circle .").unwrap();
    let ids = ids_with(&store, UNetToy::PREFIX);
    results.push(("u-net", check_gradient(&mut store, &ids, 60, 2, |g| {
        egl_core::encoders::denoising_loss(g, &unet, &schedule, &planes, &[100], &eps, &cond)
    })));

    // (c) projector with positional embedding and implicit captioner behind frozen encoders
    let mut store = ParamStore::new();
    let visual = VisualStack::new(&mut store, EncoderConfig::default(), NoiseSchedule::default(), &mut rng).unwrap();
    let lm = LmConfig { d_model: 16, n_layer: 1, n_head: 2, d_mlp: 16, ..LmConfig::default() };
    let lmm = Lmm::new(&mut store, visual, lm, PromptLayout::standard(&vocab), &mut rng).unwrap();
    egl_core::encoders::EncoderSet::freeze(&mut store);
    let pe = store.id(VisualStack::PE_NAME).unwrap();
    store.tensor_mut(pe).data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.gaussian());
    let scene = &common::scenes(1, 77)[0];
    let input = lmm.visual.prepare(&store, &scene.image).unwrap();
    let hw = lmm.visual.tokens();
    let target = Tensor::new(vec![hw, 16], rng.gaussian_vec(hw * 16, 1.0)).unwrap();
    let mut ids = vec![pe];
    ids.extend(ids_with(&store, VisualStack::IC_PREFIX));
    ids.extend(ids_with(&store, "proj."));
    results.push(("projector+pe+ic", check_gradient(&mut store, &ids, 60, 3, |g| {
        let v = lmm.visual_tokens(g, &[&input], &NoiseDraw::Evaluation)?;
        let tv = g.constant(target.clone());
        g.mse(v, tv)
    })));

    let secs = start.elapsed().as_secs_f64();
    let mut pass = secs < 60.0;
    let mut parts = Vec::new();
    for (name, r) in results {
        match r {
            Ok(r) => {
                pass &= r.max_rel_error < 1e-4 && r.coords_checked >= 50;
                parts.push(format!("{name} {:.1e} @{}", r.max_rel_error, r.coords_checked));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name} error {e}"));
            }
        }
    }
    t.line(3, pass, "gradients match central differences", format!("{}, {secs:.1}s", parts.join(", ")));
}

fn harness(dir: &PathBuf) -> Harness {
    Harness::new(ExperimentConfig::default(), dir, false)
}

fn criterion_4(t: &mut Tally, h: &Harness) -> egl_core::Result<()> {
    let splits = h.load_data()?;
    let encoders = h.encoders(&splits)?;
    let enc = h.config.encoder_config()?;
    let (mut store, lmm) = h.build_model(&enc, 0, &encoders.0)?;
    let inputs = h.prepare_inputs(&store, &lmm, &splits.train)?;
    let groups = [UNetToy::PREFIX, "clip.", VisualStack::PE_NAME, VisualStack::IC_PREFIX, "proj."];
    let before: Vec<String> = groups.iter().map(|p| store.hash_prefix(p)).collect();
    let cfg = egl_core::lmm::TrainConfig { epochs: 1, ..h.config.train_config(0)? };
    let log = train_lmm(&mut store, &lmm, &splits.train, &inputs, h.vocab.eos(), &cfg)?;
    let after: Vec<String> = groups.iter().map(|p| store.hash_prefix(p)).collect();
    let frozen = before[0] == after[0] && before[1] == after[1];
    let learned = (2..5).all(|k| before[k] != after[k]);
    t.line(4, frozen && learned, "one epoch keeps encoders and moves pe/ic/projector", format!("{} steps, frozen unchanged {frozen}, learned changed {learned}", log.losses.len()));
    Ok(())
}

fn stats_mean(v: &Value) -> f64 {
    v["stats"]["mean"].as_f64().unwrap_or(f64::NAN)
}

fn training_criteria(t: &mut Tally, h: &Harness) -> egl_core::Result<()> {
    h.cmd_train()?;
    let inst = h.cmd_eval_instseg()?;
    let base = inst.metrics["baseline"]["pacc"].as_f64().unwrap_or(0.0);
    let per_seed: Vec<f64> = inst.metrics["model"].as_array().unwrap().iter().map(|r| r["pacc"].as_f64().unwrap_or(0.0)).collect();
    t.line(5, per_seed.iter().all(|&p| p >= 2.0 * base), "model PAcc at least twice the random-point baseline per seed", format!("model {per_seed:.3?}, baseline {base:.3}"));

    let gcg = h.cmd_eval_gcg()?;
    let recall = gcg.metrics["recall"]["mean"].as_f64().unwrap_or(0.0);
    let seeds: Vec<f64> = gcg.metrics["recall"]["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap_or(0.0)).collect();
    t.line(6, recall >= 0.5, "grounding mask recall at least 0.5", format!("mean recall {recall:.3}, per seed {seeds:.3?}"));

    let norm = h.cmd_ablate(AblationAxis::AttnNorm)?;
    let mode = h.cmd_ablate(AblationAxis::PromptMode)?;
    let (on, off) = (stats_mean(&norm.metrics["rows"][0]), stats_mean(&norm.metrics["rows"][1]));
    let (point, mask) = (stats_mean(&mode.metrics["rows"][0]), stats_mean(&mode.metrics["rows"][1]));
    t.line(7, on >= off && point >= mask, "normalize on >= off and point >= mask", format!("on {on:.3} off {off:.3}, point {point:.3} mask {mask:.3}"));

    let heads = h.cmd_ablate(AblationAxis::PerHead)?;
    let all = &heads.metrics["all_heads"];
    let (all_mean, all_std) = (all["mean"].as_f64().unwrap_or(0.0), all["std"].as_f64().unwrap_or(0.0));
    let ind = &heads.metrics["individual_heads"];
    let (ind_mean, ind_std) = (ind["mean"].as_f64().unwrap_or(0.0), ind["std"].as_f64().unwrap_or(0.0));
    t.line(8, all_mean > ind_mean && ind_std > all_std, "all-head mean beats individual heads", format!("all {all_mean:.3} ± {all_std:.3}, heads {ind_mean:.3} ± {ind_std:.3}"));

    let variants = h.cmd_ablate(AblationAxis::EncoderVariant)?;
    let rows = variants.metrics["rows"].as_array().unwrap();
    let loss = |name: &str| rows.iter().find(|r| r["arm"] == name).map(stats_mean).unwrap_or(f64::NAN);
    let (ic, pe, sd) = (loss("sd+pe+ic"), loss("sd+pe"), loss("sd_only"));
    t.line(9, ic <= pe && pe <= sd, "fixed-budget loss sd+pe+ic <= sd+pe <= sd_only", format!("{ic:.4} <= {pe:.4} <= {sd:.4}"));

    let again = h.cmd_eval_gcg()?;
    let same = serde_json::to_vec(&gcg.metrics)? == serde_json::to_vec(&again.metrics)?;
    t.line(12, same, "repeated eval-gcg metric blocks are byte-identical", format!("{} bytes", serde_json::to_vec(&gcg.metrics)?.len()));
    Ok(())
}

fn criterion_10(t: &mut Tally) {
    let start = Instant::now();
    let r = common::metric_cases::check_rounds(500, 99);
    let secs = start.elapsed().as_secs_f64();
    t.line(10, r.is_ok() && secs < 60.0, "metrics equal the exhaustive evaluator", format!("{}, {secs:.1}s", r.err().unwrap_or_else(|| "500 instances".into())));
}

fn criterion_11(t: &mut Tally) {
    let mut rng = Sampler::new(11);
    let (mut checked, mut wrong) = (0, 0);
    for scene in common::scenes(200, 40_000) {
        for inst in &scene.instances {
            let px: Vec<_> = inst.mask.pixels().collect();
            for _ in 0..3 {
                checked += 1;
                if segment_point(&scene.image, px[rng.below(px.len())], DEFAULT_COLOR_TOL).ok().as_ref() != Some(&inst.mask) {
                    wrong += 1;
                }
            }
        }
    }
    t.line(11, wrong == 0, "point prompts return exact instance masks", format!("{wrong} of {checked} wrong"));
}

fn main() {
    let dir = std::env::var_os("EGL_ACCEPT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    let mut t = Tally { failed: 0 };
    criterion_1(&mut t);
    criterion_2(&mut t);
    criterion_3(&mut t);
    criterion_10(&mut t);
    criterion_11(&mut t);

    if std::env::var_os("EGL_ACCEPT_QUICK").is_some() {
        println!("training-based criteria 4-9 and 12 not run (EGL_ACCEPT_QUICK set)");
        std::process::exit(i32::from(t.failed > 0));
    }
    let h = harness(&dir);
    if h.load_data().is_err() {
        if let Err(e) = Harness::new(ExperimentConfig::default(), &dir, true).cmd_gen_data() {
            t.error(4, "dataset generation", e);
        }
    }
    if let Err(e) = criterion_4(&mut t, &h) {
        t.error(4, "freeze contract", e);
    }
    if let Err(e) = training_criteria(&mut t, &h) {
        for id in [5, 6, 7, 8, 9, 12] {
            t.error(id, "training-based criteria", &e);
        }
    }
    println!("{} criteria failed", t.failed);
    if t.failed > 0 {
        std::process::exit(1);
    }
}
