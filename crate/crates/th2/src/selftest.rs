//! Fast aggregate of the module oracles, run by `th2 selftest`.

use std::sync::Arc;

use serde::Serialize;
use th2_core::coords::{decode_box, encode_box, encode_box_digits, BBox, CoordVocab, DetectionHead};
use th2_core::crop::{plan_crop, CropConfig};
use th2_core::gradcheck::{check_gradient, GradCheck};
use th2_core::mix::Exhausted;
use th2_core::nn::ParamStore;
use th2_core::packing::{pack, PackConfig, PackSample};
use th2_core::planner::{partition, StageModel};
use th2_core::resampler::{
    invert_permutation, rearrange_permutation, EncoderConfig, Frontend, FrontendConfig, ResamplerConfig, RoutingTable,
};
use th2_core::spe::spe_interpolate;
use th2_core::{Image, SplitMix64, Tape, Tensor};

use crate::pipeline::{DatasetSpec, Emitted, Pipeline, PipelineConfig};
use crate::shard::{build_shards, Member, ShardOptions};
use crate::source::{MemorySource, SharedSource};
use crate::Result;

#[derive(Debug, Serialize)]
pub struct Row {
    pub check: &'static str,
    pub pass: bool,
    pub detail: String,
}

type Check = fn(u64) -> std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn crop() -> std::result::Result<String, String> {
    let cfg = CropConfig::default();
    let p = plan_crop(896, 672, &cfg).map_err(|e| e.to_string())?;
    ensure((p.rows, p.cols) == (3, 4), || {
        format!("896x672 gave {}x{}", p.rows, p.cols)
    })?;
    for w in (1..6000).step_by(97) {
        for h in (1..6000).step_by(89) {
            let p = plan_crop(w, h, &cfg).map_err(|e| e.to_string())?;
            ensure(
                p.scaled_w * p.scaled_h <= 1_806_336 && p.scaled_w.max(p.scaled_h) <= 2688,
                || format!("{w}x{h} exceeds caps"),
            )?;
        }
    }
    Ok(String::from("3 rows x 4 cols; caps hold"))
}

fn compression(seed: u64) -> std::result::Result<String, String> {
    let cfg = FrontendConfig {
        crop: CropConfig {
            thumbnail: false,
            ..CropConfig::default()
        },
        encoder: EncoderConfig {
            depth: 4,
            width: 8,
            heads: 1,
            ..EncoderConfig::default()
        },
        resampler: ResamplerConfig::default(),
    };
    let mut store = ParamStore::new();
    let routing = RoutingTable::new(vec![3, 2, 1, 0]).map_err(|e| e.to_string())?;
    let fe = Frontend::new(cfg, routing, &mut store, &mut SplitMix64::new(seed)).map_err(|e| e.to_string())?;
    let mut counts = Vec::new();
    for (w, h) in [(448, 224), (224, 224)] {
        let img = Image::from_fn(w, h, 3, |x, y, c| ((x + 2 * y + c) % 13) as f64 / 13.0).map_err(|e| e.to_string())?;
        let (t, _) = fe.compress(&store, &img).map_err(|e| e.to_string())?;
        counts.push(t.shape()[0]);
    }
    ensure(counts == [32, 16], || format!("token counts {counts:?}"))?;
    Ok(String::from("448x224 -> 32 tokens, 224x224 -> 16"))
}

fn coords(seed: u64) -> std::result::Result<String, String> {
    let v = CoordVocab::default();
    let mut rng = SplitMix64::new(seed);
    for _ in 0..1000 {
        let (a, b, c, d) = (rng.next_f64(), rng.next_f64(), rng.next_f64(), rng.next_f64());
        let bx = BBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).map_err(|e| e.to_string())?;
        let t = encode_box(&bx, &v);
        ensure(t.len() == 7 && encode_box_digits(&bx).len() == 25, || {
            String::from("token counts")
        })?;
        let back = decode_box(&t, &v).map_err(|e| e.to_string())?;
        for (x, y) in bx.coords().iter().zip(back.coords()) {
            ensure((x - y).abs() <= 0.5 / 999.0 + 1e-15, || {
                format!("round trip {x} -> {y}")
            })?;
        }
    }
    Ok(String::from("7 / 25 tokens; round trip within half a bin"))
}

fn spe(seed: u64) -> std::result::Result<String, String> {
    let mut rng = SplitMix64::new(seed);
    let e0: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let e1: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
    for k in 0..=20 {
        let e = spe_interpolate(&e0, &e1, k as f64 / 20.0).map_err(|e| e.to_string())?;
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure((n - 8f64.sqrt()).abs() < 1e-9, || format!("norm {n}"))?;
    }
    Ok(String::from("per-head norm sqrt(d_h)"))
}

fn permutation() -> std::result::Result<String, String> {
    for r in 1..=12 {
        for c in 1..=12 {
            let p = rearrange_permutation(r, c);
            let inv = invert_permutation(&p);
            ensure(p.iter().enumerate().all(|(i, &x)| inv[x] == i), || {
                format!("{r}x{c} not a bijection")
            })?;
        }
    }
    Ok(String::from("bijection for grids up to 12x12"))
}

fn gradients(seed: u64) -> std::result::Result<String, String> {
    let mut rng = SplitMix64::new(seed);
    let x = Tensor::new([3, 5], (0..15).map(|_| rng.uniform(-1.0, 1.0)).collect()).map_err(|e| e.to_string())?;
    let w = Tensor::new([5, 4], (0..20).map(|_| rng.uniform(-1.0, 1.0)).collect()).map_err(|e| e.to_string())?;
    let report = check_gradient(&x, GradCheck::default(), |tape: &mut Tape, v| {
        let wv = tape.constant(w.clone());
        let m = tape.matmul(v, wv)?;
        let s = tape.softmax_rows(m)?;
        let g = tape.gelu(s)?;
        tape.sum(g)
    })
    .map_err(|e| e.to_string())?;
    ensure(report.passed(), || format!("{report:?}"))?;
    Ok(format!("max relative error {:.2e}", report.max_rel_err))
}

fn resume(seed: u64) -> std::result::Result<String, String> {
    let dir = std::env::temp_dir().join(format!("th2-selftest-{}-{seed}", std::process::id()));
    let result = resume_in(&dir, seed);
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn resume_in(dir: &std::path::Path, seed: u64) -> std::result::Result<String, String> {
    let mut rng = SplitMix64::new(seed);
    let samples: Vec<Vec<Member>> = (0..40)
        .map(|_| {
            let len = 1 + rng.below(900) as usize;
            let tokens: Vec<u32> = (0..len).map(|i| i as u32).collect();
            let body = serde_json::json!({ "tokens": tokens, "tiles": rng.below(20) });
            vec![Member::new("json", body.to_string().into_bytes())]
        })
        .collect();
    let opts = ShardOptions {
        dataset: String::from("selftest"),
        samples_per_chunk: 7,
        seed,
        on_exhausted: Exhausted::Drop,
    };
    build_shards(&samples, &opts, dir).map_err(|e| e.to_string())?;
    let src: SharedSource = Arc::new(MemorySource::load_dir(dir).map_err(|e| e.to_string())?);
    let config = PipelineConfig {
        datasets: vec![DatasetSpec {
            path: dir.to_path_buf(),
            weight: 1.0,
        }],
        workers: 3,
        seed,
        pack: Some(PackConfig::default()),
    };
    let collect = |p: &mut Pipeline, n: usize| -> Result<Vec<Emitted>> { p.by_ref().take(n).collect() };
    let mut full = Pipeline::with_sources(config.clone(), vec![Arc::clone(&src)]).map_err(|e| e.to_string())?;
    let all = collect(&mut full, usize::MAX).map_err(|e| e.to_string())?;
    let mut first = Pipeline::with_sources(config, vec![Arc::clone(&src)]).map_err(|e| e.to_string())?;
    let mut got = collect(&mut first, all.len() / 2).map_err(|e| e.to_string())?;
    let json = first.snapshot().to_json().map_err(|e| e.to_string())?;
    let state = crate::pipeline::ResumeState::from_json(&json).map_err(|e| e.to_string())?;
    let mut second = Pipeline::resume_with_sources(&state, vec![src]).map_err(|e| e.to_string())?;
    got.extend(collect(&mut second, usize::MAX).map_err(|e| e.to_string())?);
    let a = serde_json::to_string(&all).map_err(|e| e.to_string())?;
    let b = serde_json::to_string(&got).map_err(|e| e.to_string())?;
    ensure(a == b, || String::from("resumed stream differs"))?;
    Ok(format!("{} batches identical after resume", all.len()))
}

fn packing(seed: u64) -> std::result::Result<String, String> {
    let mut rng = SplitMix64::new(seed);
    let cfg = PackConfig::default();
    let samples: Vec<PackSample> = (0..500)
        .map(|i| PackSample {
            key: i.to_string(),
            tokens: vec![1; 1 + rng.below(1200) as usize],
            tiles: rng.below(30) as u32,
        })
        .collect();
    let mut n = 0;
    for b in pack(samples, cfg).map_err(|e| e.to_string())? {
        let b = b.map_err(|e| e.to_string())?;
        ensure(b.tokens.len() == 4096 && b.tiles <= 108, || {
            String::from("budget violated")
        })?;
        n += 1;
    }
    Ok(format!("{n} packs within 4096 tokens / 108 tiles"))
}

fn planner() -> std::result::Result<String, String> {
    let plan = partition(&StageModel {
        vision_cost: 1.0,
        layer_costs: vec![1.0; 3],
        stages: 2,
        micro_batches: 4,
    })
    .map_err(|e| e.to_string())?;
    ensure(plan.stage_layers == [1, 2], || format!("{:?}", plan.stage_layers))?;
    Ok(format!("bottleneck {}, bubble {:.3}", plan.bottleneck, plan.bubble))
}

fn detection(seed: u64) -> std::result::Result<String, String> {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParamStore::new();
    let head = DetectionHead::new(&mut store, 4, 8, &mut rng);
    let h = Tensor::new([2, 4], (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect()).map_err(|e| e.to_string())?;
    let mut tape = Tape::with_params(&store, false);
    let hv = tape.constant(h.clone());
    let p = head.predict(&mut tape, hv).map_err(|e| e.to_string())?;
    let pred = tape.value(p).clone();
    let shifted = Tensor::new([2, 4], pred.data().iter().map(|v| v + 0.3).collect()).map_err(|e| e.to_string())?;
    for (target, want) in [(pred, 0.0), (shifted, 0.3)] {
        let mut tape = Tape::with_params(&store, false);
        let hv = tape.constant(h.clone());
        let tv = tape.constant(target);
        let l = head.loss(&mut tape, hv, tv).map_err(|e| e.to_string())?;
        let got = tape.value(l).data()[0];
        ensure((got - want).abs() < 1e-12, || format!("loss {got}, expected {want}"))?;
    }
    Ok(String::from("zero at exact prediction, |delta| under offset"))
}

/// Runs every check and returns one row each.
pub fn run(seed: u64) -> Vec<Row> {
    let checks: [(&'static str, Check); 10] = [
        ("crop_plan", |_| crop()),
        ("compression", compression),
        ("coord_tokens", coords),
        ("spe_norms", spe),
        ("rearrangement", |_| permutation()),
        ("gradients", gradients),
        ("resume", resume),
        ("packing", packing),
        ("planner", |_| planner()),
        ("detection_head", detection),
    ];
    checks
        .into_iter()
        .map(|(check, f)| {
            let (pass, detail) = match f(seed) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            Row { check, pass, detail }
        })
        .collect()
}
