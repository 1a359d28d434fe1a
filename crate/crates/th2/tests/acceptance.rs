//! Acceptance suite: one pass/fail line per criterion, each against a wall-clock budget.
//!
//! Run with `cargo test -p th2 --test acceptance -- --nocapture` to see the table.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use th2::pipeline::{DatasetSpec, Emitted, Pipeline, PipelineConfig, ResumeState};
use th2::shard::{build_shards, format_key, Member, ShardOptions};
use th2::source::{MemorySource, SharedSource};
use th2::stream::DatasetReader;
use th2_core::coords::{decode_box, encode_box, encode_box_digits, l1_loss, BBox, CoordVocab, DetectionHead};
use th2_core::crop::{plan_crop, CropConfig};
use th2_core::gradcheck::{check_gradient, check_input_gradient, check_param_gradients, GradCheck, GradReport};
use th2_core::mix::Exhausted;
use th2_core::nn::ParamStore;
use th2_core::packing::{PackConfig, PackSample, PackedBatch, Packer, PAD_SEGMENT};
use th2_core::planner::{partition, StageModel};
use th2_core::resampler::{
    group_concat, invert_permutation, layout_permutation, rearrange_permutation, EncoderConfig, Frontend,
    FrontendConfig, QueryLayout, Resampler, ResamplerConfig, RoutingTable, VitFeatures,
};
use th2_core::spe::{spe_interpolate, SpeTable};
use th2_core::{Error, Image, SplitMix64, Tape, Tensor, Var};

type Outcome = Result<String, String>;

trait Ctx<T> {
    fn ctx(self, what: &str) -> Result<T, String>;
}

impl<T, E: Display> Ctx<T> for Result<T, E> {
    fn ctx(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn grad_ok(name: &str, r: GradReport) -> Result<f64, String> {
    ensure(r.passed(), || {
        format!(
            "{name}: {} of {} coordinates off, e.g. {:?}",
            r.mismatches.len(),
            r.checked,
            r.mismatches.first()
        )
    })?;
    Ok(r.max_rel_err)
}

// 1

fn compression_constant() -> Outcome {
    let cfg = FrontendConfig {
        crop: CropConfig {
            thumbnail: false,
            ..CropConfig::default()
        },
        encoder: EncoderConfig {
            width: 16,
            depth: 8,
            heads: 2,
            ..EncoderConfig::default()
        },
        resampler: ResamplerConfig::default(),
    };
    let mut store = ParamStore::new();
    let routing = RoutingTable::new(vec![7, 5, 3, 1]).ctx("routing")?;
    let fe = Frontend::new(cfg, routing.clone(), &mut store, &mut SplitMix64::new(1)).ctx("frontend")?;
    for (w, h, want) in [(448, 224, 32), (224, 224, 16)] {
        let img = Image::from_fn(w, h, 3, |x, y, c| ((x * 7 + y * 3 + c) % 29) as f64 / 29.0).ctx("image")?;
        let (tokens, _) = fe.compress(&store, &img).ctx("compress")?;
        ensure(tokens.shape()[0] == want, || {
            format!("{w}x{h}: {} tokens, want {want}", tokens.shape()[0])
        })?;
    }

    // Exhaustive over every grid up to 12x12: patch tokens / emitted tokens through
    // the real layout, gather and grouping ops.
    let grid = fe.encoder().grid();
    let rcfg = ResamplerConfig::default();
    let d = rcfg.d_model;
    for rows in 1..=12 {
        for cols in 1..=12 {
            let layout = QueryLayout::new(rows, cols, rcfg.query_grid);
            let mut tape = Tape::new();
            let q = tape.constant(Tensor::zeros([layout.len(), d]));
            let raster = tape
                .gather_rows(q, &invert_permutation(&layout_permutation(&layout)))
                .ctx("gather")?;
            let grouped = group_concat(&mut tape, raster, layout.global_width()).ctx("group")?;
            let out = tape.shape(grouped)[0];
            let patches = rows * cols * grid * grid;
            ensure(patches == 16 * out, || {
                format!("{rows}x{cols}: {patches} patches vs {out} tokens")
            })?;
        }
    }

    // The full resampler on synthetic encoder features for small grids.
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(2);
    let width = 8;
    let res = Resampler::new(rcfg, routing, width, &mut store, &mut rng).ctx("resampler")?;
    let recorded = vec![1, 3, 5, 7];
    for (rows, cols) in [(1, 1), (1, 3), (2, 2), (3, 1), (2, 3)] {
        let mut tape = Tape::with_params(&store, false);
        let maps: Vec<Vec<Var>> = (0..rows * cols)
            .map(|_| {
                recorded
                    .iter()
                    .map(|_| tape.constant(random(&[grid, grid, width], &mut rng)))
                    .collect()
            })
            .collect();
        let feats = VitFeatures::new(recorded.clone(), maps).ctx("features")?;
        let out = res.compress(&mut tape, &feats, rows, cols).ctx("resample")?;
        let n = tape.shape(out)[0];
        ensure(rows * cols * grid * grid == 16 * n, || {
            format!("resampler {rows}x{cols}: {n} tokens")
        })?;
    }
    Ok(format!(
        "448x224 -> 32, 224x224 -> 16; ratio 16 on all 144 grids (encoder grid {grid})"
    ))
}

// 2

fn crop_example() -> Outcome {
    let cfg = CropConfig::default();
    let p = plan_crop(896, 672, &cfg).ctx("plan")?;
    ensure((p.cols, p.rows) == (4, 3), || {
        format!("896x672 -> {} cols x {} rows", p.cols, p.rows)
    })?;
    let mut max_px = 0;
    let mut max_edge = 0;
    for r in 1..=40 {
        for c in 1..=40 {
            let expect = r <= 12 && c <= 12 && r * c <= 36;
            ensure(cfg.admits(r, c) == expect, || format!("admissibility of {r}x{c}"))?;
            if expect {
                max_px = max_px.max(r * c * 224 * 224);
                max_edge = max_edge.max(r.max(c) * 224);
            }
        }
    }
    ensure(max_px == 1_806_336 && max_edge == 2688, || {
        format!("caps {max_px} px, {max_edge} edge")
    })?;
    ensure(cfg.max_pixels() == max_px && cfg.max_long_edge() == max_edge, || {
        String::from("reported caps differ")
    })?;
    let mut plans = 0;
    for w in (1..=12_000).step_by(53) {
        for h in (1..=12_000).step_by(59) {
            let p = plan_crop(w, h, &cfg).ctx("plan")?;
            ensure(cfg.admits(p.rows, p.cols), || {
                format!("{w}x{h} -> {}x{}", p.rows, p.cols)
            })?;
            ensure(
                p.scaled_w * p.scaled_h <= max_px && p.scaled_w.max(p.scaled_h) <= max_edge,
                || format!("{w}x{h} exceeds the caps"),
            )?;
            plans += 1;
        }
    }
    Ok(format!("4 cols x 3 rows; caps 1806336 px / 2688 px over {plans} plans"))
}

// 3

fn coordinate_tokens() -> Outcome {
    let v = CoordVocab::default();
    let mut rng = SplitMix64::new(3);
    let mut worst: f64 = 0.0;
    for i in 0..10_000 {
        let (a, b, c, d) = match i {
            0 => (0.0, 0.0, 1.0, 1.0),
            1 => (0.5, 0.5, 0.5, 0.5),
            _ => (rng.next_f64(), rng.next_f64(), rng.next_f64(), rng.next_f64()),
        };
        let bx = BBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).ctx("box")?;
        let t = encode_box(&bx, &v);
        ensure(t.len() == 7, || format!("{} coordinate tokens", t.len()))?;
        let digits = encode_box_digits(&bx);
        ensure(digits.len() == 25, || format!("{} digit tokens", digits.len()))?;
        let back = decode_box(&t, &v).ctx("decode")?;
        for (&x, y) in bx.coords().iter().zip(back.coords()) {
            // Distance to the decoded bin in bin units, exactly: x·999 = p + r.
            let q = (y * 999.0).round();
            ensure(y == q / 999.0, || format!("{y} is not a bin value"))?;
            let p = x * 999.0;
            let r = x.mul_add(999.0, -p);
            let bins = ((p - q) + r).abs();
            ensure(bins <= 0.5, || format!("{x} decoded to {y}: {bins} bins away"))?;
            worst = worst.max(bins);
        }
    }
    Ok(format!(
        "7 / 25 tokens for 10^4 boxes; worst round trip {worst:.4} bins (limit 0.5 = 0.5/999)"
    ))
}

// 4

/// Neumaier-compensated dot product.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut s, mut comp) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        let t = s + p;
        comp += if s.abs() >= p.abs() { (s - t) + p } else { (p - t) + s };
        s = t;
    }
    s + comp
}

/// Rotation of `u0` towards `u1` by `t·θ` in their common plane.
fn slerp_oracle(e0: &[f64], e1: &[f64], t: f64) -> (Vec<f64>, f64) {
    let s = (e0.len() as f64).sqrt();
    let n0 = dot(e0, e0).sqrt();
    let n1 = dot(e1, e1).sqrt();
    let u0: Vec<f64> = e0.iter().map(|v| v / n0).collect();
    let u1: Vec<f64> = e1.iter().map(|v| v / n1).collect();
    let c = dot(&u0, &u1);
    let mut w: Vec<f64> = u0.iter().zip(&u1).map(|(a, b)| b - c * a).collect();
    let wn = dot(&w, &w).sqrt();
    let theta = wn.atan2(c);
    w.iter_mut().for_each(|v| *v /= wn);
    let (ct, st) = ((t * theta).cos(), (t * theta).sin());
    (u0.iter().zip(&w).map(|(a, b)| s * (ct * a + st * b)).collect(), theta)
}

fn spe_correctness() -> Outcome {
    let heads = 8;
    let dh = 16;
    let mut rng = SplitMix64::new(4);
    let d = heads * dh;
    let e0 = random(&[d], &mut rng);
    let e1 = random(&[d], &mut rng);
    let (c0, c1) = (random(&[d], &mut rng), random(&[d], &mut rng));
    let table = SpeTable::new(e0.clone(), e1.clone(), c0, c1, heads).ctx("table")?;
    let (e0, e1) = (e0.into_data(), e1.into_data());
    let sqrt_dh = (dh as f64).sqrt();
    let (mut worst_norm, mut worst_angle, mut worst_oracle) = (0.0f64, 0.0f64, 0.0f64);
    for k in 0..100 {
        let t = k as f64 / 99.0;
        let row = table.row_embedding(t).ctx("row")?;
        for h in 0..heads {
            let (a, b) = (&e0[h * dh..(h + 1) * dh], &e1[h * dh..(h + 1) * dh]);
            let out = &row[h * dh..(h + 1) * dh];
            let direct = spe_interpolate(a, b, t).ctx("slerp")?;
            ensure(direct == out, || {
                String::from("table slice differs from per-head slerp")
            })?;
            worst_norm = worst_norm.max((dot(out, out).sqrt() - sqrt_dh).abs());
            let (oracle, theta) = slerp_oracle(a, b, t);
            let cos = (dot(out, a) / (dot(out, out).sqrt() * dot(a, a).sqrt())).clamp(-1.0, 1.0);
            worst_angle = worst_angle.max((cos.acos() - t * theta).abs());
            for (x, y) in out.iter().zip(&oracle) {
                worst_oracle = worst_oracle.max((x - y).abs());
            }
        }
    }
    ensure(worst_norm <= 1e-9, || format!("norm error {worst_norm:e}"))?;
    ensure(worst_angle <= 1e-9, || format!("angle error {worst_angle:e}"))?;
    ensure(worst_oracle <= 1e-9, || format!("oracle error {worst_oracle:e}"))?;

    // Endpoints are exactly the scaled, normalized inputs.
    for _ in 0..50 {
        let a: Vec<f64> = (0..dh).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..dh).map(|_| rng.uniform(-1.0, 1.0)).collect();
        for (t, e) in [(0.0, &a), (1.0, &b)] {
            let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            let want: Vec<f64> = e.iter().map(|v| sqrt_dh * (v / n)).collect();
            ensure(spe_interpolate(&a, &b, t).ctx("slerp")? == want, || {
                format!("endpoint t={t} not exact")
            })?;
        }
    }
    Ok(format!(
        "8 heads x 100 t: norm {worst_norm:.1e}, angle {worst_angle:.1e}, oracle {worst_oracle:.1e}; endpoints exact"
    ))
}

// 5

fn rearrangement() -> Outcome {
    for rows in 1..=12 {
        for cols in 1..=12 {
            let perm = rearrange_permutation(rows, cols);
            let n = rows * cols * 64;
            let seen: BTreeSet<usize> = perm.iter().copied().collect();
            ensure(
                perm.len() == n && seen.len() == n && seen.iter().next_back() == Some(&(n - 1)),
                || format!("{rows}x{cols} is not a bijection"),
            )?;
            let mut keyed: Vec<(usize, usize, usize)> = (0..n)
                .map(|i| {
                    let (tile, local) = (i / 64, i % 64);
                    ((tile / cols) * 8 + local / 8, (tile % cols) * 8 + local % 8, i)
                })
                .collect();
            keyed.sort_unstable();
            let sorted: Vec<usize> = keyed.into_iter().map(|k| k.2).collect();
            ensure(invert_permutation(&perm) == sorted, || {
                format!("{rows}x{cols} differs from the sort")
            })?;
        }
    }
    // Two side-by-side tiles: each raster row alternates a row of tile 0 with the same row of tile 1.
    let order = invert_permutation(&rearrange_permutation(1, 2));
    for r in 0..8 {
        let want: Vec<usize> = (r * 8..r * 8 + 8).chain(64 + r * 8..64 + r * 8 + 8).collect();
        ensure(order[r * 16..(r + 1) * 16] == want[..], || {
            format!("1x2 raster row {r}: {:?}", &order[r * 16..(r + 1) * 16])
        })?;
    }
    Ok(String::from(
        "matches the (row, col) sort and is a bijection for all 144 grids; 1x2 interleaves",
    ))
}

// 6

fn op_gradients() -> Result<usize, String> {
    let mut rng = SplitMix64::new(6);
    let cfg = GradCheck {
        rtol: 1e-3,
        ..GradCheck::default()
    };
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let w = random(&[4, 5], &mut rng);
    let bias = random(&[4], &mut rng);
    let gain = random(&[4], &mut rng);
    let map = random(&[4, 6, 3], &mut rng);
    let probe34 = random(&[3, 4], &mut rng);

    type Loss = Box<dyn Fn(&mut Tape, Var) -> th2_core::Result<Var>>;
    let weigh = |probe: Tensor| {
        move |tape: &mut Tape, out: Var| -> th2_core::Result<Var> {
            let p = tape.constant(probe.clone());
            let m = tape.mul(out, p)?;
            tape.sum(m)
        }
    };
    let p34 = weigh(probe34.clone());
    let p35 = weigh(random(&[3, 5], &mut rng));
    let p45 = weigh(random(&[4, 5], &mut rng));
    let p43 = weigh(random(&[4, 3], &mut rng));
    let p233 = weigh(random(&[2, 3, 3], &mut rng));
    let p64 = weigh(random(&[6, 4], &mut rng));
    let p32 = weigh(random(&[3, 2], &mut rng));
    let p26 = weigh(random(&[2, 6], &mut rng));

    let cases: Vec<(&str, Tensor, Loss)> = vec![
        ("matmul lhs", a.clone(), {
            let (w, p) = (w.clone(), p35.clone());
            Box::new(move |t, x| {
                let wv = t.constant(w.clone());
                let m = t.matmul(x, wv)?;
                p(t, m)
            })
        }),
        ("matmul rhs", w.clone(), {
            let (a, p) = (a.clone(), p35.clone());
            Box::new(move |t, x| {
                let av = t.constant(a.clone());
                let m = t.matmul(av, x)?;
                p(t, m)
            })
        }),
        ("add", a.clone(), {
            let (b, p) = (b.clone(), p34.clone());
            Box::new(move |t, x| {
                let bv = t.constant(b.clone());
                let y = t.add(x, bv)?;
                let z = t.add(bv, y)?;
                p(t, z)
            })
        }),
        ("sub", a.clone(), {
            let (b, p) = (b.clone(), p34.clone());
            Box::new(move |t, x| {
                let bv = t.constant(b.clone());
                let y = t.sub(x, bv)?;
                let z = t.sub(bv, y)?;
                p(t, z)
            })
        }),
        ("mul", a.clone(), {
            let (b, p) = (b.clone(), p34.clone());
            Box::new(move |t, x| {
                let bv = t.constant(b.clone());
                let y = t.mul(x, bv)?;
                let z = t.mul(y, x)?;
                p(t, z)
            })
        }),
        ("add_bias input", a.clone(), {
            let (bias, p) = (bias.clone(), p34.clone());
            Box::new(move |t, x| {
                let bv = t.constant(bias.clone());
                let y = t.add_bias(x, bv)?;
                p(t, y)
            })
        }),
        ("add_bias bias", bias.clone(), {
            let (a, p) = (a.clone(), p34.clone());
            Box::new(move |t, x| {
                let av = t.constant(a.clone());
                let y = t.add_bias(av, x)?;
                p(t, y)
            })
        }),
        ("scale", a.clone(), {
            let p = p34.clone();
            Box::new(move |t, x| {
                let y = t.scale(x, -1.7)?;
                p(t, y)
            })
        }),
        ("softmax_rows", a.clone(), {
            let p = p34.clone();
            Box::new(move |t, x| {
                let y = t.softmax_rows(x)?;
                p(t, y)
            })
        }),
        ("layer_norm input", a.clone(), {
            let (g, bias, p) = (gain.clone(), bias.clone(), p34.clone());
            Box::new(move |t, x| {
                let (gv, bv) = (t.constant(g.clone()), t.constant(bias.clone()));
                let y = t.layer_norm(x, gv, bv, 1e-5)?;
                p(t, y)
            })
        }),
        ("layer_norm gain", gain.clone(), {
            let (a, bias, p) = (a.clone(), bias.clone(), p34.clone());
            Box::new(move |t, x| {
                let (av, bv) = (t.constant(a.clone()), t.constant(bias.clone()));
                let y = t.layer_norm(av, x, bv, 1e-5)?;
                p(t, y)
            })
        }),
        ("layer_norm bias", bias.clone(), {
            let (a, g, p) = (a.clone(), gain.clone(), p34.clone());
            Box::new(move |t, x| {
                let (av, gv) = (t.constant(a.clone()), t.constant(g.clone()));
                let y = t.layer_norm(av, gv, x, 1e-5)?;
                p(t, y)
            })
        }),
        ("max_pool_2x2", map.clone(), {
            let p = p233.clone();
            Box::new(move |t, x| {
                let y = t.max_pool_2x2(x)?;
                p(t, y)
            })
        }),
        ("concat", a.clone(), {
            let (b, p) = (b.clone(), p64.clone());
            Box::new(move |t, x| {
                let bv = t.constant(b.clone());
                let y = t.concat(&[x, bv], 0)?;
                p(t, y)
            })
        }),
        ("concat axis 1", a.clone(), {
            let p = weigh(random(&[3, 8], &mut SplitMix64::new(61)));
            Box::new(move |t, x| {
                let y = t.concat(&[x, x], 1)?;
                p(t, y)
            })
        }),
        ("slice", a.clone(), {
            let p = p32.clone();
            Box::new(move |t, x| {
                let y = t.slice(x, 1, 1, 2)?;
                p(t, y)
            })
        }),
        ("gather_rows", a.clone(), {
            let p = p64.clone();
            Box::new(move |t, x| {
                let y = t.gather_rows(x, &[2, 0, 0, 1, 2, 2])?;
                p(t, y)
            })
        }),
        ("gelu", a.clone(), {
            let p = p34.clone();
            Box::new(move |t, x| {
                let y = t.gelu(x)?;
                p(t, y)
            })
        }),
        ("transpose", a.clone(), {
            let p = p43.clone();
            Box::new(move |t, x| {
                let y = t.transpose(x)?;
                p(t, y)
            })
        }),
        ("reshape", a.clone(), {
            let p = p26.clone();
            Box::new(move |t, x| {
                let y = t.reshape(x, &[2, 6])?;
                p(t, y)
            })
        }),
        (
            "sum",
            a.clone(),
            Box::new(|t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            }),
        ),
        (
            "mean",
            a.clone(),
            Box::new(|t, x| {
                let y = t.mul(x, x)?;
                t.mean(y)
            }),
        ),
        ("abs", a.clone(), {
            let p = p34.clone();
            Box::new(move |t, x| {
                let y = t.abs(x)?;
                p(t, y)
            })
        }),
        ("matmul chain", w.clone(), {
            let p = p45.clone();
            Box::new(move |t, x| {
                let xt = t.transpose(x)?;
                let g = t.matmul(x, xt)?;
                let s = t.softmax_rows(g)?;
                let y = t.matmul(s, x)?;
                p(t, y)
            })
        }),
    ];
    let n = cases.len();
    for (name, x, f) in cases {
        grad_ok(name, check_gradient(&x, cfg, f).ctx(name)?)?;
    }
    Ok(n)
}

/// Returns (coordinates checked, parameter tensors).
fn frontend_gradients() -> Result<(usize, usize), String> {
    let cfg = FrontendConfig {
        crop: CropConfig {
            thumbnail: false,
            ..CropConfig::default()
        },
        encoder: EncoderConfig {
            width: 8,
            depth: 8,
            heads: 1,
            ..EncoderConfig::default()
        },
        resampler: ResamplerConfig::default(),
    };
    let mut store = ParamStore::new();
    let routing = RoutingTable::new(vec![7, 5, 3, 1]).ctx("routing")?;
    let fe = Frontend::new(cfg, routing, &mut store, &mut SplitMix64::new(7)).ctx("frontend")?;
    ensure(fe.config().resampler.d_model == 32, || String::from("d_model"))?;
    let img = Image::from_fn(448, 224, 3, |x, y, c| {
        (((x * 31 + y * 17 + c * 7) % 101) as f64) / 101.0
    })
    .ctx("image")?;
    let d_out = fe.config().resampler.d_out;
    let probe = random(&[32, d_out], &mut SplitMix64::new(8));
    let ids: Vec<_> = store.ids().collect();
    let gc = GradCheck {
        rtol: 1e-3,
        atol: 1e-7,
        max_coords: Some(1),
        seed: 9,
        ..GradCheck::default()
    };
    let report = check_param_gradients(&store, &ids, gc, |tape, _| {
        let out = fe.forward(tape, &img)?;
        let p = tape.constant(probe.clone());
        let m = tape.mul(out.tokens, p)?;
        tape.sum(m)
    })
    .ctx("frontend check")?;
    let checked = report.checked;
    grad_ok("frontend", report)?;
    Ok((checked, store.len()))
}

fn gradient_integrity() -> Outcome {
    let ops = op_gradients()?;
    let (coords, tensors) = frontend_gradients()?;
    Ok(format!(
        "{ops} op cases pass; frontend: {coords} coordinates over {tensors} parameter tensors within rtol 1e-3"
    ))
}

// 7

fn shard_samples(n: usize, rng: &mut SplitMix64) -> Vec<Vec<Member>> {
    (0..n)
        .map(|i| {
            let len = 1 + rng.below(900) as usize;
            let tokens: Vec<u32> = (0..len).map(|t| (t * 3 + i) as u32 % 50_000).collect();
            let json = serde_json::json!({ "tokens": tokens, "tiles": rng.below(30) });
            vec![
                Member::new("json", json.to_string().into_bytes()),
                Member::new("txt", format!("sample {i}").into_bytes()),
            ]
        })
        .collect()
}

fn resume_case(case: usize, rng: &mut SplitMix64) -> Result<String, String> {
    let root = tempfile::tempdir().ctx("tempdir")?;
    let n_sets = 1 + rng.below(3) as usize;
    let workers = 1 + rng.below(4) as usize;
    let cycle = rng.below(4) == 0;
    let mut sources = Vec::new();
    let mut specs = Vec::new();
    let mut sizes = Vec::new();
    for d in 0..n_sets {
        let n = 5 + rng.below(50) as usize;
        let dir = root.path().join(format!("d{d}"));
        let opts = ShardOptions {
            dataset: format!("set{d}"),
            samples_per_chunk: 1 + rng.below(9) as usize,
            seed: rng.next_u64(),
            on_exhausted: if cycle && d == 0 {
                Exhausted::Cycle
            } else {
                Exhausted::Drop
            },
        };
        build_shards(&shard_samples(n, rng), &opts, &dir).ctx("build")?;
        sources.push(Arc::new(MemorySource::load_dir(&dir).ctx("load")?) as SharedSource);
        specs.push(DatasetSpec {
            path: dir,
            weight: rng.uniform(0.5, 3.0),
        });
        sizes.push(n);
    }

    for (src, &n) in sources.iter().zip(&sizes) {
        let mut reader = DatasetReader::open(Arc::clone(src), workers).ctx("reader")?;
        let mut seen = BTreeSet::new();
        for w in 0..workers {
            for s in reader.worker_mut(w).by_ref() {
                let key = s.ctx("stream")?.key;
                ensure(seen.insert(key.clone()), || {
                    format!("case {case}: {key} streamed twice")
                })?;
            }
        }
        let all: BTreeSet<String> = (0..n).map(format_key).collect();
        ensure(seen == all, || format!("case {case}: workers do not cover the dataset"))?;
    }

    let config = PipelineConfig {
        datasets: specs,
        workers,
        seed: rng.next_u64(),
        pack: (rng.below(2) == 0).then(PackConfig::default),
    };
    // A cycling source never ends; both runs stop at the same horizon.
    let horizon = if cycle { 120 } else { usize::MAX };
    let full: Vec<Emitted> = Pipeline::with_sources(config.clone(), sources.clone())
        .ctx("pipeline")?
        .take(horizon)
        .collect::<th2::Result<_>>()
        .ctx("full run")?;
    let cut = rng.below(full.len() as u64 + 1) as usize;
    let mut first = Pipeline::with_sources(config, sources.clone()).ctx("pipeline")?;
    let mut got: Vec<Emitted> = first.by_ref().take(cut).collect::<th2::Result<_>>().ctx("first leg")?;
    let json = first.snapshot().to_json().ctx("snapshot")?;
    let state = ResumeState::from_json(&json).ctx("parse snapshot")?;
    let second = Pipeline::resume_with_sources(&state, sources).ctx("resume")?;
    got.extend(
        second
            .take(horizon - cut.min(horizon))
            .collect::<th2::Result<Vec<_>>>()
            .ctx("second leg")?,
    );
    let (a, b) = (
        serde_json::to_vec(&full).ctx("json")?,
        serde_json::to_vec(&got).ctx("json")?,
    );
    ensure(a == b, || {
        format!("case {case}: resumed output differs at cut {cut} of {}", full.len())
    })?;
    Ok(format!("{}:{}", full.len(), cut))
}

fn resume_exactness() -> Outcome {
    let mut rng = SplitMix64::new(70);
    let mut items = 0;
    for case in 0..20 {
        let r = resume_case(case, &mut rng)?;
        items += r.split(':').next().and_then(|s| s.parse::<usize>().ok()).unwrap_or(0);
    }
    Ok(format!(
        "20 configurations, {items} emitted items, byte-identical after resume; workers disjoint and complete"
    ))
}

// 8

fn check_batch(b: &PackedBatch, members: &[PackSample], cfg: &PackConfig) -> Result<(), String> {
    ensure(b.tokens.len() == cfg.context && b.segments.len() == cfg.context, || {
        String::from("pack is not context-long")
    })?;
    ensure(b.used() <= 4096 && b.tiles <= 108, || {
        format!("budget: {} tokens, {} tiles", b.used(), b.tiles)
    })?;
    let keys: Vec<&str> = members.iter().map(|s| s.key.as_str()).collect();
    ensure(b.keys.iter().map(String::as_str).eq(keys.iter().copied()), || {
        String::from("pack keys differ from the oracle")
    })?;
    ensure(b.tiles == members.iter().map(|s| s.tiles).sum::<u32>(), || {
        String::from("tile total")
    })?;
    let mut pos = 0;
    for (k, s) in members.iter().enumerate() {
        let end = pos + s.tokens.len();
        ensure(b.tokens[pos..end] == s.tokens[..], || format!("tokens of {}", s.key))?;
        ensure(b.segments[pos..end].iter().all(|&g| g == k as u32 + 1), || {
            format!("segment of {}", s.key)
        })?;
        pos = end;
    }
    ensure(b.segments[pos..].iter().all(|&g| g == PAD_SEGMENT), || {
        String::from("padding segments")
    })?;
    ensure(b.tokens[pos..].iter().all(|&t| t == cfg.pad_id), || {
        String::from("padding ids")
    })?;
    Ok(())
}

/// Segment runs are contiguous, so the mask is block-diagonal iff `visible`
/// agrees with same-nonzero-segment on every pair; checked densely or by sampling.
fn check_mask(b: &PackedBatch, rng: &mut SplitMix64, dense: bool) -> Result<(), String> {
    let n = b.segments.len();
    let same = |i: usize, j: usize| b.segments[i] != PAD_SEGMENT && b.segments[i] == b.segments[j];
    if dense {
        let m = b.dense_mask();
        for i in 0..n {
            for j in 0..n {
                ensure(m[i * n + j] == same(i, j), || format!("mask ({i}, {j})"))?;
            }
        }
    } else {
        for _ in 0..256 {
            let (i, j) = (rng.below(n as u64) as usize, rng.below(n as u64) as usize);
            ensure(b.visible(i, j) == same(i, j), || format!("mask ({i}, {j})"))?;
        }
    }
    Ok(())
}

fn packing_budgets() -> Outcome {
    let cfg = PackConfig::default();
    let mut rng = SplitMix64::new(8);
    let mut packer = Packer::new(cfg).ctx("packer")?;
    let mut open: Vec<PackSample> = Vec::new();
    let (mut tok, mut til) = (0usize, 0u32);
    let (mut batches, mut rejected) = (0usize, 0usize);
    let mut i = 0usize;
    while batches < 10_000 {
        let s = match rng.below(50) {
            0 => PackSample {
                key: format!("big{i}"),
                tokens: vec![7; 4097 + rng.below(500) as usize],
                tiles: rng.below(10) as u32,
            },
            1 => PackSample {
                key: format!("wide{i}"),
                tokens: vec![7; 1 + rng.below(50) as usize],
                tiles: 109 + rng.below(20) as u32,
            },
            2 => PackSample {
                key: format!("edge{i}"),
                tokens: (0..4096).map(|t| t % 97 + 1).collect(),
                tiles: 108,
            },
            _ => PackSample {
                key: format!("s{i}"),
                tokens: (0..1 + rng.below(1400) as u32)
                    .map(|t| (t + i as u32) % 1000 + 1)
                    .collect(),
                tiles: rng.below(40) as u32,
            },
        };
        i += 1;
        let oversized = s.tokens.len() > 4096 || s.tiles > 108;
        let key = s.key.clone();
        let (len, tiles) = (s.tokens.len(), s.tiles);
        match packer.push(s.clone()) {
            Err(Error::SampleTooLarge {
                key: k,
                tokens,
                tiles: g,
                context,
                max_tiles,
            }) => {
                ensure(oversized, || format!("{key} rejected but fits"))?;
                ensure(
                    k == key && tokens == len && g == tiles && context == 4096 && max_tiles == 108,
                    || format!("wrong rejection details for {key}"),
                )?;
                rejected += 1;
            }
            Err(e) => return Err(format!("{key}: unexpected error {e}")),
            Ok(done) => {
                ensure(!oversized, || format!("{key} accepted but exceeds the budget"))?;
                let closes = tok + len > 4096 || til + tiles > 108;
                ensure(done.is_some() == closes, || format!("{key}: greedy close mismatch"))?;
                if let Some(b) = done {
                    check_batch(&b, &open, &cfg)?;
                    check_mask(&b, &mut rng, batches < 8)?;
                    batches += 1;
                    open.clear();
                    tok = 0;
                    til = 0;
                }
                open.push(s);
                tok += len;
                til += tiles;
            }
        }
    }
    ensure(rejected > 0, || String::from("no oversized samples were drawn"))?;
    Ok(format!(
        "10^4 packs within 4096 tokens / 108 tiles; {rejected} oversized samples rejected"
    ))
}

// 9

fn exhaustive_partition(vision: f64, costs: &[f64], stages: usize) -> (f64, Vec<usize>) {
    let n = costs.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    // Stage 0 may hold only the vision cost; every later stage needs a layer.
    let mut bounds = vec![0usize; stages - 1];
    loop {
        let valid = bounds.windows(2).all(|w| w[0] < w[1]) && bounds.last().map_or(true, |&b| b < n);
        if valid {
            let mut edges = vec![0];
            edges.extend(&bounds);
            edges.push(n);
            let worst = edges
                .windows(2)
                .enumerate()
                .map(|(s, w)| costs[w[0]..w[1]].iter().sum::<f64>() + if s == 0 { vision } else { 0.0 })
                .fold(0.0, f64::max);
            if best
                .as_ref()
                .map_or(true, |(bw, bb)| worst < *bw || (worst == *bw && bounds < *bb))
            {
                best = Some((worst, bounds.clone()));
            }
        }
        // Odometer over all `stages - 1` boundary values in 0..n.
        let mut k = bounds.len();
        loop {
            if k == 0 {
                return best.expect("at least one valid partition");
            }
            k -= 1;
            bounds[k] += 1;
            if bounds[k] < n {
                break;
            }
            bounds[k] = 0;
        }
    }
}

fn planner_optimality() -> Outcome {
    let mut rng = SplitMix64::new(9);
    for case in 0..200 {
        let n = 1 + rng.below(12) as usize;
        let stages = 1 + rng.below(4.min(n as u64 + 1)) as usize;
        let costs: Vec<f64> = (0..n).map(|_| (1 + rng.below(25)) as f64).collect();
        let vision = rng.below(40) as f64;
        let plan = partition(&StageModel {
            vision_cost: vision,
            layer_costs: costs.clone(),
            stages,
            micro_batches: 1 + rng.below(16) as usize,
        })
        .ctx("partition")?;
        let (bottleneck, boundaries) = if stages == 1 {
            (vision + costs.iter().sum::<f64>(), Vec::new())
        } else {
            exhaustive_partition(vision, &costs, stages)
        };
        ensure(plan.bottleneck == bottleneck, || {
            format!("case {case}: bottleneck {} vs {bottleneck}", plan.bottleneck)
        })?;
        ensure(plan.boundaries == boundaries, || {
            format!("case {case}: {:?} vs {boundaries:?}", plan.boundaries)
        })?;
        let first = plan.boundaries.first().copied().unwrap_or(n);
        ensure(
            plan.stage_costs[0] == vision + costs[..first].iter().sum::<f64>(),
            || {
                format!(
                    "case {case}: stage 0 cost {} omits the vision cost",
                    plan.stage_costs[0]
                )
            },
        )?;
    }
    Ok(String::from(
        "200 instances match exhaustive search; stage 0 carries the vision cost",
    ))
}

// 10

fn detection_head() -> Outcome {
    let mut rng = SplitMix64::new(10);
    let mut store = ParamStore::new();
    let head = DetectionHead::new(&mut store, 6, 12, &mut rng);
    let hidden = random(&[5, 6], &mut rng);
    let predict = |store: &ParamStore| -> Result<Tensor, String> {
        let mut tape = Tape::with_params(store, false);
        let h = tape.constant(hidden.clone());
        let p = head.predict(&mut tape, h).ctx("predict")?;
        Ok(tape.value(p).clone())
    };
    let loss_at = |target: &Tensor| -> Result<f64, String> {
        let mut tape = Tape::with_params(&store, false);
        let h = tape.constant(hidden.clone());
        let t = tape.constant(target.clone());
        let l = head.loss(&mut tape, h, t).ctx("loss")?;
        Ok(tape.value(l).data()[0])
    };
    let pred = predict(&store)?;
    ensure(loss_at(&pred)? == 0.0, || {
        String::from("loss at the exact prediction is not zero")
    })?;
    for k in 0..pred.len() {
        for eps in [1e-9, -0.25] {
            let mut t = pred.clone();
            t.set_flat(k, pred.data()[k] + eps).ctx("perturb")?;
            ensure(loss_at(&t)? > 0.0, || format!("loss zero for a target off at {k}"))?;
        }
    }
    for delta in [0.3, -0.3, 1e-3, -2.5] {
        let t = Tensor::new(pred.shape(), pred.data().iter().map(|v| v + delta).collect()).ctx("shift")?;
        let l = loss_at(&t)?;
        ensure((l - delta.abs()).abs() <= 1e-12, || format!("offset {delta}: loss {l}"))?;
    }
    let mut l1_tape = Tape::new();
    let z = l1_tape.constant(Tensor::zeros([2, 4]));
    let zero = l1_loss(&mut l1_tape, z, z).ctx("l1")?;
    ensure(l1_tape.value(zero).data()[0] == 0.0, || {
        String::from("l1 of equal tensors")
    })?;

    let target = Tensor::new(
        pred.shape(),
        pred.data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + if i % 2 == 0 { 0.4 } else { -0.4 })
            .collect(),
    )
    .ctx("target")?;
    let gc = GradCheck {
        rtol: 1e-3,
        ..GradCheck::default()
    };
    let e_in = grad_ok(
        "hidden",
        check_input_gradient(&store, &hidden, gc, |tape, h| {
            let t = tape.constant(target.clone());
            head.loss(tape, h, t)
        })
        .ctx("input check")?,
    )?;
    let ids: Vec<_> = store.ids().collect();
    let e_par = grad_ok(
        "parameters",
        check_param_gradients(&store, &ids, gc, |tape, _| {
            let h = tape.constant(hidden.clone());
            let t = tape.constant(target.clone());
            head.loss(tape, h, t)
        })
        .ctx("param check")?,
    )?;
    let mut empty = Tape::with_params(&store, false);
    let h0 = empty.constant(Tensor::zeros([0, 6]));
    let t0 = empty.constant(Tensor::zeros([0, 4]));
    ensure(matches!(head.loss(&mut empty, h0, t0), Err(Error::Contract(_))), || {
        String::from("empty batch accepted")
    })?;
    Ok(format!(
        "zero iff exact; offset gives |delta|; gradients within {:.1e}",
        e_in.max(e_par)
    ))
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

#[test]
fn acceptance() {
    let criteria = [
        Criterion {
            id: 1,
            name: "compression constant",
            budget: Duration::from_secs(10),
            run: compression_constant,
        },
        Criterion {
            id: 2,
            name: "crop example and caps",
            budget: Duration::from_secs(1),
            run: crop_example,
        },
        Criterion {
            id: 3,
            name: "coordinate token counts",
            budget: Duration::from_secs(1),
            run: coordinate_tokens,
        },
        Criterion {
            id: 4,
            name: "scalable positional embedding",
            budget: Duration::from_secs(5),
            run: spe_correctness,
        },
        Criterion {
            id: 5,
            name: "rearrangement permutation",
            budget: Duration::from_secs(5),
            run: rearrangement,
        },
        Criterion {
            id: 6,
            name: "gradient integrity",
            budget: Duration::from_secs(60),
            run: gradient_integrity,
        },
        Criterion {
            id: 7,
            name: "resume exactness",
            budget: Duration::from_secs(30),
            run: resume_exactness,
        },
        Criterion {
            id: 8,
            name: "packing budgets",
            budget: Duration::from_secs(10),
            run: packing_budgets,
        },
        Criterion {
            id: 9,
            name: "planner optimality",
            budget: Duration::from_secs(10),
            run: planner_optimality,
        },
        Criterion {
            id: 10,
            name: "detection head",
            budget: Duration::from_secs(5),
            run: detection_head,
        },
    ];
    let mut failed = Vec::new();
    for c in &criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let outcome = outcome.and_then(|d| {
            if took <= c.budget {
                Ok(d)
            } else {
                Err(format!(
                    "{d}; over budget ({:.2}s > {}s)",
                    took.as_secs_f64(),
                    c.budget.as_secs()
                ))
            }
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!(
            "[{tag}] {:>2} {:<30} {:>7.2}s  {detail}",
            c.id,
            c.name,
            took.as_secs_f64()
        );
        if outcome.is_err() {
            failed.push(c.id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
