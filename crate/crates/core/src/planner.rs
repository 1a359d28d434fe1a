//! Pipeline-stage partitioning with the vision tower pinned to stage 0.
//!
//! LLM layers are split into contiguous segments. Stage 0 pays the vision
//! cost on top of its layers and may hold none; every later stage holds at
//! least one. The plan minimizes the bottleneck stage cost exactly by dynamic
//! programming over suffixes, then prefers the fewest layers in stage 0 and
//! lexicographically smallest boundaries among optimal plans.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageModel {
    pub vision_cost: f64,
    pub layer_costs: Vec<f64>,
    pub stages: usize,
    pub micro_batches: usize,
}

impl StageModel {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.micro_batches == 0 {
            bail!(Config, "need at least one stage and one micro-batch");
        }
        if !self.vision_cost.is_finite() || self.vision_cost < 0.0 {
            bail!(Config, "vision cost must be finite and non-negative");
        }
        if self.layer_costs.iter().any(|c| !c.is_finite() || *c <= 0.0) {
            bail!(Config, "layer costs must be positive and finite");
        }
        if self.layer_costs.len() + 1 < self.stages {
            bail!(
                Config,
                "{} layers cannot fill {} stages (stages after the first need a layer each)",
                self.layer_costs.len(),
                self.stages
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    /// First layer of stages `1..P`.
    pub boundaries: Vec<usize>,
    /// Layer count per stage.
    pub stage_layers: Vec<usize>,
    /// Per-stage cost; stage 0 includes the vision cost.
    pub stage_costs: Vec<f64>,
    pub bottleneck: f64,
    pub micro_batches: usize,
    pub bubble: f64,
    /// Micro-batches whose activations stage `s` holds at the end of warm-up
    /// under one-forward-one-backward scheduling (advisory memory estimate).
    pub warmup_microbatches: Vec<usize>,
}

impl StagePlan {
    pub fn stages(&self) -> usize {
        self.stage_costs.len()
    }
}

struct Prefix(Vec<f64>);

impl Prefix {
    fn new(costs: &[f64]) -> Self {
        let mut p = Vec::with_capacity(costs.len() + 1);
        p.push(0.0);
        for c in costs {
            p.push(p.last().unwrap() + c);
        }
        Self(p)
    }

    /// Cost of layers `i..j`.
    fn cost(&self, i: usize, j: usize) -> f64 {
        self.0[j] - self.0[i]
    }
}

/// Minimal bottleneck partition (see module docs).
pub fn partition(model: &StageModel) -> Result<StagePlan> {
    model.validate()?;
    let n = model.layer_costs.len();
    let p = model.stages;
    let prefix = Prefix::new(&model.layer_costs);

    // best[m][i]: minimal bottleneck splitting layers i..n into m non-empty segments.
    let mut best = vec![vec![f64::INFINITY; n + 1]; p];
    best[0][n] = 0.0;
    for m in 1..p {
        for i in 0..n {
            best[m][i] = (i + 1..=n)
                .map(|j| prefix.cost(i, j).max(best[m - 1][j]))
                .fold(f64::INFINITY, f64::min);
        }
    }

    let stage0 = |k: usize| (model.vision_cost + prefix.cost(0, k)).max(best[p - 1][k]);
    let optimum = (0..=n).map(stage0).fold(f64::INFINITY, f64::min);
    let k0 = (0..=n)
        .find(|&k| stage0(k) <= optimum)
        .expect("a feasible split exists");

    let mut boundaries = Vec::with_capacity(p - 1);
    let mut i = k0;
    for m in (1..p).rev() {
        boundaries.push(i);
        let j = (i + 1..=n)
            .find(|&j| prefix.cost(i, j) <= optimum && best[m - 1][j] <= optimum)
            .expect("optimal suffix split exists");
        i = j;
    }
    debug_assert_eq!(i, n);

    let mut edges = vec![0];
    edges.extend(&boundaries);
    edges.push(n);
    let stage_layers: Vec<usize> = edges.windows(2).map(|w| w[1] - w[0]).collect();
    let mut stage_costs: Vec<f64> = edges.windows(2).map(|w| prefix.cost(w[0], w[1])).collect();
    stage_costs[0] += model.vision_cost;
    let bottleneck = stage_costs.iter().copied().fold(0.0, f64::max);
    let warmup_microbatches = (0..p).map(|s| (p - s).min(model.micro_batches)).collect();

    let mut plan = StagePlan {
        boundaries,
        stage_layers,
        stage_costs,
        bottleneck,
        micro_batches: model.micro_batches,
        bubble: 0.0,
        warmup_microbatches,
    };
    plan.bubble = bubble_fraction(&plan, model.micro_batches);
    Ok(plan)
}

/// Estimated idle fraction of a synchronous pipeline running `micro_batches`.
///
/// With stage times `t_s`, total `S` and maximum `T`, the schedule spans about
/// `S + (M − 1)·T` while each stage is busy `M·t_s`, giving
/// `1 − M·S / (P·(S + (M − 1)·T))`. Balanced stages reduce this to
/// `(P − 1) / (M + P − 1)`.
pub fn bubble_fraction(plan: &StagePlan, micro_batches: usize) -> f64 {
    let p = plan.stages();
    if p <= 1 || micro_batches == 0 {
        return 0.0;
    }
    let m = micro_batches as f64;
    let total: f64 = plan.stage_costs.iter().sum();
    let makespan = total + (m - 1.0) * plan.bottleneck;
    1.0 - m * total / (p as f64 * makespan)
}
