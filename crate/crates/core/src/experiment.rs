//! Experiment harnesses: noise sweeps (full vs basic over ρ) and the
//! component ablation, with JSON manifests.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::{json, Map, Value};

use crate::config::{read_assignments, Assignment};
use crate::corpus::{build_dataset, Dataset, WorldConfig};
use crate::error::{Error, Result};
use crate::objectives::LossWeights;
use crate::retrieval::{evaluate, MetricsReport};
use crate::trainer::{train, EpochLog, TrainConfig};

/// World and training settings read from one `key = value` file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// `seed` sets both the corpus and the training seed.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "seed" {
            let s: u64 = crate::config::parse_value(key, value)?;
            self.world.seed = s;
            self.train.seed = s;
            return Ok(());
        }
        if self.world.set(key, value)? || self.train.set(key, value)? {
            return Ok(());
        }
        Err(Error::config(key, "unknown key"))
    }

    pub fn apply(&mut self, assignments: &[Assignment]) -> Result<()> {
        for a in assignments {
            self.set(&a.key, &a.value)?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply(&read_assignments(path)?)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        for (k, v) in self.train.pairs() {
            m.insert(k.into(), json!(v));
        }
        let w = &self.world;
        for (k, v) in [
            ("vocab", w.vocab.to_string()),
            ("concepts", w.concepts.to_string()),
            ("support", w.support.to_string()),
            ("min_len", w.min_len.to_string()),
            ("max_len", w.max_len.to_string()),
            ("frames", w.frames.to_string()),
            ("frame_dim", w.frame_dim.to_string()),
            ("captions_per_video", w.captions_per_video.to_string()),
            ("train_videos", w.train_videos.to_string()),
            ("val_videos", w.val_videos.to_string()),
            ("test_videos", w.test_videos.to_string()),
            ("rho", w.rho.to_string()),
            ("eval_rho", w.eval_rho().to_string()),
            ("visual_noise", w.visual_noise.to_string()),
            ("translation_passes", w.translation_passes.to_string()),
            ("corpus_seed", w.seed.to_string()),
        ] {
            m.insert(k.into(), json!(v));
        }
        Value::Object(m)
    }
}

/// Which auxiliary terms are on: (sim, feat, cyc, adv).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComponentMask {
    pub sim: bool,
    pub feat: bool,
    pub cyc: bool,
    pub adv: bool,
}

impl ComponentMask {
    const fn new(sim: bool, feat: bool, cyc: bool, adv: bool) -> Self {
        ComponentMask { sim, feat, cyc, adv }
    }

    pub fn apply(self, w: &LossWeights) -> LossWeights {
        LossWeights {
            lambda_sim: if self.sim { w.lambda_sim } else { 0.0 },
            lambda_feat: if self.feat { w.lambda_feat } else { 0.0 },
            lambda_cyc: if self.cyc { w.lambda_cyc } else { 0.0 },
            lambda_adv: if self.adv { w.lambda_adv } else { 0.0 },
            ..*w
        }
    }

    pub fn label(self) -> String {
        let on: Vec<&str> = [(self.sim, "sim"), (self.feat, "feat"), (self.cyc, "cyc"), (self.adv, "adv")]
            .iter()
            .filter(|(b, _)| *b)
            .map(|(_, n)| *n)
            .collect();
        if on.is_empty() {
            "basic".into()
        } else if on.len() == 4 {
            "full".into()
        } else {
            format!("+{}", on.join("+"))
        }
    }
}

/// Rows of the ablation in table order.
pub const ABLATION_MASKS: [ComponentMask; 6] = [
    ComponentMask::new(false, false, false, false),
    ComponentMask::new(true, false, false, false),
    ComponentMask::new(false, true, false, false),
    ComponentMask::new(true, true, false, false),
    ComponentMask::new(true, true, true, false),
    ComponentMask::new(true, true, true, true),
];

/// One trained and evaluated model.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub metrics: MetricsReport,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl CellResult {
    fn to_json(&self) -> Value {
        json!({
            "metrics": self.metrics.to_json(),
            "epochs": self.log.len(),
            "best_epoch": self.best_epoch,
        })
    }
}

/// Trains on `data` and evaluates the best-validation model on the test
/// split, with text-to-text mAP.
pub fn run_cell(data: &Dataset, config: &TrainConfig) -> Result<CellResult> {
    let out = train(data, config)?;
    let mut opts = config.eval_options();
    opts.text_to_text = true;
    let metrics = evaluate(&out.best_model(), &data.test, &opts)?;
    Ok(CellResult { metrics, best_epoch: out.state.best_epoch, log: out.log })
}

/// Runs `jobs` on up to `workers` threads; results come back in job order.
/// The first failure (in job order) is returned.
pub fn run_parallel<T: Send>(jobs: usize, workers: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..jobs).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs {
                    break;
                }
                let r = f(i);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every job ran")).collect()
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn names_cell(e: Error, cell: &str) -> Error {
    if e.is_numeric() {
        return e;
    }
    Error::Invalid(format!("cell {cell}: {e}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub rhos: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Three channel passes per target caption instead of one.
    pub compound: bool,
}

pub struct SweepCell {
    pub rho: f64,
    pub seed: u64,
    pub arm: &'static str,
    pub result: CellResult,
}

/// For every (ρ, seed): generate the corpus, train full and basic, evaluate both.
pub fn noise_sweep(
    base: &ExperimentConfig,
    spec: &SweepSpec,
    workers: usize,
    progress: impl Fn(&str) + Sync,
) -> Result<Vec<SweepCell>> {
    if spec.rhos.len() < 2 {
        return Err(Error::config("rhos", "a sweep needs at least two values"));
    }
    if spec.seeds.is_empty() {
        return Err(Error::config("seeds", "needs at least one seed"));
    }
    let mut worlds = Vec::new();
    for &rho in &spec.rhos {
        for &seed in &spec.seeds {
            let mut world = WorldConfig { rho, seed, ..base.world.clone() };
            if spec.compound {
                world.translation_passes = 3;
            }
            world.validate()?;
            worlds.push((rho, seed, world));
        }
    }
    base.train.validate()?;
    let datasets = run_parallel(worlds.len(), workers, |i| Ok(build_dataset(&worlds[i].2)?.1))?;
    let arms: [(&'static str, bool); 2] = [("full", false), ("basic", true)];
    let results = run_parallel(worlds.len() * 2, workers, |j| {
        let (w, (arm, basic)) = (j / 2, arms[j % 2]);
        let (rho, seed, _) = &worlds[w];
        let mut config = TrainConfig { seed: *seed, ..base.train.clone() };
        if basic {
            config = config.basic();
        }
        let name = format!("rho={rho} seed={seed} arm={arm}");
        let r = run_cell(&datasets[w], &config).map_err(|e| names_cell(e, &name))?;
        progress(&format!("{name}: test SumR {:.1}", r.metrics.sumr));
        Ok(r)
    })?;
    Ok(results
        .into_iter()
        .enumerate()
        .map(|(j, result)| SweepCell { rho: worlds[j / 2].0, seed: worlds[j / 2].1, arm: arms[j % 2].0, result })
        .collect())
}

pub fn sweep_manifest(base: &ExperimentConfig, spec: &SweepSpec, cells: &[SweepCell]) -> Value {
    let mut aggregates = Vec::new();
    let mut by_arm = Map::new();
    for arm in ["full", "basic"] {
        let mut means = Vec::new();
        for &rho in &spec.rhos {
            let pick: Vec<&SweepCell> = cells.iter().filter(|c| c.arm == arm && c.rho == rho).collect();
            let sumr = mean(&pick.iter().map(|c| c.result.metrics.sumr).collect::<Vec<_>>());
            let t2t = mean(&pick.iter().map(|c| c.result.metrics.t2t_map.unwrap_or(0.0)).collect::<Vec<_>>());
            aggregates.push(json!({"arm": arm, "rho": rho, "mean_sumr": sumr, "mean_t2t_map": t2t, "cells": pick.len()}));
            means.push(sumr);
        }
        by_arm.insert(arm.into(), json!(means[0] - means[means.len() - 1]));
    }
    json!({
        "kind": "noise-sweep",
        "axis": {"name": "rho", "values": spec.rhos},
        "seeds": spec.seeds,
        "compound": spec.compound,
        "config": base.to_json(),
        "cells": cells.iter().map(|c| {
            let mut v = c.result.to_json();
            v["rho"] = json!(c.rho);
            v["seed"] = json!(c.seed);
            v["arm"] = json!(c.arm);
            v
        }).collect::<Vec<_>>(),
        "aggregates": aggregates,
        "degradation": Value::Object(by_arm),
        "complete": cells.len() == spec.rhos.len() * spec.seeds.len() * 2,
    })
}

pub struct AblationCell {
    pub mask: ComponentMask,
    pub seed: u64,
    pub result: CellResult,
}

/// Trains the six ablation rows for every training seed on one corpus.
pub fn ablation(
    data: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    workers: usize,
    progress: impl Fn(&str) + Sync,
) -> Result<Vec<AblationCell>> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "needs at least one seed"));
    }
    base.validate()?;
    let n = ABLATION_MASKS.len() * seeds.len();
    let results = run_parallel(n, workers, |j| {
        let (mask, seed) = (ABLATION_MASKS[j / seeds.len()], seeds[j % seeds.len()]);
        let config = TrainConfig { seed, weights: mask.apply(&base.weights), ..base.clone() };
        let name = format!("{} seed={seed}", mask.label());
        let r = run_cell(data, &config).map_err(|e| names_cell(e, &name))?;
        progress(&format!("{name}: test SumR {:.1}", r.metrics.sumr));
        Ok(r)
    })?;
    Ok(results
        .into_iter()
        .enumerate()
        .map(|(j, result)| AblationCell { mask: ABLATION_MASKS[j / seeds.len()], seed: seeds[j % seeds.len()], result })
        .collect())
}

pub fn ablation_manifest(base: &TrainConfig, corpus: &Value, seeds: &[u64], cells: &[AblationCell]) -> Value {
    let mut config = Map::new();
    for (k, v) in base.pairs() {
        config.insert(k.into(), json!(v));
    }
    let rows: Vec<Value> = ABLATION_MASKS
        .iter()
        .map(|&mask| {
            let pick: Vec<&AblationCell> = cells.iter().filter(|c| c.mask == mask).collect();
            json!({
                "row": mask.label(),
                "sim": mask.sim,
                "feat": mask.feat,
                "cyc": mask.cyc,
                "adv": mask.adv,
                "mean_sumr": mean(&pick.iter().map(|c| c.result.metrics.sumr).collect::<Vec<_>>()),
                "cells": pick.len(),
            })
        })
        .collect();
    json!({
        "kind": "ablation",
        "axis": {"name": "mask", "values": ABLATION_MASKS.iter().map(|m| m.label()).collect::<Vec<_>>()},
        "seeds": seeds,
        "corpus": corpus,
        "config": Value::Object(config),
        "cells": cells.iter().map(|c| {
            let mut v = c.result.to_json();
            v["row"] = json!(c.mask.label());
            v["seed"] = json!(c.seed);
            v
        }).collect::<Vec<_>>(),
        "aggregates": rows,
        "complete": cells.len() == ABLATION_MASKS.len() * seeds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_sets_both_and_unknown_keys_fail() {
        let mut c = ExperimentConfig::default();
        c.set("seed", "7").unwrap();
        assert_eq!((c.world.seed, c.train.seed), (7, 7));
        c.set("train_seed", "3").unwrap();
        assert_eq!((c.world.seed, c.train.seed), (7, 3));
        c.set("rho", "0.4").unwrap();
        c.set("lambda_cyc", "0").unwrap();
        assert_eq!(c.world.rho, 0.4);
        assert_eq!(c.train.weights.lambda_cyc, 0.0);
        assert!(matches!(c.set("colour", "red"), Err(Error::Config { key, .. }) if key == "colour"));
    }

    #[test]
    fn ablation_rows_follow_the_table() {
        let labels: Vec<String> = ABLATION_MASKS.iter().map(|m| m.label()).collect();
        assert_eq!(labels, ["basic", "+sim", "+feat", "+sim+feat", "+sim+feat+cyc", "full"]);
        let w = LossWeights::default();
        assert_eq!(ABLATION_MASKS[0].apply(&w), w.basic());
        assert_eq!(ABLATION_MASKS[5].apply(&w), w);
        let third = ABLATION_MASKS[2].apply(&w);
        assert_eq!((third.lambda_sim, third.lambda_feat, third.lambda_cyc), (0.0, w.lambda_feat, 0.0));
    }

    #[test]
    fn parallel_results_keep_job_order() {
        let out = run_parallel(17, 4, |i| Ok(i * i)).unwrap();
        assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
        let err = run_parallel(5, 3, |i| if i >= 2 { Err(Error::Invalid(format!("job {i}"))) } else { Ok(i) });
        assert!(matches!(err, Err(Error::Invalid(m)) if m == "job 2"));
    }
}
