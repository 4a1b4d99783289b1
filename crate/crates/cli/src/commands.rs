use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use nrccr_core::corpus::{build_dataset, load_corpus, save_corpus, Dataset};
use nrccr_core::experiment::{
    ablation, ablation_manifest, default_workers, noise_sweep, sweep_manifest, SweepSpec,
};
use nrccr_core::retrieval::{build_index, evaluate, sample_indices};
use nrccr_core::trainer::{load_checkpoint, save_checkpoint, train_from, Checkpoint, TrainState};
use nrccr_core::{Error, Result};

use crate::settings::Settings;
use crate::{Command, Common};

/// 3 for numeric failures, 1 for I/O, 2 for everything the user can fix
/// in flags, config or inputs.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if matches!(e, Error::Io { .. }) {
        1
    } else {
        2
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    fs::write(path, body).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn describe(data: &Dataset) -> String {
    let m = &data.manifest;
    format!(
        "corpus seed {} rho {} ({} passes): videos {}/{}/{}, captions {}/{}/{}, vocab {}+{}",
        m.seed,
        m.rho,
        m.translation_passes,
        m.train_videos,
        m.val_videos,
        m.test_videos,
        m.train_instances,
        m.val_instances,
        m.test_instances,
        m.src_vocab,
        m.tgt_vocab
    )
}

pub fn run(common: Common, command: Command) -> Result<()> {
    let s = Settings::load(common.config.as_deref())?;
    let workers = s.value(common.workers, "workers")?.unwrap_or_else(default_workers);
    match command {
        Command::GenCorpus { out, rho, seed } => {
            let out = s.path(out, "out")?;
            let mut world = s.exp.world.clone();
            if let Some(r) = rho {
                world.rho = r;
            }
            if let Some(seed) = seed {
                world.seed = seed;
            }
            world.validate()?;
            let (_, data) = build_dataset(&world)?;
            save_corpus(&data, &out)?;
            println!("{}", describe(&data));
        }
        Command::Train { corpus, out, basic } => {
            let (corpus, out) = (s.path(corpus, "corpus")?, s.path(out, "out")?);
            let mut config = s.exp.train.clone();
            if s.switch(basic, "basic")? {
                config = config.basic();
            }
            config.validate()?;
            let data = load_corpus(&corpus)?;
            eprintln!("{}", describe(&data));
            let log_path = out.join("train_log.jsonl");
            let last = out.join("last.ckpt");
            let mut log = String::new();
            let mut state = TrainState::fresh(&config, &data)?;
            train_from(&mut state, &config, &data, |l, st| {
                eprintln!(
                    "epoch {:>3}  lr {:.2e}  loss {:.4} (tri {:.4} sim {:.4} feat {:.4} cyc {:.4} adv {:.4})  val SumR {:.1}",
                    l.epoch, l.lr, l.loss_total, l.loss_tri, l.loss_sim, l.loss_feat, l.loss_cyc, l.loss_adv, l.val_sumr
                );
                log.push_str(&l.to_json_line());
                log.push('\n');
                write_file(&log_path, &log)?;
                save_checkpoint(&Checkpoint::last(st, &config), &last)
            })?;
            save_checkpoint(&Checkpoint::best(&state, &config), &out.join("best.ckpt"))?;
            println!("best val SumR {:.1} at epoch {}", state.best_val_sumr, state.best_epoch);
        }
        Command::Eval { corpus, checkpoint, out, beta, group_by_length, t2t } => {
            let (corpus, checkpoint, out) =
                (s.path(corpus, "corpus")?, s.path(checkpoint, "checkpoint")?, s.path(out, "out")?);
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut opts = ckpt.config.eval_options();
            if let Some(b) = s.value(beta, "beta")? {
                if !(0.0..=1.0).contains(&b) {
                    return Err(Error::Config { key: "beta".into(), message: format!("{b} is outside [0, 1]") });
                }
                opts.beta = b;
            }
            opts.group_by_length = s.switch(group_by_length, "group_by_length")?;
            opts.text_to_text = s.switch(t2t, "t2t")?;
            let data = load_corpus(&corpus)?;
            let report = evaluate(&ckpt.model, &data.test, &opts)?;
            write_json(&out, &report.to_json())?;
            println!("test SumR {:.1}", report.sumr);
        }
        Command::SweepNoise { out, rhos, seeds, compound } => {
            let out = s.path(out, "out")?;
            let spec = SweepSpec {
                rhos: s.list(rhos, "rhos")?,
                seeds: s.list(seeds, "seeds")?,
                compound: s.switch(compound, "compound")?,
            };
            let cells = noise_sweep(&s.exp, &spec, workers, |m| eprintln!("{m}"))?;
            for c in &cells {
                let name = format!("cells/rho{}_seed{}_{}.jsonl", c.rho, c.seed, c.arm);
                let body: String = c.result.log.iter().map(|l| l.to_json_line() + "\n").collect();
                write_file(&out.join(name), &body)?;
            }
            let manifest = sweep_manifest(&s.exp, &spec, &cells);
            write_json(&out.join("experiment.json"), &manifest)?;
            for a in manifest["aggregates"].as_array().into_iter().flatten() {
                println!("{:<6} rho {:<4} mean SumR {:>6.1}  t2t mAP {:>5.1}", a["arm"].as_str().unwrap_or(""), a["rho"], a["mean_sumr"].as_f64().unwrap_or(f64::NAN), a["mean_t2t_map"].as_f64().unwrap_or(f64::NAN));
            }
        }
        Command::Ablate { corpus, out, seeds } => {
            let (corpus, out) = (s.path(corpus, "corpus")?, s.path(out, "out")?);
            let seeds: Vec<u64> = s.list(seeds, "seeds")?;
            let data = load_corpus(&corpus)?;
            eprintln!("{}", describe(&data));
            let cells = ablation(&data, &s.exp.train, &seeds, workers, |m| eprintln!("{m}"))?;
            let m = &data.manifest;
            let summary = json!({
                "seed": m.seed,
                "rho": m.rho,
                "eval_rho": m.eval_rho,
                "translation_passes": m.translation_passes,
                "train_instances": m.train_instances,
                "test_instances": m.test_instances,
            });
            let manifest = ablation_manifest(&s.exp.train, &summary, &seeds, &cells);
            write_json(&out.join("experiment.json"), &manifest)?;
            for r in manifest["aggregates"].as_array().into_iter().flatten() {
                println!("{:<16} mean SumR {:>6.1}", r["row"].as_str().unwrap_or(""), r["mean_sumr"].as_f64().unwrap_or(f64::NAN));
            }
        }
        Command::DumpEmbeddings { corpus, checkpoint, out, sample } => {
            let (corpus, checkpoint, out) =
                (s.path(corpus, "corpus")?, s.path(checkpoint, "checkpoint")?, s.path(out, "out")?);
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = load_corpus(&corpus)?;
            let n = data.test.videos.len();
            let mut k = s.value(sample, "sample")?.unwrap_or(20);
            if k > n {
                eprintln!("warning: --sample {k} exceeds the {n} test videos; dumping all of them");
                k = n;
            }
            let index = build_index(&ckpt.model, &data.test, true)?;
            let picked = sample_indices(n, k, s.exp.train.seed);
            write_file(&out, &index.embedding_dump(&picked)?)?;
        }
    }
    Ok(())
}
