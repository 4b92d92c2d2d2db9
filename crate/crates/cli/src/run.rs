//! `train`: one run, one directory.

use crate::{claim_output, CmdResult, Failure};
use rltricks::config::{parse_kv, parse_override, Preset, TrainConfig};
use rltricks::env::read_dataset;
use rltricks::policy::RngState;
use rltricks::trainer::{EvalRecord, MetricsRecord};
use rltricks::TrainerF64;
use serde::Serialize;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const CONFIG_FILE: &str = "config.kv";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const CLIP_EVENTS_FILE: &str = "clip_events.jsonl";
pub const ROLLOUTS_FILE: &str = "rollouts.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.log";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Everything `train` needs to resolve a config.
#[derive(Debug, Clone, Default)]
pub struct TrainRequest {
    pub preset: Option<Preset>,
    pub config_file: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

impl TrainRequest {
    pub fn resolve(&self) -> CmdResult<TrainConfig> {
        let document = match &self.config_file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::validation(format!("reading {}: {e}", path.display())))?;
                parse_kv(&text)?
            }
            None => Vec::new(),
        };
        let mut overrides = Vec::new();
        if let Some(d) = &self.data {
            overrides.push(("data.path".to_string(), d.display().to_string()));
        }
        if let Some(s) = self.seed {
            overrides.push(("run.seed".to_string(), s.to_string()));
        }
        for o in &self.overrides {
            overrides.push(parse_override(o)?);
        }
        Ok(TrainConfig::resolve(self.preset, &document, &overrides)?)
    }
}

fn jsonl<T: Serialize>(w: &mut impl Write, value: &T) -> CmdResult {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Trains with a resolved config, writing the run directory at `out`.
pub fn train(cfg: &TrainConfig, out: &Path, force: bool) -> CmdResult {
    if cfg.data_path.is_empty() {
        return Err(Failure::validation("no dataset: pass --data or set data.path"));
    }
    let vocab = cfg.vocabulary()?;
    let file = File::open(&cfg.data_path)
        .map_err(|e| Failure::validation(format!("opening dataset {}: {e}", cfg.data_path)))?;
    let tasks = read_dataset(BufReader::new(file), &vocab)?;
    let mut trainer = TrainerF64::new(cfg.clone(), tasks)?;

    claim_output(out, force)?;
    fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_kv_string())?;
    let create = |name: &str| -> CmdResult<BufWriter<File>> { Ok(BufWriter::new(File::create(out.join(name))?)) };
    let mut metrics = create(METRICS_FILE)?;
    let mut evals = create(EVAL_FILE)?;
    let mut clips = create(CLIP_EVENTS_FILE)?;
    let mut diag = create(DIAGNOSTICS_FILE)?;
    let mut rollouts = if cfg.log_rollouts {
        Some(create(ROLLOUTS_FILE)?)
    } else {
        None
    };

    for step in 1..=cfg.max_steps {
        let it = trainer.run_iteration()?;
        let iter = it.metrics.iter;
        write_metrics(&mut metrics, &it.metrics)?;
        for e in &it.clip_events {
            jsonl(&mut clips, e)?;
        }
        for d in &it.diagnostics {
            writeln!(diag, "iter {iter}: {d}")?;
        }
        if let Some(w) = rollouts.as_mut() {
            it.rollouts.write_log(&mut *w)?;
        }
        if step % cfg.eval_steps == 0 || step == cfg.max_steps {
            if let Some(r) = trainer.evaluate_heldout() {
                jsonl(
                    &mut evals,
                    &EvalRecord {
                        iter,
                        accuracy: r.accuracy,
                        mean_len: r.mean_len,
                    },
                )?;
            }
        }
        if step % cfg.save_steps == 0 || step == cfg.max_steps {
            let ck = trainer.params().to_checkpoint(RngState {
                seed: cfg.seed,
                iteration: trainer.iteration(),
            });
            let path = out.join(CHECKPOINT_DIR).join(format!("step-{step:06}.json"));
            let mut w = BufWriter::new(File::create(path)?);
            serde_json::to_writer(&mut w, &ck)?;
            w.flush()?;
        }
    }
    for mut w in [metrics, evals, clips, diag].into_iter().chain(rollouts) {
        w.flush()?;
    }
    Ok(())
}

fn write_metrics(w: &mut impl Write, m: &MetricsRecord) -> CmdResult {
    jsonl(w, m)
}
