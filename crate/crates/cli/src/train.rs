//! `train`: one run from a config, with trace, checkpoint and summary.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use pixcon::toymodel::{Checkpoint, Dataset, EvalReport, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::verify::{run_verify, Suite};

pub const SUMMARY_FORMAT: &str = "pixcon-summary";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Loss terms at every logged iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossCurves {
    pub iteration: Vec<usize>,
    pub ce: Vec<f64>,
    pub ssl: Vec<f64>,
    pub cl: Vec<f64>,
    pub reg: Vec<f64>,
    pub total: Vec<f64>,
    pub weight: Vec<f64>,
}

/// Everything a run reports. Contains no timestamps or paths, so equal
/// configs give byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: BTreeMap<String, String>,
    #[serde(rename = "final")]
    pub final_eval: EvalReport,
    pub loss_curves: LossCurves,
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

/// Runs the suites the config toggles on; any failure aborts.
pub fn preflight(cfg: &ExperimentConfig) -> CliResult<()> {
    let seed = cfg.train.seed;
    for (on, suite, name) in [
        (cfg.verify.bound, Suite::Bound, "bound"),
        (cfg.verify.grads, Suite::Grads, "grads"),
        (cfg.verify.stats, Suite::Stats, "stats"),
    ] {
        if on && !run_verify(suite, seed)?.passed {
            return Err(CliError::PropertyFailed(format!("pre-training suite `{name}`")));
        }
    }
    Ok(())
}

/// Trains in memory and returns the summary and the finished trainer.
pub fn train_in_memory(cfg: &ExperimentConfig, mut trace: impl FnMut(&str) -> CliResult<()>) -> CliResult<(Summary, Trainer)> {
    cfg.validate()?;
    let data = Dataset::generate(&cfg.generator, &cfg.train)?;
    let mut trainer = Trainer::new(cfg.train.clone(), cfg.generator.clone(), data)?;
    let mut curves = LossCurves::default();
    let mut final_eval = None;
    let mut sink_err = None;
    trainer.run(|rec| {
        curves.iteration.push(rec.iteration);
        curves.ce.push(rec.loss.ce);
        curves.ssl.push(rec.loss.ssl);
        curves.cl.push(rec.loss.cl);
        curves.reg.push(rec.loss.reg);
        curves.total.push(rec.loss.total);
        curves.weight.push(rec.weight);
        if let Some(e) = &rec.eval {
            final_eval = Some(e.clone());
        }
        let line = serde_json::to_string(rec)?;
        if let Err(e) = trace(&line) {
            sink_err = Some(e);
            return Err(pixcon::Error::State("trace sink failed".into()));
        }
        Ok(())
    })
    .map_err(|e| sink_err.take().unwrap_or(CliError::Core(e)))?;
    let summary = Summary {
        format: SUMMARY_FORMAT.into(),
        version: 1,
        seed: cfg.train.seed,
        config_hash: cfg.hash(),
        config: cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        final_eval: final_eval.expect("the last iteration is always evaluated"),
        loss_curves: curves,
    };
    Ok((summary, trainer))
}

/// Writes `trace.jsonl`, `checkpoint.json` and `summary.json` under `out`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> CliResult<Summary> {
    cfg.validate()?;
    preflight(cfg)?;
    create_dir(out)?;
    let trace_path = out.join(TRACE_FILE);
    let file = std::fs::File::create(&trace_path).map_err(|source| CliError::Write {
        path: trace_path.clone(),
        source,
    })?;
    let mut w = std::io::BufWriter::new(file);
    let (summary, trainer) = train_in_memory(cfg, |line| {
        writeln!(w, "{line}").map_err(|source| CliError::Write {
            path: trace_path.clone(),
            source,
        })
    })?;
    w.flush().map_err(|source| CliError::Write {
        path: trace_path.clone(),
        source,
    })?;
    Checkpoint::capture(&trainer).save(&out.join(CHECKPOINT_FILE))?;
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write_file(&out.join(SUMMARY_FILE), text.as_bytes())?;
    Ok(summary)
}
