//! `compare`: several configs over several seeds, as CSV and JSON.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::train::{create_dir, train_in_memory, write_file};

pub const COMPARE_FORMAT: &str = "pixcon-compare";
pub const CSV_FILE: &str = "comparison.csv";
pub const JSON_FILE: &str = "comparison.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub seed: u64,
    pub accuracy: f64,
    pub miou: f64,
    pub pdd_mean: f64,
    pub pdd: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanResult {
    pub accuracy: f64,
    pub miou: f64,
    pub pdd_mean: f64,
    /// Per class, over the seeds where the class has a value.
    pub pdd: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigResult {
    pub label: String,
    pub config_hash: String,
    pub runs: Vec<RunResult>,
    pub mean: MeanResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareReport {
    pub format: String,
    pub version: u32,
    pub seeds: Vec<u64>,
    pub configs: Vec<ConfigResult>,
}

impl CompareReport {
    pub fn get(&self, label: &str) -> Option<&ConfigResult> {
        self.configs.iter().find(|c| c.label == label)
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(runs: &[RunResult]) -> MeanResult {
    let k = runs[0].pdd.len();
    MeanResult {
        accuracy: mean_of(runs.iter().map(|r| r.accuracy)),
        miou: mean_of(runs.iter().map(|r| r.miou)),
        pdd_mean: mean_of(runs.iter().map(|r| r.pdd_mean)),
        pdd: (0..k)
            .map(|c| {
                let vals: Vec<f64> = runs.iter().filter_map(|r| r.pdd[c]).collect();
                (!vals.is_empty()).then(|| mean_of(vals.into_iter()))
            })
            .collect(),
    }
}

/// Trains every `(config, seed)` pair on up to `threads` workers. Results
/// do not depend on the thread count; rows keep the given config order.
pub fn run_compare(configs: &[(String, ExperimentConfig)], seeds: &[u64], threads: usize) -> CliResult<CompareReport> {
    if configs.len() < 2 {
        return Err(CliError::Usage("compare needs at least two configs".into()));
    }
    if seeds.is_empty() {
        return Err(CliError::Usage("compare needs at least one seed".into()));
    }
    let (first_label, first) = &configs[0];
    for (label, cfg) in configs {
        cfg.validate()?;
        if cfg.generator != first.generator {
            return Err(CliError::Config(format!(
                "benchmark settings of `{label}` differ from `{first_label}`; compared runs must share the generator"
            )));
        }
    }

    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results: Mutex<Vec<Option<CliResult<RunResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(c, seed)) = jobs.get(j) else { break };
                let mut cfg = configs[c].1.clone();
                cfg.train.seed = seed;
                let out = train_in_memory(&cfg, |_| Ok(())).map(|(s, _)| RunResult {
                    seed,
                    accuracy: s.final_eval.accuracy,
                    miou: s.final_eval.miou,
                    pdd_mean: s.final_eval.pdd_mean,
                    pdd: s.final_eval.pdd,
                    iou: s.final_eval.per_class_iou,
                });
                results.lock().expect("worker panicked")[j] = Some(out);
            });
        }
    });

    let mut flat = results.into_inner().expect("worker panicked").into_iter();
    let mut out = Vec::with_capacity(configs.len());
    for (label, cfg) in configs {
        let runs = (0..seeds.len())
            .map(|_| flat.next().flatten().expect("every job ran"))
            .collect::<CliResult<Vec<_>>>()?;
        out.push(ConfigResult {
            label: label.clone(),
            config_hash: cfg.hash(),
            mean: summarize(&runs),
            runs,
        });
    }
    Ok(CompareReport {
        format: COMPARE_FORMAT.into(),
        version: 1,
        seeds: seeds.to_vec(),
        configs: out,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// One row per run plus a `mean` row per config.
pub fn to_csv(report: &CompareReport) -> String {
    let k = report.configs[0].mean.pdd.len();
    let mut header = vec!["config".to_string(), "seed".into(), "accuracy".into(), "miou".into(), "pdd_mean".into()];
    header.extend((0..k).map(|c| format!("pdd_{c}")));
    header.extend((0..k).map(|c| format!("iou_{c}")));
    let mut lines = vec![header.join(",")];
    for c in &report.configs {
        for r in &c.runs {
            let mut row = vec![c.label.clone(), r.seed.to_string(), format!("{:?}", r.accuracy), format!("{:?}", r.miou), format!("{:?}", r.pdd_mean)];
            row.extend(r.pdd.iter().map(|v| cell(*v)));
            row.extend(r.iou.iter().map(|v| cell(*v)));
            lines.push(row.join(","));
        }
        let m = &c.mean;
        let mut row = vec![c.label.clone(), "mean".into(), format!("{:?}", m.accuracy), format!("{:?}", m.miou), format!("{:?}", m.pdd_mean)];
        row.extend(m.pdd.iter().map(|v| cell(*v)));
        row.extend(std::iter::repeat_n(String::new(), k));
        lines.push(row.join(","));
    }
    lines.join("\n") + "\n"
}

pub fn write_compare(report: &CompareReport, out: &Path) -> CliResult<()> {
    create_dir(out)?;
    write_file(&out.join(CSV_FILE), to_csv(report).as_bytes())?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    write_file(&out.join(JSON_FILE), json.as_bytes())
}

/// Parses `0,1,2` or `0-4`.
pub fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    let bad = || CliError::Usage(format!("invalid seed list `{s}`"));
    if let Some((a, b)) = s.split_once('-') {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}
