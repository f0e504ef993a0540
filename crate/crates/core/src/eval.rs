//! Episode evaluation on the target domain and accuracy reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{build_augmented_sets, AugPipeline};
use crate::episodes::{sample_episode, Dataset, Episode};
use crate::error::{Error, Result};
use crate::pipeline::{fine_tune, predict_ensemble, predict_episode, FinetuneConfig, ModelState, Prediction};
use crate::seed;

/// Target-domain evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: PathBuf,
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub t_test: usize,
    /// Fine-tune on each episode's support set before predicting.
    pub finetune: bool,
    pub seed: u64,
    pub report: PathBuf,
    pub records: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            checkpoint: "out/model.ckpt".into(),
            episodes: 100,
            way: 5,
            shot: 5,
            query: 15,
            t_test: 10,
            finetune: true,
            seed: 0,
            report: "out/report.json".into(),
            records: "out/episodes.jsonl".into(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || self.way < 2 || self.shot == 0 || self.query == 0 {
            return Err(Error::Config(format!(
                "evaluation needs episodes ≥ 1, way ≥ 2, shot ≥ 1, query ≥ 1 (got {}/{}/{}/{})",
                self.episodes, self.way, self.shot, self.query
            )));
        }
        Ok(())
    }
}

/// One way of predicting an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Method {
    pub name: String,
    pub finetune: bool,
    /// Fine-tune on the augmented support sets and average the branch predictions.
    pub augment: bool,
    pub t: usize,
}

/// Result of one evaluation episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: usize,
    pub n_query: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub seed: u64,
}

/// Seed of evaluation episode `i`.
pub fn episode_seed(base: u64, i: usize) -> u64 {
    seed::derive(base, &[i as u64])
}

fn record(id: usize, seed: u64, pred: &Prediction, episode: &Episode) -> EpisodeRecord {
    let n_query = episode.query.len();
    let n_correct = pred.n_correct(&episode.query_labels());
    EpisodeRecord {
        episode_id: id,
        n_query,
        n_correct,
        accuracy: n_correct as f64 / n_query as f64,
        seed,
    }
}

/// Runs every method on one episode, sharing fine-tuned models and
/// augmented sets between methods that need the same ones.
pub fn evaluate_episode(
    model: &ModelState,
    episode: &Episode,
    id: usize,
    seed: u64,
    finetune: &FinetuneConfig,
    pipelines: &[AugPipeline],
    methods: &[Method],
) -> Result<Vec<EpisodeRecord>> {
    let ways = episode.ways();
    let needs_aug = methods.iter().any(|m| m.augment);
    if needs_aug && pipelines.is_empty() {
        return Err(Error::Config("augmented evaluation needs at least one pipeline".into()));
    }
    let branches = if needs_aug {
        build_augmented_sets(episode, pipelines, seed::derive(seed, &[2]))?
    } else {
        Vec::new()
    };
    let ft_seed = seed::derive(seed, &[1]);
    let mut plain_ft = None;
    let mut aug_ft = None;
    let mut out = Vec::with_capacity(methods.len());
    for m in methods {
        let tuned = match (m.finetune, m.augment) {
            (false, _) => model,
            (true, false) => &*plain_ft.get_or_insert(fine_tune(model, &[&episode.support], ways, finetune, ft_seed)?.model),
            (true, true) => {
                if aug_ft.is_none() {
                    let sets: Vec<_> = branches.iter().map(|b| b.support.as_slice()).collect();
                    aug_ft = Some(fine_tune(model, &sets, ways, finetune, ft_seed)?.model);
                }
                aug_ft.as_ref().expect("set above")
            }
        };
        let pred = if m.augment {
            predict_ensemble(tuned, &branches, m.t)?
        } else {
            predict_episode(tuned, episode, m.t)?
        };
        out.push(record(id, seed, &pred, episode));
    }
    Ok(out)
}

/// Evaluates `methods` on `cfg.episodes` seeded episodes using `jobs`
/// worker threads. Records are returned per method in episode order and do
/// not depend on `jobs`.
pub fn evaluate(
    model: &ModelState,
    target: &Dataset,
    cfg: &EvalConfig,
    finetune: &FinetuneConfig,
    pipelines: &[AugPipeline],
    methods: &[Method],
    jobs: usize,
) -> Result<Vec<Vec<EpisodeRecord>>> {
    cfg.validate()?;
    finetune.validate()?;
    let run = |i: usize| {
        let s = episode_seed(cfg.seed, i);
        let episode = sample_episode(target, cfg.way, cfg.shot, cfg.query, s)?;
        evaluate_episode(model, &episode, i, s, finetune, pipelines, methods)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("cannot start worker pool: {e}")))?;
    let per_episode: Vec<Vec<EpisodeRecord>> =
        pool.install(|| (0..cfg.episodes).into_par_iter().map(run).collect::<Result<_>>())?;
    let mut per_method = vec![Vec::with_capacity(cfg.episodes); methods.len()];
    for recs in per_episode {
        for (m, r) in recs.into_iter().enumerate() {
            per_method[m].push(r);
        }
    }
    Ok(per_method)
}

pub fn write_records(path: &Path, records: &[EpisodeRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Mean and 95% confidence half-width `1.96·s/√n` with the sample standard
/// deviation `s` (denominator `n − 1`; zero for a single value).
pub fn mean_ci95(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Invalid("no values to summarize".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

/// `"xx.xx% ± x.xx%"` for fractions `mean` and `ci`.
pub fn format_mean_ci(mean: f64, ci: f64) -> String {
    format!("{:.2}% ± {:.2}%", 100.0 * mean, 100.0 * ci)
}

/// Accuracy summary of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub per_episode_acc: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub n_episodes: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn new(method: &str, per_episode_acc: Vec<f64>, config_hash: &str) -> Result<Self> {
        let (mean, ci95) = mean_ci95(&per_episode_acc)?;
        Ok(EvalReport {
            method: method.to_string(),
            n_episodes: per_episode_acc.len(),
            per_episode_acc,
            mean,
            ci95,
            config_hash: config_hash.to_string(),
        })
    }

    pub fn from_records(method: &str, records: &[EpisodeRecord], config_hash: &str) -> Result<Self> {
        Self::new(method, records.iter().map(|r| r.accuracy).collect(), config_hash)
    }

    pub fn summary(&self) -> String {
        format_mean_ci(self.mean, self.ci95)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: EvalReport = serde_json::from_str(&text)?;
        if r.per_episode_acc.len() != r.n_episodes {
            return Err(Error::Invalid(format!(
                "{}: n_episodes {} but {} accuracies",
                path.display(),
                r.n_episodes,
                r.per_episode_acc.len()
            )));
        }
        Ok(r)
    }
}

/// Difference `a − b` of two reports over the same episodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub delta: f64,
    /// Half-width from per-episode differences.
    pub paired_ci95: f64,
    /// Half-width treating the runs as independent samples.
    pub unpaired_ci95: f64,
}

impl Comparison {
    pub fn summary(&self) -> String {
        format!(
            "{} (unpaired ± {:.2}%)",
            format_mean_ci(self.delta, self.paired_ci95),
            100.0 * self.unpaired_ci95
        )
    }
}

pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Comparison> {
    if a.n_episodes != b.n_episodes || a.per_episode_acc.len() != b.per_episode_acc.len() {
        return Err(Error::Invalid(format!(
            "reports cover different episode counts ({} vs {})",
            a.n_episodes, b.n_episodes
        )));
    }
    let diffs: Vec<f64> = a.per_episode_acc.iter().zip(&b.per_episode_acc).map(|(x, y)| x - y).collect();
    let (delta, paired) = mean_ci95(&diffs)?;
    let n = a.n_episodes as f64;
    let (sa, sb) = (a.ci95 * n.sqrt() / 1.96, b.ci95 * n.sqrt() / 1.96);
    let unpaired = 1.96 * ((sa * sa + sb * sb) / n).sqrt();
    Ok(Comparison {
        delta,
        paired_ci95: paired,
        unpaired_ci95: unpaired,
    })
}
