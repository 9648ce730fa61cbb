use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{Report, ReportRow};
use super::{train, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{ChannelMask, Strategy};

/// Which ablation rows to run. Empty lists mean "all".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationToggles {
    pub masks: Vec<ChannelMask>,
    /// `true` runs the tri-transformer, `false` the concat_only path.
    pub fusion: Vec<bool>,
}

impl AblationToggles {
    pub fn rows(&self) -> Vec<(ChannelMask, bool)> {
        let masks = if self.masks.is_empty() {
            ChannelMask::all_nonempty()
        } else {
            self.masks.clone()
        };
        let fusion = if self.fusion.is_empty() {
            vec![true, false]
        } else {
            self.fusion.clone()
        };
        let mut rows = Vec::with_capacity(masks.len() * fusion.len());
        for m in masks {
            for &f in &fusion {
                rows.push((m, f));
            }
        }
        rows
    }
}

fn run_row(name: String, dataset: &Dataset, config: &TrainConfig) -> ReportRow {
    match train(dataset, config) {
        Ok(out) => ReportRow::ok(
            name,
            *out.final_metrics(),
            out.model.params().numel(),
            out.model.attention_param_count(),
        ),
        Err(e) => {
            log::warn!("{name}: {e}");
            ReportRow::failed(name, &e)
        }
    }
}

fn run_all(jobs: Vec<(String, TrainConfig)>, dataset: &Dataset, threads: usize) -> Result<Vec<ReportRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.into_par_iter()
            .map(|(name, cfg)| run_row(name, dataset, &cfg))
            .collect()
    }))
}

/// Trains every compared strategy from the same seed and split.
pub fn compare_fusions(dataset: &Dataset, base: &TrainConfig, threads: usize) -> Result<Report> {
    let jobs = Strategy::COMPARED
        .iter()
        .map(|&s| {
            let mut cfg = *base;
            cfg.fusion.strategy = s;
            (s.name().to_string(), cfg)
        })
        .collect();
    Ok(Report::new("strategy", run_all(jobs, dataset, threads)?))
}

/// Channel mask × fusion on/off grid.
pub fn run_ablation(
    dataset: &Dataset,
    base: &TrainConfig,
    toggles: &AblationToggles,
    threads: usize,
) -> Result<Report> {
    let jobs = toggles
        .rows()
        .into_iter()
        .map(|(mask, fused)| {
            let mut cfg = *base;
            cfg.fusion.channel_mask = mask;
            cfg.fusion.strategy = if fused {
                Strategy::TriTransformer
            } else {
                Strategy::ConcatOnly
            };
            (format!("{}/{}", cfg.fusion.strategy.name(), mask.label()), cfg)
        })
        .collect();
    Ok(Report::new("config", run_all(jobs, dataset, threads)?))
}
