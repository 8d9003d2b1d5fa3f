use std::collections::HashMap;
use std::sync::Arc;

use super::preset::Plan;
use super::ExperimentError;
use crate::data::Dataset;
use crate::metrics::MetricsReport;
use crate::train::{parallel_map, run_once, Evaluation, ExperimentConfig, RunResult};

/// Finished runs keyed by training configuration, shared across plans so a
/// setting that appears in several presets is trained once.
#[derive(Default)]
pub struct RunCache {
    runs: HashMap<String, Arc<RunResult>>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

/// Training is identical with and without stripping, so the key ignores it.
fn training_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        strip_bn_at_inference: false,
        ..cfg.clone()
    }
}

fn training_key(cfg: &ExperimentConfig) -> String {
    serde_json::to_string(&training_config(cfg)).expect("experiment configs always serialize")
}

/// A plan with one finished run per (entry, repeat).
pub struct ExecutedPlan {
    pub plan: Plan,
    /// `runs[entry][repeat]`.
    pub runs: Vec<Vec<Arc<RunResult>>>,
}

impl ExecutedPlan {
    /// Test evaluation of one run as the entry asks for it: stripped entries
    /// read the stripped scores of the shared training run.
    pub fn evaluation(&self, entry: usize, repeat: usize) -> &Evaluation {
        let run = &self.runs[entry][repeat];
        if self.plan.entries[entry].config.strip_bn_at_inference {
            run.stripped_test.as_ref().unwrap_or(&run.test)
        } else {
            &run.test
        }
    }

    pub fn reports(&self, entry: usize) -> Vec<&MetricsReport> {
        (0..self.runs[entry].len())
            .map(|k| &self.evaluation(entry, k).report)
            .collect()
    }

    pub fn entry_index(&self, variant: &str) -> Option<usize> {
        self.plan.entries.iter().position(|e| e.variant == variant)
    }
}

/// Runs every (entry, repeat) of `plan` not already in `cache` on up to
/// `workers` threads. `on_run` sees each newly finished run. Fails with the
/// first error in plan order after all jobs have finished.
pub fn execute_plan(
    plan: &Plan,
    source: &Dataset,
    workers: usize,
    cache: &mut RunCache,
    on_run: &(dyn Fn(&RunResult) + Sync),
) -> Result<ExecutedPlan, ExperimentError> {
    plan.validate()?;
    let mut pending: Vec<ExperimentConfig> = Vec::new();
    let mut queued = std::collections::HashSet::new();
    for e in 0..plan.entries.len() {
        for k in 0..plan.repeats {
            let cfg = training_config(&plan.run_config(e, k));
            let key = training_key(&cfg);
            if !cache.runs.contains_key(&key) && queued.insert(key) {
                pending.push(cfg);
            }
        }
    }
    let outcomes = parallel_map(&pending, workers, |cfg| {
        let r = run_once(cfg, source);
        if let Ok(run) = &r {
            on_run(run);
        }
        r
    });
    let mut first_error = None;
    for (cfg, outcome) in pending.iter().zip(outcomes) {
        match outcome {
            Ok(run) => {
                cache.runs.insert(training_key(cfg), Arc::new(run));
            }
            Err(e) if first_error.is_none() => first_error = Some(e),
            Err(_) => {}
        }
    }
    if let Some(e) = first_error {
        return Err(e.into());
    }
    let runs = (0..plan.entries.len())
        .map(|e| {
            (0..plan.repeats)
                .map(|k| Arc::clone(&cache.runs[&training_key(&plan.run_config(e, k))]))
                .collect()
        })
        .collect();
    Ok(ExecutedPlan {
        plan: plan.clone(),
        runs,
    })
}
