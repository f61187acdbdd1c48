//! Evaluation harness: scenario files, seeded perturbations, the
//! plan → skills → simulator loop and reports.
//!
//! Perturbations model placement variation (Gaussian planar jitter of
//! graspable objects), held-out object labels (category substitution in
//! the world, the scene annotations and the instruction), background swaps
//! and start-pose jitter. Texture and lighting have no counterpart in the
//! simulator.

mod perturb;
mod run;
mod scenario;

pub use perturb::{replace_word, trial_rng, Perturbation};
pub use run::{
    command_error, replay_check, run_trial, DecoupledDriver, EpisodeOrigin, ReplayCheck, StepRecord, TrialOptions,
    TrialOutcome, TrialResult,
};
pub use scenario::{Budget, EvaluatorSpec, Goal, PerturbationSpec, Scenario, Setup, SCENARIO_SCHEMA_VERSION};

use crate::attention::AttentionError;
use crate::demos::DemoError;
use crate::llm::LlmError;
use crate::planner::PlannerError;
use crate::simworld::{ConfigError, ControlMode};
use crate::skills::PolicyError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use thiserror::Error;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Embeddings(#[from] AttentionError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub scenario: String,
    pub control_mode: ControlMode,
    pub perturbed: bool,
    pub seed: u64,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful trials; `None` without any.
    pub mean_completion_time: Option<f64>,
    /// Failure stage → count.
    pub failures: BTreeMap<String, usize>,
    pub results: Vec<TrialResult>,
}

impl Report {
    /// Assembles a report; results are ordered by trial index.
    pub fn from_results(
        scenario: &str,
        control_mode: ControlMode,
        perturbed: bool,
        seed: u64,
        mut results: Vec<TrialResult>,
    ) -> Self {
        results.sort_by_key(|r| r.index);
        let trials = results.len();
        let successes = results.iter().filter(|r| r.success).count();
        let times: Vec<f64> = results.iter().filter_map(|r| r.completion_time).collect();
        let mut failures = BTreeMap::new();
        for stage in results.iter().filter_map(|r| r.failure_stage.as_ref()) {
            *failures.entry(stage.clone()).or_insert(0) += 1;
        }
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            scenario: scenario.into(),
            control_mode,
            perturbed,
            seed,
            trials,
            successes,
            success_rate: if trials == 0 { 0.0 } else { successes as f64 / trials as f64 },
            mean_completion_time: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
            failures,
            results,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<6} {:<8} {:>9} {:<28} stage", "trial", "success", "time (s)", "tasks");
        for r in &self.results {
            let time = r.completion_time.map_or("-".to_string(), |t| format!("{t:.2}"));
            let _ = writeln!(
                out,
                "{:<6} {:<8} {:>9} {:<28} {}",
                r.index,
                if r.success { "yes" } else { "no" },
                time,
                r.tasks.len(),
                r.failure_stage.as_deref().unwrap_or("-")
            );
        }
        let _ = writeln!(
            out,
            "{}: {}/{} succeeded ({:.0}%), mean completion {}",
            self.scenario,
            self.successes,
            self.trials,
            100.0 * self.success_rate,
            fmt_time(self.mean_completion_time)
        );
        out
    }
}

fn fmt_time(t: Option<f64>) -> String {
    t.map_or("-".to_string(), |t| format!("{t:.2} s"))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    pub mode: Option<ControlMode>,
    pub nominal: bool,
    /// Overrides the scenario's trial count.
    pub trials: Option<usize>,
}

/// Runs every trial (in parallel); one failed trial never aborts the batch.
pub fn run_scenario(setup: &Setup, opts: &RunOptions) -> Result<Report, HarnessError> {
    let trials = opts.trials.unwrap_or(setup.scenario.trials);
    let mode = opts.mode.unwrap_or_else(|| setup.control_mode());
    let trial_opts = TrialOptions {
        mode: Some(mode),
        nominal: opts.nominal,
        ..Default::default()
    };
    let results = (0..trials)
        .into_par_iter()
        .map(|i| run_trial(setup, i, &trial_opts).map(|o| o.result))
        .collect::<Result<Vec<_>, _>>()?;
    let perturbed = !opts.nominal && !setup.scenario.perturbation.is_none();
    Ok(Report::from_results(&setup.scenario.name, mode, perturbed, setup.scenario.seed, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub control_mode: ControlMode,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_completion_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub schema_version: u32,
    pub scenario: String,
    pub rows: Vec<ModeRow>,
    pub reports: Vec<Report>,
}

impl ModeComparison {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8} {:>14}", "mode", "success", "mean time");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>7.0}% {:>14}",
                r.control_mode.as_str(),
                100.0 * r.success_rate,
                fmt_time(r.mean_completion_time)
            );
        }
        out
    }

    pub fn row(&self, mode: ControlMode) -> Option<&ModeRow> {
        self.rows.iter().find(|r| r.control_mode == mode)
    }
}

/// Re-runs the scenario once per control mode, in the given order.
pub fn compare_modes(setup: &Setup, modes: &[ControlMode], opts: &RunOptions) -> Result<ModeComparison, HarnessError> {
    let mut reports = Vec::with_capacity(modes.len());
    for &mode in modes {
        reports.push(run_scenario(setup, &RunOptions { mode: Some(mode), ..*opts })?);
    }
    let rows = reports
        .iter()
        .map(|r| ModeRow {
            control_mode: r.control_mode,
            trials: r.trials,
            successes: r.successes,
            success_rate: r.success_rate,
            mean_completion_time: r.mean_completion_time,
        })
        .collect();
    Ok(ModeComparison {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: setup.scenario.name.clone(),
        rows,
        reports,
    })
}
