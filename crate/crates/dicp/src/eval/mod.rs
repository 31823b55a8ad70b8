//! Experiment orchestration: scene suites, noise sweeps, and report files.
//!
//! A report is three files in one directory. `summary.csv` has one row per
//! noise scale and mode, `runs.csv` has one row per registration attempt,
//! and `boxplot.json` has error quantiles for distribution plots. All floats
//! print in shortest round-trip form, so identical inputs produce
//! byte-identical reports and every summary number can be recomputed exactly
//! from the run records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::icp::IcpConfig;
use crate::mask::{load_mask_pgm, WeightMask};
use crate::scene::{generate_scene, standard_suite, SceneSpec};
use crate::trainer::{
    prepare_eval_sample, run_grid, summarize, train_mask, EvalMode, InitDistribution, ModeSummary,
    RunRecord, TrainConfig, TrainSample,
};

/// Where the evaluation's weight masks come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Unweighted evaluation only.
    None,
    /// Train one mask per scene before evaluating.
    Trained,
    /// Load one saved mask and apply it to every scene.
    File(PathBuf),
}

impl Default for MaskSource {
    fn default() -> Self {
        MaskSource::None
    }
}

impl FromStr for MaskSource {
    type Err = Error;

    /// `none`, `trained`, or a mask file path.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => MaskSource::None,
            "trained" => MaskSource::Trained,
            path => MaskSource::File(PathBuf::from(path)),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenes: Vec<SceneSpec>,
    pub mask_source: MaskSource,
    /// Noise scales for the initial-guess sweep.
    pub sigmas: Vec<f64>,
    /// Initial guesses per scene per scale.
    pub trials: usize,
    /// Solver used for evaluation runs (must not be differentiable).
    pub icp: IcpConfig,
    /// Training setup, used only with `MaskSource::Trained`. Scene `i`
    /// trains with seed `train.seed + i`.
    pub train: TrainConfig,
    /// How initial guesses are drawn (bounds become standard deviations
    /// under `Normal`).
    pub init_distribution: InitDistribution,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenes: standard_suite(),
            mask_source: MaskSource::None,
            sigmas: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            trials: 50,
            icp: IcpConfig::default(),
            train: TrainConfig::default(),
            init_distribution: InitDistribution::Uniform,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes.is_empty() {
            return Err(Error::Config("experiment needs at least one scene".into()));
        }
        for scene in &self.scenes {
            scene.validate()?;
        }
        if self.sigmas.is_empty() {
            return Err(Error::Config(
                "experiment needs at least one noise scale".into(),
            ));
        }
        if let Some(bad) = self.sigmas.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::Config(format!(
                "noise scales must be nonnegative and finite, got {bad}"
            )));
        }
        if self.trials == 0 {
            return Err(Error::Config(
                "trials must be at least 1; zero trials would make an empty report".into(),
            ));
        }
        if self.icp.differentiable {
            return Err(Error::Config(
                "evaluation uses the plain solver; disable differentiable mode".into(),
            ));
        }
        self.icp.validate()?;
        if self.mask_source == MaskSource::Trained {
            self.train.validate()?;
        }
        Ok(())
    }
}

/// One `summary.csv` row.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SummaryRow {
    pub sigma: f64,
    pub mode: EvalMode,
    pub metrics: ModeSummary,
}

pub struct ExperimentReport {
    /// Ordered by noise scale (input order), unweighted before weighted.
    pub summary: Vec<SummaryRow>,
    /// Ordered by noise scale, then scene, then trial, then mode.
    pub runs: Vec<RunRecord>,
    /// One mask per scene when masks were trained or loaded, else empty.
    pub masks: Vec<WeightMask>,
}

/// Runs the full sweep: generate scenes, acquire masks, solve the
/// scene x trial grid at every noise scale in both modes.
///
/// The same base seed drives every scale, so a trial's initial guess at
/// scale s is the scale-(s/s') multiple of its guess at s': scales differ
/// only in perturbation size, never in draw luck. Failed solves are
/// recorded as non-converged and never abort the sweep.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let scenes = cfg
        .scenes
        .iter()
        .map(generate_scene)
        .collect::<Result<Vec<_>>>()?;
    // Registration uses the generated scan-frame points directly: they stay
    // aligned one-to-one with the scene labels, and a clean scene registers
    // exactly. The scan itself feeds the detector lane (`extract`,
    // `TrainSample::from_scene`), which quantizes to range bins.
    let samples: Vec<TrainSample> = scenes
        .iter()
        .map(|s| TrainSample {
            scan: s.scan.clone(),
            source: s.scan_source.clone(),
            map: s.map.clone(),
            ground_truth: s.ground_truth,
        })
        .collect();
    let masks: Vec<WeightMask> = match &cfg.mask_source {
        MaskSource::None => Vec::new(),
        MaskSource::Trained => samples
            .iter()
            .enumerate()
            .map(|(i, sample)| {
                let train = TrainConfig {
                    seed: cfg.train.seed.wrapping_add(i as u64),
                    ..cfg.train.clone()
                };
                train_mask(sample, &train).map(|outcome| outcome.mask)
            })
            .collect::<Result<_>>()?,
        MaskSource::File(path) => {
            let mask = load_mask_pgm(path)?;
            vec![mask; samples.len()]
        }
    };
    let prepared = samples
        .iter()
        .enumerate()
        .map(|(i, sample)| prepare_eval_sample(sample, masks.get(i), &cfg.icp))
        .collect::<Result<Vec<_>>>()?;

    let mut summary = Vec::new();
    let mut runs = Vec::new();
    for &sigma in &cfg.sigmas {
        let records = run_grid(
            &prepared,
            sigma,
            cfg.trials,
            &cfg.icp,
            cfg.seed,
            cfg.init_distribution,
        );
        summary.push(SummaryRow {
            sigma,
            mode: EvalMode::Unweighted,
            metrics: summarize(records.iter().filter(|r| r.mode == EvalMode::Unweighted)),
        });
        if !masks.is_empty() {
            summary.push(SummaryRow {
                sigma,
                mode: EvalMode::Weighted,
                metrics: summarize(records.iter().filter(|r| r.mode == EvalMode::Weighted)),
            });
        }
        runs.extend(records);
    }
    Ok(ExperimentReport {
        summary,
        runs,
        masks,
    })
}

pub const SUMMARY_HEADER: &str =
    "sigma,mode,rmse_long_m,rmse_lat_m,rmse_head_deg,converged_pct,accurate_pct";
pub const RUNS_HEADER: &str =
    "scene,trial,sigma,mode,e_long_m,e_lat_m,e_head_rad,converged,accurate";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for row in rows {
        let m = &row.metrics;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            row.sigma,
            row.mode,
            m.rmse_long,
            m.rmse_lat,
            m.rmse_head_deg,
            m.converged_pct,
            m.accurate_pct
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn runs_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(RUNS_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.sample,
            r.trial,
            r.sigma,
            r.mode,
            r.e_long,
            r.e_lat,
            r.e_head,
            r.converged as u8,
            r.accurate as u8
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Parses a `runs.csv` emitted by [`runs_csv`] back into records.
pub fn read_runs_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == RUNS_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "run CSV must start with {RUNS_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::Data(format!(
                "run CSV row {}: expected 9 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Data(format!("run CSV row {}: bad {what}", lineno + 2));
        let flag = |s: &str, what: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(what)),
        };
        records.push(RunRecord {
            sample: fields[0].parse().map_err(|_| bad("scene index"))?,
            trial: fields[1].parse().map_err(|_| bad("trial index"))?,
            sigma: fields[2].parse().map_err(|_| bad("sigma"))?,
            mode: fields[3].parse()?,
            e_long: fields[4].parse().map_err(|_| bad("e_long_m"))?,
            e_lat: fields[5].parse().map_err(|_| bad("e_lat_m"))?,
            e_head: fields[6].parse().map_err(|_| bad("e_head_rad"))?,
            converged: flag(fields[7], "converged flag")?,
            accurate: flag(fields[8], "accurate flag")?,
        });
    }
    Ok(records)
}

/// Rebuilds summary rows from run records, grouping by (sigma, mode) in
/// first-appearance order. Applied to the records behind a report, this
/// reproduces its summary exactly: both go through [`summarize`].
pub fn recompute_summary(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(f64, EvalMode)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(s, m)| *s == r.sigma && *m == r.mode) {
            keys.push((r.sigma, r.mode));
        }
    }
    keys.into_iter()
        .map(|(sigma, mode)| SummaryRow {
            sigma,
            mode,
            metrics: summarize(
                records
                    .iter()
                    .filter(|r| r.sigma == sigma && r.mode == mode),
            ),
        })
        .collect()
}

/// Five-number summary of one error component in one (sigma, mode) group,
/// over converged runs only.
#[derive(Clone, Debug, Serialize)]
pub struct BoxplotGroup {
    pub sigma: f64,
    pub mode: EvalMode,
    pub component: &'static str,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear quantile interpolation on sorted data (the common spreadsheet
/// definition: index h = (n-1)p, blend the straddling order statistics).
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn boxplot_groups(records: &[RunRecord]) -> Vec<BoxplotGroup> {
    let components: [(&'static str, fn(&RunRecord) -> f64); 3] = [
        ("longitudinal_m", |r| r.e_long),
        ("lateral_m", |r| r.e_lat),
        ("heading_rad", |r| r.e_head),
    ];
    let mut keys: Vec<(f64, EvalMode)> = Vec::new();
    for r in records {
        if !keys.iter().any(|(s, m)| *s == r.sigma && *m == r.mode) {
            keys.push((r.sigma, r.mode));
        }
    }
    let mut groups = Vec::new();
    for (sigma, mode) in keys {
        for (component, extract) in components {
            let mut errors: Vec<f64> = records
                .iter()
                .filter(|r| r.sigma == sigma && r.mode == mode && r.converged)
                .map(extract)
                .collect();
            if errors.is_empty() {
                continue;
            }
            errors.sort_unstable_by(f64::total_cmp);
            groups.push(BoxplotGroup {
                sigma,
                mode,
                component,
                count: errors.len(),
                min: errors[0],
                q1: quantile(&errors, 0.25),
                median: quantile(&errors, 0.5),
                q3: quantile(&errors, 0.75),
                max: *errors.last().expect("nonempty"),
            });
        }
    }
    groups
}

pub fn boxplot_json(records: &[RunRecord]) -> Result<String> {
    #[derive(Serialize)]
    struct Doc {
        groups: Vec<BoxplotGroup>,
    }
    let mut text = serde_json::to_string_pretty(&Doc {
        groups: boxplot_groups(records),
    })
    .map_err(|e| Error::Data(format!("boxplot serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Writes `summary.csv`, `runs.csv`, and `boxplot.json` into `dir`,
/// creating it if needed.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.csv"), summary_csv(&report.summary))?;
    std::fs::write(dir.join("runs.csv"), runs_csv(&report.runs))?;
    std::fs::write(dir.join("boxplot.json"), boxplot_json(&report.runs)?)?;
    Ok(())
}
