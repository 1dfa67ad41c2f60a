//! Fixed-policy evaluation: greedy success-rate measurement, the view-subset
//! robustness matrix, Wilson confidence intervals, and cross-architecture
//! comparison arithmetic.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::arch::{ArchitectureId, QNetworkParams, ViewMask};
use crate::cem::{cem_maximize, q_evaluator, CemConfig};
use crate::render::{nominal_cameras, observe, perturb_cameras, MultiViewObservation, ViewImage};
use crate::sim::{check_success, reset_episode, step, Task, TaskConfig};
use crate::trainer::mix;
use crate::{Error, Result};

/// One success-rate measurement with its 95% Wilson interval, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetRate {
    pub label: String,
    pub successes: usize,
    pub rate_pct: f64,
    pub wilson_lo_pct: f64,
    pub wilson_hi_pct: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub arch: String,
    pub task: String,
    pub n_episodes: usize,
    pub entries: Vec<SubsetRate>,
    pub checkpoint_id: String,
    pub seed: u64,
}

/// 95% Wilson score interval for k successes in n trials, as fractions.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    debug_assert!(n > 0 && k <= n);
    let z = 1.959_963_984_540_054_f64;
    let (k, n) = (k as f64, n as f64);
    let p = k / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// (base − ours) / base, in percent, on failure rates given in percent.
pub fn failure_rate_reduction(base_failure_pct: f64, ours_failure_pct: f64) -> f64 {
    (base_failure_pct - ours_failure_pct) / base_failure_pct * 100.0
}

fn view_names(n: usize) -> Vec<String> {
    if n == 3 {
        vec!["Shoulder".into(), "Left".into(), "Right".into()]
    } else {
        (0..n).map(|i| format!("V{i}")).collect()
    }
}

pub fn subset_label(mask: &ViewMask) -> String {
    if mask.count() == mask.len() {
        return "All".into();
    }
    let names = view_names(mask.len());
    mask.selected()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(i, _)| names[i].clone())
        .collect::<Vec<_>>()
        .join("+")
}

/// Parse a label back into a mask ("All", "Shoulder+Right", "Left", ...).
pub fn subset_from_label(label: &str, n: usize) -> Result<ViewMask> {
    if label == "All" {
        return Ok(ViewMask::all(n));
    }
    let names = view_names(n);
    let mut selected = vec![false; n];
    for part in label.split('+') {
        let i = names
            .iter()
            .position(|s| s == part)
            .ok_or_else(|| Error::Config(format!("unknown view name '{part}'")))?;
        selected[i] = true;
    }
    ViewMask::new(selected)
}

/// All nonempty subsets, largest first: for n=3 this is All, Shoulder+Left,
/// Shoulder+Right, Left+Right, Shoulder, Left, Right.
pub fn all_subsets(n: usize) -> Vec<ViewMask> {
    let mut bits: Vec<u32> = (1..(1u32 << n)).collect();
    bits.sort_by_key(|b| (std::cmp::Reverse(b.count_ones()), *b));
    bits.into_iter()
        .map(|b| ViewMask::from_bits(n, b).unwrap())
        .collect()
}

fn zero_view(like: &ViewImage) -> ViewImage {
    ViewImage {
        resolution: like.resolution,
        channels: like.channels,
        data: Arc::new(vec![0u8; like.data.len()]),
        view_id: like.view_id,
    }
}

/// How a given architecture sees a restricted view subset: dropout applies
/// its mask natively, single-view architectures ignore the subset, everything
/// else gets the missing views' images zero-filled.
fn restrict_obs<'a>(
    arch: ArchitectureId,
    obs: &'a MultiViewObservation,
    subset: Option<&'a ViewMask>,
) -> (std::borrow::Cow<'a, MultiViewObservation>, Option<&'a ViewMask>) {
    use std::borrow::Cow;
    match (arch, subset) {
        (_, None) => (Cow::Borrowed(obs), None),
        (ArchitectureId::MvDropout, Some(m)) => (Cow::Borrowed(obs), Some(m)),
        (a, Some(_)) if a.is_single_view() => (Cow::Borrowed(obs), None),
        (_, Some(m)) => {
            let views = obs
                .views
                .iter()
                .zip(m.selected())
                .map(|(v, &keep)| if keep { v.clone() } else { zero_view(v) })
                .collect();
            (
                Cow::Owned(MultiViewObservation {
                    views,
                    gripper_aperture: obs.gripper_aperture,
                }),
                None,
            )
        }
    }
}

/// One greedy episode; returns task success.
fn rollout(
    params: &QNetworkParams,
    task_cfg: &TaskConfig,
    cem: &CemConfig,
    resolution: usize,
    subset: Option<&ViewMask>,
    seed: u64,
) -> Result<bool> {
    let with_depth = params.arch.requires_depth();
    let mut state = reset_episode(task_cfg, seed)?;
    let cameras = perturb_cameras(&nominal_cameras(), mix(seed, 1));
    loop {
        let obs = observe(&state, &cameras, with_depth, resolution);
        let (obs, mask) = restrict_obs(params.arch, &obs, subset);
        let step_seed = mix(seed, 100 + state.step_count as u64);
        let q = q_evaluator(params, &obs, mask)?;
        let (action, _) = cem_maximize(q, cem, step_seed)?;
        let out = step(&state, &action, task_cfg);
        if out.terminal {
            return Ok(check_success(&out.state, task_cfg));
        }
        state = out.state;
    }
}

fn measure_subset(
    params: &QNetworkParams,
    task_cfg: &TaskConfig,
    cem: &CemConfig,
    resolution: usize,
    subset: Option<&ViewMask>,
    n_episodes: usize,
    seed: u64,
) -> Result<SubsetRate> {
    let flags: Vec<bool> = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            rollout(
                params,
                task_cfg,
                cem,
                resolution,
                subset,
                mix(seed, 1000 + i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let successes = flags.iter().filter(|&&s| s).count();
    let (lo, hi) = wilson_interval(successes, n_episodes);
    Ok(SubsetRate {
        label: subset.map_or("All".into(), subset_label),
        successes,
        rate_pct: successes as f64 / n_episodes as f64 * 100.0,
        wilson_lo_pct: lo * 100.0,
        wilson_hi_pct: hi * 100.0,
    })
}

fn check_eval_args(
    params: &QNetworkParams,
    n_episodes: usize,
    subset: Option<&ViewMask>,
) -> Result<()> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be positive".into()));
    }
    if let Some(m) = subset {
        if m.len() != params.n_views {
            return Err(Error::Config(format!(
                "subset has {} views, checkpoint expects {}",
                m.len(),
                params.n_views
            )));
        }
    }
    Ok(())
}

/// Greedy success rate of a checkpoint over `n_episodes`, optionally under a
/// restricted view subset.
pub fn evaluate(
    params: &QNetworkParams,
    task: Task,
    n_episodes: usize,
    subset: Option<&ViewMask>,
    seed: u64,
    cem: &CemConfig,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    check_eval_args(params, n_episodes, subset)?;
    let task_cfg = TaskConfig::new(task);
    let entry = measure_subset(
        params,
        &task_cfg,
        cem,
        params.resolution,
        subset,
        n_episodes,
        seed,
    )?;
    Ok(EvalReport {
        arch: params.arch.tag().into(),
        task: task.tag().into(),
        n_episodes,
        entries: vec![entry],
        checkpoint_id: checkpoint_id.into(),
        seed,
    })
}

/// The full 2ⁿ−1 view-subset matrix for a multi-view checkpoint.
pub fn robustness_matrix(
    params: &QNetworkParams,
    task: Task,
    n_episodes: usize,
    seed: u64,
    cem: &CemConfig,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    if params.arch.is_single_view() {
        return Err(Error::Config(format!(
            "robustness matrix needs a multi-view checkpoint, got {}",
            params.arch.tag()
        )));
    }
    check_eval_args(params, n_episodes, None)?;
    let task_cfg = TaskConfig::new(task);
    let entries = all_subsets(params.n_views)
        .iter()
        .map(|m| {
            measure_subset(
                params,
                &task_cfg,
                cem,
                params.resolution,
                Some(m),
                n_episodes,
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        arch: params.arch.tag().into(),
        task: task.tag().into(),
        n_episodes,
        entries,
        checkpoint_id: checkpoint_id.into(),
        seed,
    })
}

// --- report CSV -------------------------------------------------------------

const REPORT_HEADER: &str =
    "arch,task,episodes,subset,successes,success_rate,wilson_lo,wilson_hi,checkpoint,seed";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{},{:.4},{:.4},{:.4},{},{}\n",
                self.arch,
                self.task,
                self.n_episodes,
                e.label,
                e.successes,
                e.rate_pct,
                e.wilson_lo_pct,
                e.wilson_hi_pct,
                self.checkpoint_id,
                self.seed,
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<EvalReport> {
        let bad = |reason: &str| Error::Format {
            path: "report csv".into(),
            reason: reason.into(),
        };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(REPORT_HEADER) {
            return Err(bad("missing report header"));
        }
        let mut report: Option<EvalReport> = None;
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad("wrong column count"));
            }
            let parse_f = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            let entry = SubsetRate {
                label: f[3].to_string(),
                successes: f[4].parse().map_err(|_| bad("bad count"))?,
                rate_pct: parse_f(f[5])?,
                wilson_lo_pct: parse_f(f[6])?,
                wilson_hi_pct: parse_f(f[7])?,
            };
            match &mut report {
                None => {
                    report = Some(EvalReport {
                        arch: f[0].to_string(),
                        task: f[1].to_string(),
                        n_episodes: f[2].parse().map_err(|_| bad("bad count"))?,
                        entries: vec![entry],
                        checkpoint_id: f[8].to_string(),
                        seed: f[9].parse().map_err(|_| bad("bad seed"))?,
                    })
                }
                Some(r) => {
                    if r.arch != f[0] || r.task != f[1] {
                        return Err(bad("mixed rows in one report"));
                    }
                    r.entries.push(entry);
                }
            }
        }
        report.ok_or_else(|| bad("empty report"))
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        EvalReport::from_csv(&std::fs::read_to_string(path)?)
    }

    /// The all-views entry (label "All"), or the sole entry.
    pub fn headline(&self) -> &SubsetRate {
        self.entries
            .iter()
            .find(|e| e.label == "All")
            .unwrap_or(&self.entries[0])
    }
}

/// Comparison CSV: one row per report, with the failure-rate reduction
/// relative to the first report as (base − ours) / base.
pub fn compare_architectures(reports: &[EvalReport]) -> Result<String> {
    if reports.len() < 2 {
        return Err(Error::Config("comparison needs at least two reports".into()));
    }
    let base = &reports[0];
    for r in reports {
        if r.task != base.task {
            return Err(Error::Config(format!(
                "task mismatch: {} vs {}",
                r.task, base.task
            )));
        }
    }
    let base_failure = 100.0 - base.headline().rate_pct;
    let mut out = String::from("arch,task,success_rate,failure_rate,failure_reduction_vs_base\n");
    for r in reports {
        let s = r.headline().rate_pct;
        let f = 100.0 - s;
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4}\n",
            r.arch,
            r.task,
            s,
            f,
            failure_rate_reduction(base_failure, f),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_matches_published_values() {
        // 8 successes in 10 trials: the standard worked example gives
        // (0.4902, 0.9433) at 95%.
        let (lo, hi) = wilson_interval(8, 10);
        assert!((lo - 0.4902).abs() < 1e-3, "{lo}");
        assert!((hi - 0.9433).abs() < 1e-3, "{hi}");
        let (lo, hi) = wilson_interval(0, 10);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.35);
    }

    #[test]
    fn failure_reduction_closed_form() {
        assert!((failure_rate_reduction(17.14, 8.71) - 49.1832).abs() < 1e-3);
        assert!((failure_rate_reduction(35.43, 15.29) - 56.8445).abs() < 1e-3);
        assert!((failure_rate_reduction(36.57, 13.14) - 64.0689).abs() < 1e-3);
        assert_eq!(failure_rate_reduction(20.0, 20.0), 0.0);
    }

    #[test]
    fn subset_enumeration_and_labels() {
        let subsets = all_subsets(3);
        let labels: Vec<String> = subsets.iter().map(subset_label).collect();
        assert_eq!(
            labels,
            vec![
                "All",
                "Shoulder+Left",
                "Shoulder+Right",
                "Left+Right",
                "Shoulder",
                "Left",
                "Right"
            ]
        );
        for (s, l) in subsets.iter().zip(&labels) {
            assert_eq!(&subset_from_label(l, 3).unwrap(), s);
        }
        assert!(subset_from_label("Elbow", 3).is_err());
    }

    #[test]
    fn zero_episodes_is_a_config_error() {
        let params = QNetworkParams::init(ArchitectureId::SvShoulder, 3, 16, 1);
        let cem = CemConfig::default();
        assert!(evaluate(&params, Task::Insertion, 0, None, 0, &cem, "x").is_err());
    }

    #[test]
    fn sv_checkpoint_rejected_by_robustness_matrix() {
        let params = QNetworkParams::init(ArchitectureId::SvRgbd, 3, 16, 1);
        let cem = CemConfig::default();
        assert!(robustness_matrix(&params, Task::Insertion, 10, 0, &cem, "x").is_err());
    }

    fn small_cem() -> CemConfig {
        CemConfig {
            n_samples: 8,
            n_elites: 2,
            n_iterations: 1,
            ..CemConfig::default()
        }
    }

    #[test]
    fn evaluate_is_deterministic() {
        let params = QNetworkParams::init(ArchitectureId::MvTowers, 3, 16, 9);
        let cem = small_cem();
        let a = evaluate(&params, Task::StackingI, 6, None, 3, &cem, "x").unwrap();
        let b = evaluate(&params, Task::StackingI, 6, None, 3, &cem, "x").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_episodes, 6);
    }

    #[test]
    fn report_csv_round_trip() {
        let params = QNetworkParams::init(ArchitectureId::MvDropout, 3, 16, 9);
        let cem = small_cem();
        let r = robustness_matrix(&params, Task::StackingI, 4, 3, &cem, "ckpt-9").unwrap();
        assert_eq!(r.entries.len(), 7);
        let parsed = EvalReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(parsed.arch, r.arch);
        assert_eq!(parsed.entries.len(), 7);
        for (a, b) in parsed.entries.iter().zip(&r.entries) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.successes, b.successes);
            assert!((a.rate_pct - b.rate_pct).abs() < 1e-3);
        }
    }

    #[test]
    fn comparison_reproduces_reduction_arithmetic() {
        let mk = |arch: &str, success: f64| EvalReport {
            arch: arch.into(),
            task: "stacking1".into(),
            n_episodes: 700,
            entries: vec![SubsetRate {
                label: "All".into(),
                successes: 0,
                rate_pct: success,
                wilson_lo_pct: 0.0,
                wilson_hi_pct: 0.0,
            }],
            checkpoint_id: "paper".into(),
            seed: 0,
        };
        // Published Stacking I rates: failure 17.14% vs 8.71%.
        let csv = compare_architectures(&[mk("SV_Shoulder", 82.86), mk("MV_Dropout", 91.29)])
            .unwrap();
        let last = csv.lines().last().unwrap();
        let red: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
        assert!((red - 49.1832).abs() < 1e-2, "{red}");
        // Task mismatch is rejected.
        let mut other = mk("SV_Shoulder", 50.0);
        other.task = "insertion".into();
        assert!(compare_architectures(&[mk("A", 50.0), other]).is_err());
    }

    #[test]
    fn zero_filled_views_change_tower_inputs_but_not_dropout_contract() {
        let params = QNetworkParams::init(ArchitectureId::MvTowers, 3, 16, 4);
        let cfg = TaskConfig::new(Task::Insertion);
        let state = reset_episode(&cfg, 3).unwrap();
        let obs = observe(&state, &nominal_cameras(), false, 16);
        let subset = ViewMask::from_bits(3, 0b011).unwrap();
        let (restricted, mask) = restrict_obs(params.arch, &obs, Some(&subset));
        assert!(mask.is_none());
        assert!(restricted.views[2].data.iter().all(|&b| b == 0));
        assert_eq!(restricted.views[0].data, obs.views[0].data);
        // Dropout passes the mask through untouched instead.
        let (o2, m2) = restrict_obs(ArchitectureId::MvDropout, &obs, Some(&subset));
        assert!(m2.is_some());
        assert_eq!(o2.views[2].data, obs.views[2].data);
    }
}
