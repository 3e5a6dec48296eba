//! Rank sweep and the MATU uncertainty score: `U = Σ_{R=1..R_max} L_R`,
//! where `L_R` is the best reconstruction loss of a rank-`R` PARAFAC2 fit.
//! Relative losses are used by default, which makes `U` independent of the
//! overall embedding scale.
//!
//! Also hosts dataset-level min-max normalization and factor-loading
//! reports for reading off which runs and agents drive a component.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::parafac2::{fit_with_warm_start, FitConfig, FitResult};
use crate::ragged::RaggedTensor;
use crate::trajectory::TaskRecord;

pub const DEFAULT_R_MAX: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Relative,
    Absolute,
}

impl LossMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rel" | "relative" => Some(Self::Relative),
            "abs" | "absolute" => Some(Self::Absolute),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOptions {
    pub r_max: usize,
    pub loss_mode: LossMode,
    /// Seed rank `R` with an extra start grown from the rank `R - 1` fit.
    pub warm_start: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            r_max: DEFAULT_R_MAX,
            loss_mode: LossMode::Relative,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankLoss {
    pub rank: usize,
    pub loss_rel: f64,
    pub loss_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyReport {
    pub task_id: String,
    pub per_rank_losses: Vec<RankLoss>,
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "R_max")]
    pub r_max: usize,
    pub loss_mode: LossMode,
    pub normalized_u: Option<f64>,
    pub diagnostics: Vec<String>,
}

impl UncertaintyReport {
    /// Builds a report from per-rank losses `1..=len`, summing the selected
    /// loss in rank order.
    pub fn from_losses(task_id: impl Into<String>, losses: Vec<RankLoss>, mode: LossMode) -> Self {
        let u = losses
            .iter()
            .map(|l| match mode {
                LossMode::Relative => l.loss_rel,
                LossMode::Absolute => l.loss_abs,
            })
            .sum();
        Self {
            task_id: task_id.into(),
            r_max: losses.len(),
            per_rank_losses: losses,
            u,
            loss_mode: mode,
            normalized_u: None,
            diagnostics: Vec::new(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// The rank sweep keeps every fit so callers can inspect factors.
#[derive(Debug, Clone)]
pub struct RankSweep {
    pub report: UncertaintyReport,
    pub fits: Vec<FitResult>,
}

/// Fits ranks `1..=R_max` (clipped to `min(d, max rows)`) and aggregates
/// the losses. `cfg.rank` is ignored.
pub fn sweep_ranks(task_id: &str, tensor: &RaggedTensor, cfg: &FitConfig, opts: &ScoreOptions) -> Result<RankSweep> {
    if tensor.n_slices() == 0 {
        return Err(Error::EmptyTensor);
    }
    if opts.r_max == 0 {
        return Err(Error::InfeasibleRank {
            rank: 0,
            d: tensor.d(),
            max_rows: tensor.max_rows(),
        });
    }
    let mut diagnostics = tensor.warnings.clone();
    let feasible = tensor.d().min(tensor.max_rows());
    let r_max = opts.r_max.min(feasible);
    if r_max < opts.r_max {
        diagnostics.push(format!("R_max {} clipped to {r_max}", opts.r_max));
    }

    let mut fits: Vec<FitResult> = Vec::with_capacity(r_max);
    let mut losses = Vec::with_capacity(r_max);
    for rank in 1..=r_max {
        let warm = if opts.warm_start {
            fits.last().map(|f| &f.factors)
        } else {
            None
        };
        let fit = fit_with_warm_start(tensor, &cfg.with_rank(rank), warm)?;
        if !fit.converged {
            diagnostics.push(format!("rank {rank}: no convergence in {} sweeps", fit.iterations));
        }
        losses.push(RankLoss {
            rank,
            loss_rel: fit.loss_rel,
            loss_abs: fit.loss_abs,
        });
        fits.push(fit);
    }
    for f in &fits {
        for d in &f.diagnostics {
            if !diagnostics.contains(d) {
                diagnostics.push(d.clone());
            }
        }
    }
    let mut report = UncertaintyReport::from_losses(task_id, losses, opts.loss_mode);
    report.diagnostics = diagnostics;
    Ok(RankSweep { report, fits })
}

pub fn score_task(
    rec: &TaskRecord,
    tensor: &RaggedTensor,
    cfg: &FitConfig,
    opts: &ScoreOptions,
) -> Result<UncertaintyReport> {
    Ok(sweep_ranks(&rec.task_id, tensor, cfg, opts)?.report)
}

/// Min-max normalization; a constant set maps to all zeros.
pub fn normalize_scores(scores: &[(String, f64)]) -> Vec<(String, f64)> {
    let lo = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let hi = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    scores
        .iter()
        .map(|(t, u)| (t.clone(), if span > 0.0 { (u - lo) / span } else { 0.0 }))
        .collect()
}

/// Fills `normalized_u` across a set of reports.
pub fn normalize_reports(reports: &mut [UncertaintyReport]) {
    let scores: Vec<(String, f64)> = reports.iter().map(|r| (r.task_id.clone(), r.u)).collect();
    for (r, (_, n)) in reports.iter_mut().zip(normalize_scores(&scores)) {
        r.normalized_u = Some(n);
    }
}

pub fn reports_jsonl(reports: &[UncertaintyReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

pub fn reports_csv(reports: &[UncertaintyReport]) -> String {
    let mut out = String::from("task_id,U,normalized_U\n");
    for r in reports {
        let n = r.normalized_u.map(|x| format!("{x:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{:.9},{n}\n", r.task_id, r.u));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceLoading {
    pub run_index: usize,
    pub agent_id: String,
    pub loading: f64,
}

/// Loadings of one component. In PARAFAC2 the run and agent modes share
/// the slice-weight matrix `S`, so both marginals are reported.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadingReport {
    pub component: usize,
    pub slices: Vec<SliceLoading>,
    /// `(run_index, mean loading over its agents)`, ascending run index.
    pub per_run: Vec<(usize, f64)>,
    /// `(agent_id, mean loading over its runs)`, first-seen order.
    pub per_agent: Vec<(String, f64)>,
    pub mean_incorrect: Option<f64>,
    pub mean_correct: Option<f64>,
    pub separation_ratio: Option<f64>,
}

pub fn separation_ratio(mean_incorrect: f64, mean_correct: f64) -> Option<f64> {
    (mean_correct > 0.0).then(|| mean_incorrect / mean_correct)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl LoadingReport {
    /// Aggregates slice loadings; `labels` maps run index to correctness.
    pub fn from_slice_loadings(component: usize, slices: Vec<SliceLoading>, labels: &HashMap<usize, bool>) -> Self {
        let mut by_run: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut agent_order: Vec<String> = Vec::new();
        let mut by_agent: HashMap<String, Vec<f64>> = HashMap::new();
        for s in &slices {
            by_run.entry(s.run_index).or_default().push(s.loading);
            if !by_agent.contains_key(&s.agent_id) {
                agent_order.push(s.agent_id.clone());
            }
            by_agent.entry(s.agent_id.clone()).or_default().push(s.loading);
        }
        let per_run: Vec<(usize, f64)> = by_run.iter().map(|(&r, v)| (r, mean(v).unwrap_or(0.0))).collect();
        let per_agent = agent_order
            .into_iter()
            .map(|a| {
                let m = mean(&by_agent[&a]).unwrap_or(0.0);
                (a, m)
            })
            .collect();
        let group = |want: bool| {
            let xs: Vec<f64> = per_run
                .iter()
                .filter(|(r, _)| labels.get(r) == Some(&want))
                .map(|p| p.1)
                .collect();
            mean(&xs)
        };
        let mean_incorrect = group(false);
        let mean_correct = group(true);
        let separation_ratio = match (mean_incorrect, mean_correct) {
            (Some(i), Some(c)) => separation_ratio(i, c),
            _ => None,
        };
        Self {
            component,
            slices,
            per_run,
            per_agent,
            mean_incorrect,
            mean_correct,
            separation_ratio,
        }
    }

    /// Run with the largest run-level loading; ties go to the lower index.
    pub fn top_run(&self) -> Option<usize> {
        top_loading_run(&self.per_run)
    }
}

pub fn top_loading_run(per_run: &[(usize, f64)]) -> Option<usize> {
    per_run
        .iter()
        .fold(None::<(usize, f64)>, |best, &(r, l)| match best {
            Some((br, bl)) if bl > l || (bl == l && br < r) => Some((br, bl)),
            _ => Some((r, l)),
        })
        .map(|b| b.0)
}

/// `|S[i, r]|` per slice of `tensor`, grouped by run and agent, with group
/// means taken from per-run labels (or the task label when runs carry none).
pub fn factor_loading_report(
    fit: &FitResult,
    tensor: &RaggedTensor,
    rec: &TaskRecord,
    component: usize,
) -> Result<LoadingReport> {
    let mut labels = HashMap::new();
    for (run, label) in rec.runs.iter().zip(rec.run_labels()) {
        if let Some(l) = label.or(rec.correct) {
            labels.insert(run.run_index, l);
        }
    }
    loading_report_with_labels(fit, tensor, component, &labels)
}

pub fn loading_report_with_labels(
    fit: &FitResult,
    tensor: &RaggedTensor,
    component: usize,
    labels: &HashMap<usize, bool>,
) -> Result<LoadingReport> {
    let rank = fit.factors.rank();
    if component >= rank {
        return Err(Error::MissingComponent { component, rank });
    }
    if fit.factors.s.nrows() != tensor.n_slices() {
        return Err(Error::ShapeMismatch(format!(
            "fit has {} slices, tensor has {}",
            fit.factors.s.nrows(),
            tensor.n_slices()
        )));
    }
    let slices = tensor
        .slices()
        .iter()
        .enumerate()
        .map(|(i, s)| SliceLoading {
            run_index: s.run_index,
            agent_id: s.agent_id.clone(),
            loading: fit.factors.s[(i, component)].abs(),
        })
        .collect();
    Ok(LoadingReport::from_slice_loadings(component, slices, labels))
}
