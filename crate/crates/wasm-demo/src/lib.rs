//! Browser bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string so the page needs no generated
//! TypeScript types. The `*_json` functions hold the logic and run natively
//! in tests; the exported wrappers only convert errors.

use matu_core::baselines::{eigv_agreement_score, normalized_laplacian_spectrum, parse_agreement_csv};
use matu_core::evaluation::{accuracy_rejection_curve, auarc, auroc, LabeledScore};
use matu_core::scorer::{sweep_ranks, ScoreOptions};
use matu_core::synthetic::{generate_synthetic_tensor, SyntheticSpec};
use matu_core::FitConfig;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Largest run count accepted, to keep sweeps interactive.
const MAX_RUNS: usize = 20;

/// Generates one synthetic task (`runs` x 2 agents, 4 to 6 steps, 16-dim,
/// true rank 3) and sweeps ranks `1..=r_max`.
pub fn rank_loss_curve_json(
    seed: u64,
    runs: usize,
    divergence: f64,
    noise: f64,
    r_max: usize,
) -> Result<String, String> {
    if !(1..=MAX_RUNS).contains(&runs) {
        return Err(format!("runs must be in 1..={MAX_RUNS}"));
    }
    let spec = SyntheticSpec {
        n_runs: runs,
        n_agents: 2,
        step_range: (4, 6),
        d: 16,
        true_rank: 3,
        noise_sigma: noise,
        divergence,
        seed,
    };
    let st = generate_synthetic_tensor(&spec).map_err(|e| e.to_string())?;
    let opts = ScoreOptions {
        r_max,
        ..ScoreOptions::default()
    };
    let sweep = sweep_ranks("demo", &st.tensor, &FitConfig::new(1, seed), &opts).map_err(|e| e.to_string())?;
    let report = sweep.report;
    Ok(json!({
        "U": report.u,
        "r_max": report.r_max,
        "losses": report.per_rank_losses.iter().map(|l| l.loss_rel).collect::<Vec<_>>(),
        "divergent_runs": st.divergent_runs,
        "slices": st.tensor.n_slices(),
    })
    .to_string())
}

/// Normalized Laplacian spectrum and spectral agreement score of an
/// agreement matrix in `# agreement m=<int>` CSV form.
pub fn spectral_score_json(csv: &str) -> Result<String, String> {
    let (w, warnings) = parse_agreement_csv(csv).map_err(|e| e.to_string())?;
    let spectrum = normalized_laplacian_spectrum(&w).map_err(|e| e.to_string())?;
    let score = eigv_agreement_score(&w).map_err(|e| e.to_string())?;
    Ok(json!({ "m": w.size(), "spectrum": spectrum, "score": score, "warnings": warnings }).to_string())
}

/// AUROC, AUARC and the accuracy-rejection curve of `U,correct` lines
/// (`correct` in {0,1}). Curve points are `[coverage, accuracy]`.
pub fn accuracy_rejection_json(text: &str) -> Result<String, String> {
    let mut items = Vec::new();
    for (i, line) in text.lines().map(str::trim).enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || format!("line {}: expected U,correct", i + 1);
        let (u, c) = line.split_once(',').ok_or_else(bad)?;
        let u: f64 = u.trim().parse().map_err(|_| bad())?;
        let correct = match c.trim() {
            "1" => true,
            "0" => false,
            _ => return Err(bad()),
        };
        items.push(LabeledScore::new(format!("row{i}"), u, correct));
    }
    if items.is_empty() {
        return Err("no rows".into());
    }
    let auroc = auroc(&items).ok();
    let curve: Vec<[f64; 2]> = accuracy_rejection_curve(&items)
        .into_iter()
        .map(|(r, a)| [r, a])
        .collect();
    Ok(json!({ "n": items.len(), "auroc": auroc, "auarc": auarc(&items), "curve": curve }).to_string())
}

#[wasm_bindgen]
pub fn rank_loss_curve(seed: u32, runs: u32, divergence: f64, noise: f64, r_max: u32) -> Result<String, JsError> {
    rank_loss_curve_json(seed.into(), runs as usize, divergence, noise, r_max as usize).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn spectral_score(csv: &str) -> Result<String, JsError> {
    spectral_score_json(csv).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn accuracy_rejection(text: &str) -> Result<String, JsError> {
    accuracy_rejection_json(text).map_err(|e| JsError::new(&e))
}
