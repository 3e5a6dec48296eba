//! AUROC / AUARC against correctness labels, and uncertainty-guided
//! backbone routing.
//!
//! Convention: higher uncertainty should mean a higher chance of error.
//! AUROC is the probability that a random correct item has strictly lower
//! uncertainty than a random incorrect one, ties counting one half. AUARC is
//! the mean accuracy over the coverage levels `k/n`, `k = 1..n`, keeping the
//! `k` least uncertain items (ties broken by input position).

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledScore {
    pub task_id: String,
    pub u: f64,
    pub correct: bool,
}

impl LabeledScore {
    pub fn new(task_id: impl Into<String>, u: f64, correct: bool) -> Self {
        Self {
            task_id: task_id.into(),
            u,
            correct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method_id: String,
    pub auroc: f64,
    pub auarc: f64,
    pub n: usize,
}

/// Rank-sum (Mann-Whitney) form with mid-ranks for ties.
pub fn auroc(items: &[LabeledScore]) -> Result<f64> {
    let n_inc = items.iter().filter(|i| !i.correct).count();
    let n_cor = items.len() - n_inc;
    if n_inc == 0 || n_cor == 0 {
        return Err(Error::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].u.total_cmp(&items[b].u));

    let mut rank_sum_incorrect = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && items[order[end]].u == items[order[start]].u {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean.
        let mid = (start + 1 + end) as f64 / 2.0;
        let incorrect_in_group = order[start..end].iter().filter(|&&i| !items[i].correct).count();
        rank_sum_incorrect += mid * incorrect_in_group as f64;
        start = end;
    }
    let n_inc = n_inc as f64;
    let u_stat = rank_sum_incorrect - n_inc * (n_inc + 1.0) / 2.0;
    Ok(u_stat / (n_inc * n_cor as f64))
}

/// Returns 0 for an empty list.
pub fn auarc(items: &[LabeledScore]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].u.total_cmp(&items[b].u));
    let mut correct_so_far = 0usize;
    let mut acc_sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        correct_so_far += items[i].correct as usize;
        acc_sum += correct_so_far as f64 / (k + 1) as f64;
    }
    acc_sum / items.len() as f64
}

/// Accuracy at every coverage level `k/n`, for plotting.
pub fn accuracy_rejection_curve(items: &[LabeledScore]) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| items[a].u.total_cmp(&items[b].u));
    let n = items.len() as f64;
    let mut correct = 0usize;
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            correct += items[i].correct as usize;
            ((k + 1) as f64 / n, correct as f64 / (k + 1) as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEvaluation {
    pub reports: Vec<EvalReport>,
    pub diagnostics: Vec<String>,
}

/// One report per method over the tasks that carry a label.
pub fn evaluate_dataset(
    scores: &[(String, Vec<(String, f64)>)],
    labels: &HashMap<String, bool>,
) -> Result<DatasetEvaluation> {
    let mut reports = Vec::new();
    let mut diagnostics = Vec::new();
    for (method, list) in scores {
        let items: Vec<LabeledScore> = list
            .iter()
            .filter_map(|(task, u)| labels.get(task).map(|&c| LabeledScore::new(task.clone(), *u, c)))
            .collect();
        let dropped = list.len() - items.len();
        if items.is_empty() {
            return Err(Error::NoOverlap);
        }
        if dropped > 0 {
            diagnostics.push(format!("{method}: {dropped} task(s) without a label excluded"));
        }
        reports.push(EvalReport {
            method_id: method.clone(),
            auroc: auroc(&items)?,
            auarc: auarc(&items),
            n: items.len(),
        });
    }
    Ok(DatasetEvaluation { reports, diagnostics })
}

/// Table layout: one row per method, one column per metric.
pub fn eval_table_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("method,AUROC,AUARC,n\n");
    for r in reports {
        out.push_str(&format!("{},{:.6},{:.6},{}\n", r.method_id, r.auroc, r.auarc, r.n));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoutingResult {
    /// Mean correctness of the minimum-uncertainty candidate per task.
    pub accuracy: f64,
    /// Expected accuracy of picking a candidate uniformly at random.
    pub random_expectation: f64,
    /// Chosen candidate index per task.
    pub chosen: Vec<usize>,
}

/// Per task, picks the candidate (backbone) with the lowest uncertainty;
/// ties go to the first declared candidate.
pub fn select_by_uncertainty(candidates: &[Vec<(f64, bool)>]) -> Result<RoutingResult> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates(0));
    }
    let mut chosen = Vec::with_capacity(candidates.len());
    let mut hits = 0.0;
    let mut random = 0.0;
    for (t, cands) in candidates.iter().enumerate() {
        if cands.is_empty() {
            return Err(Error::EmptyCandidates(t));
        }
        let mut best = 0;
        for (i, c) in cands.iter().enumerate().skip(1) {
            if c.0 < cands[best].0 {
                best = i;
            }
        }
        chosen.push(best);
        hits += cands[best].1 as u8 as f64;
        random += cands.iter().filter(|c| c.1).count() as f64 / cands.len() as f64;
    }
    let n = candidates.len() as f64;
    Ok(RoutingResult {
        accuracy: hits / n,
        random_expectation: random / n,
        chosen,
    })
}

/// Reads a `task_id,correct` CSV (header optional, `correct` in {0,1}).
pub fn parse_labels_csv(text: &str) -> Result<HashMap<String, bool>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("task_id")) {
            continue;
        }
        let (task, val) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::MalformedLine(i + 1, "expected task_id,correct".into()))?;
        let correct = match val.trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::MalformedLine(
                    i + 1,
                    format!("correct must be 0 or 1, got {other:?}"),
                ))
            }
        };
        out.insert(task.trim().to_string(), correct);
    }
    Ok(out)
}

pub fn labels_csv(labels: &BTreeMap<String, bool>) -> String {
    let mut out = String::from("task_id,correct\n");
    for (t, c) in labels {
        out.push_str(&format!("{t},{}\n", *c as u8));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(labels: &[u8], us: &[f64]) -> Vec<LabeledScore> {
        labels
            .iter()
            .zip(us)
            .enumerate()
            .map(|(i, (&l, &u))| LabeledScore::new(format!("t{i}"), u, l == 1))
            .collect()
    }

    #[test]
    fn auroc_fixed_cases() {
        assert_eq!(auroc(&items(&[1, 1, 0, 0], &[0.1, 0.2, 0.8, 0.9])).unwrap(), 1.0);
        assert_eq!(auroc(&items(&[1, 0, 1, 0], &[0.1, 0.2, 0.3, 0.4])).unwrap(), 0.75);
        assert_eq!(auroc(&items(&[1, 0, 1, 0], &[0.5; 4])).unwrap(), 0.5);
        assert!(matches!(
            auroc(&items(&[1, 1], &[0.1, 0.2])),
            Err(Error::DegenerateLabels)
        ));
    }

    #[test]
    fn auarc_fixed_cases() {
        assert_eq!(auarc(&items(&[1, 1, 1], &[0.3, 0.1, 0.2])), 1.0);
        assert_eq!(auarc(&items(&[0, 0], &[0.3, 0.1])), 0.0);
        assert_eq!(auarc(&items(&[1, 0], &[0.1, 0.9])), 0.75);
    }

    #[test]
    fn curve_ends_at_base_rate() {
        let c = accuracy_rejection_curve(&items(&[1, 0, 1, 0], &[0.1, 0.2, 0.3, 0.4]));
        assert_eq!(c.last().unwrap(), &(1.0, 0.5));
        assert_eq!(c[0], (0.25, 1.0));
    }

    #[test]
    fn dataset_reports() {
        let labels: HashMap<String, bool> = [("a", true), ("b", false), ("c", true)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let s = |v: &[(&str, f64)]| v.iter().map(|(k, u)| (k.to_string(), *u)).collect::<Vec<_>>();
        let scores = vec![
            ("m1".to_string(), s(&[("a", 0.1), ("b", 0.9), ("c", 0.2)])),
            ("m2".to_string(), s(&[("a", 0.5), ("b", 0.1), ("c", 0.2)])),
        ];
        let ev = evaluate_dataset(&scores, &labels).unwrap();
        assert_eq!(ev.reports.len(), 2);
        assert_eq!(ev.reports[0].n, ev.reports[1].n);

        let scores = vec![("m".to_string(), s(&[("a", 0.1), ("b", 0.9), ("c", 0.2), ("z", 0.3)]))];
        let ev = evaluate_dataset(&scores, &labels).unwrap();
        assert_eq!(ev.reports[0].n, 3);
        assert_eq!(ev.diagnostics.len(), 1);

        let scores = vec![("m".to_string(), s(&[("x", 0.1)]))];
        assert!(matches!(evaluate_dataset(&scores, &labels), Err(Error::NoOverlap)));
    }

    #[test]
    fn routing_rules() {
        let r = select_by_uncertainty(&[vec![(0.2, true), (0.9, false)]]).unwrap();
        assert_eq!((r.accuracy, r.chosen[0]), (1.0, 0));
        assert_eq!(r.random_expectation, 0.5);
        let r = select_by_uncertainty(&[vec![(0.4, false), (0.4, true)]]).unwrap();
        assert_eq!(r.chosen[0], 0);
        assert!(matches!(
            select_by_uncertainty(&[vec![]]),
            Err(Error::EmptyCandidates(0))
        ));
    }

    #[test]
    fn labels_csv_parse() {
        let l = parse_labels_csv("task_id,correct\nt1,1\nt2,0\n").unwrap();
        assert!(l["t1"]);
        assert!(!l["t2"]);
        assert!(parse_labels_csv("t1,yes").is_err());
    }
}
