//! Seeded synthetic ragged tensors with known PARAFAC2 structure, labelled
//! datasets for the offline pipeline, and a routing simulation.
//!
//! Slices are `Q_i H diag(s_i) Vᵀ + σ G_i`. Every agent has one base weight
//! row shared by all consistent runs; a divergent run redraws the weight
//! rows of all its agents.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::EmbeddingCache;
use crate::error::{Error, Result};
use crate::evaluation::labels_csv;
use crate::linalg::orthonormalize;
use crate::parafac2::Parafac2Factors;
use crate::ragged::{EmbeddingMatrix, RaggedTensor};
use crate::trajectory::{to_log_lines, AgentTrace, RunTrajectory, StepKind, StepRecord, TaskRecord, Topology};

pub const SYNTHETIC_MODEL_ID: &str = "synthetic";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_runs: usize,
    pub n_agents: usize,
    /// Inclusive `(min, max)` rows per slice.
    pub step_range: (usize, usize),
    pub d: usize,
    pub true_rank: usize,
    pub noise_sigma: f64,
    /// Fraction of runs whose weights are redrawn.
    pub divergence: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_runs: 10,
            n_agents: 2,
            step_range: (3, 8),
            d: 32,
            true_rank: 3,
            noise_sigma: 0.01,
            divergence: 0.0,
            seed: 0,
        }
    }
}

/// Task count of the shipped demo dataset.
pub const DEMO_TASKS: usize = 100;

impl SyntheticSpec {
    /// Slice shape of the shipped demo dataset: 10 runs of 2 agents, 4 or 5
    /// steps each, 32-dim vectors of true rank 4 with light noise.
    pub fn demo(seed: u64) -> Self {
        Self {
            n_runs: 10,
            n_agents: 2,
            step_range: (4, 5),
            d: 32,
            true_rank: 4,
            noise_sigma: 0.001,
            divergence: 0.0,
            seed,
        }
    }

    fn validate(&self, rank: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.n_runs == 0 || self.n_agents == 0 {
            return bad("need at least one run and one agent".into());
        }
        let (lo, hi) = self.step_range;
        if lo == 0 || lo > hi {
            return bad(format!("bad step range ({lo}, {hi})"));
        }
        if rank == 0 || rank > self.d || rank > lo {
            return bad(format!("rank {rank} must be in 1..=min(d={}, min steps={lo})", self.d));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.divergence) {
            return bad(format!("divergence {}", self.divergence));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTensor {
    pub tensor: RaggedTensor,
    /// The tensor before noise.
    pub clean: RaggedTensor,
    pub factors: Parafac2Factors,
    /// Runs whose weights were redrawn (or carry the injected component).
    pub divergent_runs: Vec<usize>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn unit_columns(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        if n > 0.0 {
            c.unscale_mut(n);
        }
    }
    m
}

/// One dominant component (the topic a run's agent settles on) in
/// `[1.0, 1.5)`, the others in `[0.1, 0.4)`.
fn weight_row(rng: &mut ChaCha8Rng, rank: usize) -> Vec<f64> {
    let topic = rng.random_range(0..rank);
    (0..rank)
        .map(|c| {
            if c == topic {
                rng.random_range(1.0..1.5)
            } else {
                rng.random_range(0.1..0.4)
            }
        })
        .collect()
}

fn pick_runs(rng: &mut ChaCha8Rng, n_runs: usize, fraction: f64) -> Vec<usize> {
    let k = (fraction * n_runs as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n_runs).collect();
    idx.shuffle(rng);
    let mut out = idx[..k.min(n_runs)].to_vec();
    out.sort_unstable();
    out
}

/// Independent generator streams, so that specs differing only in
/// divergence share structure, slice shapes, bases and noise.
struct Streams {
    structure: ChaCha8Rng,
    divergence: ChaCha8Rng,
    slices: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let sub = |k: u64| ChaCha8Rng::seed_from_u64(derive_seed(seed, k));
        Self {
            structure: sub(0),
            divergence: sub(1),
            slices: sub(2),
        }
    }
}

/// Assembles slices from drawn factors; `weights[(j, k)]` is the weight row
/// of agent `k` in run `j`.
fn assemble(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    h: DMatrix<f64>,
    v: DMatrix<f64>,
    weights: &dyn Fn(usize, usize) -> Vec<f64>,
    divergent_runs: Vec<usize>,
) -> Result<SyntheticTensor> {
    let rank = h.ncols();
    let n = spec.n_runs * spec.n_agents;
    let mut s = DMatrix::zeros(n, rank);
    let mut q = Vec::with_capacity(n);
    let mut clean = Vec::with_capacity(n);
    let mut noisy = Vec::with_capacity(n);
    for j in 0..spec.n_runs {
        for k in 0..spec.n_agents {
            let i = j * spec.n_agents + k;
            let rows = rng.random_range(spec.step_range.0..=spec.step_range.1);
            let qi = orthonormalize(&gaussian(rng, rows, rank));
            let w = weights(j, k);
            for (c, val) in w.iter().enumerate() {
                s[(i, c)] = *val;
            }
            let mut hs = h.clone();
            for (c, wc) in w.iter().enumerate() {
                hs.column_mut(c).scale_mut(*wc);
            }
            let x = &qi * hs * v.transpose();
            let g = gaussian(rng, rows, spec.d);
            let agent_id = format!("agent{k}");
            noisy.push(EmbeddingMatrix {
                run_index: j,
                agent_id: agent_id.clone(),
                rows: &x + g * spec.noise_sigma,
            });
            clean.push(EmbeddingMatrix {
                run_index: j,
                agent_id,
                rows: x,
            });
            q.push(qi);
        }
    }
    Ok(SyntheticTensor {
        tensor: RaggedTensor::new(noisy)?,
        clean: RaggedTensor::new(clean)?,
        factors: Parafac2Factors { q, h, v, s },
        divergent_runs,
    })
}

pub fn generate_synthetic_tensor(spec: &SyntheticSpec) -> Result<SyntheticTensor> {
    spec.validate(spec.true_rank)?;
    let mut st = Streams::new(spec.seed);
    let r = spec.true_rank;
    let h = unit_columns(gaussian(&mut st.structure, r, r));
    let v = unit_columns(gaussian(&mut st.structure, spec.d, r));
    let base: Vec<Vec<f64>> = (0..spec.n_agents).map(|_| weight_row(&mut st.structure, r)).collect();
    let divergent = pick_runs(&mut st.divergence, spec.n_runs, spec.divergence);
    let mut table = BTreeMap::new();
    for j in 0..spec.n_runs {
        for (k, row) in base.iter().enumerate() {
            let w = if divergent.binary_search(&j).is_ok() {
                weight_row(&mut st.divergence, r)
            } else {
                row.clone()
            };
            table.insert((j, k), w);
        }
    }
    assemble(spec, &mut st.slices, h, v, &|j, k| table[&(j, k)].clone(), divergent)
}

/// Consistent rank-`true_rank` runs plus one extra component whose weight
/// is high (1.0..2.0) in a `spec.divergence` fraction of runs and low
/// (0.0..0.3) elsewhere. The extra component is column `true_rank` of the
/// returned factors.
pub fn generate_with_injected_component(spec: &SyntheticSpec) -> Result<SyntheticTensor> {
    let r = spec.true_rank + 1;
    spec.validate(r)?;
    let mut st = Streams::new(spec.seed);
    let h = unit_columns(gaussian(&mut st.structure, r, r));
    let v = unit_columns(gaussian(&mut st.structure, spec.d, r));
    let base: Vec<Vec<f64>> = (0..spec.n_agents)
        .map(|_| weight_row(&mut st.structure, spec.true_rank))
        .collect();
    let divergent = pick_runs(&mut st.divergence, spec.n_runs, spec.divergence);
    let mut table = BTreeMap::new();
    for j in 0..spec.n_runs {
        for (k, row) in base.iter().enumerate() {
            let extra = if divergent.binary_search(&j).is_ok() {
                st.divergence.random_range(1.0..2.0)
            } else {
                st.divergence.random_range(0.0..0.3)
            };
            let mut w = row.clone();
            w.push(extra);
            table.insert((j, k), w);
        }
    }
    assemble(spec, &mut st.slices, h, v, &|j, k| table[&(j, k)].clone(), divergent)
}

#[derive(Debug)]
pub struct SyntheticDataset {
    pub tasks: Vec<TaskRecord>,
    pub cache: EmbeddingCache,
    /// Task-level correctness.
    pub labels: BTreeMap<String, bool>,
    pub model_id: String,
}

pub fn task_id(i: usize) -> String {
    format!("synth-{i:04}")
}

fn step_text(task: &str, run: usize, agent: &str, step: usize) -> String {
    format!("{task} run {run} {agent} step {step}")
}

fn derive_seed(base: u64, i: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(i.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0x5851_F42D_4C95_7F2D)
}

/// `n_tasks` labelled tasks: `round(n_tasks * incorrect_fraction)` of them
/// (chosen by seed) are incorrect and use `divergence_when_incorrect`;
/// correct tasks use divergence 0. Step texts are placeholders whose raw
/// embeddings are the tensor rows, stored in the returned cache.
pub fn generate_synthetic_dataset(
    n_tasks: usize,
    divergence_when_incorrect: f64,
    base_spec: &SyntheticSpec,
    incorrect_fraction: f64,
) -> Result<SyntheticDataset> {
    if !(0.0..=1.0).contains(&incorrect_fraction) || !(0.0..=1.0).contains(&divergence_when_incorrect) {
        return Err(Error::InfeasibleSpec("fractions must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(base_spec.seed);
    let n_inc = ((n_tasks as f64) * incorrect_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n_tasks).collect();
    idx.shuffle(&mut rng);
    let mut incorrect = vec![false; n_tasks];
    for &i in &idx[..n_inc.min(n_tasks)] {
        incorrect[i] = true;
    }

    let cache = EmbeddingCache::new();
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut labels = BTreeMap::new();
    for (i, &is_incorrect) in incorrect.iter().enumerate() {
        let spec = SyntheticSpec {
            divergence: if is_incorrect { divergence_when_incorrect } else { 0.0 },
            seed: derive_seed(base_spec.seed, i as u64),
            ..base_spec.clone()
        };
        let synth = generate_synthetic_tensor(&spec)?;
        let tid = task_id(i);
        let correct = !is_incorrect;
        labels.insert(tid.clone(), correct);

        let mut runs = Vec::with_capacity(spec.n_runs);
        for j in 0..spec.n_runs {
            let mut traces = Vec::with_capacity(spec.n_agents);
            let mut final_answer = None;
            for k in 0..spec.n_agents {
                let slice = &synth.tensor.slices()[j * spec.n_agents + k];
                let last_agent = k + 1 == spec.n_agents;
                let steps = (0..slice.rows.nrows())
                    .map(|t| {
                        let text = step_text(&tid, j, &slice.agent_id, t);
                        let row: Vec<f32> = slice.rows.row(t).iter().map(|&x| x as f32).collect();
                        cache.insert(SYNTHETIC_MODEL_ID, &text, row);
                        let kind = if last_agent && t + 1 == slice.rows.nrows() {
                            final_answer = Some(text.clone());
                            StepKind::FinalAnswer
                        } else {
                            StepKind::Message
                        };
                        StepRecord {
                            step_index: t,
                            kind,
                            content: text,
                            timestamp: None,
                        }
                    })
                    .collect();
                traces.push(AgentTrace {
                    agent_id: slice.agent_id.clone(),
                    role: if k == 0 { "planner".into() } else { "solver".into() },
                    steps,
                });
            }
            runs.push(RunTrajectory {
                run_index: j,
                traces,
                final_answer,
                correct: Some(correct),
            });
        }
        tasks.push(TaskRecord {
            task_id: tid,
            input_text: format!("synthetic task {i}"),
            runs,
            correct: None,
            topology: Some(Topology::Chain),
        });
    }
    Ok(SyntheticDataset {
        tasks,
        cache,
        labels,
        model_id: SYNTHETIC_MODEL_ID.into(),
    })
}

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub log: PathBuf,
    pub cache: PathBuf,
    pub labels: PathBuf,
}

impl SyntheticDataset {
    /// Writes `<stem>.jsonl`, `<stem>.bin` and `<stem>_labels.csv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path, stem: &str) -> Result<DatasetPaths> {
        std::fs::create_dir_all(dir)?;
        let paths = DatasetPaths {
            log: dir.join(format!("{stem}.jsonl")),
            cache: dir.join(format!("{stem}.bin")),
            labels: dir.join(format!("{stem}_labels.csv")),
        };
        let mut log = std::io::BufWriter::new(std::fs::File::create(&paths.log)?);
        for t in &self.tasks {
            for line in to_log_lines(t) {
                writeln!(log, "{line}")?;
            }
        }
        log.flush()?;
        self.cache.save(&paths.cache)?;
        std::fs::write(&paths.labels, labels_csv(&self.labels))?;
        Ok(paths)
    }
}

/// Backbone-selection simulation: per (task, backbone) a latent error
/// propensity `e ~ N(0,1)`; the answer is correct iff `e <= c_b` with
/// per-backbone cut-offs; the reported uncertainty is
/// `rho * e + sqrt(1 - rho^2) * noise`.
pub fn simulate_routing(n_tasks: usize, n_backbones: usize, rho: f64, seed: u64) -> Vec<Vec<(f64, bool)>> {
    const CUTOFFS: [f64; 4] = [-0.5, 0.0, 0.25, 0.5];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = (1.0 - rho * rho).max(0.0).sqrt();
    (0..n_tasks)
        .map(|_| {
            (0..n_backbones)
                .map(|b| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (rho * e + spread * noise, e <= CUTOFFS[b % CUTOFFS.len()])
                })
                .collect()
        })
        .collect()
}
