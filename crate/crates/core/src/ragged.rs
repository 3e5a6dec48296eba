//! The ragged third-order tensor: one embedding matrix per (run, agent)
//! pair, sharing the feature dimension while row counts vary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use nalgebra::DMatrix;

use crate::embedding::cache::Cursor;
use crate::embedding::{reduce_and_normalize, EmbeddingGateway, EmbeddingVector};
use crate::error::{Error, Result};
use crate::trajectory::{StepKind, TaskRecord};

/// Step kinds that become tensor rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepFilter(pub BTreeSet<StepKind>);

impl Default for StepFilter {
    /// Keeps messages, tool results and final answers; drops tool-call
    /// argument echoes.
    fn default() -> Self {
        Self([StepKind::Message, StepKind::ToolResult, StepKind::FinalAnswer].into())
    }
}

impl StepFilter {
    pub fn all() -> Self {
        Self(StepKind::ALL.into())
    }

    pub fn only(kinds: &[StepKind]) -> Self {
        Self(kinds.iter().copied().collect())
    }

    pub fn keeps(&self, kind: StepKind) -> bool {
        self.0.contains(&kind)
    }

    /// Parses a comma-separated kind list such as `message,final_answer`.
    pub fn parse(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| StepKind::parse(p).ok_or_else(|| Error::InvalidInput(format!("unknown step kind {p:?}"))))
            .collect::<Result<BTreeSet<_>>>()
            .map(Self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub run_index: usize,
    pub agent_id: String,
    /// `T x d`, row `t` is the embedding of step `t`.
    pub rows: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaggedTensor {
    slices: Vec<EmbeddingMatrix>,
    d: usize,
    slice_index: BTreeMap<(usize, String), usize>,
    pub warnings: Vec<String>,
}

impl RaggedTensor {
    pub fn new(slices: Vec<EmbeddingMatrix>) -> Result<Self> {
        let d = slices.first().ok_or(Error::EmptyTensor)?.rows.ncols();
        let mut slice_index = BTreeMap::new();
        for (i, s) in slices.iter().enumerate() {
            if s.rows.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.rows.ncols(),
                });
            }
            if slice_index.insert((s.run_index, s.agent_id.clone()), i).is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate slice (run {}, agent {})",
                    s.run_index, s.agent_id
                )));
            }
        }
        Ok(Self {
            slices,
            d,
            slice_index,
            warnings: Vec::new(),
        })
    }

    /// One slice per matrix, labelled run `i`, agent `"a0"`.
    pub fn from_matrices(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::new(
            mats.into_iter()
                .enumerate()
                .map(|(i, rows)| EmbeddingMatrix {
                    run_index: i,
                    agent_id: "a0".into(),
                    rows,
                })
                .collect(),
        )
    }

    pub fn slices(&self) -> &[EmbeddingMatrix] {
        &self.slices
    }

    pub fn matrices(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.slices.iter().map(|s| &s.rows)
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn max_rows(&self) -> usize {
        self.slices.iter().map(|s| s.rows.nrows()).max().unwrap_or(0)
    }

    pub fn total_rows(&self) -> usize {
        self.slices.iter().map(|s| s.rows.nrows()).sum()
    }

    pub fn position(&self, run_index: usize, agent_id: &str) -> Option<usize> {
        self.slice_index.get(&(run_index, agent_id.to_string())).copied()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.slices.iter().map(|s| s.rows.norm_squared()).sum::<f64>().sqrt()
    }

    /// Same slice metadata, every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for s in &mut out.slices {
            s.rows *= c;
        }
        out
    }

    pub fn map_rows(&self, mut f: impl FnMut(&DMatrix<f64>) -> DMatrix<f64>) -> Result<Self> {
        let slices = self
            .slices
            .iter()
            .map(|s| EmbeddingMatrix {
                run_index: s.run_index,
                agent_id: s.agent_id.clone(),
                rows: f(&s.rows),
            })
            .collect();
        let mut t = Self::new(slices)?;
        t.warnings = self.warnings.clone();
        Ok(t)
    }

    /// Writes the tensor dump: magic `MATUTENS`, version, slice count, then per
    /// slice run index (`u64`), agent id, `T`, `d` (`u32`), `T x d` row-major
    /// `f64` values and a CRC32.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(self.slices.len() as u64).to_le_bytes())?;
        for s in &self.slices {
            let mut body = Vec::new();
            body.extend_from_slice(&(s.run_index as u64).to_le_bytes());
            body.extend_from_slice(&(s.agent_id.len() as u32).to_le_bytes());
            body.extend_from_slice(s.agent_id.as_bytes());
            body.extend_from_slice(&(s.rows.nrows() as u32).to_le_bytes());
            body.extend_from_slice(&(s.rows.ncols() as u32).to_le_bytes());
            for r in 0..s.rows.nrows() {
                for c in 0..s.rows.ncols() {
                    body.extend_from_slice(&s.rows[(r, c)].to_le_bytes());
                }
            }
            let crc = crc32fast::hash(&body);
            w.write_all(&body)?;
            w.write_all(&crc.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(buf);
        let n = c.header(TENSOR_MAGIC, DUMP_VERSION)?;
        let mut slices = Vec::new();
        for _ in 0..n {
            let start = c.pos;
            let run_index = c.u64()? as usize;
            let agent_id = c.string()?;
            let t = c.u32()? as usize;
            let d = c.u32()? as usize;
            let vals = c.f64s(t * d)?;
            c.check_crc(start)?;
            slices.push(EmbeddingMatrix {
                run_index,
                agent_id,
                rows: DMatrix::from_row_slice(t, d, &vals),
            });
        }
        Self::new(slices)
    }
}

pub const TENSOR_MAGIC: &[u8; 8] = b"MATUTENS";
pub const DUMP_VERSION: u32 = 1;

pub fn frobenius_norm(t: &RaggedTensor) -> f64 {
    t.frobenius_norm()
}

/// Distinct retained step texts of a task, in first-seen order.
pub fn task_step_texts(rec: &TaskRecord, step_filter: &StepFilter) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for run in &rec.runs {
        for step in run.traces.iter().flat_map(|t| &t.steps) {
            if step_filter.keeps(step.kind) && seen.insert(step.content.as_str()) {
                out.push(step.content.clone());
            }
        }
    }
    out
}

/// Embeds every retained step of `rec` and reduces it to `d_target`,
/// keyed by step content as [`build_ragged_tensor`] expects.
pub fn embed_task_steps(
    gateway: &EmbeddingGateway,
    rec: &TaskRecord,
    step_filter: &StepFilter,
    model_id: &str,
    d_target: usize,
) -> Result<HashMap<String, EmbeddingVector>> {
    let texts = task_step_texts(rec, step_filter);
    let vectors = gateway.embed_texts(&texts, model_id)?;
    texts
        .into_iter()
        .zip(vectors)
        .map(|(t, v)| Ok((t, reduce_and_normalize(&v, d_target)?)))
        .collect()
}

/// Builds one slice per (run, agent) with at least one retained step.
///
/// `embeddings` maps step content to its (reduced, normalized) vector. Runs
/// come in ascending order and agents in the order they appear in the
/// first run; agents missing from the first run follow in first-seen order.
pub fn build_ragged_tensor(
    rec: &TaskRecord,
    embeddings: &HashMap<String, EmbeddingVector>,
    step_filter: &StepFilter,
) -> Result<RaggedTensor> {
    let mut agent_order: Vec<&str> = Vec::new();
    let mut runs: Vec<_> = rec.runs.iter().collect();
    runs.sort_by_key(|r| r.run_index);
    for run in &runs {
        for tr in &run.traces {
            if !agent_order.contains(&tr.agent_id.as_str()) {
                agent_order.push(&tr.agent_id);
            }
        }
    }

    let mut d: Option<usize> = None;
    let mut slices = Vec::new();
    let mut warnings = Vec::new();
    for run in &runs {
        for agent in &agent_order {
            let Some(trace) = run.traces.iter().find(|t| t.agent_id == *agent) else {
                continue;
            };
            let kept: Vec<&str> = trace
                .steps
                .iter()
                .filter(|s| step_filter.keeps(s.kind))
                .map(|s| s.content.as_str())
                .collect();
            if kept.is_empty() {
                warnings.push(format!(
                    "run {} agent {}: no retained steps, slice dropped",
                    run.run_index, agent
                ));
                continue;
            }
            let mut data = Vec::new();
            for text in &kept {
                let v = embeddings
                    .get(*text)
                    .ok_or_else(|| Error::MissingEmbedding((*text).to_string()))?;
                let dim = *d.get_or_insert(v.values.len());
                if v.values.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: v.values.len(),
                    });
                }
                data.extend_from_slice(&v.values);
            }
            slices.push(EmbeddingMatrix {
                run_index: run.run_index,
                agent_id: agent.to_string(),
                rows: DMatrix::from_row_slice(kept.len(), d.unwrap(), &data),
            });
        }
    }
    let mut t = RaggedTensor::new(slices)?;
    t.warnings = warnings;
    Ok(t)
}
