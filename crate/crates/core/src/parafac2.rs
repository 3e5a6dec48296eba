//! PARAFAC2 decomposition of a ragged tensor by alternating least squares.
//!
//! Each slice is modelled as `X_i ≈ Q_i H diag(s_i) Vᵀ` where `Q_i` has
//! orthonormal columns, `H` (R x R) and `V` (d x R) are shared, and row `i`
//! of `S` holds the slice weights. One ALS sweep solves the orthogonal
//! Procrustes problem for every `Q_i`, projects `Y_i = Q_iᵀ X_i`, and runs
//! one CP-ALS update of `(S, H, V)` on the projected `R x d x n` array.
//! Every sub-step is an exact block minimizer, so the loss never increases.
//! After each sweep a line-search jump along the last change of `(H, V, S)`
//! is tried and kept only if it lowers the loss.
//!
//! A slice with fewer rows than the rank is treated as zero-padded to `R`
//! rows: `Q_i` is then `R x R` orthogonal, and the padded rows (target zero)
//! count towards the residual. With `T_i >= R` no padding happens.
//!
//! Fitting works on a canonical copy of the tensor: slices sorted by content
//! and scaled to unit Frobenius norm. Results are mapped back, so slice
//! order and global scale do not change the relative loss.

use std::cmp::Ordering;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::cache::Cursor;
use crate::error::{Error, Result};
use crate::linalg::{complete_orthonormal, orthonormalize, pad_rows, procrustes, solve_gram, thin_svd};
use crate::ragged::RaggedTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Svd,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub rank: usize,
    pub max_iters: usize,
    /// Stop when the relative change of the loss falls below this.
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Initialization of restart 0; later restarts are always random.
    pub init: Init,
}

impl FitConfig {
    pub fn new(rank: usize, seed: u64) -> Self {
        Self {
            rank,
            seed,
            ..Self::default()
        }
    }

    pub fn with_rank(&self, rank: usize) -> Self {
        Self { rank, ..self.clone() }
    }
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rank: 1,
            max_iters: 500,
            rel_tol: 1e-8,
            restarts: 3,
            seed: 0,
            init: Init::Svd,
        }
    }
}

/// Loss (relative to the tensor norm) below which a fit counts as exact.
const EXACT_FIT: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct Parafac2Factors {
    /// Per-slice bases, `max(T_i, R) x R` with orthonormal columns.
    pub q: Vec<DMatrix<f64>>,
    /// Shared cross-product factor, `R x R`.
    pub h: DMatrix<f64>,
    /// Feature factor, `d x R`.
    pub v: DMatrix<f64>,
    /// Slice weights, `n_slices x R`.
    pub s: DMatrix<f64>,
}

impl Parafac2Factors {
    pub fn rank(&self) -> usize {
        self.h.ncols()
    }

    /// `H diag(s_i) Vᵀ`, the `R x d` core of slice `i`.
    fn core(&self, i: usize) -> DMatrix<f64> {
        let mut hs = self.h.clone();
        for r in 0..self.rank() {
            hs.column_mut(r).scale_mut(self.s[(i, r)]);
        }
        hs * self.v.transpose()
    }

    /// Reconstruction of slice `i` including any padded rows.
    pub fn reconstruct_padded(&self, i: usize) -> DMatrix<f64> {
        &self.q[i] * self.core(i)
    }

    /// Reconstruction of slice `i` restricted to its first `rows` rows.
    pub fn reconstruct_slice(&self, i: usize, rows: usize) -> DMatrix<f64> {
        self.reconstruct_padded(i).rows(0, rows).into_owned()
    }

    fn check_shapes(&self, t: &RaggedTensor) -> Result<()> {
        let r = self.rank();
        let bad = |msg: String| Err(Error::ShapeMismatch(msg));
        if self.h.nrows() != r {
            return bad(format!("H is {}x{}", self.h.nrows(), r));
        }
        if self.v.nrows() != t.d() || self.v.ncols() != r {
            return bad(format!(
                "V is {}x{}, expected {}x{}",
                self.v.nrows(),
                self.v.ncols(),
                t.d(),
                r
            ));
        }
        if self.s.nrows() != t.n_slices() || self.s.ncols() != r {
            return bad(format!(
                "S is {}x{}, expected {}x{}",
                self.s.nrows(),
                self.s.ncols(),
                t.n_slices(),
                r
            ));
        }
        if self.q.len() != t.n_slices() {
            return bad(format!("{} bases for {} slices", self.q.len(), t.n_slices()));
        }
        for (i, (q, x)) in self.q.iter().zip(t.matrices()).enumerate() {
            let rows = x.nrows().max(r);
            if q.nrows() != rows || q.ncols() != r {
                return bad(format!("Q_{i} is {}x{}, expected {}x{}", q.nrows(), q.ncols(), rows, r));
            }
        }
        Ok(())
    }

    /// Writes H, V, S and every Q_i with the dump framing: magic
    /// `MATUFACT`, version, matrix count, then per matrix rows, cols (`u32`),
    /// row-major `f64` values and a CRC32.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        let mats: Vec<&DMatrix<f64>> = [&self.h, &self.v, &self.s].into_iter().chain(self.q.iter()).collect();
        w.write_all(FACTOR_MAGIC)?;
        w.write_all(&crate::ragged::DUMP_VERSION.to_le_bytes())?;
        w.write_all(&(mats.len() as u64).to_le_bytes())?;
        for m in mats {
            let mut body = Vec::with_capacity(8 + 8 * m.len());
            body.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            body.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    body.extend_from_slice(&m[(r, c)].to_le_bytes());
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
        let n = c.header(FACTOR_MAGIC, crate::ragged::DUMP_VERSION)? as usize;
        if n < 3 {
            return Err(Error::CorruptCacheFile(16));
        }
        let mut mats = Vec::with_capacity(n);
        for _ in 0..n {
            let start = c.pos;
            let rows = c.u32()? as usize;
            let cols = c.u32()? as usize;
            let vals = c.f64s(rows * cols)?;
            c.check_crc(start)?;
            mats.push(DMatrix::from_row_slice(rows, cols, &vals));
        }
        let mut it = mats.into_iter();
        let (h, v, s) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
        Ok(Self {
            q: it.collect(),
            h,
            v,
            s,
        })
    }
}

pub const FACTOR_MAGIC: &[u8; 8] = b"MATUFACT";

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub factors: Parafac2Factors,
    /// `‖X − X̂‖_F`.
    pub loss_abs: f64,
    /// `loss_abs / ‖X‖_F`, 0 for the zero tensor.
    pub loss_rel: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Winning start: `0..restarts` are regular starts, `restarts` is the
    /// warm start when one was supplied.
    pub restart_chosen: usize,
    /// Absolute loss after every ALS sweep, one list per start.
    pub loss_histories: Vec<Vec<f64>>,
    pub diagnostics: Vec<String>,
}

/// `(loss_abs, loss_rel)` of `f` against `t`; padded rows count with a zero
/// target.
pub fn reconstruction_loss(t: &RaggedTensor, f: &Parafac2Factors) -> Result<(f64, f64)> {
    f.check_shapes(t)?;
    let mut sq = 0.0;
    for (i, x) in t.matrices().enumerate() {
        let recon = f.reconstruct_padded(i);
        let rows = x.nrows();
        sq += (x - recon.rows(0, rows)).norm_squared();
        if recon.nrows() > rows {
            sq += recon.rows(rows, recon.nrows() - rows).norm_squared();
        }
    }
    let loss_abs = sq.sqrt();
    let norm = t.frobenius_norm();
    let loss_rel = if norm == 0.0 { 0.0 } else { loss_abs / norm };
    Ok((loss_abs, loss_rel))
}

pub fn check_rank(t: &RaggedTensor, rank: usize) -> Result<()> {
    if t.n_slices() == 0 {
        return Err(Error::EmptyTensor);
    }
    if rank == 0 || rank > t.d() || rank > t.max_rows() {
        return Err(Error::InfeasibleRank {
            rank,
            d: t.d(),
            max_rows: t.max_rows(),
        });
    }
    Ok(())
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(restart as u64 + 1)))
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Working copy: canonically ordered, unit norm, padded to `max(T_i, R)`.
struct Workspace {
    x: Vec<DMatrix<f64>>,
    /// All working slices stacked vertically.
    stacked: DMatrix<f64>,
    /// First row of each slice in `stacked`.
    offsets: Vec<usize>,
    /// `‖X_i‖²` of the working slices.
    sq_norms: Vec<f64>,
    rows: Vec<usize>,
    /// `order[k]` = original index of working slice `k`.
    order: Vec<usize>,
    norm: f64,
    rank: usize,
}

fn cmp_slices(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Ordering {
    a.nrows().cmp(&b.nrows()).then_with(|| {
        a.as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

impl Workspace {
    fn new(t: &RaggedTensor, rank: usize) -> Self {
        let mats: Vec<&DMatrix<f64>> = t.matrices().collect();
        let mut order: Vec<usize> = (0..mats.len()).collect();
        order.sort_by(|&a, &b| cmp_slices(mats[a], mats[b]));
        let norm = t.frobenius_norm();
        let scale = if norm > 0.0 { 1.0 / norm } else { 1.0 };
        let x: Vec<DMatrix<f64>> = order.iter().map(|&i| pad_rows(mats[i], rank) * scale).collect();
        let rows = order.iter().map(|&i| mats[i].nrows()).collect();
        let sq_norms = x.iter().map(|m| m.norm_squared()).collect();
        let mut offsets = Vec::with_capacity(x.len());
        let mut at = 0;
        for m in &x {
            offsets.push(at);
            at += m.nrows();
        }
        let d = t.d();
        let mut stacked = DMatrix::zeros(at, d);
        for (m, &o) in x.iter().zip(&offsets) {
            stacked.view_mut((o, 0), (m.nrows(), d)).copy_from(m);
        }
        Self {
            x,
            stacked,
            offsets,
            sq_norms,
            rows,
            order,
            norm,
            rank,
        }
    }

    fn n(&self) -> usize {
        self.x.len()
    }

    fn d(&self) -> usize {
        self.x[0].ncols()
    }

    fn svd_init(&self) -> Result<Parafac2Factors> {
        let total: usize = self.rows.iter().sum();
        let mut stacked = DMatrix::zeros(total, self.d());
        let mut at = 0;
        for (x, &r) in self.x.iter().zip(&self.rows) {
            stacked.view_mut((at, 0), (r, self.d())).copy_from(&x.rows(0, r));
            at += r;
        }
        let (_, _, vt) = thin_svd(&stacked)?;
        let v = vt.rows(0, self.rank).transpose();
        let q = self.x.iter().map(|x| orthonormalize(&(x * &v))).collect();
        Ok(Parafac2Factors {
            q,
            h: DMatrix::identity(self.rank, self.rank),
            v,
            s: DMatrix::from_element(self.n(), self.rank, 1.0),
        })
    }

    fn random_init(&self, rng: &mut ChaCha8Rng) -> Parafac2Factors {
        let r = self.rank;
        let h = gaussian(rng, r, r);
        let v = gaussian(rng, self.d(), r);
        let s = gaussian(rng, self.n(), r);
        let q = self
            .x
            .iter()
            .map(|x| orthonormalize(&gaussian(rng, x.nrows(), r)))
            .collect();
        Parafac2Factors { q, h, v, s }
    }

    /// Maps rank `R-1` factors (original order and scale) to a rank `R`
    /// start with the same reconstruction: the new component has zero
    /// weight, its feature vector is the top residual direction.
    fn warm_init(&self, prev: &Parafac2Factors) -> Result<Parafac2Factors> {
        let r = self.rank;
        let rp = prev.rank();
        if rp + 1 != r || prev.s.nrows() != self.n() || prev.v.nrows() != self.d() {
            return Err(Error::ShapeMismatch(format!(
                "warm start of rank {rp} cannot seed rank {r}"
            )));
        }
        let inv = if self.norm > 0.0 { 1.0 / self.norm } else { 1.0 };

        let mut residual_rows = Vec::new();
        let mut q = Vec::with_capacity(self.n());
        let mut s = DMatrix::zeros(self.n(), r);
        for (k, &orig) in self.order.iter().enumerate() {
            let qp = &prev.q[orig];
            for c in 0..rp {
                s[(k, c)] = prev.s[(orig, c)] * inv;
            }
            let rows_now = self.x[k].nrows();
            let qk = if qp.nrows() == rows_now {
                complete_orthonormal(qp, r)
            } else {
                let mut m = DMatrix::zeros(rows_now, r);
                m.view_mut((0, 0), (qp.nrows(), rp)).copy_from(qp);
                m[(rows_now - 1, r - 1)] = 1.0;
                m
            };
            q.push(qk);
        }
        let mut h = DMatrix::identity(r, r);
        h.view_mut((0, 0), (rp, rp)).copy_from(&prev.h);

        let mut partial = Parafac2Factors {
            q,
            h,
            v: DMatrix::zeros(self.d(), r),
            s,
        };
        partial.v.view_mut((0, 0), (self.d(), rp)).copy_from(&prev.v);
        for (k, x) in self.x.iter().enumerate() {
            let res = x - partial.reconstruct_padded(k);
            residual_rows.extend(res.row_iter().map(|row| row.into_owned()));
        }
        let stacked = DMatrix::from_rows(&residual_rows);
        let (_, sv, vt) = thin_svd(&stacked)?;
        let new_col: DVector<f64> = if !sv.is_empty() && sv[0] > 1e-12 {
            vt.row(0).transpose()
        } else {
            let vn = orthonormalize(&prev.v);
            complete_orthonormal(&vn, rp + 1).column(rp).into_owned()
        };
        partial.v.set_column(rp, &new_col);
        Ok(partial)
    }

    fn loss(&self, f: &Parafac2Factors) -> f64 {
        self.x
            .iter()
            .enumerate()
            .map(|(k, x)| (x - f.reconstruct_padded(k)).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Procrustes update of every `Q_i` from `xv = X V`; returns the
    /// projections `Q_iᵀ X_i V`.
    fn update_bases(&self, f: &mut Parafac2Factors, xv: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let mut yv = Vec::with_capacity(self.n());
        for k in 0..self.n() {
            let xvk = xv.rows(self.offsets[k], self.x[k].nrows());
            // M_i = X_i V diag(s_i) Hᵀ
            let mut m = xvk.into_owned();
            for c in 0..self.rank {
                m.column_mut(c).scale_mut(f.s[(k, c)]);
            }
            let q = procrustes(&(m * f.h.transpose()))?;
            yv.push(q.tr_mul(&xvk));
            f.q[k] = q;
        }
        Ok(yv)
    }

    fn project(&self, f: &Parafac2Factors, xv: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        (0..self.n())
            .map(|k| f.q[k].tr_mul(&xv.rows(self.offsets[k], self.x[k].nrows())))
            .collect()
    }

    /// One ALS sweep in place. Works on `Y_i V` and `Σ X_iᵀ Q_i H diag(s_i)`
    /// so that `Y_i = Q_iᵀ X_i` is never formed.
    fn sweep(&self, f: &mut Parafac2Factors, state: Projection) -> Result<(f64, Projection)> {
        let r = self.rank;
        let n = self.n();
        let Projection { xv, yv } = state;
        let yv = match yv {
            Some(yv) => yv,
            None => self.update_bases(f, &xv)?,
        };

        // S: each row solves [(HᵀH)∘(VᵀV)] s_i = diag(Hᵀ Y_i V).
        let vtv = f.v.tr_mul(&f.v);
        let gram = f.h.tr_mul(&f.h).component_mul(&vtv);
        let mut rhs = DMatrix::zeros(n, r);
        for (k, m) in yv.iter().enumerate() {
            for c in 0..r {
                rhs[(k, c)] = f.h.column(c).dot(&m.column(c));
            }
        }
        f.s = solve_gram(&rhs, &gram);

        // H: H [(VᵀV)∘(SᵀS)] = Σ_i Y_i V diag(s_i).
        let sts = f.s.tr_mul(&f.s);
        let gram = vtv.component_mul(&sts);
        let mut rhs = DMatrix::zeros(r, r);
        for (k, m) in yv.iter().enumerate() {
            for c in 0..r {
                rhs.column_mut(c).axpy(f.s[(k, c)], &m.column(c), 1.0);
            }
        }
        f.h = solve_gram(&rhs, &gram);

        // V: V [(HᵀH)∘(SᵀS)] = Σ_i Y_iᵀ H diag(s_i) = Xᵀ Z, Z_i = Q_i H diag(s_i).
        let gram = f.h.tr_mul(&f.h).component_mul(&sts);
        let mut z = DMatrix::zeros(self.stacked.nrows(), r);
        let mut hd = f.h.clone();
        for k in 0..n {
            for c in 0..r {
                hd.set_column(c, &(f.h.column(c) * f.s[(k, c)]));
            }
            let rows = self.x[k].nrows();
            z.view_mut((self.offsets[k], 0), (rows, r)).copy_from(&(&f.q[k] * &hd));
        }
        f.v = solve_gram(&self.stacked.tr_mul(&z), &gram);

        normalize_columns(f);
        let xv = &self.stacked * &f.v;
        let yv = self.project(f, &xv);
        let loss = self.loss_projected(&yv, f);
        Ok((loss, Projection { xv, yv: None }))
    }

    /// Loss of `f` from `yv[i] = Q_iᵀ X_i V` for the `Q_i` stored in `f`.
    /// With orthonormal `Q_i` and `C_i = H diag(s_i) Vᵀ`,
    /// `‖X_i − Q_i C_i‖² = ‖X_i‖² − 2 Σ_c s_ic (Hᵀ Y_i V)_cc + s_iᵀ [(HᵀH)∘(VᵀV)] s_i`.
    fn loss_projected(&self, yv: &[DMatrix<f64>], f: &Parafac2Factors) -> f64 {
        let gram = f.h.tr_mul(&f.h).component_mul(&f.v.tr_mul(&f.v));
        let mut sq = 0.0;
        for (k, m) in yv.iter().enumerate() {
            let s = f.s.row(k).transpose();
            let mut cross = 0.0;
            for c in 0..self.rank {
                cross += s[c] * f.h.column(c).dot(&m.column(c));
            }
            sq += self.sq_norms[k] - 2.0 * cross + gram.dot(&(&s * s.transpose()));
        }
        // Cancellation makes the shortcut unreliable for near-exact fits.
        if sq < 1e-8 {
            return self.loss(f);
        }
        sq.sqrt()
    }

    fn run(&self, mut f: Parafac2Factors, cfg: &FitConfig) -> Result<Run> {
        let mut prev = self.loss(&f);
        let mut history = Vec::new();
        let mut converged = false;
        let mut last: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = None;
        let mut acc_pow = 2.0f64;
        let mut acc_fail = 0;
        let mut state = Projection {
            xv: &self.stacked * &f.v,
            yv: None,
        };
        for it in 0..cfg.max_iters.max(1) {
            let (mut loss, next) = self.sweep(&mut f, state)?;
            state = next;
            // Line search: jump along the last step of (H, V, S), refit the
            // bases, and keep the jump only when it lowers the loss, so the
            // loss stays non-increasing.
            if let Some((h0, v0, s0)) = &last {
                let a = ((it + 1) as f64).powf(1.0 / acc_pow);
                let mut cand = Parafac2Factors {
                    q: f.q.clone(),
                    h: &f.h + (&f.h - h0) * (a - 1.0),
                    v: &f.v + (&f.v - v0) * (a - 1.0),
                    s: &f.s + (&f.s - s0) * (a - 1.0),
                };
                normalize_columns(&mut cand);
                let xv = &self.stacked * &cand.v;
                let yv = self.update_bases(&mut cand, &xv)?;
                let cl = self.loss_projected(&yv, &cand);
                if cl.is_finite() && cl < loss {
                    f = cand;
                    loss = cl;
                    state = Projection { xv, yv: Some(yv) };
                } else {
                    acc_fail += 1;
                    if acc_fail == 4 {
                        acc_pow += 1.0;
                        acc_fail = 0;
                    }
                }
            }
            last = Some((f.h.clone(), f.v.clone(), f.s.clone()));
            if !loss.is_finite() {
                return Err(Error::NumericalBreakdown("loss became non-finite".into()));
            }
            history.push(loss);
            let change = (prev - loss).abs() / prev.max(f64::MIN_POSITIVE);
            prev = loss;
            if loss < EXACT_FIT || change < cfg.rel_tol {
                converged = true;
                break;
            }
        }
        Ok(Run {
            factors: f,
            loss: prev,
            history,
            converged,
        })
    }

    /// Back to original slice order and scale.
    fn restore(&self, f: Parafac2Factors) -> Parafac2Factors {
        self.restore_scaled(f, self.norm)
    }

    fn restore_scaled(&self, f: Parafac2Factors, scale: f64) -> Parafac2Factors {
        let n = self.n();
        let mut q = vec![DMatrix::zeros(0, 0); n];
        let mut s = DMatrix::zeros(n, self.rank);
        for (k, qk) in f.q.into_iter().enumerate() {
            let orig = self.order[k];
            q[orig] = qk;
            s.set_row(orig, &(f.s.row(k) * scale));
        }
        Parafac2Factors { q, h: f.h, v: f.v, s }
    }
}

/// `X V` for the current `V` and, when `Q` is already optimal for the
/// current `(H, V, S)`, the projections `Q_iᵀ X_i V`.
struct Projection {
    xv: DMatrix<f64>,
    yv: Option<Vec<DMatrix<f64>>>,
}

struct Run {
    factors: Parafac2Factors,
    loss: f64,
    history: Vec<f64>,
    converged: bool,
}

/// Unit-norm columns in `H` and `V`, magnitudes moved into `S`.
fn normalize_columns(f: &mut Parafac2Factors) {
    for c in 0..f.rank() {
        let nh = f.h.column(c).norm();
        let nv = f.v.column(c).norm();
        if nh > 0.0 && nv > 0.0 && nh.is_finite() && nv.is_finite() {
            f.h.column_mut(c).unscale_mut(nh);
            f.v.column_mut(c).unscale_mut(nv);
            f.s.column_mut(c).scale_mut(nh * nv);
        }
    }
}

/// Deterministic initial factors for `cfg.init`, in original slice order.
/// Weights are returned as initialized (all ones for the SVD start).
pub fn init_factors(t: &RaggedTensor, cfg: &FitConfig) -> Result<Parafac2Factors> {
    check_rank(t, cfg.rank)?;
    let ws = Workspace::new(t, cfg.rank);
    let f = match cfg.init {
        Init::Svd => ws.svd_init()?,
        Init::Random => ws.random_init(&mut restart_rng(cfg.seed, 0)),
    };
    Ok(ws.restore_scaled(f, 1.0))
}

pub fn fit(t: &RaggedTensor, cfg: &FitConfig) -> Result<FitResult> {
    fit_with_warm_start(t, cfg, None)
}

/// Fits with `cfg.restarts` starts plus, when given, one warm start grown
/// from a rank `cfg.rank - 1` solution; returns the lowest-loss start.
pub fn fit_with_warm_start(t: &RaggedTensor, cfg: &FitConfig, warm: Option<&Parafac2Factors>) -> Result<FitResult> {
    check_rank(t, cfg.rank)?;
    let ws = Workspace::new(t, cfg.rank);
    let mut diagnostics = Vec::new();
    for (k, &rows) in ws.rows.iter().enumerate() {
        if rows < cfg.rank {
            let s = &t.slices()[ws.order[k]];
            diagnostics.push(format!(
                "slice (run {}, agent {}) has {} rows < rank {}; basis padded",
                s.run_index, s.agent_id, rows, cfg.rank
            ));
        }
    }

    if ws.norm == 0.0 {
        let f = ws.svd_init()?;
        let factors = ws.restore(f);
        return Ok(FitResult {
            factors,
            loss_abs: 0.0,
            loss_rel: 0.0,
            iterations: 1,
            converged: true,
            restart_chosen: 0,
            loss_histories: vec![vec![0.0]],
            diagnostics,
        });
    }

    let mut starts = Vec::new();
    for restart in 0..cfg.restarts.max(1) {
        let f = if restart == 0 && cfg.init == Init::Svd {
            ws.svd_init()?
        } else {
            ws.random_init(&mut restart_rng(cfg.seed, restart))
        };
        starts.push(f);
    }
    if let Some(prev) = warm {
        starts.push(ws.warm_init(prev)?);
    }

    let mut best: Option<(usize, Run)> = None;
    let mut histories = Vec::with_capacity(starts.len());
    for (idx, f) in starts.into_iter().enumerate() {
        let run = ws.run(f, cfg)?;
        histories.push(run.history.iter().map(|l| l * ws.norm).collect());
        if best.as_ref().is_none_or(|(_, b)| run.loss < b.loss) {
            best = Some((idx, run));
        }
    }
    let (restart_chosen, run) = best.expect("at least one start");
    let factors = ws.restore(run.factors);
    let (loss_abs, loss_rel) = reconstruction_loss(t, &factors)?;
    Ok(FitResult {
        factors,
        loss_abs,
        loss_rel,
        iterations: run.history.len(),
        converged: run.converged,
        restart_chosen,
        loss_histories: histories,
        diagnostics,
    })
}
