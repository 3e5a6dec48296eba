//! Spectral agreement baseline: `Σ_k max(0, 1 − λ_k)` over the eigenvalues
//! of the symmetric normalized Laplacian `L = I − D^{-1/2} W D^{-1/2}` of a
//! response-agreement graph `W`.
//!
//! `W` either comes from an external file (e.g. an entailment pipeline) or
//! is proxied by clipped cosine similarity of response embeddings. The proxy
//! is not an entailment score, so reports carry the source.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementSource {
    ExternalFile,
    CosineProxy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgreementMatrix {
    w: DMatrix<f64>,
    pub source: AgreementSource,
}

impl AgreementMatrix {
    /// Validates squareness and symmetry (1e-12), clips entries to [0, 1].
    pub fn new(mut w: DMatrix<f64>, source: AgreementSource) -> Result<Self> {
        if !w.is_square() || w.nrows() == 0 {
            return Err(Error::InvalidAgreement(format!(
                "{}x{} is not a non-empty square matrix",
                w.nrows(),
                w.ncols()
            )));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidAgreement("non-finite entry".into()));
        }
        if (&w - w.transpose()).abs().max() > 1e-12 {
            return Err(Error::InvalidAgreement("matrix is not symmetric".into()));
        }
        w.apply(|x| *x = x.clamp(0.0, 1.0));
        Ok(Self { w, source })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn size(&self) -> usize {
        self.w.nrows()
    }
}

/// `W[a][b] = max(0, cos(v_a, v_b))` with a unit diagonal.
pub fn agreement_from_embeddings(vectors: &[EmbeddingVector]) -> Result<AgreementMatrix> {
    if vectors.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 vectors, got {}",
            vectors.len()
        )));
    }
    let d = vectors[0].values.len();
    if let Some(v) = vectors.iter().find(|v| v.values.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: v.values.len(),
        });
    }
    let norms: Vec<f64> = vectors.iter().map(EmbeddingVector::norm).collect();
    let m = vectors.len();
    let mut w = DMatrix::identity(m, m);
    for a in 0..m {
        for b in (a + 1)..m {
            let dot: f64 = vectors[a]
                .values
                .iter()
                .zip(&vectors[b].values)
                .map(|(x, y)| x * y)
                .sum();
            let denom = norms[a] * norms[b];
            let cos = if denom > 0.0 { dot / denom } else { 0.0 };
            let val = cos.clamp(0.0, 1.0);
            w[(a, b)] = val;
            w[(b, a)] = val;
        }
    }
    AgreementMatrix::new(w, AgreementSource::CosineProxy)
}

/// Eigenvalues of the normalized Laplacian, ascending.
pub fn normalized_laplacian_spectrum(w: &AgreementMatrix) -> Result<Vec<f64>> {
    let m = w.size();
    let deg: Vec<f64> = (0..m).map(|i| w.w.row(i).sum()).collect();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(Error::SingularDegree(i));
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let lap = DMatrix::from_fn(m, m, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - inv_sqrt[i] * w.w[(i, j)] * inv_sqrt[j]
    });
    let mut ev: Vec<f64> = SymmetricEigen::new(lap).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

pub fn eigv_agreement_score(w: &AgreementMatrix) -> Result<f64> {
    Ok(normalized_laplacian_spectrum(w)?
        .into_iter()
        .map(|l| (1.0 - l).max(0.0))
        .sum())
}

/// Parses the external agreement CSV: a `# agreement m=<int>` header then
/// `m` rows of `m` comma-separated floats. Asymmetric input is replaced by
/// `(W + Wᵀ)/2` and a warning is returned.
pub fn parse_agreement_csv(text: &str) -> Result<(AgreementMatrix, Vec<String>)> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::SchemaViolation("agreement header".into()))?;
    let m: usize = header
        .strip_prefix("# agreement m=")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::MalformedLine(1, format!("bad agreement header {header:?}")))?;
    let mut vals = Vec::with_capacity(m * m);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::MalformedLine(i + 2, e.to_string()))?;
        if row.len() != m {
            return Err(Error::MalformedLine(
                i + 2,
                format!("expected {m} values, got {}", row.len()),
            ));
        }
        vals.extend(row);
        rows += 1;
    }
    if rows != m {
        return Err(Error::InvalidAgreement(format!("expected {m} rows, got {rows}")));
    }
    let mut w = DMatrix::from_row_slice(m, m, &vals);
    let mut warnings = Vec::new();
    if (&w - w.transpose()).abs().max() > 1e-12 {
        warnings.push("agreement matrix was asymmetric; replaced by (W + W^T)/2".to_string());
        w = (&w + w.transpose()) * 0.5;
    }
    Ok((AgreementMatrix::new(w, AgreementSource::ExternalFile)?, warnings))
}

pub fn agreement_csv(w: &AgreementMatrix) -> String {
    let mut out = format!("# agreement m={}\n", w.size());
    for r in w.w.row_iter() {
        let row: Vec<String> = r.iter().map(|x| format!("{x}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::full(values.to_vec(), "m")
    }

    #[test]
    fn cosine_proxy_cases() {
        let w = agreement_from_embeddings(&[ev(&[1.0, 0.0]), ev(&[1.0, 0.0]), ev(&[1.0, 0.0])]).unwrap();
        assert!(w.matrix().iter().all(|&x| x == 1.0));
        let w = agreement_from_embeddings(&[ev(&[1.0, 0.0, 0.0]), ev(&[0.0, 1.0, 0.0]), ev(&[0.0, 0.0, 1.0])]).unwrap();
        assert_eq!(w.matrix(), &DMatrix::identity(3, 3));
        let c = 60f64.to_radians();
        let w = agreement_from_embeddings(&[ev(&[1.0, 0.0]), ev(&[c.cos(), c.sin()])]).unwrap();
        assert!((w.matrix()[(0, 1)] - 0.5).abs() < 1e-15);
        assert_eq!(w.source, AgreementSource::CosineProxy);
    }

    #[test]
    fn cosine_negative_clipped_and_errors() {
        let w = agreement_from_embeddings(&[ev(&[1.0, 0.0]), ev(&[-1.0, 0.0])]).unwrap();
        assert_eq!(w.matrix()[(0, 1)], 0.0);
        assert!(agreement_from_embeddings(&[ev(&[1.0])]).is_err());
        assert!(matches!(
            agreement_from_embeddings(&[ev(&[1.0]), ev(&[1.0, 0.0])]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn score_fixtures() {
        let ones = AgreementMatrix::new(DMatrix::from_element(5, 5, 1.0), AgreementSource::ExternalFile).unwrap();
        assert!((eigv_agreement_score(&ones).unwrap() - 1.0).abs() < 1e-9);
        let id = AgreementMatrix::new(DMatrix::identity(4, 4), AgreementSource::ExternalFile).unwrap();
        assert!((eigv_agreement_score(&id).unwrap() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn zero_degree_rejected() {
        let w = AgreementMatrix::new(DMatrix::zeros(2, 2), AgreementSource::ExternalFile).unwrap();
        assert!(matches!(eigv_agreement_score(&w), Err(Error::SingularDegree(0))));
    }

    #[test]
    fn csv_round_trip_and_symmetrize() {
        let (w, warn) = parse_agreement_csv("# agreement m=2\n1,0.2\n0.4,1\n").unwrap();
        assert_eq!(warn.len(), 1);
        assert!((w.matrix()[(0, 1)] - 0.3).abs() < 1e-15);
        let (back, warn) = parse_agreement_csv(&agreement_csv(&w)).unwrap();
        assert!(warn.is_empty());
        assert_eq!(back.matrix(), w.matrix());
        assert!(parse_agreement_csv("# agreement m=2\n1,0\n").is_err());
        assert!(parse_agreement_csv("1,0\n0,1\n").is_err());
    }
}
