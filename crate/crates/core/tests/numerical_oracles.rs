use matu_core::baselines::{eigv_agreement_score, normalized_laplacian_spectrum, AgreementMatrix, AgreementSource};
use matu_core::linalg::orthonormality_error;
use matu_core::scorer::{sweep_ranks, ScoreOptions};
use matu_core::synthetic::{generate_synthetic_tensor, SyntheticSpec};
use matu_core::{fit, FitConfig, RaggedTensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Cyclic Jacobi eigenvalues of a symmetric matrix, ascending.
fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|ij| a[ij] * a[ij])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut g = DMatrix::identity(n, n);
                g[(p, p)] = c;
                g[(q, q)] = c;
                g[(p, q)] = s;
                g[(q, p)] = -s;
                a = g.transpose() * &a * &g;
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn laplacian_oracle(w: &DMatrix<f64>) -> DMatrix<f64> {
    let m = w.nrows();
    let deg: Vec<f64> = (0..m).map(|i| (0..m).map(|j| w[(i, j)]).sum()).collect();
    DMatrix::from_fn(
        m,
        m,
        |i, j| if i == j { 1.0 } else { 0.0 } - w[(i, j)] / (deg[i] * deg[j]).sqrt(),
    )
}

fn agreement(m: usize, upper: &[f64]) -> DMatrix<f64> {
    let mut w = DMatrix::identity(m, m);
    let mut k = 0;
    for a in 0..m {
        for b in (a + 1)..m {
            w[(a, b)] = upper[k];
            w[(b, a)] = upper[k];
            k += 1;
        }
    }
    w
}

fn agreement_case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<usize>)> {
    (2usize..9).prop_flat_map(|m| {
        (
            Just(m),
            prop::collection::vec(0.0f64..1.0, m * (m - 1) / 2),
            Just((0..m).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn spectrum_matches_jacobi_oracle((m, upper, perm) in agreement_case()) {
        let w = agreement(m, &upper);
        let got = normalized_laplacian_spectrum(&AgreementMatrix::new(w.clone(), AgreementSource::ExternalFile).unwrap()).unwrap();
        let want = jacobi_eigenvalues(laplacian_oracle(&w));
        for (g, e) in got.iter().zip(&want) {
            prop_assert!((g - e).abs() < 1e-10, "{got:?} vs {want:?}");
        }

        let score = eigv_agreement_score(&AgreementMatrix::new(w.clone(), AgreementSource::ExternalFile).unwrap()).unwrap();
        prop_assert!(score >= 1.0 - 1e-9 && score <= m as f64 + 1e-9, "score {score}");

        let permuted = DMatrix::from_fn(m, m, |i, j| w[(perm[i], perm[j])]);
        let score_p = eigv_agreement_score(&AgreementMatrix::new(permuted, AgreementSource::ExternalFile).unwrap()).unwrap();
        prop_assert!((score - score_p).abs() < 1e-10);
    }
}

#[test]
fn two_disjoint_agreeing_blocks_score_two() {
    let mut w = DMatrix::zeros(6, 6);
    for (lo, hi) in [(0, 3), (3, 6)] {
        for a in lo..hi {
            for b in lo..hi {
                w[(a, b)] = 1.0;
            }
        }
    }
    let score = eigv_agreement_score(&AgreementMatrix::new(w, AgreementSource::ExternalFile).unwrap()).unwrap();
    assert!((score - 2.0).abs() < 1e-10, "{score}");
}

#[test]
fn noise_energy_matches_sigma() {
    let sigma = 0.2;
    let (mut got, mut want) = (0.0, 0.0);
    for seed in 0..200 {
        let spec = SyntheticSpec {
            noise_sigma: sigma,
            seed,
            ..SyntheticSpec::default()
        };
        let st = generate_synthetic_tensor(&spec).unwrap();
        for (x, c) in st.tensor.matrices().zip(st.clean.matrices()) {
            got += (x - c).norm_squared();
            want += sigma * sigma * (x.nrows() * x.ncols()) as f64;
        }
    }
    assert!((got / want - 1.0).abs() < 0.05, "ratio {}", got / want);
}

fn demo_tensor(seed: u64, noise: f64) -> RaggedTensor {
    let spec = SyntheticSpec {
        n_runs: 4,
        n_agents: 2,
        step_range: (3, 6),
        d: 12,
        true_rank: 2,
        noise_sigma: noise,
        seed,
        ..SyntheticSpec::default()
    };
    generate_synthetic_tensor(&spec).unwrap().tensor
}

fn small_opts() -> ScoreOptions {
    ScoreOptions {
        r_max: 3,
        ..ScoreOptions::default()
    }
}

#[test]
fn u_invariant_to_scale_and_slice_order() {
    for seed in 0..5 {
        let t = demo_tensor(seed, 0.05);
        let cfg = FitConfig::new(1, 9);
        let base = sweep_ranks("t", &t, &cfg, &small_opts()).unwrap().report.u;

        let scaled = sweep_ranks("t", &t.scaled(3.7), &cfg, &small_opts()).unwrap().report.u;
        assert!((base - scaled).abs() < 1e-9, "scale: {base} vs {scaled}");

        let mut mats: Vec<DMatrix<f64>> = t.matrices().cloned().collect();
        mats.reverse();
        mats.swap(0, 3);
        let shuffled = RaggedTensor::from_matrices(mats).unwrap();
        let perm = sweep_ranks("t", &shuffled, &cfg, &small_opts()).unwrap().report.u;
        assert!((base - perm).abs() < 1e-9, "order: {base} vs {perm}");
    }
}

#[test]
fn fitted_bases_are_orthonormal() {
    for seed in 0..5 {
        let t = demo_tensor(seed, 0.1);
        for rank in 1..=3 {
            let f = fit(&t, &FitConfig::new(rank, seed)).unwrap();
            for q in &f.factors.q {
                assert!(
                    orthonormality_error(q) <= 1e-8,
                    "rank {rank}: {}",
                    orthonormality_error(q)
                );
            }
        }
    }
}

#[test]
fn exact_rank_one_scores_near_zero() {
    for seed in 0..5 {
        let spec = SyntheticSpec {
            true_rank: 1,
            noise_sigma: 0.0,
            step_range: (2, 6),
            d: 10,
            seed,
            ..SyntheticSpec::default()
        };
        let t = generate_synthetic_tensor(&spec).unwrap().tensor;
        let report = sweep_ranks("t", &t, &FitConfig::new(1, seed), &ScoreOptions::default())
            .unwrap()
            .report;
        assert!(
            report.u <= report.r_max as f64 * 1e-6,
            "U {} over {} ranks",
            report.u,
            report.r_max
        );
    }
}

/// Largest eigenvalue of a PSD matrix by power iteration.
fn lambda_max(a: &DMatrix<f64>) -> f64 {
    let mut x = DVector::from_element(a.nrows(), 1.0).normalize();
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let y = a * &x;
        let next = x.dot(&y);
        x = y.normalize();
        if (next - lambda).abs() <= 1e-15 * next.abs() {
            break;
        }
        lambda = next;
    }
    lambda
}

#[test]
fn rank_one_loss_matches_closed_form() {
    for seed in 0..10 {
        let t = demo_tensor(seed, 0.3);
        let gram = t
            .matrices()
            .fold(DMatrix::zeros(t.d(), t.d()), |acc, x| acc + x.transpose() * x);
        let norm_sq = t.frobenius_norm().powi(2);
        let want = (1.0 - lambda_max(&gram) / norm_sq).max(0.0).sqrt();
        let got = fit(&t, &FitConfig::new(1, seed)).unwrap().loss_rel;
        assert!((got - want).abs() < 1e-4, "seed {seed}: {got} vs {want}");
    }
}
