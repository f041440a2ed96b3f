//! Algebraic identity suite behind the `verify` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use subtune_core::combination::{spectral_adapter_apply, spectral_adapter_expansion, svdiff_apply, svdiff_delta};
use subtune_core::extension::{construct_constrained_factors, equivalence_transform};
use subtune_core::linalg::{pinv, svd};
use subtune_core::reconstruction::{column_scale_is_sigma_adjustment, ia3_apply, ssb_apply, ssl_apply};
use subtune_core::{Matrix, Method, TunerConfig, TunerState};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

fn gaussian_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn relative(a: &Matrix, b: &Matrix) -> Result<f64> {
    Ok(a.sub(b)?.frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE))
}

/// Runs every identity on `trials` random instances.
pub fn run_identities(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, m, r) = (rng.random_range(2..20), rng.random_range(2..20), rng.random_range(1..8));
        let a = Matrix::random_normal(n, r, 1.0, &mut rng);
        let g = Matrix::random_normal(r, r, 1.0, &mut rng);
        let b = Matrix::random_normal(r, m, 1.0, &mut rng);
        let (a_star, b_diamond) = equivalence_transform(&a, &g, &b)?;
        worst = worst.max(relative(&a_star.matmul(&b_diamond)?, &a.matmul(&g)?.matmul(&b)?)?);
    }
    out.push(Check {
        name: "AGB equals a two-factor product".into(),
        max_error: worst,
        tolerance: 1e-10,
    });

    let (mut ortho, mut trunc) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (n, m) = (rng.random_range(2..20), rng.random_range(2..20));
        let r = rng.random_range(1..=n.min(m));
        let target = Matrix::random_normal(n, m, 1.0, &mut rng);
        let (a, b) = construct_constrained_factors(&target, r)?;
        ortho = ortho
            .max(a.t_matmul(&a)?.max_abs_from_identity())
            .max(b.matmul_t(&b)?.max_abs_from_identity());
        let f = svd(&target)?;
        let mut values = f.sigma().to_vec();
        values.iter_mut().skip(r).for_each(|v| *v = 0.0);
        let truncated = f.compose(&values)?;
        trunc = trunc.max(a.scale_cols(&f.sigma()[..r])?.matmul(&b)?.max_abs_diff(&truncated));
    }
    out.push(Check {
        name: "constrained factors are semi-orthogonal".into(),
        max_error: ortho,
        tolerance: 1e-9,
    });
    out.push(Check {
        name: "constrained factors give the truncated SVD".into(),
        max_error: trunc,
        tolerance: 1e-9,
    });

    let (mut sigma_adj, mut compose) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (n, m) = (rng.random_range(2..12), rng.random_range(2..12));
        let w = Matrix::random_normal(n, m, 1.0, &mut rng);
        let d1 = gaussian_vec(n, &mut rng);
        let d2 = gaussian_vec(m, &mut rng);
        sigma_adj = sigma_adj.max(column_scale_is_sigma_adjustment(&w, &d1, &d2)?);
        let both = ssb_apply(&w, &d1, &d2)?;
        compose = compose
            .max(both.max_abs_diff(&ia3_apply(&ssl_apply(&w, &d1)?, &d2)?))
            .max(both.max_abs_diff(&ssl_apply(&ia3_apply(&w, &d2)?, &d1)?));
    }
    out.push(Check {
        name: "row and column scales adjust the spectrum".into(),
        max_error: sigma_adj,
        tolerance: 1e-9,
    });
    out.push(Check {
        name: "SSB is SSL composed with IA3".into(),
        max_error: compose,
        tolerance: 1e-12,
    });

    let mut fresh = 0.0f64;
    for _ in 0..trials.min(20) {
        let w = Matrix::random_normal(9, 7, 1.0, &mut rng);
        let bias = gaussian_vec(7, &mut rng);
        for method in Method::ALL {
            let t = TunerState::attach(method, &w, &bias, &TunerConfig { rank: 3, ..TunerConfig::default() }, &mut rng)?;
            fresh = fresh.max(t.effective_weight(&w)?.max_abs_diff(&w));
        }
    }
    out.push(Check {
        name: "fresh tuners leave W unchanged".into(),
        max_error: fresh,
        tolerance: 1e-10,
    });

    let (mut spectral, mut shift) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let (n, m) = (rng.random_range(2..12), rng.random_range(2..12));
        let w = Matrix::random_normal(n, m, 1.0, &mut rng);
        let f = svd(&w)?;
        let r = rng.random_range(1..=f.k());
        let a = Matrix::random_normal(n, r, 1.0, &mut rng);
        let b = Matrix::random_normal(m, r, 1.0, &mut rng);
        spectral = spectral.max(spectral_adapter_apply(&f, &a, &b, &w)?.max_abs_diff(&spectral_adapter_expansion(&f, &a, &b, &w)?));
        let s = gaussian_vec(f.k(), &mut rng);
        shift = shift.max(svdiff_apply(&f, &s, &w)?.max_abs_diff(&w.add(&svdiff_delta(&f, &s)?)?));
    }
    out.push(Check {
        name: "spectral adapter bracket equals its expansion".into(),
        max_error: spectral,
        tolerance: 1e-10,
    });
    out.push(Check {
        name: "SVDiff equals W plus the clamped shift".into(),
        max_error: shift,
        tolerance: 1e-10,
    });

    let mut penrose = 0.0f64;
    for _ in 0..trials {
        let (n, m) = (rng.random_range(1..16), rng.random_range(1..16));
        let w = Matrix::random_normal(n, m, 1.0, &mut rng);
        let p = pinv(&w)?;
        let wpw = w.matmul(&p)?.matmul(&w)?;
        let pwp = p.matmul(&w)?.matmul(&p)?;
        let wp = w.matmul(&p)?;
        let pw = p.matmul(&w)?;
        penrose = penrose
            .max(wpw.max_abs_diff(&w))
            .max(pwp.max_abs_diff(&p))
            .max(wp.max_abs_diff(&wp.transpose()))
            .max(pw.max_abs_diff(&pw.transpose()));
    }
    out.push(Check {
        name: "pseudo-inverse satisfies the Penrose conditions".into(),
        max_error: penrose,
        tolerance: 1e-9,
    });

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_identities_hold() {
        for c in run_identities(30, 3).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }
}
