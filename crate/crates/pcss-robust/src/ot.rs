//! Entropic optimal transport between uniform-weighted feature batches.
//!
//! Log-domain Sinkhorn iterations over a squared-Euclidean cost matrix,
//! recorded on the tape so the sharp transport cost differentiates through
//! the iteration unroll. A permutation-enumeration oracle gives exact
//! assignment costs on tiny instances for correctness checks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Arr, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum OtError {
    #[error("invalid OT problem: {0}")]
    BadProblem(String),
    #[error("oracle requires n == n' <= {max}, got {n} and {m}", max = ORACLE_MAX)]
    OracleSize { n: usize, m: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const ORACLE_MAX: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub reg: f64,
    pub max_iters: usize,
    /// Convergence tolerance on the worst marginal violation.
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            reg: 0.05,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

#[derive(Debug)]
pub struct SinkhornOutput<'t> {
    /// Sharp primal cost of the regularized plan (entropy term excluded),
    /// differentiable w.r.t. both feature batches.
    pub cost: Var<'t>,
    /// Converged transport plan values, n x n'.
    pub plan: Arr,
    pub converged: bool,
    pub iterations: usize,
}

/// Squared Euclidean pairwise cost matrix on tape:
/// C = |x|^2 1' + 1 |y|^2' - 2 X Y'.
pub fn sq_cost_matrix<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>, TensorError> {
    let xsq = x.mul(x)?.row_sum()?; // n x 1
    let ysq = y.mul(y)?.row_sum()?; // n' x 1
    let cross = x.matmul(y.transpose()?)?.scale(-2.0)?;
    cross
        .add_col_broadcast(xsq)?
        .add_row_broadcast(ysq.transpose()?)?
        // tiny numerical negatives on the diagonal are clamped by relu
        .relu()
}

/// Log-domain Sinkhorn on tape over uniform marginals.
///
/// Returns early once the marginal violation of the current plan drops below
/// `cfg.tol`; otherwise runs `max_iters` and reports `converged = false`.
pub fn sinkhorn_on_tape<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    y: Var<'t>,
    cfg: &SinkhornConfig,
) -> Result<SinkhornOutput<'t>, OtError> {
    let (n, dx) = x.value().dims2();
    let (m, dy) = y.value().dims2();
    if n == 0 || m == 0 {
        return Err(OtError::BadProblem("empty batch".into()));
    }
    if dx != dy {
        return Err(OtError::BadProblem(format!(
            "feature widths differ: {} vs {}",
            dx, dy
        )));
    }
    if cfg.reg <= 0.0 {
        return Err(OtError::BadProblem(format!("reg {} <= 0", cfg.reg)));
    }
    let eps = cfg.reg;
    let cost = sq_cost_matrix(x, y)?;
    let neg_cost_over_eps = cost.scale(-1.0 / eps)?; // n x m
    let log_a = (1.0 / n as f64).ln();
    let log_b = (1.0 / m as f64).ln();

    // potentials scaled by 1/eps: u_i, v_j with P = exp(u + v - C/eps)
    let mut u = tape.constant(Arr::zeros(&[n, 1]));
    let mut v = tape.constant(Arr::zeros(&[m, 1]));
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        iterations = it + 1;
        // u_i = log a_i - lse_j(v_j - C_ij/eps)
        let lse_rows = neg_cost_over_eps
            .add_row_broadcast(v.transpose()?)?
            .row_logsumexp()?;
        u = lse_rows.neg()?.add_scalar(log_a)?;
        // v_j = log b_j - lse_i(u_i - C_ij/eps)
        let lse_cols = neg_cost_over_eps
            .add_col_broadcast(u)?
            .transpose()?
            .row_logsumexp()?;
        v = lse_cols.neg()?.add_scalar(log_b)?;

        // cheap off-tape marginal check
        let viol = marginal_violation(&u.value(), &v.value(), &neg_cost_over_eps.value(), n, m);
        if viol < cfg.tol {
            converged = true;
            break;
        }
    }

    let log_plan = neg_cost_over_eps
        .add_col_broadcast(u)?
        .add_row_broadcast(v.transpose()?)?;
    let plan = log_plan.exp()?;
    let sharp_cost = plan.mul(cost)?.sum_all()?;
    Ok(SinkhornOutput {
        cost: sharp_cost,
        plan: plan.value(),
        converged,
        iterations,
    })
}

fn marginal_violation(u: &Arr, v: &Arr, neg_cost_over_eps: &Arr, n: usize, m: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut col_sums = vec![0.0; m];
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..m {
            let p = (neg_cost_over_eps.data[i * m + j] + u.data[i] + v.data[j]).exp();
            row_sum += p;
            col_sums[j] += p;
        }
        worst = worst.max((row_sum - 1.0 / n as f64).abs());
    }
    for cs in col_sums {
        worst = worst.max((cs - 1.0 / m as f64).abs());
    }
    worst
}

/// Convenience wrapper for non-differentiating callers.
pub fn sinkhorn_distance(
    source: &Arr,
    target: &Arr,
    cfg: &SinkhornConfig,
) -> Result<(f64, Arr, bool), OtError> {
    let tape = Tape::new();
    let x = tape.constant(source.clone());
    let y = tape.constant(target.clone());
    let out = sinkhorn_on_tape(&tape, x, y, cfg)?;
    Ok((out.cost.scalar_value(), out.plan, out.converged))
}

/// Exact optimal assignment cost via exhaustive permutation search over the
/// squared-Euclidean cost matrix, divided by n. Test oracle for tiny batches.
pub fn exact_ot_oracle(source: &Arr, target: &Arr) -> Result<f64, OtError> {
    let (n, dx) = source.dims2();
    let (m, dy) = target.dims2();
    if n != m || n > ORACLE_MAX || n == 0 {
        return Err(OtError::OracleSize { n, m });
    }
    if dx != dy {
        return Err(OtError::BadProblem(format!(
            "feature widths differ: {} vs {}",
            dx, dy
        )));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for c in 0..dx {
                let d = source.data[i * dx + c] - target.data[j * dx + c];
                s += d * d;
            }
            cost[i * n + j] = s;
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
        if total < best {
            best = total;
        }
    });
    Ok(best / n as f64)
}

fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Arr {
        Arr {
            shape: vec![n, d],
            data: (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn identical_singletons_cost_zero() {
        let a = Arr::new(vec![1, 2], vec![0.3, -0.4]).unwrap();
        let (cost, _, _) = sinkhorn_distance(&a, &a, &SinkhornConfig::default()).unwrap();
        assert!(cost.abs() < 1e-9, "cost {}", cost);
    }

    #[test]
    fn singletons_at_distance_two_approach_four() {
        let a = Arr::new(vec![1, 1], vec![0.0]).unwrap();
        let b = Arr::new(vec![1, 1], vec![2.0]).unwrap();
        let cfg = SinkhornConfig {
            reg: 1e-3,
            ..SinkhornConfig::default()
        };
        let (cost, _, _) = sinkhorn_distance(&a, &b, &cfg).unwrap();
        assert!((cost - 4.0).abs() < 1e-6, "cost {}", cost);
    }

    #[test]
    fn small_instances_match_oracle_within_two_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = SinkhornConfig {
            reg: 1e-3,
            max_iters: 5000,
            tol: 1e-9,
        };
        for _ in 0..10 {
            let a = random_batch(&mut rng, 5, 3);
            let b = random_batch(&mut rng, 5, 3);
            let (cost, _, _) = sinkhorn_distance(&a, &b, &cfg).unwrap();
            let exact = exact_ot_oracle(&a, &b).unwrap();
            assert!(
                (cost - exact).abs() <= 0.02 * exact.max(1e-9),
                "sinkhorn {} vs oracle {}",
                cost,
                exact
            );
        }
    }

    #[test]
    fn oracle_identity_and_swap() {
        let a = Arr::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert!(exact_ot_oracle(&a, &a).unwrap().abs() < 1e-15);
        // two points swapped between batches: identity matching is optimal
        let b = Arr::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let best = exact_ot_oracle(&a, &b).unwrap();
        assert!(best.abs() < 1e-15, "cost {}", best);
        // and a genuinely offset pair
        let c = Arr::from_rows(&[vec![0.5, 0.0], vec![1.5, 0.0]]);
        let best = exact_ot_oracle(&a, &c).unwrap();
        assert!((best - 0.25).abs() < 1e-12);
    }

    #[test]
    fn oracle_rejects_large_or_uneven() {
        let a = Arr::zeros(&[9, 2]);
        assert!(exact_ot_oracle(&a, &a).is_err());
        let b = Arr::zeros(&[3, 2]);
        let c = Arr::zeros(&[4, 2]);
        assert!(exact_ot_oracle(&b, &c).is_err());
    }

    #[test]
    fn regularized_cost_at_least_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &reg in &[1e-3, 1e-2, 1e-1] {
            let a = random_batch(&mut rng, 4, 2);
            let b = random_batch(&mut rng, 4, 2);
            let cfg = SinkhornConfig {
                reg,
                max_iters: 5000,
                tol: 1e-9,
            };
            let (cost, _, _) = sinkhorn_distance(&a, &b, &cfg).unwrap();
            let exact = exact_ot_oracle(&a, &b).unwrap();
            // residual marginal infeasibility at tol can dip the sharp cost
            // below the oracle by O(tol * cost scale)
            assert!(cost + 1e-5 >= exact, "reg {}: {} < {}", reg, cost, exact);
        }
    }

    #[test]
    fn symmetry_under_argument_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_batch(&mut rng, 6, 3);
        let b = random_batch(&mut rng, 6, 3);
        let cfg = SinkhornConfig {
            reg: 0.2,
            max_iters: 20000,
            tol: 1e-13,
        };
        let (ab, _, c1) = sinkhorn_distance(&a, &b, &cfg).unwrap();
        let (ba, _, c2) = sinkhorn_distance(&b, &a, &cfg).unwrap();
        assert!(c1 && c2);
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn marginals_feasible_on_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_batch(&mut rng, 5, 3);
        let b = random_batch(&mut rng, 7, 3);
        let cfg = SinkhornConfig {
            max_iters: 5000,
            ..SinkhornConfig::default()
        };
        let (_, plan, converged) = sinkhorn_distance(&a, &b, &cfg).unwrap();
        assert!(converged);
        let (n, m) = plan.dims2();
        for i in 0..n {
            let rs: f64 = plan.data[i * m..(i + 1) * m].iter().sum();
            assert!((rs - 1.0 / n as f64).abs() < cfg.tol * 2.0);
        }
        for j in 0..m {
            let cs: f64 = (0..n).map(|i| plan.data[i * m + j]).sum();
            assert!((cs - 1.0 / m as f64).abs() < cfg.tol * 2.0);
        }
    }

    #[test]
    fn smaller_reg_is_closer_to_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_batch(&mut rng, 5, 3);
        let b = random_batch(&mut rng, 5, 3);
        let exact = exact_ot_oracle(&a, &b).unwrap();
        let err_at = |reg: f64| {
            let cfg = SinkhornConfig {
                reg,
                max_iters: 5000,
                tol: 1e-9,
            };
            let (cost, _, _) = sinkhorn_distance(&a, &b, &cfg).unwrap();
            (cost - exact).abs()
        };
        assert!(err_at(1e-3) < err_at(1e-1));
    }

    #[test]
    fn row_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_batch(&mut rng, 6, 3);
        let b = random_batch(&mut rng, 6, 3);
        let mut a_perm_rows: Vec<Vec<f64>> = (0..6)
            .map(|i| a.data[i * 3..(i + 1) * 3].to_vec())
            .collect();
        a_perm_rows.reverse();
        let a_perm = Arr::from_rows(&a_perm_rows);
        let cfg = SinkhornConfig::default();
        let (c1, _, _) = sinkhorn_distance(&a, &b, &cfg).unwrap();
        let (c2, _, _) = sinkhorn_distance(&a_perm, &b, &cfg).unwrap();
        assert!((c1 - c2).abs() < 1e-9);
    }
}
