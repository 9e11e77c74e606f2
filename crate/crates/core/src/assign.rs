//! Exact path-space Wasserstein distance via optimal assignment.
//!
//! For two uniform-weight sets of M paths with sup-norm ground cost, W_2 is
//! the square root of the optimal assignment value on the M x M matrix of
//! squared sup-norm distances. Solved with the Hungarian algorithm with
//! potentials in O(M^3); capped at M = 512, beyond which the marginal-flow
//! surrogate should be used instead.

use crate::error::{CmfError, Result};
use ndarray::Array2;

pub const ASSIGNMENT_CAP: usize = 512;

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Returns (assignment `row -> col`, total cost).
pub fn min_cost_assignment(cost: &Array2<f64>) -> Result<(Vec<usize>, f64)> {
    let (nr, nc) = cost.dim();
    if nr != nc || nr == 0 {
        return Err(CmfError::InvalidInput(format!(
            "assignment needs a nonempty square matrix, got {nr}x{nc}"
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(CmfError::InvalidInput("non-finite assignment cost".into()));
    }
    let n = nr;
    // Hungarian algorithm with row/column potentials, 1-indexed internally.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    let mut total = 0.0;
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
        total += cost[(p[j] - 1, j - 1)];
    }
    Ok((assignment, total))
}

fn sup_norm_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Exact W_2 between two equal-cardinality uniform empirical path laws under
/// the sup-norm ground cost. Rows of each matrix are paths on a common grid.
pub fn wasserstein_pathspace(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let (ma, na) = a.dim();
    let (mb, nb) = b.dim();
    if ma == 0 || mb == 0 {
        return Err(CmfError::InvalidInput("empty path set".into()));
    }
    if ma != mb {
        return Err(CmfError::InvalidInput(format!(
            "path sets must have equal cardinality, got {ma} and {mb}"
        )));
    }
    if na != nb {
        return Err(CmfError::GridMismatch(format!(
            "path lengths differ: {na} vs {nb}"
        )));
    }
    if ma > ASSIGNMENT_CAP {
        return Err(CmfError::Capacity(format!(
            "{ma} paths exceed the exact-assignment cap of {ASSIGNMENT_CAP}; \
             use the marginal-flow distance instead"
        )));
    }
    let mut cost = Array2::zeros((ma, ma));
    for i in 0..ma {
        let ra = a.row(i);
        for j in 0..ma {
            let d = sup_norm_distance(ra.as_slice().unwrap(), b.row(j).as_slice().unwrap());
            cost[(i, j)] = d * d;
        }
    }
    let (_, total) = min_cost_assignment(&cost)?;
    Ok((total / ma as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Channel, RngStream};
    use ndarray::Array2;

    fn brute_force_assignment(cost: &Array2<f64>) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 1 {
                return vec![vec![0]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for pos in 0..n {
                    let mut q: Vec<usize> = p.iter().map(|&x| x).collect();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let n = cost.nrows();
        perms(n)
            .into_iter()
            .map(|perm| (0..n).map(|i| cost[(i, perm[i])]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    fn random_paths(seed: u64, m: usize, len: usize) -> Array2<f64> {
        let s = RngStream::new(seed);
        let mut a = Array2::zeros((m, len));
        for i in 0..m {
            let mut x = 0.0;
            for k in 0..len {
                x += s.normal(i, 0, k, Channel::Probe);
                a[(i, k)] = x;
            }
        }
        a
    }

    #[test]
    fn identical_path_sets_have_zero_distance() {
        let a = random_paths(1, 6, 10);
        assert_eq!(wasserstein_pathspace(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn singleton_shift_is_the_shift() {
        let a = random_paths(2, 1, 12);
        let b = &a + 1.75;
        let d = wasserstein_pathspace(&a, &b).unwrap();
        assert!((d - 1.75).abs() < 1e-12);
    }

    #[test]
    fn four_paths_match_exhaustive_minimum() {
        let a = random_paths(3, 4, 8);
        let b = random_paths(4, 4, 8);
        let mut cost = Array2::zeros((4, 4));
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = a
                    .row(i)
                    .iter()
                    .zip(b.row(j))
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                cost[(i, j)] = d * d;
            }
        }
        let brute = (brute_force_assignment(&cost) / 4.0).sqrt();
        let fast = wasserstein_pathspace(&a, &b).unwrap();
        assert!((fast - brute).abs() < 1e-12, "{fast} vs {brute}");
    }

    #[test]
    fn hungarian_matches_brute_force_up_to_eight() {
        for n in 2..=8usize {
            let s = RngStream::new(100 + n as u64);
            let mut cost = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    cost[(i, j)] = s.uniform(i, j, 0, Channel::Probe) * 10.0;
                }
            }
            let (_, fast) = min_cost_assignment(&cost).unwrap();
            let brute = brute_force_assignment(&cost);
            assert!((fast - brute).abs() < 1e-10, "n={n}: {fast} vs {brute}");
        }
    }

    #[test]
    fn cap_is_enforced_with_guidance() {
        let a = Array2::zeros((513, 2));
        match wasserstein_pathspace(&a, &a) {
            Err(CmfError::Capacity(msg)) => assert!(msg.contains("marginal-flow")),
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_cardinality_rejected() {
        let a = Array2::zeros((3, 4));
        let b = Array2::zeros((4, 4));
        assert!(wasserstein_pathspace(&a, &b).is_err());
    }

    // Marginal cost never exceeds path cost.
    #[test]
    fn flow_distance_bounded_by_pathspace() {
        use crate::grid::TimeGrid;
        use crate::law::{wasserstein_flow, EmpiricalLaw, MarginalLawFlow};
        let len = 9;
        let a = random_paths(7, 8, len);
        let b = random_paths(8, 8, len);
        let grid = TimeGrid::new(1.0, len - 1).unwrap();
        let to_flow = |m: &Array2<f64>| {
            let laws = (0..len)
                .map(|k| EmpiricalLaw::from_samples(m.column(k).to_vec()).unwrap())
                .collect();
            MarginalLawFlow::new(grid.clone(), laws).unwrap()
        };
        let d_flow = wasserstein_flow(&to_flow(&a), &to_flow(&b), 2).unwrap();
        let d_path = wasserstein_pathspace(&a, &b).unwrap();
        assert!(
            d_flow <= d_path + 1e-10,
            "flow {d_flow} exceeds path {d_path}"
        );
    }
}
