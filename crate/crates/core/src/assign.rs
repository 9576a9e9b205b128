//! Square linear assignment: the Hungarian algorithm and an exhaustive
//! permutation search used as its reference.
//!
//! Cost matrices are row-major `n × n`; an assignment maps each row to a
//! column. Assignment costs are always summed in row order so that both
//! solvers report bit-identical totals for the same assignment.

/// Row-order sum of the assigned entries.
pub fn assignment_cost(cost: &[f64], n: usize, assignment: &[usize]) -> f64 {
    debug_assert_eq!(cost.len(), n * n);
    assignment.iter().enumerate().map(|(r, &c)| cost[r * n + c]).sum()
}

/// Rearranges `p` into the lexicographically next permutation. Returns
/// false (leaving `p` sorted ascending) after the last one.
pub fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        p.reverse();
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Minimum over all `n!` assignments; ties go to the lexicographically
/// smallest permutation.
pub fn exhaustive(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = (perm.clone(), assignment_cost(cost, n, &perm));
    while next_permutation(&mut perm) {
        let c = assignment_cost(cost, n, &perm);
        if c < best.1 {
            best = (perm.clone(), c);
        }
    }
    best
}

/// O(n³) Hungarian algorithm (shortest augmenting paths with potentials).
pub fn hungarian(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    let total = assignment_cost(cost, n, &assignment);
    (assignment, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lexicographic_enumeration() {
        let mut p = vec![0, 1, 2];
        let mut seen = vec![p.clone()];
        while next_permutation(&mut p) {
            seen.push(p.clone());
        }
        assert_eq!(
            seen,
            vec![vec![0, 1, 2], vec![0, 2, 1], vec![1, 0, 2], vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0]]
        );
        assert_eq!(p, vec![0, 1, 2]);
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let (p, c) = exhaustive(&[0.0; 9], 3);
        assert_eq!(p, vec![0, 1, 2]);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn small_known_instance() {
        let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let (p, c) = hungarian(&cost, 3);
        assert_eq!(c, 5.0);
        assert_eq!(assignment_cost(&cost, 3, &p), 5.0);
        assert_eq!(exhaustive(&cost, 3).1, 5.0);
    }

    #[test]
    fn hungarian_matches_exhaustive_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=6 {
            for _ in 0..100 {
                let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
                assert_eq!(hungarian(&cost, n).1, exhaustive(&cost, n).1);
            }
        }
    }
}
