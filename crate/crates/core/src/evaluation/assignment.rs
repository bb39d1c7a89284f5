//! Optimal assignment (Hungarian method with potentials).

use ndarray::Array2;

/// Assign every row of `score` (`rows ≤ cols`) to a distinct column so the
/// summed score is maximal. Returns the column chosen for each row.
pub fn max_assignment(score: &Array2<f64>) -> Vec<usize> {
    let (n, m) = score.dim();
    assert!(n <= m, "assignment needs rows ({n}) <= columns ({m})");
    if n == 0 {
        return Vec::new();
    }
    // Minimize the negated score; 1-based arrays with a virtual column 0.
    let cost = |i: usize, j: usize| -score[[i - 1, j - 1]];
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
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
            for j in 0..=m {
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn permutations(cols: usize, k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(cols, k - 1) {
            for c in 0..cols {
                if !p.contains(&c) {
                    let mut q = p.clone();
                    q.push(c);
                    out.push(q);
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (rows, cols) in [(1, 1), (3, 3), (3, 5), (4, 6), (5, 5)] {
            for _ in 0..20 {
                let s = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(0.0..1.0));
                let total = |a: &[usize]| a.iter().enumerate().map(|(i, &j)| s[[i, j]]).sum::<f64>();
                let best = permutations(cols, rows).iter().map(|p| total(p)).fold(f64::MIN, f64::max);
                let got = max_assignment(&s);
                let mut seen = got.clone();
                seen.sort_unstable();
                seen.dedup();
                assert_eq!(seen.len(), rows);
                assert!((total(&got) - best).abs() < 1e-12);
            }
        }
    }
}
