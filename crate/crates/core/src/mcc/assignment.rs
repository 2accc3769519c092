//! Linear sum assignment (Hungarian method with potentials), O(n^3).

/// Column assigned to each row minimizing the total cost of a square table.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    assert!(cost.iter().all(|r| r.len() == n), "cost table must be square");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; column 0 is a virtual start.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        // Augment along the alternating path.
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[owner[j] - 1] = j - 1;
    }
    out
}

/// Column assigned to each row maximizing the total score.
pub fn max_score_assignment(score: &[Vec<f64>]) -> Vec<usize> {
    let neg: Vec<Vec<f64>> = score.iter().map(|r| r.iter().map(|x| -x).collect()).collect();
    min_cost_assignment(&neg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn total(t: &[Vec<f64>], p: &[usize]) -> f64 {
        p.iter().enumerate().map(|(i, &j)| t[i][j]).sum()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn identity_and_permuted_identity() {
        let eye: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 0.9 } else { 0.1 }).collect()).collect();
        assert_eq!(max_score_assignment(&eye), vec![0, 1, 2, 3]);
        let perm = [2, 0, 3, 1];
        let t: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if perm[i] == j { 1.0 } else { 0.0 }).collect()).collect();
        assert_eq!(max_score_assignment(&t), perm.to_vec());
        assert!(max_score_assignment(&[]).is_empty());
    }

    #[test]
    fn matches_brute_force() {
        let mut r = crate::rng::seeded(17);
        let perms = permutations(5);
        for _ in 0..100 {
            let t: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| r.random::<f64>()).collect()).collect();
            let best = perms.iter().map(|p| total(&t, p)).fold(f64::MIN, f64::max);
            assert!((total(&t, &max_score_assignment(&t)) - best).abs() < 1e-12);
        }
    }
}
