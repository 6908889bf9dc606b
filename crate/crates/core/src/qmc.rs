//! Low-discrepancy point sets and space-filling designs.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Points per independent Owen-scrambled Sobol block.
const BLOCK: usize = 1 << 16;
const HALF_CELL: f64 = 1.0 / (1u64 << 24) as f64;

/// `count` Owen-scrambled Sobol points in `[0,1)^dim`, one per row.
///
/// Beyond 2^16 points the set is continued with independently scrambled
/// blocks (seed, seed+1, ...), which keeps every block balanced.
pub fn sobol_points(count: usize, dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    if count == 0 {
        return Err(Error::Argument(
            "quadrature node count must be positive".into(),
        ));
    }
    if dim as u32 >= sobol_burley::NUM_DIMENSIONS {
        return Err(Error::Argument(format!(
            "Sobol sequence supports at most {} dimensions, got {dim}",
            sobol_burley::NUM_DIMENSIONS - 1
        )));
    }
    let base_seed = fold_seed(seed);
    let mut pts = DMatrix::zeros(count, dim);
    for i in 0..count {
        let block = (i / BLOCK) as u32;
        let idx = (i % BLOCK) as u32;
        let s = base_seed.wrapping_add(block.wrapping_mul(0x9E37_79B9));
        for k in 0..dim {
            // samples sit on a 2^-23 grid; shift to the cell midpoint
            pts[(i, k)] = sobol_burley::sample(idx, k as u32, s) as f64 + HALF_CELL;
        }
    }
    Ok(pts)
}

fn fold_seed(seed: u64) -> u32 {
    ((seed >> 32) as u32) ^ (seed as u32)
}

/// Latin hypercube in `[0,1)^dim` chosen to maximize the minimum pairwise
/// distance among `candidates` random hypercubes, then improved by random
/// within-column swaps that increase that minimum.
pub fn maximin_lhs<R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    candidates: usize,
    rng: &mut R,
) -> DMatrix<f64> {
    let mut best = random_lhs(n, dim, rng);
    let mut best_score = min_distance2(&best);
    for _ in 1..candidates.max(1) {
        let cand = random_lhs(n, dim, rng);
        let s = min_distance2(&cand);
        if s > best_score {
            best = cand;
            best_score = s;
        }
    }
    if n < 2 {
        return best;
    }
    // swap refinement on a cached distance matrix
    let mut dist = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            f64::INFINITY
        } else {
            dist2(&best, i, j)
        }
    });
    let mut row_min: Vec<f64> = (0..n).map(|i| dist.row(i).min()).collect();
    for _ in 0..(20 * n) {
        let col = rng.random_range(0..dim);
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b {
            continue;
        }
        swap_rows_in_col(&mut best, &mut dist, &mut row_min, a, b, col);
        let s = row_min.iter().cloned().fold(f64::INFINITY, f64::min);
        if s > best_score {
            best_score = s;
        } else {
            swap_rows_in_col(&mut best, &mut dist, &mut row_min, a, b, col);
        }
    }
    best
}

fn dist2(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    (0..m.ncols())
        .map(|k| (m[(i, k)] - m[(j, k)]).powi(2))
        .sum()
}

fn swap_rows_in_col(
    m: &mut DMatrix<f64>,
    dist: &mut DMatrix<f64>,
    row_min: &mut [f64],
    a: usize,
    b: usize,
    col: usize,
) {
    let n = m.nrows();
    let (va, vb) = (m[(a, col)], m[(b, col)]);
    m[(a, col)] = vb;
    m[(b, col)] = va;
    let mut stale = vec![false; n];
    for (r, old, new) in [(a, va, vb), (b, vb, va)] {
        for j in 0..n {
            if j == a || j == b {
                continue;
            }
            let xj = m[(j, col)];
            let before = dist[(r, j)];
            let after = before - (old - xj).powi(2) + (new - xj).powi(2);
            dist[(r, j)] = after;
            dist[(j, r)] = after;
            if after < row_min[j] {
                row_min[j] = after;
            } else if before <= row_min[j] {
                stale[j] = true;
            }
        }
    }
    // the a-b distance is unchanged by swapping within one column
    for j in 0..n {
        if stale[j] {
            row_min[j] = dist.row(j).min();
        }
    }
    row_min[a] = dist.row(a).min();
    row_min[b] = dist.row(b).min();
}

pub fn random_lhs<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, dim);
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..dim {
        perm.shuffle(rng);
        for i in 0..n {
            let u: f64 = rng.random();
            m[(i, k)] = (perm[i] as f64 + u) / n as f64;
        }
    }
    m
}

fn min_distance2(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 = (0..m.ncols())
                .map(|k| (m[(i, k)] - m[(j, k)]).powi(2))
                .sum();
            best = best.min(d);
        }
    }
    best
}

/// Deterministic child RNG for stream `index` under a master seed.
pub fn stream_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sobol_points_are_in_unit_cube_and_deterministic() {
        let a = sobol_points(1000, 3, 7).unwrap();
        let b = sobol_points(1000, 3, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..1.0).contains(&v)));
        let c = sobol_points(1000, 3, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sobol_mean_is_accurate() {
        let p = sobol_points(4096, 2, 1).unwrap();
        let mean: f64 = p
            .column(0)
            .iter()
            .zip(p.column(1).iter())
            .map(|(x, y)| x * y)
            .sum::<f64>()
            / 4096.0;
        assert!((mean - 0.25).abs() < 1e-4, "{mean}");
    }

    #[test]
    fn sobol_blocks_extend_past_limit() {
        let p = sobol_points(BLOCK + 10, 1, 3).unwrap();
        assert_ne!(p[(0, 0)], p[(BLOCK, 0)]);
    }

    #[test]
    fn lhs_has_one_point_per_stratum() {
        let mut rng = stream_rng(1, 0);
        let d = maximin_lhs(20, 4, 5, &mut rng);
        for k in 0..4 {
            let mut bins: Vec<usize> = d
                .column(k)
                .iter()
                .map(|v| (v * 20.0).floor() as usize)
                .collect();
            bins.sort();
            assert_eq!(bins, (0..20).collect::<Vec<_>>());
        }
    }
}
