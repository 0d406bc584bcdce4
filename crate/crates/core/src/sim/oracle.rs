//! Brute-force reference computations used to check the fast paths.

use crate::error::Result;
use crate::graph::{GraphState, ValidatedGraph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Cumulative upper-crossing probability per stage for standard Brownian
/// motion observed at `fractions`, one result per boundary vector, with its
/// binomial standard error. All boundary vectors share the same draws.
pub fn mc_cumulative_crossing(fractions: &[f64], bounds: &[Vec<f64>], draws: u64, seed: u64) -> Vec<Vec<(f64, f64)>> {
    const CHUNK: u64 = 1 << 16;
    let k = fractions.len();
    let nb = bounds.len();
    let chunks = draws.div_ceil(CHUNK);
    let sd: Vec<f64> = (0..k)
        .map(|i| (fractions[i] - if i == 0 { 0.0 } else { fractions[i - 1] }).sqrt())
        .collect();
    let counts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let n = CHUNK.min(draws - c * CHUNK);
            let mut cnt = vec![0u64; nb * k];
            let mut first = vec![usize::MAX; nb];
            for _ in 0..n {
                first.iter_mut().for_each(|f| *f = usize::MAX);
                let mut s = 0.0;
                for i in 0..k {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    s += sd[i] * z;
                    let zi = s / fractions[i].sqrt();
                    for b in 0..nb {
                        if first[b] == usize::MAX && zi >= bounds[b][i] {
                            first[b] = i;
                        }
                    }
                }
                for b in 0..nb {
                    if first[b] != usize::MAX {
                        for i in first[b]..k {
                            cnt[b * k + i] += 1;
                        }
                    }
                }
            }
            cnt
        })
        .reduce(
            || vec![0u64; nb * k],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let n = draws as f64;
    (0..nb)
        .map(|b| {
            (0..k)
                .map(|i| {
                    let p = counts[b * k + i] as f64 / n;
                    (p, (p * (1.0 - p) / n).sqrt())
                })
                .collect()
        })
        .collect()
}

/// First sign change of a non-decreasing `f` on a uniform grid of `[lo, hi]`,
/// reported as the midpoint of the cell. `None` if there is none.
pub fn grid_root<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, step: f64) -> Option<f64> {
    let n = ((hi - lo) / step).ceil() as usize;
    let mut prev = f(lo);
    if prev > 0.0 {
        return None;
    }
    for i in 1..=n {
        let x = lo + i as f64 * step;
        let v = f(x);
        if v > 0.0 {
            return Some(x - 0.5 * step);
        }
        if v == 0.0 {
            return Some(x);
        }
        prev = v;
    }
    let _ = prev;
    None
}

/// Runs the single-stage graphical test along every admissible rejection
/// order and returns each distinct final rejection set (sorted).
pub fn exhaustive_rejection_sets(graph: &ValidatedGraph, pvalues: &[f64], alpha: f64) -> Result<Vec<Vec<usize>>> {
    fn go(state: &GraphState, p: &[f64], alpha: f64, done: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) -> Result<()> {
        let eligible: Vec<usize> = state
            .active_indices()
            .into_iter()
            .filter(|&j| p[j] <= state.weight(j) * alpha)
            .collect();
        if eligible.is_empty() {
            let mut s = done.clone();
            s.sort_unstable();
            if !out.contains(&s) {
                out.push(s);
            }
            return Ok(());
        }
        for j in eligible {
            let mut next = state.clone();
            next.reject(j)?;
            done.push(j);
            go(&next, p, alpha, done, out)?;
            done.pop();
        }
        Ok(())
    }
    let mut out = Vec::new();
    go(&graph.initial_state(), pvalues, alpha, &mut Vec::new(), &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphSpec;

    #[test]
    fn single_look_matches_normal_tail() {
        let r = mc_cumulative_crossing(&[1.0], &[vec![1.959_963_984_540_054]], 400_000, 3);
        let (p, se) = r[0][0];
        assert!((p - 0.025).abs() < 4.0 * se);
    }

    #[test]
    fn grid_root_finds_crossing() {
        let r = grid_root(|x| x - 0.3, -1.0, 1.0, 1e-4).unwrap();
        assert!((r - 0.3).abs() < 1e-4);
        assert!(grid_root(|x| x + 5.0, -1.0, 1.0, 1e-2).is_none());
    }

    #[test]
    fn holm_order_invariant() {
        let g = ValidatedGraph::new(&GraphSpec::holm(3)).unwrap();
        let s = exhaustive_rejection_sets(&g, &[0.001, 0.012, 0.02], 0.025).unwrap();
        assert_eq!(s, vec![vec![0, 1, 2]]);
    }
}
