//! Keyframe sampling: reduce a sequence of frame embeddings to `k`
//! temporally ordered, visually diverse frames.
//!
//! `c` candidate frames are drawn first (evenly spaced, or repeated when the
//! clip has fewer than `c` frames). Each candidate is shifted by a weighted
//! normalised timestamp, the candidates are clustered with k-means, and the
//! member nearest each centroid is kept. Results are returned in time order.
//!
//! When fewer than `k` distinct points exist (for example identical frames
//! with `alpha = 0`) clustering is meaningless, and evenly spaced candidates
//! are returned instead.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const MAX_ITERATIONS: usize = 100;

/// How the timestamp `i / n_total` enters the clustered features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    /// Added (times alpha) to every coordinate.
    #[default]
    Broadcast,
    /// Appended (times alpha) as one extra coordinate.
    Append,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyframeSelection {
    /// Strictly increasing positions into the candidate list.
    pub positions: Vec<usize>,
    /// Frame index of each selected candidate.
    pub frames: Vec<usize>,
    /// Embedding rows of the selected frames, `k x d_e`.
    pub embeddings: Array2<f64>,
    /// Candidate positions of the cluster each selection represents; empty
    /// when the fallback was used.
    pub members: Vec<Vec<usize>>,
    pub fallback: bool,
}

/// `c` frame indices in `[0, n_total)`, in order.
pub fn candidate_indices(n_total: usize, c: usize) -> Result<Vec<usize>> {
    if n_total == 0 || c == 0 {
        return Err(Error::Invalid(format!("candidate_indices needs n_total >= 1 and c >= 1 (got {n_total}, {c})")));
    }
    if n_total < c {
        // frame i repeats floor((i+1)c/n) - floor(ic/n) times
        let mut out = Vec::with_capacity(c);
        for i in 0..n_total {
            let reps = (i + 1) * c / n_total - i * c / n_total;
            out.extend(std::iter::repeat_n(i, reps));
        }
        Ok(out)
    } else {
        Ok(linspace(n_total - 1, c))
    }
}

/// `c` rounded, evenly spaced integers from 0 to `last`.
fn linspace(last: usize, c: usize) -> Vec<usize> {
    if c == 1 {
        return vec![0];
    }
    let den = c - 1;
    (0..c).map(|i| (2 * i * last + den) / (2 * den)).collect()
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Candidate features with the time weighting applied.
pub fn time_weighted(frames: &Array2<f64>, candidates: &[usize], alpha: f64, mode: TimeMode) -> Array2<f64> {
    let n_total = frames.nrows() as f64;
    let d = frames.ncols();
    let width = match mode {
        TimeMode::Broadcast => d,
        TimeMode::Append => d + 1,
    };
    Array2::from_shape_fn((candidates.len(), width), |(r, col)| {
        let i = candidates[r];
        let time = alpha * i as f64 / n_total;
        match mode {
            TimeMode::Broadcast => frames[[i, col]] + time,
            TimeMode::Append if col == d => time,
            TimeMode::Append => frames[[i, col]],
        }
    })
}

fn distinct_rows(points: &Array2<f64>, at_least: usize) -> bool {
    let mut seen: Vec<usize> = Vec::new();
    for r in 0..points.nrows() {
        if !seen.iter().any(|&s| points.row(s) == points.row(r)) {
            seen.push(r);
            if seen.len() >= at_least {
                return true;
            }
        }
    }
    false
}

fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(points: &Array2<f64>, k: usize, rng: &mut SeededRng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut choice = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc > target {
                    choice = i;
                    break;
                }
            }
            while d2[choice] == 0.0 {
                choice -= 1;
            }
            choice
        } else {
            0
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

fn recompute(points: &Array2<f64>, assign: &[usize], k: usize) -> (Array2<f64>, Vec<usize>) {
    let mut centroids = Array2::zeros((k, points.ncols()));
    let mut counts = vec![0usize; k];
    for (i, &a) in assign.iter().enumerate() {
        let mut row = centroids.row_mut(a);
        row += &points.row(i);
        counts[a] += 1;
    }
    for (j, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            centroids.row_mut(j).mapv_inplace(|v| v / cnt as f64);
        }
    }
    (centroids, counts)
}

/// Moves the point farthest from its centroid into each empty cluster.
/// Donor clusters keep at least one member.
fn fill_empty(points: &Array2<f64>, assign: &mut [usize], centroids: &Array2<f64>, counts: &mut [usize]) -> bool {
    let mut changed = false;
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let mut best: Option<(usize, f64)> = None;
        for (i, &a) in assign.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = sq_dist(points.row(i), centroids.row(a));
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k <= number of points");
        counts[assign[i]] -= 1;
        assign[i] = empty;
        counts[empty] = 1;
        changed = true;
    }
    changed
}

/// Lloyd iterations from a k-means++ start. Returns the final assignment.
pub fn kmeans(points: &Array2<f64>, k: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut centroids = kmeans_pp(points, k, rng);
    let mut assign: Vec<usize> = vec![usize::MAX; points.nrows()];
    for _ in 0..MAX_ITERATIONS {
        let next: Vec<usize> = points.rows().into_iter().map(|p| nearest(p, &centroids).0).collect();
        let (c, mut counts) = recompute(points, &next, k);
        let mut next = next;
        let reseeded = fill_empty(points, &mut next, &c, &mut counts);
        let stable = next == assign && !reseeded;
        assign = next;
        centroids = recompute(points, &assign, k).0;
        if stable {
            break;
        }
    }
    assign
}

pub fn select_keyframes(
    frames: &Array2<f64>,
    k: usize,
    c: usize,
    alpha: f64,
    mode: TimeMode,
    rng: &mut SeededRng,
) -> Result<KeyframeSelection> {
    if frames.nrows() == 0 || frames.ncols() == 0 {
        return Err(Error::Invalid("frame embeddings must be non-empty".into()));
    }
    if frames.iter().any(|v| !v.is_finite()) || !alpha.is_finite() {
        return Err(Error::NonFinite("frame embeddings or alpha".into()));
    }
    if k == 0 || k > c {
        return Err(Error::Invalid(format!("need 1 <= k <= c (k={k}, c={c})")));
    }
    let candidates = candidate_indices(frames.nrows(), c)?;
    let points = time_weighted(frames, &candidates, alpha, mode);

    let (positions, members, fallback) = if k == c {
        ((0..c).collect(), (0..c).map(|p| vec![p]).collect(), false)
    } else if !distinct_rows(&points, k) {
        (linspace(c - 1, k), Vec::new(), true)
    } else {
        let assign = kmeans(&points, k, rng);
        let (centroids, _) = recompute(&points, &assign, k);
        let mut chosen: Vec<(usize, Vec<usize>)> = (0..k)
            .map(|j| {
                let cluster: Vec<usize> = (0..c).filter(|&p| assign[p] == j).collect();
                let mut best = cluster[0];
                let mut best_d = f64::INFINITY;
                for &p in &cluster {
                    let d = sq_dist(points.row(p), centroids.row(j));
                    if d < best_d {
                        best = p;
                        best_d = d;
                    }
                }
                (best, cluster)
            })
            .collect();
        chosen.sort_by_key(|(p, _)| *p);
        let (positions, members) = chosen.into_iter().unzip();
        (positions, members, false)
    };
    let frames_idx: Vec<usize> = positions.iter().map(|&p| candidates[p]).collect();
    let embeddings = Array2::from_shape_fn((k, frames.ncols()), |(r, col)| frames[[frames_idx[r], col]]);
    Ok(KeyframeSelection { positions, frames: frames_idx, embeddings, members, fallback })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn linspace_identity_and_spacing() {
        assert_eq!(candidate_indices(500, 500).unwrap(), (0..500).collect::<Vec<_>>());
        let idx = candidate_indices(1000, 500).unwrap();
        assert_eq!((idx[0], idx[499], idx.len()), (0, 999, 500));
        let gaps: Vec<usize> = idx.windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.iter().max().unwrap() - gaps.iter().min().unwrap() <= 1);
        assert_eq!(candidate_indices(7, 1).unwrap(), vec![0]);
    }

    #[test]
    fn oversample_repeats_evenly() {
        assert_eq!(candidate_indices(3, 6).unwrap(), vec![0, 0, 1, 1, 2, 2]);
        let idx = candidate_indices(3, 7).unwrap();
        assert_eq!(idx.len(), 7);
        for i in 0..3 {
            let n = idx.iter().filter(|&&x| x == i).count();
            assert!(n == 2 || n == 3);
        }
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn k_equal_c_keeps_everything() {
        let f = Array2::from_shape_fn((8, 3), |(r, c)| (r * c) as f64);
        let s = select_keyframes(&f, 5, 5, 0.1, TimeMode::Broadcast, &mut seeded_rng(0)).unwrap();
        assert_eq!(s.positions, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.frames, candidate_indices(8, 5).unwrap());
    }

    #[test]
    fn identical_frames_fall_back_to_even_spacing() {
        let f = Array2::from_elem((20, 4), 1.5);
        let s = select_keyframes(&f, 4, 10, 0.0, TimeMode::Broadcast, &mut seeded_rng(0)).unwrap();
        assert!(s.fallback);
        assert_eq!(s.positions, vec![0, 3, 6, 9]);
    }

    #[test]
    fn append_mode_adds_a_time_column() {
        let f = Array2::zeros((4, 2));
        let p = time_weighted(&f, &[0, 1, 2, 3], 2.0, TimeMode::Append);
        assert_eq!(p.ncols(), 3);
        assert_eq!(p[[2, 2]], 1.0);
        assert_eq!(p[[2, 0]], 0.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        let f = Array2::zeros((4, 2));
        let mut rng = seeded_rng(0);
        assert!(select_keyframes(&f, 5, 4, 0.1, TimeMode::Broadcast, &mut rng).is_err());
        assert!(select_keyframes(&f, 0, 4, 0.1, TimeMode::Broadcast, &mut rng).is_err());
        let mut bad = f.clone();
        bad[[0, 0]] = f64::NAN;
        assert!(select_keyframes(&bad, 1, 4, 0.1, TimeMode::Broadcast, &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_selection() {
        let mut r = seeded_rng(4);
        let f = Array2::from_shape_fn((60, 3), |_| r.random::<f64>());
        let a = select_keyframes(&f, 6, 30, 0.1, TimeMode::Broadcast, &mut seeded_rng(1)).unwrap();
        let b = select_keyframes(&f, 6, 30, 0.1, TimeMode::Broadcast, &mut seeded_rng(1)).unwrap();
        assert_eq!(a, b);
    }
}
