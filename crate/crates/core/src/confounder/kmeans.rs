use rand::Rng;

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;
pub const INERTIA_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Cluster index of every point.
    pub labels: Vec<usize>,
    /// Member count of every cluster.
    pub counts: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each iteration's mean update.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// K-Means++ seeding: the first center is uniform over the points, each
/// further center is drawn with probability proportional to its squared
/// distance to the nearest chosen center.
pub fn kmeanspp_seed<R: Rng + ?Sized>(points: &[Vec<f64>], n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if n == 0 || n > points.len() {
        return Err(Error::Count {
            requested: n,
            available: points.len(),
        });
    }
    let first = rng.random_range(0..points.len());
    let chosen = kmeanspp_extend(points, vec![first], n, rng);
    Ok(chosen.into_iter().map(|i| points[i].clone()).collect())
}

/// Continues D² sampling from an initial set of chosen point indices.
/// When every remaining point coincides with a chosen center the next index
/// is drawn uniformly among unchosen points.
pub(crate) fn kmeanspp_extend<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    mut chosen: Vec<usize>,
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| {
            chosen
                .iter()
                .map(|&c| sq_dist(p, &points[c]))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    while chosen.len() < n {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if target < acc {
                    break;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen
}

fn assign(points: &[Vec<f64>], centers: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centers.iter().enumerate() {
                let d = sq_dist(p, c);
                // strict comparison keeps the lowest index on ties
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

fn means(points: &[Vec<f64>], labels: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

/// Moves the point farthest from its own center into each empty cluster.
fn repair_empty(points: &[Vec<f64>], centers: &mut [Vec<f64>], labels: &mut [usize]) {
    let k = centers.len();
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centers[labels[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let Some(i) = far else { return };
        labels[i] = empty;
        centers[empty] = points[i].clone();
    }
}

fn inertia(points: &[Vec<f64>], centers: &[Vec<f64>], labels: &[usize]) -> f64 {
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &centers[l])).sum()
}

/// Lloyd iterations from `centers` until the inertia changes by less than
/// [`INERTIA_TOLERANCE`], the centers stop moving, or [`MAX_ITERATIONS`].
///
/// The returned centers are exactly the means of the returned assignment.
pub fn lloyd(points: &[Vec<f64>], centers: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, ClusterAssignment) {
    let k = centers.len();
    let dim = points.first().map_or(0, Vec::len);
    let mut centers = centers;
    let mut labels = Vec::new();
    let mut counts = vec![0; k];
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        labels = assign(points, &centers);
        repair_empty(points, &mut centers, &mut labels);
        let (updated, c) = means(points, &labels, k, dim);
        counts = c;
        let moved = updated != centers;
        centers = updated;
        let current = inertia(points, &centers, &labels);
        trace.push(current);
        if !moved || (prev - current).abs() < INERTIA_TOLERANCE {
            break;
        }
        prev = current;
    }
    let inertia = trace.last().copied().unwrap_or(0.0);
    (
        centers,
        ClusterAssignment {
            labels,
            counts,
            inertia,
            iterations,
            inertia_trace: trace,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn seeding_all_points() {
        let p = pts(&[0.0, 1.0, 5.0, 9.0, 20.0]);
        let mut c = kmeanspp_seed(&p, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        c.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(c, p);
    }

    #[test]
    fn seeding_single_center_is_a_point() {
        let p = pts(&[0.5, 1.5, 2.5]);
        let c = kmeanspp_seed(&p, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(c.len(), 1);
        assert!(p.contains(&c[0]));
    }

    #[test]
    fn seeding_picks_only_point_with_mass() {
        let p = pts(&[0.0, 0.0, 0.0, 100.0]);
        for seed in 0..50 {
            let chosen = kmeanspp_extend(&p, vec![0], 2, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(chosen, vec![0, 3]);
        }
    }

    #[test]
    fn seeding_too_many_rejected() {
        let p = pts(&[0.0, 1.0]);
        assert!(matches!(
            kmeanspp_seed(&p, 3, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::Count { requested: 3, available: 2 })
        ));
    }

    #[test]
    fn fixed_point_takes_one_iteration() {
        let p = pts(&[0.0, 2.0, 10.0, 12.0]);
        let (c, a) = lloyd(&p, vec![vec![1.0], vec![11.0]]);
        assert_eq!(a.iterations, 1);
        assert_eq!(c, vec![vec![1.0], vec![11.0]]);
        assert_eq!(a.counts, vec![2, 2]);
    }

    #[test]
    fn two_blobs() {
        let p = pts(&[0.0, 0.1, 0.2, 10.0, 10.1, 10.2]);
        let (c, a) = lloyd(&p, vec![vec![0.0], vec![0.1]]);
        let mut got: Vec<f64> = c.iter().map(|v| v[0]).collect();
        got.sort_by(f64::total_cmp);
        assert!((got[0] - 0.1).abs() < 1e-9 && (got[1] - 10.1).abs() < 1e-9, "{got:?}");
        assert_eq!(a.counts.iter().sum::<usize>(), 6);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let labels = assign(&pts(&[5.0]), &[vec![4.0], vec![6.0]]);
        assert_eq!(labels, vec![0]);
    }

    #[test]
    fn empty_clusters_are_repaired() {
        // Both initial centers far right: the second one never wins a point.
        let p = pts(&[0.0, 1.0, 2.0, 3.0]);
        let (c, a) = lloyd(&p, vec![vec![100.0], vec![100.0]]);
        assert!(a.counts.iter().all(|&n| n > 0), "{:?}", a.counts);
        for (k, center) in c.iter().enumerate() {
            let members: Vec<f64> = p.iter().zip(&a.labels).filter(|(_, &l)| l == k).map(|(v, _)| v[0]).collect();
            let mean = members.iter().sum::<f64>() / members.len() as f64;
            assert!((center[0] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn inertia_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let init = kmeanspp_seed(&p, 8, &mut rng).unwrap();
        let (_, a) = lloyd(&p, init);
        assert!(a.inertia_trace.windows(2).all(|w| w[1] <= w[0]), "{:?}", a.inertia_trace);
    }
}
