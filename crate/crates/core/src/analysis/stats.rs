use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Lower median; zero for an empty slice.
pub fn median_lower<T: Copy + Ord + Default>(values: &[T]) -> T {
    if values.is_empty() {
        return T::default();
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    v[(v.len() - 1) / 2]
}

/// Mann-Whitney rank-sum test, normal approximation with tie and continuity
/// corrections.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSum {
    /// `U` of the first sample.
    pub u: f64,
    /// `P(first > second)` alternative.
    pub p_greater: f64,
    pub p_two_sided: f64,
}

pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> RankSum {
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let mut all: Vec<(f64, bool)> = x.iter().map(|&v| (v, true)).chain(y.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut rank_x = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        rank_x += avg * all[i..j].iter().filter(|e| e.1).count() as f64;
        i = j;
    }
    let u = rank_x - n1 * (n1 + 1.0) / 2.0;
    let mu = n1 * n2 / 2.0;
    let nf = n as f64;
    let var = if n > 1 {
        n1 * n2 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)))
    } else {
        0.0
    };
    if var <= 0.0 {
        return RankSum {
            u,
            p_greater: 1.0,
            p_two_sided: 1.0,
        };
    }
    let sd = var.sqrt();
    let normal = Normal::standard();
    let p_greater = normal.sf((u - mu - 0.5) / sd);
    let u_big = u.max(n1 * n2 - u);
    let p_two_sided = (2.0 * normal.sf((u_big - mu - 0.5) / sd)).min(1.0);
    RankSum {
        u,
        p_greater,
        p_two_sided,
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Largest vertical gap between the points and their lower convex hull
/// (`upper = false`) or upper concave hull (`upper = true`). Points are
/// sorted by x; equal x keeps input order.
fn hull_gap(points: &[(f64, f64)], upper: bool) -> f64 {
    if points.len() < 3 {
        // two points always lie on their own hull unless they share x
        return match points {
            [a, b] if a.0 == b.0 => (a.1 - b.1).abs(),
            _ => 0.0,
        };
    }
    let sign = if upper { -1.0 } else { 1.0 };
    let mut hull: Vec<(f64, f64)> = Vec::new();
    for &p in points {
        while hull.len() >= 2 && sign * cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let eval = |x: f64| -> f64 {
        // vertical segments take their value closest to the curve side
        let mut best: Option<f64> = None;
        for w in hull.windows(2) {
            let (a, b) = (w[0], w[1]);
            if x < a.0 || x > b.0 {
                continue;
            }
            let v = if b.0 == a.0 {
                if upper {
                    a.1.max(b.1)
                } else {
                    a.1.min(b.1)
                }
            } else {
                a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0)
            };
            best = Some(match best {
                None => v,
                Some(o) if upper => o.max(v),
                Some(o) => o.min(v),
            });
        }
        best.unwrap_or(hull[0].1)
    };
    points.iter().map(|&(x, y)| (y - eval(x)).abs()).fold(0.0, f64::max)
}

/// Hartigan's dip: sup distance between the empirical CDF and the nearest
/// unimodal CDF. Every sample value is tried as the mode; the CDF left of
/// the mode is matched by a convex function and right of it by a concave
/// one, each within half its hull gap.
pub fn dip_statistic(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    // distinct support points with left and right CDF limits
    let mut support: Vec<(f64, f64, f64)> = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        support.push((v[i], i as f64 / n, j as f64 / n));
        i = j;
    }
    let mut best = f64::INFINITY;
    for m in 0..support.len() {
        let mut left: Vec<(f64, f64)> = Vec::new();
        for &(x, lo, hi) in &support[..m] {
            left.push((x, lo));
            left.push((x, hi));
        }
        left.push((support[m].0, support[m].1));
        let mut right = vec![(support[m].0, support[m].2)];
        for &(x, lo, hi) in &support[m + 1..] {
            right.push((x, lo));
            right.push((x, hi));
        }
        let d = 0.5 * hull_gap(&left, false).max(hull_gap(&right, true));
        best = best.min(d);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median_lower(&[3usize, 1, 2]), 2);
        assert_eq!(median_lower(&[4usize, 1, 2, 3]), 2);
        assert_eq!(median_lower::<usize>(&[]), 0);
    }

    // reference values from scipy.stats.mannwhitneyu(x, y, method="asymptotic")
    #[test]
    fn rank_sum_matches_reference() {
        let x = [1.0, 2.0, 2.0, 3.0, 5.0, 5.0, 6.0];
        let y = [0.0, 1.0, 1.0, 2.0, 2.0, 4.0];
        let r = mann_whitney_u(&x, &y);
        assert_eq!(r.u, 33.0);
        assert!((r.p_greater - GREATER_REF).abs() < 1e-9, "{}", r.p_greater);
        assert!((r.p_two_sided - TWO_SIDED_REF).abs() < 1e-9, "{}", r.p_two_sided);
    }

    const GREATER_REF: f64 = 0.046693984303400174;
    const TWO_SIDED_REF: f64 = 0.093387968606800348;

    #[test]
    fn rank_sum_degenerate() {
        let r = mann_whitney_u(&[2.0; 5], &[2.0; 5]);
        assert_eq!((r.p_greater, r.p_two_sided), (1.0, 1.0));
        let r = mann_whitney_u(&[5.0, 6.0, 7.0, 8.0], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(r.u, 16.0);
    }

    #[test]
    fn dip_examples() {
        assert_eq!(dip_statistic(&[0.0, 0.0, 1.0, 1.0]), 0.25);
        assert_eq!(dip_statistic(&[3.0; 7]), 0.0);
        let uniform: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert!(dip_statistic(&uniform) <= 0.5 / 50.0 + 1e-12);
        let mut bimodal = vec![1.0; 40];
        bimodal.extend(vec![8.0; 40]);
        bimodal.extend(vec![4.0; 2]);
        assert!(dip_statistic(&bimodal) > 0.2);
    }
}
