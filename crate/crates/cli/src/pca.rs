//! Two-component principal component analysis via power iteration, used to
//! flatten latent embeddings onto the plotting plane.

const TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 10_000;

fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows[0].len();
    let mut means = vec![0.0; dim];
    for row in rows {
        for (m, x) in means.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= rows.len() as f64;
    }
    means
}

fn covariance(rows: &[Vec<f64>], means: &[f64]) -> Vec<Vec<f64>> {
    let dim = means.len();
    let mut cov = vec![vec![0.0; dim]; dim];
    for row in rows {
        let centered: Vec<f64> = row.iter().zip(means).map(|(x, m)| x - m).collect();
        for i in 0..dim {
            for j in 0..dim {
                cov[i][j] += centered[i] * centered[j];
            }
        }
    }
    for r in &mut cov {
        for v in r {
            *v /= rows.len() as f64;
        }
    }
    cov
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Leading eigenpair of a symmetric matrix, or a zero vector when the matrix
/// has no usable leading direction (for instance after deflating a rank-one
/// covariance). The returned vector is unit length with its first nonzero
/// component positive, so repeated runs agree exactly.
fn leading_eigenpair(m: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let dim = m.len();
    let mut v: Vec<f64> = (0..dim).map(|i| 1.0 / (i + 1) as f64).collect();
    let n = norm(&v);
    for x in &mut v {
        *x /= n;
    }
    for _ in 0..MAX_ITERATIONS {
        let mut next = mat_vec(m, &v);
        let len = norm(&next);
        if len < 1e-300 {
            return (0.0, vec![0.0; dim]);
        }
        for x in &mut next {
            *x /= len;
        }
        let delta = v
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = next;
        if delta < TOLERANCE {
            break;
        }
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
    }
    let mv = mat_vec(m, &v);
    let lambda: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
    (lambda, v)
}

/// Projects each row onto the top two principal components of the set.
/// Degenerate directions project to zero, so a single point or a perfectly
/// collinear cloud still yields well-defined coordinates.
pub fn project_2d(rows: &[Vec<f64>]) -> Vec<(f64, f64)> {
    if rows.is_empty() {
        return Vec::new();
    }
    let means = column_means(rows);
    let mut cov = covariance(rows, &means);
    let (lambda, first) = leading_eigenpair(&cov);
    for (i, row) in cov.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v -= lambda * first[i] * first[j];
        }
    }
    let (lambda_2, mut second) = leading_eigenpair(&cov);
    // Deflating a rank-one covariance leaves rounding noise, not a real
    // direction; an eigenvalue this far below the first is indistinguishable
    // from zero.
    if lambda_2 <= lambda.abs() * 1e-12 {
        second = vec![0.0; second.len()];
    }
    rows.iter()
        .map(|row| {
            let centered: Vec<f64> = row.iter().zip(&means).map(|(x, m)| x - m).collect();
            let x = centered.iter().zip(&first).map(|(a, b)| a * b).sum();
            let y = centered.iter().zip(&second).map(|(a, b)| a * b).sum();
            (x, y)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_the_dominant_axis() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = i as f64 - 9.5;
                vec![3.0 * t, 0.1 * (i % 3) as f64, 0.0]
            })
            .collect();
        let planar = project_2d(&rows);
        let spread_x: f64 = planar.iter().map(|(x, _)| x * x).sum();
        let spread_y: f64 = planar.iter().map(|(_, y)| y * y).sum();
        assert!(spread_x > 100.0 * spread_y);
    }

    #[test]
    fn collinear_points_get_a_zero_second_axis() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let planar = project_2d(&rows);
        for (_, y) in planar {
            assert!(y.abs() < 1e-9);
        }
    }

    #[test]
    fn projection_is_deterministic() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| {
                vec![
                    (i as f64 * 0.7).sin(),
                    (i as f64 * 1.3).cos(),
                    (i as f64 * 0.2).sin(),
                ]
            })
            .collect();
        let a = project_2d(&rows);
        let b = project_2d(&rows);
        assert_eq!(a, b);
    }
}
