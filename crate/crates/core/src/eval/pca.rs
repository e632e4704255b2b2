use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{csv_file_error, FeatureMatrix};
use crate::error::{Error, Result};
use crate::rng;

const ITERATIONS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub label: String,
    pub x: f64,
    pub y: f64,
}

/// Projection onto the top two principal components, found by power
/// iteration with deflation from a seeded start. Each component is signed so
/// its largest-magnitude loading is positive.
pub fn pca2d(features: &FeatureMatrix, seed: u64) -> Result<Vec<EmbeddingRow>> {
    let (n, d) = (features.rows(), features.dim);
    if n < 3 || d < 2 {
        return Err(Error::Eval(format!("PCA needs ≥ 3 samples and ≥ 2 dims, got {n}×{d}")));
    }
    let mut mean = vec![0.0f64; d];
    for i in 0..n {
        mean.iter_mut().zip(features.row(i)).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<Vec<f64>> = (0..n)
        .map(|i| features.row(i).iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect())
        .collect();

    let mut cov = vec![0.0f64; d * d];
    for row in &centred {
        for a in 0..d {
            let ra = row[a];
            for (c, &rb) in cov[a * d..(a + 1) * d].iter_mut().zip(row) {
                *c += ra * rb;
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    if trace.is_nan() || trace <= 1e-12 {
        return Err(Error::ZeroVariance);
    }

    let mut r = rng::stream(seed, "pca");
    let v1 = leading_eigenvector(&cov, d, None, &mut r);
    let v2 = leading_eigenvector(&cov, d, Some(&v1), &mut r);

    Ok(centred
        .iter()
        .enumerate()
        .map(|(i, row)| EmbeddingRow {
            id: features.ids[i].clone(),
            label: features.labels[i].clone(),
            x: dot(row, &v1),
            y: dot(row, &v2),
        })
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalise(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

fn orthogonalise(v: &mut [f64], against: Option<&[f64]>) {
    if let Some(u) = against {
        let p = dot(v, u);
        v.iter_mut().zip(u).for_each(|(x, &y)| *x -= p * y);
    }
}

/// Power iteration restricted to the complement of `against`.
fn leading_eigenvector(cov: &[f64], d: usize, against: Option<&[f64]>, r: &mut rng::Rng) -> Vec<f64> {
    let mut v: Vec<f64> = rng::normal_vec(r, d, 1.0).into_iter().map(f64::from).collect();
    orthogonalise(&mut v, against);
    normalise(&mut v);
    for _ in 0..ITERATIONS {
        let mut next: Vec<f64> = (0..d).map(|a| dot(&cov[a * d..(a + 1) * d], &v)).collect();
        orthogonalise(&mut next, against);
        // A null space (e.g. collinear data) leaves the start vector in place.
        if normalise(&mut next) <= 1e-300 {
            break;
        }
        v = next;
    }
    let pivot = v
        .iter()
        .enumerate()
        .fold(
            (0, 0.0f64),
            |best, (i, &x)| if x.abs() > best.1 { (i, x.abs()) } else { best },
        )
        .0;
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// `id,label,x,y`.
pub fn write_embedding_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_file_error(path, e))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Provenance;
    use rand::Rng as _;

    fn matrix(rows: &[Vec<f32>]) -> FeatureMatrix {
        FeatureMatrix::new(
            Provenance::VisionOnly,
            (0..rows.len()).map(|i| i.to_string()).collect(),
            vec!["a".into(); rows.len()],
            rows[0].len(),
            rows.concat(),
        )
        .unwrap()
    }

    fn variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
        let n = v.clone().count() as f64;
        let m = v.clone().sum::<f64>() / n;
        v.map(|x| (x - m).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn collinear_data_has_no_second_component() {
        let dir = [0.3f32, -1.2, 0.5, 2.0];
        let rows: Vec<Vec<f32>> = (0..20)
            .map(|i| dir.iter().map(|&x| x * (i as f32 - 7.5) + 1.0).collect())
            .collect();
        let out = pca2d(&matrix(&rows), 0).unwrap();
        let vx = variance(out.iter().map(|r| r.x));
        let vy = variance(out.iter().map(|r| r.y));
        assert!(vy < 1e-6 * vx, "{vy} vs {vx}");
    }

    #[test]
    fn centroid_at_origin_and_deterministic() {
        let mut r = rng::seeded(4);
        let rows: Vec<Vec<f32>> = (0..30).map(|_| rng::normal_vec(&mut r, 6, 2.0)).collect();
        let m = matrix(&rows);
        let out = pca2d(&m, 1).unwrap();
        let cx: f64 = out.iter().map(|r| r.x).sum::<f64>() / 30.0;
        let cy: f64 = out.iter().map(|r| r.y).sum::<f64>() / 30.0;
        assert!(cx.abs() < 1e-9 && cy.abs() < 1e-9);
        assert_eq!(out, pca2d(&m, 1).unwrap());
        // The sign convention removes the dependence on the start vector.
        let other = pca2d(&m, 99).unwrap();
        for (a, b) in out.iter().zip(&other) {
            assert!((a.x - b.x).abs() < 1e-6 && (a.y - b.y).abs() < 1e-6);
        }
    }

    fn reconstruction_error(rows: &[Vec<f64>], u: &[f64], v: &[f64]) -> f64 {
        rows.iter()
            .map(|x| {
                let (a, b) = (dot(x, u), dot(x, v));
                x.iter()
                    .zip(u.iter().zip(v))
                    .map(|(&xi, (&ui, &vi))| (xi - a * ui - b * vi).powi(2))
                    .sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn beats_random_orthonormal_pairs() {
        let mut r = rng::seeded(11);
        let d = 8;
        // Anisotropic cloud so the top plane is well defined.
        let rows: Vec<Vec<f32>> = (0..60)
            .map(|_| {
                rng::normal_vec(&mut r, d, 1.0)
                    .into_iter()
                    .enumerate()
                    .map(|(j, x)| x * (d - j) as f32)
                    .collect()
            })
            .collect();
        let m = matrix(&rows);
        let out = pca2d(&m, 0).unwrap();
        let mut mean = vec![0.0f64; d];
        rows.iter()
            .for_each(|row| mean.iter_mut().zip(row).for_each(|(a, &b)| *a += b as f64 / 60.0));
        let centred: Vec<Vec<f64>> = rows
            .iter()
            .map(|row| row.iter().zip(&mean).map(|(&x, m)| x as f64 - m).collect())
            .collect();
        let total: f64 = centred.iter().map(|x| dot(x, x)).sum();
        let pca_err = total - out.iter().map(|e| e.x * e.x + e.y * e.y).sum::<f64>();
        for _ in 0..100 {
            let mut u: Vec<f64> = (0..d).map(|_| r.random::<f64>() - 0.5).collect();
            normalise(&mut u);
            let mut v: Vec<f64> = (0..d).map(|_| r.random::<f64>() - 0.5).collect();
            orthogonalise(&mut v, Some(&u));
            normalise(&mut v);
            assert!(pca_err <= reconstruction_error(&centred, &u, &v) + 1e-9);
        }
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(matches!(
            pca2d(&matrix(&vec![vec![1.0, 2.0]; 5]), 0),
            Err(Error::ZeroVariance)
        ));
        assert!(pca2d(&matrix(&[vec![1.0, 2.0], vec![0.0, 1.0]]), 0).is_err());
        assert!(pca2d(&matrix(&[vec![1.0], vec![0.0], vec![3.0]]), 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let rows = vec![
            EmbeddingRow {
                id: "a".into(),
                label: "sea".into(),
                x: 0.1,
                y: -1.0 / 3.0,
            },
            EmbeddingRow {
                id: "b".into(),
                label: "lake, river".into(),
                x: 1e-300,
                y: 2.5,
            },
        ];
        write_embedding_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("id,label,x,y\n"));
        let back: Vec<EmbeddingRow> = csv::Reader::from_path(&p)
            .unwrap()
            .deserialize()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(back, rows);
    }
}
