//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use styleless::eval::IGNORE_LABEL;
use styleless::Tensor;

/// Direct triple loop over `G_ij = Σ_p F_ip F_jp / (h·w·c)`.
pub fn gram_oracle(f: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (c, h, w) = f.dims3().unwrap();
    let mut g = vec![vec![0.0; c]; c];
    for i in 0..c {
        for j in 0..c {
            let s: f64 = (0..h * w).map(|p| f.channel(i)[p] * f.channel(j)[p]).sum();
            g[i][j] = s / (h * w * c) as f64;
        }
    }
    g
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

/// Per-class IoU by set counting over pixel indices.
pub fn miou_oracle(preds: &[u8], labels: &[u8], classes: &[u8]) -> (Vec<Option<f64>>, Option<f64>) {
    let per: Vec<Option<f64>> = classes
        .iter()
        .map(|&k| {
            let valid = |i: usize| labels[i] != IGNORE_LABEL;
            let inter = (0..preds.len()).filter(|&i| valid(i) && preds[i] == k && labels[i] == k).count();
            let union = (0..preds.len()).filter(|&i| valid(i) && (preds[i] == k || labels[i] == k)).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (per, mean)
}
