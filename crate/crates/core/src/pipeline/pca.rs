use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

const POWER_ITERS: usize = 10_000;
const POWER_TOL: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
    /// `[N][k]` coordinates of the centred points.
    pub points: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Top-`k` principal components by power iteration with deflation.
pub fn pca_export(rows: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = rows.len();
    if n < 2 {
        bail!(Input, "PCA needs at least two points, got {n}");
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        bail!(Shape, "PCA rows must share a positive width");
    }
    if k == 0 || k > d {
        bail!(Config, "cannot extract {k} components from {d} dimensions");
    }
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut cov = vec![vec![0.0; d]; d];
    for r in &centred {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += r[i] * r[j] / n as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|i| cov[i][i]).sum();
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut ratios = Vec::with_capacity(k);
    for c in 0..k {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * ((i + c) % 7) as f64).collect();
        let orthogonalize = |v: &mut Vec<f64>, comps: &[Vec<f64>]| {
            for u in comps {
                let p = dot(v, u);
                v.iter_mut().zip(u).for_each(|(x, ui)| *x -= p * ui);
            }
        };
        orthogonalize(&mut v, &components);
        if normalize(&mut v) == 0.0 {
            v = (0..d).map(|i| if i == c { 1.0 } else { 0.0 }).collect();
            orthogonalize(&mut v, &components);
            normalize(&mut v);
        }
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERS {
            let mut w: Vec<f64> = cov.iter().map(|row| dot(row, &v)).collect();
            orthogonalize(&mut w, &components);
            let norm = normalize(&mut w);
            if norm == 0.0 {
                lambda = 0.0;
                break;
            }
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            v = w;
            lambda = norm;
            if delta < POWER_TOL {
                break;
            }
        }
        for i in 0..d {
            for j in 0..d {
                cov[i][j] -= lambda * v[i] * v[j];
            }
        }
        ratios.push(if trace > 0.0 { lambda / trace } else { 0.0 });
        components.push(v);
    }
    let points = centred.iter().map(|r| components.iter().map(|u| dot(r, u)).collect()).collect();
    Ok(Pca { mean, components, explained_ratio: ratios, points })
}

impl Pca {
    /// `x,y,label` rows of the first two coordinates.
    pub fn to_csv(&self, labels: &[String]) -> Result<String> {
        if labels.len() != self.points.len() {
            bail!(Input, "{} labels for {} points", labels.len(), self.points.len());
        }
        let mut s = String::from("x,y,label\n");
        for (p, l) in self.points.iter().zip(labels) {
            let _ = writeln!(s, "{},{},{}", p[0], p.get(1).copied().unwrap_or(0.0), l);
        }
        Ok(s)
    }

    /// Scatter plot of the first two coordinates, one colour per label.
    pub fn to_svg(&self, labels: &[String]) -> String {
        const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
        let mut names: Vec<&String> = labels.iter().collect();
        names.sort();
        names.dedup();
        let xy: Vec<(f64, f64)> = self.points.iter().map(|p| (p[0], p.get(1).copied().unwrap_or(0.0))).collect();
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(x, y) in &xy {
            (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
        }
        let sx = |x: f64| 20.0 + 360.0 * (x - x0) / (x1 - x0).max(1e-12);
        let sy = |y: f64| 380.0 - 360.0 * (y - y0) / (y1 - y0).max(1e-12);
        let mut s = String::from("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"520\" height=\"400\">\n");
        for (&(x, y), l) in xy.iter().zip(labels) {
            let c = PALETTE[names.iter().position(|n| *n == l).unwrap_or(0) % PALETTE.len()];
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{c}\"/>", sx(x), sy(y));
        }
        for (i, n) in names.iter().enumerate() {
            let c = PALETTE[i % PALETTE.len()];
            let _ = writeln!(s, "<text x=\"400\" y=\"{}\" font-size=\"11\" fill=\"{c}\">{n}</text>", 20 + 14 * i);
        }
        s.push_str("</svg>\n");
        s
    }
}
