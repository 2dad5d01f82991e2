//! Exact t-SNE with per-point perplexity calibration.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::WindowSet;
use crate::error::{Error, Result};

/// Floor applied to affinities before logs and gradients.
const P_FLOOR: f64 = 1e-12;
const JITTER: f64 = 1e-8;
const BISECTION_STEPS: usize = 100;
const ENTROPY_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    /// Maximum windows taken from each set.
    pub sample_cap: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 500,
            learning_rate: 200.0,
            early_exaggeration: 4.0,
            exaggeration_iterations: 100,
            sample_cap: 1000,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.perplexity > 0.0) {
            return Err(Error::Config("perplexity must be positive".into()));
        }
        if (self.sample_cap as f64) < 4.0 * self.perplexity {
            return Err(Error::Config(format!(
                "t-SNE sample cap {} is below 4 × perplexity {}",
                self.sample_cap, self.perplexity
            )));
        }
        if !(self.learning_rate > 0.0) || self.early_exaggeration < 1.0 {
            return Err(Error::Config("t-SNE learning rate / exaggeration".into()));
        }
        Ok(())
    }
}

/// Optimized 2-D coordinates plus the objective before and after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneResult {
    pub coords: Vec<[f64; 2]>,
    pub kl_initial: f64,
    pub kl_final: f64,
}

/// t-SNE of a real and a synthetic window set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub coords: Vec<[f64; 2]>,
    /// `true` for real windows.
    pub is_real: Vec<bool>,
    pub kl_initial: f64,
    pub kl_final: f64,
    pub silhouette: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Symmetrized joint affinities, row-major `n × n`, zero diagonal.
pub fn joint_probabilities(x: &[Vec<f64>], perplexity: f64) -> Result<Vec<f64>> {
    let n = x.len();
    if (n as f64) <= 3.0 * perplexity {
        return Err(Error::Metric(format!(
            "t-SNE needs more than 3 × perplexity points, got {n} for perplexity {perplexity}"
        )));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(&x[i], &x[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let d = &dist[i * n..(i + 1) * n];
        // Shift by the nearest neighbour so exp() cannot underflow to all zeros.
        let d_min = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        for _ in 0..BISECTION_STEPS {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d[j] - d_min) * beta).exp() };
                sum += row[j];
                weighted += (d[j] - d_min) * row[j];
            }
            let entropy = sum.ln() + beta * weighted / sum;
            let gap = entropy - target;
            if gap.abs() < ENTROPY_TOL {
                break;
            }
            if gap > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            cond[i * n + j] = row[j] / sum;
        }
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(p)
}

/// Student-t kernel values and their sum.
fn kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[i][0] - y[j][0];
            let dy = y[i][1] - y[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

/// `KL(P ‖ Q)` for the embedding `y`.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let (num, sum) = kernel(y);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p[i * n + j].max(P_FLOOR);
                let qij = (num[i * n + j] / sum).max(P_FLOOR);
                kl += pij * (pij / qij).ln();
            }
        }
    }
    kl
}

/// Top-two principal-component projection, scaled to a tiny spread.
fn pca_init(x: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let n = x.len();
    let d = x[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = x
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let mut components: Vec<Vec<f64>> = Vec::new();
    for _ in 0..2 {
        let mut v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        for _ in 0..200 {
            // w = Xᵀ X v, then remove earlier components
            let proj: Vec<f64> = centered
                .iter()
                .map(|r| r.iter().zip(&v).map(|(a, b)| a * b).sum())
                .collect();
            let mut w = vec![0.0; d];
            for (r, p) in centered.iter().zip(&proj) {
                for c in 0..d {
                    w[c] += r[c] * p;
                }
            }
            for comp in &components {
                let dot: f64 = w.iter().zip(comp).map(|(a, b)| a * b).sum();
                for c in 0..d {
                    w[c] -= dot * comp[c];
                }
            }
            let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            v = w.into_iter().map(|a| a / norm).collect();
        }
        components.push(v);
    }
    let mut y: Vec<[f64; 2]> = centered
        .iter()
        .map(|r| {
            let mut out = [0.0; 2];
            for (k, comp) in components.iter().enumerate() {
                out[k] = r.iter().zip(comp).map(|(a, b)| a * b).sum();
            }
            out
        })
        .collect();
    let std0 = (y.iter().map(|p| p[0] * p[0]).sum::<f64>() / n as f64).sqrt();
    let scale = if std0 > 0.0 { 1e-4 / std0 } else { 0.0 };
    for p in y.iter_mut() {
        for (k, v) in p.iter_mut().enumerate() {
            *v *= scale;
            // Degenerate directions fall back to seeded noise.
            if scale == 0.0 || (k == 1 && *v == 0.0) {
                let z: f64 = StandardNormal.sample(rng);
                *v = 1e-4 * z;
            }
        }
    }
    y
}

/// Embeds `x` into two dimensions.
///
/// Errors if the optimized objective is not below its starting value.
pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig, seed: u64) -> Result<TsneResult> {
    cfg.validate()?;
    let n = x.len();
    if n == 0 || x.iter().any(|r| r.len() != x[0].len()) {
        return Err(Error::Shape("t-SNE input rows must be nonempty and equal length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jittered: Vec<Vec<f64>> = x
        .iter()
        .map(|r| {
            r.iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + JITTER * z
                })
                .collect()
        })
        .collect();
    let p = joint_probabilities(&jittered, cfg.perplexity)?;
    let mut y = pca_init(&jittered, &mut rng);
    let kl_initial = kl_divergence(&p, &y);

    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0f64; 2]; n];
    for it in 0..cfg.iterations {
        let exaggerating = it < cfg.exaggeration_iterations;
        let exag = if exaggerating { cfg.early_exaggeration } else { 1.0 };
        let momentum = if exaggerating { 0.5 } else { 0.8 };
        let (num, sum) = kernel(&y);
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coef = (exag * p[i * n + j].max(P_FLOOR) - w / sum) * w;
                g[0] += coef * (y[i][0] - y[j][0]);
                g[1] += coef * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same_sign {
                    (gains[i][k] * 0.8).max(0.01)
                } else {
                    gains[i][k] + 0.2
                };
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        let mean = [
            y.iter().map(|p| p[0]).sum::<f64>() / n as f64,
            y.iter().map(|p| p[1]).sum::<f64>() / n as f64,
        ];
        for p in y.iter_mut() {
            p[0] -= mean[0];
            p[1] -= mean[1];
        }
    }
    if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::NonFinite("t-SNE coordinates".into()));
    }
    let kl_final = kl_divergence(&p, &y);
    if cfg.iterations > 0 && kl_final >= kl_initial {
        return Err(Error::NoDescent(format!(
            "t-SNE KL {kl_final} after optimization, {kl_initial} before"
        )));
    }
    Ok(TsneResult {
        coords: y,
        kl_initial,
        kl_final,
    })
}

/// Mean silhouette coefficient of a two-dimensional labeling.
pub fn silhouette(coords: &[[f64; 2]], labels: &[usize]) -> f64 {
    let n = coords.len();
    let n_labels = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; n_labels];
        let mut counts = vec![0usize; n_labels];
        for j in 0..n {
            if i != j {
                let d = ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)).sqrt();
                sums[labels[j]] += d;
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..n_labels)
            .filter(|&l| l != own && counts[l] > 0)
            .map(|l| sums[l] / counts[l] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() && a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// Per-time-step mean over features: one length-`L` vector per window.
pub fn feature_means(set: &WindowSet, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter()
        .map(|&i| set.window(i).rows().into_iter().map(|r| r.mean().unwrap_or(0.0)).collect())
        .collect()
}

/// Embeds up to `sample_cap` windows from each set.
pub fn tsne_embed(real: &WindowSet, synth: &WindowSet, cfg: &TsneConfig, seed: u64) -> Result<Embedding> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Metric("t-SNE needs nonempty real and synthetic sets".into()));
    }
    if real.l_ser() != synth.l_ser() || real.dim() != synth.dim() {
        return Err(Error::Shape(format!(
            "real windows [{}, {}] vs synthetic [{}, {}]",
            real.l_ser(),
            real.dim(),
            synth.l_ser(),
            synth.dim()
        )));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |n: usize| -> Vec<usize> {
        let mut v = index::sample(&mut rng, n, n.min(cfg.sample_cap)).into_vec();
        v.sort_unstable();
        v
    };
    let (ri, si) = (pick(real.len()), pick(synth.len()));
    let mut x = feature_means(real, &ri);
    x.extend(feature_means(synth, &si));
    let is_real: Vec<bool> = (0..x.len()).map(|i| i < ri.len()).collect();
    let res = tsne(&x, cfg, seed)?;
    let labels: Vec<usize> = is_real.iter().map(|&r| usize::from(!r)).collect();
    Ok(Embedding {
        silhouette: silhouette(&res.coords, &labels),
        coords: res.coords,
        is_real,
        kl_initial: res.kl_initial,
        kl_final: res.kl_final,
    })
}

impl Embedding {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,label\n");
        for (c, r) in self.coords.iter().zip(&self.is_real) {
            let label = if *r { "real" } else { "synthetic" };
            let _ = writeln!(s, "{:?},{:?},{label}", c[0], c[1]);
        }
        s
    }

    /// Scatter plot as a standalone SVG document.
    pub fn to_svg(&self, title: &str) -> String {
        const SIZE: f64 = 480.0;
        const PAD: f64 = 24.0;
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for c in &self.coords {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let span = |k: usize| (hi[k] - lo[k]).max(1e-12);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
            w = SIZE + 2.0 * PAD,
            h = SIZE + 3.0 * PAD
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{PAD}" y="{}" font-family="sans-serif" font-size="14">{}</text>"#,
            PAD * 0.75,
            xml_escape(title)
        );
        for (c, r) in self.coords.iter().zip(&self.is_real) {
            let px = PAD + (c[0] - lo[0]) / span(0) * SIZE;
            let py = 2.0 * PAD + (hi[1] - c[1]) / span(1) * SIZE;
            let color = if *r { "#d62728" } else { "#1f77b4" };
            let _ = writeln!(
                s,
                r#"<circle cx="{px:.2}" cy="{py:.2}" r="2.5" fill="{color}" fill-opacity="0.6"/>"#
            );
        }
        let legend_y = SIZE + 2.6 * PAD;
        let _ = writeln!(
            s,
            r##"<text x="{PAD}" y="{legend_y}" font-family="sans-serif" font-size="12"><tspan fill="#d62728">● real</tspan>  <tspan fill="#1f77b4">● synthetic</tspan></text>"##
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let svg = dir.join(format!("{stem}.svg"));
        std::fs::write(&svg, self.to_svg(stem)).map_err(|e| Error::io(&svg, e))
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let center = if c == 0 { 0.0 } else { 10.0 };
            x.push(
                (0..5)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        center + z
                    })
                    .collect(),
            );
            labels.push(c);
        }
        (x, labels)
    }

    #[test]
    fn affinities_are_a_symmetric_distribution() {
        let (x, _) = clusters(40, 1);
        let p = joint_probabilities(&x, 5.0).unwrap();
        let n = 40;
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mean_row = (0..n).map(|i| p[i * n..(i + 1) * n].iter().sum::<f64>()).sum::<f64>() / n as f64;
        assert!((mean_row - 1.0 / n as f64).abs() < 1e-12);
        for i in 0..n {
            assert_eq!(p[i * n + i], 0.0);
            for j in 0..n {
                assert!(p[i * n + j] >= 0.0);
                assert_eq!(p[i * n + j], p[j * n + i]);
            }
        }
    }

    #[test]
    fn perplexity_calibration_hits_target() {
        let (x, _) = clusters(60, 2);
        let flat: Vec<Vec<f64>> = (0..31).map(|i| vec![if i == 0 { 0.0 } else { 1.0 }]).collect();
        let p = joint_probabilities(&flat, 10.0).unwrap();
        // Point 0 is equidistant from the rest, so its conditional row is
        // uniform and p_0j = (1/30 + p_j|0) / 62 is the same for every j.
        let row: Vec<f64> = (1..31).map(|j| p[j]).collect();
        assert!(row.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-15));
        assert!(joint_probabilities(&x, 25.0).is_err());
    }

    #[test]
    fn separates_planted_clusters() {
        let (x, labels) = clusters(120, 3);
        let cfg = TsneConfig {
            perplexity: 10.0,
            iterations: 300,
            sample_cap: 1000,
            ..Default::default()
        };
        let res = tsne(&x, &cfg, 7).unwrap();
        assert!(res.kl_final < res.kl_initial);
        assert!(silhouette(&res.coords, &labels) > 0.5);
        assert_eq!(res, tsne(&x, &cfg, 7).unwrap());
    }

    #[test]
    fn identical_points_are_jittered() {
        let x = vec![vec![0.5; 4]; 20];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let jittered: Vec<Vec<f64>> = x
            .iter()
            .map(|r| {
                r.iter()
                    .map(|v| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        v + JITTER * z
                    })
                    .collect()
            })
            .collect();
        let p = joint_probabilities(&jittered, 3.0).unwrap();
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let cfg = TsneConfig {
            perplexity: 3.0,
            iterations: 50,
            exaggeration_iterations: 20,
            sample_cap: 100,
            ..Default::default()
        };
        match tsne(&x, &cfg, 1) {
            Ok(r) => assert!(r.coords.iter().all(|c| c[0].is_finite() && c[1].is_finite())),
            Err(e) => assert!(matches!(e, Error::NoDescent(_)), "{e}"),
        }
    }

    #[test]
    fn silhouette_oracle() {
        let coords = [[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        // a = 1, b = mean(10, √101) for every point
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        let want = (b - 1.0) / b;
        assert!((silhouette(&coords, &[0, 0, 1, 1]) - want).abs() < 1e-12);
    }

    #[test]
    fn config_rules() {
        let cfg = TsneConfig {
            sample_cap: 100,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert!(TsneConfig::default().validate().is_ok());
    }

    #[test]
    fn svg_and_csv_render() {
        let e = Embedding {
            coords: vec![[0.0, 1.0], [2.0, -1.0]],
            is_real: vec![true, false],
            kl_initial: 1.0,
            kl_final: 0.5,
            silhouette: 0.0,
        };
        assert_eq!(e.to_csv(), "x,y,label\n0.0,1.0,real\n2.0,-1.0,synthetic\n");
        let svg = e.to_svg("a<b");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("a&lt;b"));
    }
}
