use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{discriminative_score, predictive_score, trtr_baseline, tsne_embed, Embedding, MetricConfig};
use crate::dataio::WindowSet;
use crate::error::{Error, Result};

/// Mean and population standard deviation over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub mean: f64,
    pub std: f64,
    pub runs: Vec<f64>,
}

impl ScoreSummary {
    pub fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let var = runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            runs,
        }
    }

    fn cell(&self) -> String {
        format!("{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub discriminative: ScoreSummary,
    pub predictive: ScoreSummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embedding: Option<Embedding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    /// Predictive score of a model trained and tested on real data.
    pub trtr: Option<ScoreSummary>,
    pub config: MetricConfig,
}

impl MetricsReport {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Aligned plain-text table, one row per model.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 3]> = vec![[
            "model".into(),
            "discriminative".into(),
            "predictive".into(),
        ]];
        for r in &self.rows {
            rows.push([r.name.clone(), r.discriminative.cell(), r.predictive.cell()]);
        }
        if let Some(t) = &self.trtr {
            rows.push(["(real, TRTR)".into(), "-".into(), t.cell()]);
        }
        let widths: Vec<usize> = (0..3)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                let _ = writeln!(out, "{}", rule.join("  "));
            }
        }
        out
    }

    /// Writes `report.json`, `report.txt` and any embeddings into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))?;
        for r in &self.rows {
            if let Some(e) = &r.embedding {
                e.write(dir, &format!("tsne_{}", r.name))?;
            }
        }
        Ok(())
    }
}

/// Scores each named synthetic set against `real`, in the given order.
pub fn run_report(
    real: &WindowSet,
    synth_by_model: &[(String, WindowSet)],
    cfg: &MetricConfig,
    with_tsne: bool,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(synth_by_model.len());
    for (name, synth) in synth_by_model {
        let ctx = |e: Error| match e {
            Error::Shape(m) => Error::Shape(format!("{name}: {m}")),
            Error::Metric(m) => Error::Metric(format!("{name}: {m}")),
            other => other,
        };
        log::info!("scoring `{name}` ({} windows)", synth.len());
        let discriminative = discriminative_score(real, synth, cfg).map_err(ctx)?;
        let predictive = predictive_score(real, synth, cfg).map_err(ctx)?;
        let embedding = if with_tsne {
            Some(tsne_embed(real, synth, &cfg.tsne, cfg.seed).map_err(ctx)?)
        } else {
            None
        };
        rows.push(ReportRow {
            name: name.clone(),
            discriminative,
            predictive,
            embedding,
        });
    }
    let trtr = if real.l_ser() >= 2 && !real.is_empty() {
        Some(trtr_baseline(real, cfg)?)
    } else {
        None
    };
    Ok(MetricsReport {
        rows,
        trtr,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn summary_statistics() {
        let s = ScoreSummary::from_runs(vec![1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(ScoreSummary::from_runs(vec![0.25]).std, 0.0);
    }

    fn toy(seed: f64) -> WindowSet {
        WindowSet::new(
            Array3::from_shape_fn((20, 6, 1), |(i, t, _)| 0.5 + 0.4 * ((i + t) as f64 * seed).sin()),
            1,
        )
    }

    fn cfg() -> MetricConfig {
        MetricConfig {
            repetitions: 1,
            epochs: 1,
            ..Default::default()
        }
    }

    #[test]
    fn single_model_single_row() {
        let rep = run_report(&toy(0.3), &[("none".into(), toy(0.5))], &cfg(), false).unwrap();
        assert_eq!(rep.rows.len(), 1);
        let table = rep.to_table();
        assert_eq!(table.lines().count(), 4);
        assert!(table.lines().nth(2).unwrap().starts_with("none "));
        assert_eq!(MetricsReport::from_json(&rep.to_json()).unwrap(), rep);
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let sets = vec![("a".to_string(), toy(0.5)), ("b".to_string(), toy(0.5))];
        let rep = run_report(&toy(0.3), &sets, &cfg(), false).unwrap();
        assert_eq!(rep.rows[0].discriminative, rep.rows[1].discriminative);
        assert_eq!(rep.rows[0].predictive, rep.rows[1].predictive);
    }

    #[test]
    fn shape_errors_name_the_model() {
        let bad = WindowSet::new(Array3::zeros((20, 5, 1)), 1);
        let err = run_report(&toy(0.3), &[("no_ci".into(), bad)], &cfg(), false).unwrap_err();
        assert!(err.to_string().contains("no_ci"));
    }
}
