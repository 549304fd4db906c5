use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Method, TrainConfig};
use super::trainer::{load_datasets, train_on};
use crate::data::{read_corpus, StsExample};
use crate::error::{Error, Result};

/// Seeds kept per method when summarizing, ranked by aggregate Spearman.
pub const TOP_K: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub method: Method,
    pub seed: u64,
    pub aggregate: Option<f64>,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: Method,
    /// Mean aggregate Spearman over the top-`TOP_K` completed seeds.
    pub avg: Option<f64>,
    /// Sample standard deviation over the same seeds; `None` below two.
    pub std: Option<f64>,
    pub max: Option<f64>,
    pub n_completed: usize,
    pub n_selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub selection: String,
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:?}"))
}

impl AblationTable {
    /// One row per method: `method,avg,std,max,n_completed,n_selected`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,avg,std,max,n_completed,n_selected\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{}\n",
                r.method,
                fmt_opt(r.avg),
                fmt_opt(r.std),
                fmt_opt(r.max),
                r.n_completed,
                r.n_selected
            );
        }
        s
    }

    pub fn cells_csv(&self) -> String {
        let mut s = String::from("method,seed,aggregate,final_loss,error\n");
        for c in &self.cells {
            let err = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            s += &format!(
                "{},{},{},{},{}\n",
                c.method,
                c.seed,
                fmt_opt(c.aggregate),
                fmt_opt(c.final_loss),
                err
            );
        }
        s
    }

    pub fn row(&self, method: Method) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Summarizes the completed cells of one method.
pub fn summarize(method: Method, cells: &[AblationCell]) -> AblationRow {
    let mut scores: Vec<f64> = cells
        .iter()
        .filter(|c| c.method == method)
        .filter_map(|c| c.aggregate)
        .collect();
    let n_completed = scores.len();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.truncate(TOP_K);
    let n = scores.len();
    let avg = (n > 0).then(|| scores.iter().sum::<f64>() / n as f64);
    let std = avg
        .filter(|_| n > 1)
        .map(|m| (scores.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / (n - 1) as f64).sqrt());
    AblationRow {
        method,
        avg,
        std,
        max: scores.first().copied(),
        n_completed,
        n_selected: n,
    }
}

pub fn cell_dir(root: &Path, method: Method, seed: u64) -> PathBuf {
    root.join(format!("{method}_seed{seed}"))
}

/// Trains and evaluates every (method, seed) cell. Cells run concurrently
/// and each writes its artifacts under `out_dir/<method>_seed<seed>`.
pub fn ablate_on(
    base: &TrainConfig,
    methods: &[Method],
    seeds: &[u64],
    corpus: &[String],
    datasets: &BTreeMap<String, Vec<StsExample>>,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one method and one seed".into(),
        ));
    }
    if datasets.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one STS dataset".into(),
        ));
    }
    let grid: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let cells: Vec<AblationCell> = grid
        .par_iter()
        .map(|&(method, seed)| {
            let cfg = TrainConfig {
                method,
                seed,
                ..base.clone()
            };
            let dir = out_dir.map(|d| cell_dir(d, method, seed));
            match train_on::<f64>(&cfg, corpus, datasets, dir.as_deref()) {
                Ok(out) => {
                    let aggregate = out.record.final_eval().and_then(|r| r.aggregate);
                    info!("{method} seed {seed}: aggregate {aggregate:?}");
                    AblationCell {
                        method,
                        seed,
                        aggregate,
                        final_loss: out.record.final_loss(),
                        error: None,
                    }
                }
                Err(e) => {
                    warn!("{method} seed {seed} failed: {e}");
                    AblationCell {
                        method,
                        seed,
                        aggregate: None,
                        final_loss: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let rows = methods.iter().map(|&m| summarize(m, &cells)).collect();
    let table = AblationTable {
        selection: format!("top {TOP_K} seeds per method by aggregate spearman"),
        rows,
        cells,
    };
    if let Some(dir) = out_dir {
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write("ablation.csv", table.to_csv())?;
        write("cells.csv", table.cells_csv())?;
        write("ablation.json", serde_json::to_string_pretty(&table)?)?;
    }
    Ok(table)
}

/// Reads the inputs named in `base` and runs [`ablate_on`] into
/// `base.output_dir`.
pub fn ablate(base: &TrainConfig, methods: &[Method], seeds: &[u64]) -> Result<AblationTable> {
    base.validate()?;
    base.validate_paths()?;
    let corpus = read_corpus(&base.corpus)?;
    let datasets = load_datasets(&base.sts)?;
    fs::create_dir_all(&base.output_dir).map_err(|e| Error::io(&base.output_dir, e))?;
    ablate_on(
        base,
        methods,
        seeds,
        &corpus,
        &datasets,
        Some(&base.output_dir),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(method: Method, seed: u64, aggregate: Option<f64>) -> AblationCell {
        AblationCell {
            method,
            seed,
            aggregate,
            final_loss: None,
            error: aggregate.is_none().then(|| "boom".into()),
        }
    }

    #[test]
    fn single_cell_avg_equals_max() {
        let row = summarize(Method::Fixed, &[cell(Method::Fixed, 0, Some(0.4))]);
        assert_eq!(row.avg, Some(0.4));
        assert_eq!(row.max, Some(0.4));
        assert_eq!(row.std, None);
    }

    #[test]
    fn top_three_of_seven() {
        let scores = [0.1, 0.7, 0.3, 0.5, 0.2, 0.6, 0.4];
        let cells: Vec<_> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| cell(Method::Sampled, i as u64, Some(s)))
            .collect();
        let row = summarize(Method::Sampled, &cells);
        assert!((row.avg.unwrap() - 0.6).abs() < 1e-12);
        assert!((row.std.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(row.max, Some(0.7));
        assert_eq!((row.n_completed, row.n_selected), (7, 3));
        let all = scores.iter().sum::<f64>() / 7.0;
        assert!(row.avg.unwrap() >= all);
    }

    #[test]
    fn failed_cells_are_excluded() {
        let cells = vec![
            cell(Method::Fixed, 0, None),
            cell(Method::Fixed, 1, Some(0.2)),
        ];
        let row = summarize(Method::Fixed, &cells);
        assert_eq!((row.n_completed, row.avg), (1, Some(0.2)));
        let table = AblationTable {
            selection: String::new(),
            rows: vec![row, summarize(Method::Sampled, &cells)],
            cells,
        };
        let csv = table.to_csv();
        assert_eq!(csv.lines().nth(2).unwrap(), "sampled,,,,0,0");
        assert!(table.cells_csv().contains("fixed,0,,,boom"));
    }
}
