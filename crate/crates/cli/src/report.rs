//! Correlation reports over a metrics CSV.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use arlab_core::stats::permutation_pvalue;
use arlab_core::{CorrelationMethod, CorrelationResult};

/// A metrics table read without assuming the fixed schema, so any numeric
/// column can be correlated.
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        let headers = r.headers()?.iter().map(str::to_owned).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_owned).collect()))
            .collect::<csv::Result<Vec<Vec<String>>>>()?;
        Ok(Table { headers, rows })
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.index(name).ok_or_else(|| {
            anyhow!(
                "schema error: no column {name:?}; available columns: {}",
                self.headers.join(", ")
            )
        })?;
        self.rows
            .iter()
            .enumerate()
            .map(|(row, r)| {
                r[i].parse::<f64>()
                    .map_err(|_| anyhow!("schema error: row {} column {name:?} is not numeric: {:?}", row + 1, r[i]))
            })
            .collect()
    }

    /// `model/trained/mask_size` when those columns exist, otherwise the row
    /// number.
    pub fn label(&self, row: usize) -> String {
        let parts: Vec<&str> = ["model", "trained", "mask_size"]
            .iter()
            .filter_map(|c| self.index(c).map(|i| self.rows[row][i].as_str()))
            .collect();
        if parts.is_empty() {
            (row + 1).to_string()
        } else {
            let trained = match self.index("trained").map(|i| self.rows[row][i].as_str()) {
                Some("false") => "U",
                Some(_) => "T",
                None => "",
            };
            let model = self.index("model").map_or("", |i| self.rows[row][i].as_str());
            let size = self.index("mask_size").map_or("", |i| self.rows[row][i].as_str());
            format!("{model}{trained}@{size}")
        }
    }
}

pub struct CorrelateArgs<'a> {
    pub metrics: &'a Path,
    pub x: &'a str,
    pub y: &'a str,
    pub methods: &'a [CorrelationMethod],
    pub permutations: usize,
    pub seed: u64,
}

/// Computes every requested coefficient with its permutation p-value and,
/// when `out` is given, writes `correlations.csv` and `scatter.csv` there.
pub fn cmd_correlate(args: &CorrelateArgs<'_>, out: Option<&Path>) -> Result<Vec<CorrelationResult>> {
    let table = Table::read(args.metrics)?;
    if table.rows.len() < 3 {
        bail!("precondition: correlation needs at least 3 rows, {} has {}", args.metrics.display(), table.rows.len());
    }
    let x = table.numeric_column(args.x)?;
    let y = table.numeric_column(args.y)?;
    let results = args
        .methods
        .iter()
        .map(|&m| permutation_pvalue(&x, &y, m, args.permutations, args.seed).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("correlations.csv"))?;
        w.write_record(["x", "y", "n", "method", "coefficient", "p_value", "permutations", "exhaustive", "seed"])?;
        for r in &results {
            w.write_record([
                args.x.to_owned(),
                args.y.to_owned(),
                x.len().to_string(),
                r.method.name().to_owned(),
                r.coefficient.to_string(),
                r.p_value.to_string(),
                r.n_permutations.to_string(),
                r.exhaustive.to_string(),
                r.seed.to_string(),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("scatter.csv"))?;
        w.write_record(["label", args.x, args.y])?;
        for (i, (a, b)) in x.iter().zip(&y).enumerate() {
            w.write_record([table.label(i), a.to_string(), b.to_string()])?;
        }
        w.flush()?;
    }
    Ok(results)
}
