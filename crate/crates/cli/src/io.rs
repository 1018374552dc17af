//! File formats: data CSV in, summary JSON in and out, CSV tables out.

use std::fs;
use std::path::{Path, PathBuf};

use fedlmm::summary::SummaryFile;
use fedlmm::{SiteData, SiteSummary};
use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, CliError, CliResult};

/// Which columns of a data CSV form the model.
pub struct Layout<'a> {
    pub outcome: &'a str,
    pub covariates: &'a [String],
    pub intercept: bool,
    pub site_column: Option<&'a str>,
    pub default_site: &'a str,
}

impl Layout<'_> {
    /// Names of the design columns, intercept first.
    pub fn design_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.covariates.len() + 1);
        if self.intercept {
            names.push("(Intercept)".to_string());
        }
        names.extend(self.covariates.iter().cloned());
        names
    }
}

/// Parses a data CSV into per-site data, in order of first appearance.
pub fn read_sites(text: &str, source: &Path, layout: &Layout) -> CliResult<Vec<SiteData>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| CliError::csv(source, e))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| invalid(format!("{}: missing column `{name}`", source.display())))
    };
    let y_col = find(layout.outcome)?;
    let x_cols = layout.covariates.iter().map(|c| find(c)).collect::<CliResult<Vec<_>>>()?;
    let site_col = layout.site_column.map(find).transpose()?;
    if x_cols.is_empty() && !layout.intercept {
        return Err(invalid("the model needs at least one design column"));
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: Vec<(Vec<f64>, Vec<Vec<f64>>)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::csv(source, e))?;
        // Line numbers count the header as line 1.
        let line = i + 2;
        let cell = |col: usize| -> CliResult<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                invalid(format!(
                    "{}: line {line}, column `{}`: `{raw}` is not a finite number",
                    source.display(),
                    &headers[col]
                ))
            })
        };
        let y = cell(y_col)?;
        let mut x = Vec::with_capacity(x_cols.len() + 1);
        if layout.intercept {
            x.push(1.0);
        }
        for &c in &x_cols {
            x.push(cell(c)?);
        }
        let site = match site_col {
            Some(c) => record.get(c).unwrap_or("").to_string(),
            None => layout.default_site.to_string(),
        };
        if site.is_empty() {
            return Err(invalid(format!("{}: line {line}: empty site id", source.display())));
        }
        let slot = match order.iter().position(|s| *s == site) {
            Some(s) => s,
            None => {
                order.push(site);
                rows.push((Vec::new(), Vec::new()));
                order.len() - 1
            }
        };
        rows[slot].0.push(y);
        rows[slot].1.push(x);
    }
    if order.is_empty() {
        return Err(invalid(format!("{}: no data rows", source.display())));
    }
    order
        .into_iter()
        .zip(rows)
        .map(|(id, (y, x))| {
            let p = x[0].len();
            let flat: Vec<f64> = x.concat();
            let n = y.len();
            Ok(SiteData::new(id, DVector::from_vec(y), DMatrix::from_row_slice(n, p, &flat))?)
        })
        .collect()
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// A summary and the design column names stored alongside it, if any.
pub struct LoadedSummary {
    pub summary: SiteSummary,
    pub columns: Option<Vec<String>>,
}

pub fn read_summary(path: &Path) -> CliResult<LoadedSummary> {
    let text = read_text(path)?;
    let file: SummaryFile = serde_json::from_str(&text)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let columns = file.columns.clone();
    let summary = SiteSummary::try_from(file)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    Ok(LoadedSummary { summary, columns })
}

pub fn summary_json(summary: &SiteSummary, columns: Option<Vec<String>>) -> CliResult<String> {
    let mut file = SummaryFile::from(summary);
    file.columns = columns;
    Ok(serde_json::to_string_pretty(&file).map_err(fedlmm::Error::from)? + "\n")
}

pub fn to_json<T: serde::Serialize>(value: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(value).map_err(fedlmm::Error::from)? + "\n")
}

/// Collects file contents first so a command can validate everything before writing.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: PathBuf, contents: impl Into<Vec<u8>>) {
        self.files.push((path, contents.into()));
    }

    pub fn add_csv(&mut self, path: PathBuf, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(|e| CliError::csv(&path, e))?;
        for r in rows {
            w.write_record(r).map_err(|e| CliError::csv(&path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        self.add(path, bytes);
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    pub fn write(self) -> CliResult<()> {
        for (path, bytes) in self.files {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        }
        Ok(())
    }
}

/// Site ids become file names; anything outside `[A-Za-z0-9._-]` is replaced.
pub fn file_stem(site_id: &str) -> String {
    site_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}
