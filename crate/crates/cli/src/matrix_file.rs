//! Plain-text transition matrices: one comma- or whitespace-separated row
//! per line, `#` starts a comment.

use std::path::Path;

use markov_conformal::markov::STOCHASTIC_TOL;
use markov_conformal::{Error, Result, TransitionMatrix};

pub fn read_matrix(path: &Path) -> Result<TransitionMatrix> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: name.clone(),
        source: e,
    })?;
    parse_matrix(&text, &name)
}

pub fn parse_matrix(text: &str, file: &str) -> Result<TransitionMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, field) in line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .enumerate()
        {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                file: file.to_string(),
                line: ln as u64 + 1,
                column: col + 1,
                message: format!("{field:?} is not a number"),
            })?;
            row.push(v);
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidInput(format!(
                "{file}:{}: row {} sums to {sum}, not 1",
                ln + 1,
                rows.len() + 1
            )));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("{file}: no matrix rows")));
    }
    TransitionMatrix::from_rows(&rows)
        .map_err(|e| Error::InvalidInput(format!("{file}: {}", strip_prefix(&e))))
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::InvalidInput(m) => m.clone(),
        other => other.to_string(),
    }
}

pub fn parse_distribution(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|f| {
            f.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidInput(format!("{f:?} is not a probability")))
        })
        .collect()
}
