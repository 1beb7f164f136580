//! Country-month fatality counts to conflict-state labels.
//!
//! States: 1 peacetime, 2 escalation, 3 war, 4 deescalation. The label at
//! month `t` depends on whether fatalities were recorded at `t - 1` and `t`:
//!
//! | previous | current | state |
//! |----------|---------|-------|
//! | 0        | 0       | 1     |
//! | 0        | > 0     | 2     |
//! | > 0      | > 0     | 3     |
//! | > 0      | 0       | 4     |
//!
//! The first month is 1 without fatalities and 3 with them.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::markov::{
    estimate_transition_matrix, InitialDistribution, State, StateSequence, StateSpace,
    TransitionMatrix,
};

pub const NUM_CONFLICT_STATES: usize = 4;
pub const PEACE: State = 0;
pub const ESCALATION: State = 1;
pub const WAR: State = 2;
pub const DEESCALATION: State = 3;

/// Allowed transitions between conflict states.
pub const ADJACENCY: [[u8; 4]; 4] = [[1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1], [1, 1, 0, 0]];

pub fn conflict_space() -> StateSpace {
    StateSpace::new(NUM_CONFLICT_STATES).expect("4 states")
}

/// Calendar month.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u8,
}

impl YearMonth {
    pub fn new(year: i32, month: u8) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::invalid(format!("month {month} outside 1..=12")));
        }
        Ok(Self { year, month })
    }

    pub fn next(self) -> Self {
        if self.month == 12 {
            Self {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Self {
                year: self.year,
                month: self.month + 1,
            }
        }
    }

    /// Months elapsed from `self` to `later` (negative if earlier).
    pub fn months_until(self, later: YearMonth) -> i64 {
        (later.year as i64 - self.year as i64) * 12 + later.month as i64 - self.month as i64
    }

    pub fn plus(self, months: usize) -> Self {
        let idx = self.year as i64 * 12 + (self.month as i64 - 1) + months as i64;
        Self {
            year: idx.div_euclid(12) as i32,
            month: (idx.rem_euclid(12) + 1) as u8,
        }
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{:02}", self.year, self.month)
    }
}

impl std::str::FromStr for YearMonth {
    type Err = Error;

    /// `YYYY-MM`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("expected YYYY-MM, got {s:?}"));
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        YearMonth::new(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)
    }
}

/// Contiguous monthly fatality counts for one country.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountrySeries {
    pub country_id: String,
    pub start: YearMonth,
    pub fatalities: Vec<u64>,
}

/// Contiguous monthly conflict states for one country.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSeries {
    pub country_id: String,
    pub start: YearMonth,
    pub states: StateSequence,
}

impl LabeledSeries {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn end(&self) -> YearMonth {
        self.start.plus(self.states.len() - 1)
    }

    pub fn month(&self, t: usize) -> YearMonth {
        self.start.plus(t)
    }
}

pub fn respects_adjacency(states: &[State]) -> bool {
    states
        .windows(2)
        .all(|w| ADJACENCY[w[0] as usize][w[1] as usize] == 1)
}

pub fn label_states(series: &CountrySeries) -> Result<LabeledSeries> {
    if series.fatalities.is_empty() {
        return Err(Error::invalid(format!(
            "country {} has no observations",
            series.country_id
        )));
    }
    let y = &series.fatalities;
    let mut states = Vec::with_capacity(y.len());
    states.push(if y[0] == 0 { PEACE } else { WAR });
    for w in y.windows(2) {
        states.push(match (w[0] > 0, w[1] > 0) {
            (false, false) => PEACE,
            (false, true) => ESCALATION,
            (true, true) => WAR,
            (true, false) => DEESCALATION,
        });
    }
    debug_assert!(respects_adjacency(&states));
    Ok(LabeledSeries {
        country_id: series.country_id.clone(),
        start: series.start,
        states: StateSequence::new(states, conflict_space())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CleaningConfig {
    pub min_nonpeace: usize,
    pub max_peace_proportion: f64,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            min_nonpeace: 5,
            max_peace_proportion: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExclusionRule {
    MinNonpeace,
    PeaceProportion,
    SingleState,
}

impl ExclusionRule {
    pub fn name(self) -> &'static str {
        match self {
            ExclusionRule::MinNonpeace => "min_nonpeace",
            ExclusionRule::PeaceProportion => "peace_proportion",
            ExclusionRule::SingleState => "single_state",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CleaningOutcome {
    pub retained: Vec<LabeledSeries>,
    /// (country, first rule failed), in input order.
    pub excluded: Vec<(String, ExclusionRule)>,
}

/// First cleaning rule the series fails, if any.
pub fn exclusion_rule(series: &LabeledSeries, cfg: &CleaningConfig) -> Option<ExclusionRule> {
    let states = series.states.states();
    let peace = states.iter().filter(|&&s| s == PEACE).count();
    let nonpeace = states.len() - peace;
    if nonpeace < cfg.min_nonpeace {
        Some(ExclusionRule::MinNonpeace)
    } else if peace as f64 / states.len() as f64 > cfg.max_peace_proportion {
        Some(ExclusionRule::PeaceProportion)
    } else if states.iter().all(|&s| s == states[0]) {
        Some(ExclusionRule::SingleState)
    } else {
        None
    }
}

pub fn clean_corpus(series: Vec<LabeledSeries>, cfg: &CleaningConfig) -> CleaningOutcome {
    let mut out = CleaningOutcome::default();
    for s in series {
        match exclusion_rule(&s, cfg) {
            None => out.retained.push(s),
            Some(rule) => out.excluded.push((s.country_id, rule)),
        }
    }
    out
}

/// Entrywise mean of the per-country estimates, each row averaged only over
/// the countries that visited it, then renormalized. The initial
/// distribution is uniform.
pub fn derive_population_matrix(
    retained: &[LabeledSeries],
) -> Result<(TransitionMatrix, InitialDistribution)> {
    if retained.is_empty() {
        return Err(Error::invalid("no retained countries to average"));
    }
    let space = conflict_space();
    let m = space.size();
    let mut sums = vec![vec![0.0; m]; m];
    let mut contributors = vec![0usize; m];
    for s in retained {
        if s.states.len() < 2 {
            continue;
        }
        let p = estimate_transition_matrix(&s.states, space)?;
        for i in 0..m {
            if p.is_unvisited(i) {
                continue;
            }
            contributors[i] += 1;
            for (acc, v) in sums[i].iter_mut().zip(p.row(i)) {
                *acc += v;
            }
        }
    }
    for (i, row) in sums.iter_mut().enumerate() {
        if contributors[i] == 0 {
            return Err(Error::UnvisitedRow { state: i + 1 });
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    Ok((TransitionMatrix::from_rows(&sums)?, InitialDistribution::uniform(m)))
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    col: usize,
    file: &str,
    what: &str,
) -> Result<T> {
    let line = record.position().map_or(0, |p| p.line());
    let raw = record.get(col).ok_or_else(|| Error::Parse {
        file: file.to_string(),
        line,
        column: col + 1,
        message: format!("missing {what}"),
    })?;
    raw.trim().parse().map_err(|_| Error::Parse {
        file: file.to_string(),
        line,
        column: col + 1,
        message: format!("invalid {what} {raw:?}"),
    })
}

fn check_header(reader: &mut csv::Reader<impl Read>, expected: &[&str], file: &str) -> Result<()> {
    let header = reader.headers().map_err(|e| Error::Csv {
        path: file.to_string(),
        source: e,
    })?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            file: file.to_string(),
            line: 1,
            column: 1,
            message: format!("expected header {:?}, got {:?}", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

/// Reads rows `(country, month, value)` and groups them into contiguous
/// per-country runs, sorted by country id.
fn read_monthly<T: Copy>(
    input: impl Read,
    file: &str,
    header: &[&str],
    what: &str,
    parse: impl Fn(&csv::StringRecord) -> Result<T>,
) -> Result<Vec<(String, YearMonth, Vec<T>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    check_header(&mut reader, header, file)?;
    let mut rows: BTreeMap<String, Vec<(YearMonth, T, u64)>> = BTreeMap::new();
    let mut n = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            path: file.to_string(),
            source: e,
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::Parse {
                file: file.to_string(),
                line,
                column: record.len().min(header.len()) + 1,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let country = record[0].trim().to_string();
        if country.is_empty() {
            return Err(Error::Parse {
                file: file.to_string(),
                line,
                column: 1,
                message: "empty country_id".into(),
            });
        }
        let year: i32 = parse_field(&record, 1, file, "year")?;
        let month: u8 = parse_field(&record, 2, file, "month")?;
        let ym = YearMonth::new(year, month).map_err(|_| Error::Parse {
            file: file.to_string(),
            line,
            column: 3,
            message: format!("month {month} outside 1..=12"),
        })?;
        let value = parse(&record)?;
        rows.entry(country).or_default().push((ym, value, line));
        n += 1;
    }
    if n == 0 {
        return Err(Error::Parse {
            file: file.to_string(),
            line: 1,
            column: 1,
            message: format!("no rows of {what}"),
        });
    }
    let mut out = Vec::with_capacity(rows.len());
    for (country, mut months) in rows {
        months.sort_by_key(|r| r.0);
        for w in months.windows(2) {
            let (prev, next) = (w[0].0, w[1].0);
            if prev == next {
                return Err(Error::Parse {
                    file: file.to_string(),
                    line: w[1].2,
                    column: 2,
                    message: format!("country {country}: duplicate month {next}"),
                });
            }
            if prev.next() != next {
                return Err(Error::Parse {
                    file: file.to_string(),
                    line: w[1].2,
                    column: 2,
                    message: format!(
                        "country {country}: months are not contiguous ({prev} is followed by {next})"
                    ),
                });
            }
        }
        let start = months[0].0;
        out.push((country, start, months.into_iter().map(|r| r.1).collect()));
    }
    Ok(out)
}

pub const FATALITY_HEADER: [&str; 4] = ["country_id", "year", "month", "fatalities"];
pub const STATE_HEADER: [&str; 4] = ["country_id", "year", "month", "state"];
pub const EXCLUSION_HEADER: [&str; 2] = ["country_id", "rule_failed"];

/// Parses the fatality CSV; `file` names the source in error messages.
pub fn read_fatalities(input: impl Read, file: &str) -> Result<Vec<CountrySeries>> {
    let runs = read_monthly(input, file, &FATALITY_HEADER, "fatality counts", |r| {
        parse_field::<u64>(r, 3, file, "fatality count")
    })?;
    Ok(runs
        .into_iter()
        .map(|(country_id, start, fatalities)| CountrySeries {
            country_id,
            start,
            fatalities,
        })
        .collect())
}

pub fn read_states(input: impl Read, file: &str) -> Result<Vec<LabeledSeries>> {
    let runs = read_monthly(input, file, &STATE_HEADER, "states", |r| {
        let label: usize = parse_field(r, 3, file, "state")?;
        if !(1..=NUM_CONFLICT_STATES).contains(&label) {
            return Err(Error::Parse {
                file: file.to_string(),
                line: r.position().map_or(0, |p| p.line()),
                column: 4,
                message: format!("state {label} outside 1..=4"),
            });
        }
        Ok((label - 1) as State)
    })?;
    runs.into_iter()
        .map(|(country_id, start, states)| {
            Ok(LabeledSeries {
                country_id,
                start,
                states: StateSequence::new(states, conflict_space())?,
            })
        })
        .collect()
}

fn csv_err(path: &str) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Csv {
        path: path.to_string(),
        source: e,
    }
}

pub fn write_states(out: impl Write, series: &[LabeledSeries], path: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(STATE_HEADER).map_err(csv_err(path))?;
    for s in series {
        for (t, label) in s.states.labels().into_iter().enumerate() {
            let ym = s.month(t);
            w.write_record([
                s.country_id.clone(),
                ym.year.to_string(),
                ym.month.to_string(),
                label.to_string(),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_string(),
        source: e,
    })
}

pub fn write_exclusions(
    out: impl Write,
    excluded: &[(String, ExclusionRule)],
    path: &str,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EXCLUSION_HEADER).map_err(csv_err(path))?;
    for (country, rule) in excluded {
        w.write_record([country.as_str(), rule.name()])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.to_string(),
        source: e,
    })
}

pub fn read_states_file(path: &Path) -> Result<Vec<LabeledSeries>> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: name.clone(),
        source: e,
    })?;
    read_states(std::io::BufReader::new(file), &name)
}

pub fn read_fatalities_file(path: &Path) -> Result<Vec<CountrySeries>> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::Io {
        path: name.clone(),
        source: e,
    })?;
    read_fatalities(std::io::BufReader::new(file), &name)
}
