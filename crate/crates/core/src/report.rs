//! Cross-domain accuracy comparison tables.
//!
//! Accuracies are held as integer hundredths of a percent, so row averages
//! are exact fractions and the half-up rounding of the display never depends
//! on binary floating point.

use std::fmt::Write as _;

use thiserror::Error;

use crate::batching::Domain;
use crate::metrics::ReportRow;

/// Column order of the comparison table.
pub const COLUMNS: [Domain; 4] = [Domain::Commonsense, Domain::Justice, Domain::Virtue, Domain::Deontology];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("baseline line {line}: {message}")]
    BadBaseline { line: usize, message: String },
    #[error("report lists domain {0:?} twice")]
    DuplicateDomain(String),
    #[error("unknown domain {0:?}")]
    UnknownDomain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table {
    Test,
    Hard,
}

impl std::str::FromStr for Table {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "test" => Ok(Table::Test),
            "hard" | "test_hard" => Ok(Table::Hard),
            other => Err(format!("unknown table {other:?}")),
        }
    }
}

/// Percent with at most two decimals, as hundredths.
pub fn to_hundredths(percent: f64) -> i64 {
    (percent * 100.0).round() as i64
}

fn parse_hundredths(s: &str) -> Option<i64> {
    let s = s.trim();
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    if int.is_empty() || frac.len() > 2 || !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let int: i64 = int.parse().ok()?;
    let frac: i64 = format!("{frac:0<2}").parse().ok()?;
    int.checked_mul(100)?.checked_add(frac)
}

fn fmt_hundredths(h: i64) -> String {
    format!("{}.{:02}", h / 100, h % 100)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonRow {
    pub label: String,
    pub accuracies: [Option<i64>; 4],
    /// The average as printed by the row's source, if any.
    pub printed_average: Option<i64>,
}

/// Exact mean `sum / (100 count)` percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Average {
    pub sum: i64,
    pub count: i64,
}

impl Average {
    /// Rounded half-up to hundredths.
    pub fn rounded(&self) -> i64 {
        (2 * self.sum + self.count).div_euclid(2 * self.count)
    }

    pub fn exact(&self) -> f64 {
        self.sum as f64 / (100 * self.count) as f64
    }

    pub fn is_exact_at_hundredths(&self) -> bool {
        self.sum % self.count == 0
    }

    /// Decimal expansion of the exact mean, trimmed of trailing zeros.
    pub fn exact_text(&self) -> String {
        let scale = 100 * self.count;
        let int = self.sum / scale;
        let mut rem = self.sum % scale;
        let mut digits = String::new();
        for _ in 0..8 {
            if rem == 0 {
                break;
            }
            rem *= 10;
            digits.push(char::from(b'0' + (rem / scale) as u8));
            rem %= scale;
        }
        if digits.is_empty() {
            int.to_string()
        } else {
            format!("{int}.{digits}")
        }
    }
}

impl ComparisonRow {
    pub fn average(&self) -> Option<Average> {
        let present: Vec<i64> = self.accuracies.iter().flatten().copied().collect();
        if present.is_empty() {
            return None;
        }
        Some(Average {
            sum: present.iter().sum(),
            count: present.len() as i64,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.accuracies.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Baseline {
    pub table: Table,
    pub row: ComparisonRow,
}

const BUNDLED_BASELINES: &str = include_str!("../data/baselines.csv");

pub fn bundled_baselines() -> Vec<Baseline> {
    parse_baselines(BUNDLED_BASELINES).expect("bundled baselines are valid")
}

/// `table,model,commonsense,justice,virtue,deontology,printed_average`.
pub fn parse_baselines(text: &str) -> Result<Vec<Baseline>, ReportError> {
    let mut out = Vec::new();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let bad = |line: usize, message: String| ReportError::BadBaseline { line, message };
    match lines.next() {
        Some((_, h)) if h.trim() == "table,model,commonsense,justice,virtue,deontology,printed_average" => {}
        Some((i, _)) => return Err(bad(i + 1, "unexpected header".into())),
        None => return Err(bad(1, "empty file".into())),
    }
    for (i, line) in lines {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return Err(bad(i + 1, format!("expected 7 fields, found {}", f.len())));
        }
        let table: Table = f[0].parse().map_err(|m| bad(i + 1, m))?;
        if f[1].trim().is_empty() {
            return Err(bad(i + 1, "empty model name".into()));
        }
        let mut accuracies = [None; 4];
        for (slot, s) in accuracies.iter_mut().zip(&f[2..6]) {
            *slot = Some(parse_hundredths(s).ok_or_else(|| bad(i + 1, format!("{s:?} is not a percentage")))?);
        }
        let printed_average = if f[6].trim().is_empty() {
            None
        } else {
            Some(parse_hundredths(f[6]).ok_or_else(|| bad(i + 1, format!("{:?} is not a percentage", f[6])))?)
        };
        out.push(Baseline {
            table,
            row: ComparisonRow {
                label: f[1].trim().to_string(),
                accuracies,
                printed_average,
            },
        });
    }
    Ok(out)
}

/// One table row from the domain lines of a report CSV.
pub fn row_from_report(label: &str, rows: &[ReportRow]) -> Result<ComparisonRow, ReportError> {
    let mut accuracies = [None; 4];
    for r in rows {
        let domain: Domain = r.domain.parse().map_err(|_| ReportError::UnknownDomain(r.domain.clone()))?;
        let col = COLUMNS.iter().position(|&d| d == domain).expect("every domain has a column");
        if accuracies[col].replace(to_hundredths(r.accuracy)).is_some() {
            return Err(ReportError::DuplicateDomain(r.domain.clone()));
        }
    }
    Ok(ComparisonRow {
        label: label.to_string(),
        accuracies,
        printed_average: None,
    })
}

pub fn render_comparison(title: &str, rows: &[ComparisonRow]) -> String {
    let mut notes: Vec<String> = Vec::new();
    let headers = ["Model", "Commonsense", "Justice", "Virtue", "Deontology", "Average"];
    let mut cells: Vec<Vec<String>> = Vec::new();
    for row in rows {
        let mut line = vec![row.label.clone()];
        line.extend(row.accuracies.iter().map(|a| a.map(fmt_hundredths).unwrap_or_else(|| "-".into())));
        let avg = match row.average() {
            None => "-".to_string(),
            Some(avg) => {
                let mut text = fmt_hundredths(avg.rounded());
                let mut note = Vec::new();
                if !avg.is_exact_at_hundredths() {
                    note.push(format!("the exact mean is {}", avg.exact_text()));
                }
                if let Some(printed) = row.printed_average {
                    if printed != avg.rounded() {
                        note.push(format!("the source prints {}", fmt_hundredths(printed)));
                    }
                }
                if !row.is_complete() {
                    note.push(format!("averaged over {} of 4 domains", avg.count));
                }
                if !note.is_empty() {
                    notes.push(format!("{}: {}", row.label, note.join("; ")));
                    let _ = write!(text, " [{}]", notes.len());
                }
                text
            }
        };
        line.push(avg);
        cells.push(line);
    }
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| cells.iter().map(|r| r[c].chars().count()).chain([headers[c].len()]).max().unwrap_or(0))
        .collect();
    let mut out = format!("{title}\n");
    let fmt_line = |vals: &[String]| -> String {
        let parts: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(c, v)| if c == 0 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        format!("| {} |\n", parts.join(" | "))
    };
    out.push_str(&fmt_line(&headers.map(String::from)));
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for line in &cells {
        out.push_str(&fmt_line(line));
    }
    if !notes.is_empty() {
        out.push('\n');
        for (i, n) in notes.iter().enumerate() {
            let _ = writeln!(out, "[{}] {n}; averages are arithmetic means rounded half-up.", i + 1);
        }
    }
    out
}
