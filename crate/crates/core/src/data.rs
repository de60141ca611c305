//! Observation series and the yield ingestion pipeline.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dynamics;

/// Observation series with an optional exogenous driver.
///
/// `x[t]` is known at time `t` and drives the transition parameters of
/// `t + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub x: Option<Vec<f64>>,
    pub label: String,
}

impl Dataset {
    pub fn new(y: Vec<f64>, x: Option<Vec<f64>>, label: impl Into<String>) -> Result<Self> {
        let ds = Dataset {
            y,
            x,
            label: label.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("observation {t} of '{}' is not finite", self.label)));
        }
        if let Some(x) = &self.x {
            if x.len() != self.y.len() {
                return Err(Error::Dimension {
                    what: "exogenous series",
                    expected: self.y.len(),
                    got: x.len(),
                });
            }
            if let Some(t) = x.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("covariate {t} of '{}' is not finite", self.label)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// The dataset a given specification consumes: the covariate is kept for
    /// exogenous dynamics and dropped otherwise.
    pub fn for_dynamics(&self, dynamics: Dynamics) -> Result<Dataset> {
        match (dynamics, &self.x) {
            (Dynamics::Exogenous, None) => Err(Error::Data(format!(
                "'{}' has no exogenous series for the exogenous specification",
                self.label
            ))),
            (Dynamics::Exogenous, Some(_)) => Ok(self.clone()),
            _ => Ok(Dataset {
                y: self.y.clone(),
                x: None,
                label: self.label.clone(),
            }),
        }
    }

    /// Reads a CSV with a `y` column and an optional `x` column.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
        let y_col = col("y").ok_or_else(|| Error::Data(format!("{} has no 'y' column", path.display())))?;
        let x_col = col("x");
        let mut y = Vec::new();
        let mut x = x_col.map(|_| Vec::new());
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let cell = |c: usize, name: &str| -> Result<f64> {
                let raw = rec.get(c).unwrap_or("").trim();
                raw.parse::<f64>().map_err(|_| {
                    Error::Data(format!("row {} column '{name}': cannot parse '{raw}'", row + 2))
                })
            };
            y.push(cell(y_col, "y")?);
            if let (Some(c), Some(xs)) = (x_col, x.as_mut()) {
                xs.push(cell(c, "x")?);
            }
        }
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Dataset::new(y, x, label)
    }
}

/// Calendar month, parsed from `YYYY-MM` (a trailing `-DD` is accepted and ignored).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl FromStr for YearMonth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("unparseable date '{s}', expected YYYY-MM"));
        let mut parts = s.trim().split('-');
        let year = parts.next().ok_or_else(bad)?.parse::<i32>().map_err(|_| bad())?;
        let month = parts.next().ok_or_else(bad)?.parse::<u32>().map_err(|_| bad())?;
        if let Some(day) = parts.next() {
            let day = day.parse::<u32>().map_err(|_| bad())?;
            if !(1..=31).contains(&day) {
                return Err(bad());
            }
        }
        if parts.next().is_some() || !(1..=12).contains(&month) {
            return Err(bad());
        }
        Ok(YearMonth { year, month })
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Yield levels for one maturity.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSeries {
    pub maturity: u32,
    pub dates: Vec<YearMonth>,
    pub levels: Vec<f64>,
}

/// Reads a yield CSV: header row, dates in the first column, one column per
/// maturity named by its length in months. Returns one level series per
/// requested maturity, restricted to the inclusive date range when given.
pub fn ingest_yields(
    path: &Path,
    maturities: &[u32],
    date_range: Option<(YearMonth, YearMonth)>,
) -> Result<Vec<LevelSeries>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let mut col_of: HashMap<u32, usize> = HashMap::new();
    for (c, h) in headers.iter().enumerate().skip(1) {
        if let Ok(m) = h.trim().trim_end_matches('m').parse::<u32>() {
            col_of.insert(m, c);
        }
    }
    let cols: Vec<usize> = maturities
        .iter()
        .map(|m| {
            col_of
                .get(m)
                .copied()
                .ok_or_else(|| Error::Data(format!("maturity column '{m}' not found in {}", path.display())))
        })
        .collect::<Result<_>>()?;

    let mut out: Vec<LevelSeries> = maturities
        .iter()
        .map(|&m| LevelSeries {
            maturity: m,
            dates: Vec::new(),
            levels: Vec::new(),
        })
        .collect();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let raw_date = rec.get(0).unwrap_or("");
        let date: YearMonth = raw_date
            .parse()
            .map_err(|_| Error::Data(format!("row {line}: unparseable date '{raw_date}'")))?;
        if let Some((lo, hi)) = date_range {
            if date < lo || date > hi {
                continue;
            }
        }
        for (series, &c) in out.iter_mut().zip(&cols) {
            let raw = rec.get(c).unwrap_or("").trim();
            let v = raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                Error::Data(format!(
                    "row {line} ({date}), maturity {}: missing or invalid value '{raw}'",
                    series.maturity
                ))
            })?;
            series.dates.push(date);
            series.levels.push(v);
        }
    }
    Ok(out)
}

/// First differences `y_t = Y_t - Y_{t-1}`, with the level `Y_t` stored as
/// the covariate of `y_t`, so the transition parameters of `t` are driven by
/// the lagged level `Y_{t-1}`.
pub fn difference(levels: &[f64], label: impl Into<String>) -> Result<Dataset> {
    if levels.len() < 2 {
        return Err(Error::Data(format!(
            "need at least two levels to difference, got {}",
            levels.len()
        )));
    }
    let y = levels.windows(2).map(|w| w[1] - w[0]).collect();
    let x = levels[1..].to_vec();
    Dataset::new(y, Some(x), label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    #[test]
    fn difference_small_cases() {
        let d = difference(&[3.0, 3.5, 3.2], "m").unwrap();
        assert_abs_diff_eq!(d.y[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(d.y[1], -0.3, epsilon = 1e-15);
        let d = difference(&[2.0; 5], "c").unwrap();
        assert!(d.y.iter().all(|v| *v == 0.0));
        assert_eq!(difference(&[1.0, 2.0], "two").unwrap().len(), 1);
        assert!(difference(&[1.0], "short").is_err());
    }

    #[test]
    fn covariate_is_the_lagged_level() {
        let levels = [1.0, 1.4, 0.9, 2.0];
        let d = difference(&levels, "m").unwrap();
        let x = d.x.as_ref().unwrap();
        // y_t = Y_t - Y_{t-1} is driven through x_{t-1} = Y_{t-1}.
        for t in 1..d.len() {
            assert_eq!(x[t - 1], levels[t]);
            assert_abs_diff_eq!(d.y[t], levels[t + 1] - levels[t], epsilon = 1e-15);
        }
    }

    #[test]
    fn cumulating_differences_recovers_levels() {
        let levels = [5.1, 5.3, 4.7, 4.9, 6.0, 5.5];
        let d = difference(&levels, "m").unwrap();
        let mut acc = levels[0];
        for (t, dy) in d.y.iter().enumerate() {
            acc += dy;
            assert_abs_diff_eq!(acc, levels[t + 1], epsilon = 1e-12);
        }
    }

    fn write_csv(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ingest_filters_dates_and_names_errors() {
        let f = write_csv("date,1,12,36\n1961-05,2.1,2.5,3.0\n1961-06,2.2,2.6,3.1\n1961-07,2.0,2.4,2.9\n");
        let lo: YearMonth = "1961-06".parse().unwrap();
        let hi: YearMonth = "1961-07".parse().unwrap();
        let s = ingest_yields(f.path(), &[12, 1], Some((lo, hi))).unwrap();
        assert_eq!(s[0].maturity, 12);
        assert_eq!(s[0].levels, vec![2.6, 2.4]);
        assert_eq!(s[1].dates[0].to_string(), "1961-06");

        let err = ingest_yields(f.path(), &[72], None).unwrap_err();
        assert!(err.to_string().contains("72"), "{err}");

        let f = write_csv("date,1\n1961-05,2.1\n1961-06,\n");
        let err = ingest_yields(f.path(), &[1], None).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");

        let f = write_csv("date,1\nJune 1961,2.1\n");
        assert!(ingest_yields(f.path(), &[1], None).is_err());
    }

    #[test]
    fn year_month_parsing() {
        assert_eq!("2024-12".parse::<YearMonth>().unwrap(), YearMonth { year: 2024, month: 12 });
        assert_eq!("1961-06-30".parse::<YearMonth>().unwrap().month, 6);
        assert!("1961-13".parse::<YearMonth>().is_err());
        assert!("1961".parse::<YearMonth>().is_err());
    }

    #[test]
    fn dataset_csv_and_dynamics_view() {
        let f = write_csv("t,y,z,x\n1,0.5,1,0.1\n2,-0.2,2,0.3\n");
        let d = Dataset::from_csv(f.path()).unwrap();
        assert_eq!(d.y, vec![0.5, -0.2]);
        assert_eq!(d.x, Some(vec![0.1, 0.3]));
        assert!(d.for_dynamics(Dynamics::Constant).unwrap().x.is_none());
        let no_x = Dataset::new(vec![1.0], None, "n").unwrap();
        assert!(no_x.for_dynamics(Dynamics::Exogenous).is_err());
        assert!(Dataset::new(vec![1.0, f64::NAN], None, "bad").is_err());
    }
}
