//! Time-stamped observations of a D-component system.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub times: Vec<f64>,
    /// `observations[i][j]`: component `j` at `times[i]`, `None` when absent.
    pub observations: Vec<Vec<Option<f64>>>,
    pub t_max: f64,
}

/// One stacked observation: which component, at which time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackedEntry {
    pub component: usize,
    pub row: usize,
    pub t: f64,
}

impl Dataset {
    pub fn new(times: Vec<f64>, observations: Vec<Vec<Option<f64>>>, t_max: f64) -> Result<Self> {
        let ds = Self { times, observations, t_max };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.observations.len() {
            return Err(Error::DimensionMismatch {
                expected: self.times.len(),
                got: self.observations.len(),
            });
        }
        if self.times.is_empty() {
            return Err(Error::DegenerateInput("dataset has no rows".into()));
        }
        if !(self.t_max.is_finite() && self.t_max > 0.0) {
            return Err(Error::config(format!("t_max must be positive, got {}", self.t_max)));
        }
        let d = self.dim();
        for (i, (&t, row)) in self.times.iter().zip(&self.observations).enumerate() {
            if !(t.is_finite() && (0.0..=self.t_max).contains(&t)) {
                return Err(Error::config(format!("time {t} at row {i} outside [0, {}]", self.t_max)));
            }
            if i > 0 && t <= self.times[i - 1] {
                return Err(Error::config(format!("times not strictly increasing at row {i}")));
            }
            if row.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: row.len() });
            }
            if row.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("non-finite observation at row {i}")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.observations.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Times and values of the present entries of component `j`.
    pub fn component(&self, j: usize) -> (Vec<f64>, Vec<f64>) {
        self.times
            .iter()
            .zip(&self.observations)
            .filter_map(|(&t, row)| row.get(j).copied().flatten().map(|v| (t, v)))
            .unzip()
    }

    /// True when component `j` has at least one present entry.
    pub fn has_component(&self, j: usize) -> bool {
        self.observations.iter().any(|row| row.get(j).copied().flatten().is_some())
    }

    /// Present entries of the components in `mask`, component-major and
    /// time-minor.
    pub fn stack(&self, mask: &[bool]) -> (Vec<f64>, Vec<StackedEntry>) {
        let mut values = Vec::new();
        let mut entries = Vec::new();
        for (j, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            for (row, (&t, obs)) in self.times.iter().zip(&self.observations).enumerate() {
                if let Some(v) = obs.get(j).copied().flatten() {
                    values.push(v);
                    entries.push(StackedEntry { component: j, row, t });
                }
            }
        }
        (values, entries)
    }

    /// Inverse of [`Dataset::stack`] given the original time grid.
    pub fn unstack(
        times: &[f64],
        dim: usize,
        t_max: f64,
        values: &[f64],
        entries: &[StackedEntry],
    ) -> Result<Self> {
        if values.len() != entries.len() {
            return Err(Error::DimensionMismatch { expected: entries.len(), got: values.len() });
        }
        let mut observations = vec![vec![None; dim]; times.len()];
        for (v, e) in values.iter().zip(entries) {
            let slot = observations
                .get_mut(e.row)
                .and_then(|r| r.get_mut(e.component))
                .ok_or_else(|| Error::config("stacked entry out of range"))?;
            *slot = Some(*v);
        }
        Self::new(times.to_vec(), observations, t_max)
    }

    /// Parses `t,y1,...,yD`; empty cells are absent entries. `t_max` defaults
    /// to the last time stamp.
    pub fn from_csv_str(text: &str, t_max: Option<f64>) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::parse("empty CSV"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols[0] != "t" {
            return Err(Error::parse(format!("expected header `t,y1,...`, got `{header}`")));
        }
        let d = cols.len() - 1;
        let mut times = Vec::new();
        let mut observations = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != d + 1 {
                return Err(Error::parse(format!(
                    "row {} has {} cells, expected {}",
                    lineno + 2,
                    cells.len(),
                    d + 1
                )));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(format!("bad number `{s}` on row {}", lineno + 2)))
            };
            times.push(num(cells[0])?);
            let row = cells[1..]
                .iter()
                .map(|c| if c.is_empty() { Ok(None) } else { num(c).map(Some) })
                .collect::<Result<Vec<_>>>()?;
            observations.push(row);
        }
        let t_max = t_max.unwrap_or_else(|| times.last().copied().unwrap_or(0.0));
        Self::new(times, observations, t_max)
    }

    pub fn read_csv(path: &Path, t_max: Option<f64>) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?, t_max)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("t");
        for j in 0..self.dim() {
            write!(out, ",y{}", j + 1).unwrap();
        }
        out.push('\n');
        for (t, row) in self.times.iter().zip(&self.observations) {
            write!(out, "{t:?}").unwrap();
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    write!(out, "{v:?}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Dataset {
        Dataset::new(
            vec![0.0, 0.5, 1.0],
            vec![vec![Some(1.0), None], vec![Some(0.5), Some(2.0)], vec![None, Some(-1.0)]],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn stacking_is_component_major() {
        let (v, e) = sample().stack(&[true, true]);
        assert_eq!(v, vec![1.0, 0.5, 2.0, -1.0]);
        assert_eq!(e.iter().map(|e| e.component).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
        let (v, _) = sample().stack(&[false, true]);
        assert_eq!(v, vec![2.0, -1.0]);
    }

    #[test]
    fn csv_round_trip_keeps_empty_cells() {
        let ds = sample();
        let text = ds.to_csv_string();
        assert!(text.starts_with("t,y1,y2\n0.0,1.0,\n"));
        assert_eq!(Dataset::from_csv_str(&text, Some(1.0)).unwrap(), ds);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Dataset::new(vec![0.5, 0.5], vec![vec![Some(1.0)]; 2], 1.0).is_err());
        assert!(Dataset::new(vec![2.0], vec![vec![Some(1.0)]], 1.0).is_err());
        assert!(Dataset::new(vec![0.5], vec![vec![Some(f64::NAN)]], 1.0).is_err());
        assert!(Dataset::from_csv_str("x,y1\n0,1\n", None).is_err());
        assert!(Dataset::from_csv_str("t,y1\n0,abc\n", None).is_err());
    }

    proptest! {
        #[test]
        fn unstack_inverts_stack(
            vals in proptest::collection::vec(proptest::option::of(-1e6f64..1e6), 3..30),
        ) {
            let d = 3;
            let rows = vals.len() / d;
            prop_assume!(rows > 0);
            let times: Vec<f64> = (0..rows).map(|i| i as f64 * 0.25).collect();
            let obs: Vec<Vec<Option<f64>>> = (0..rows).map(|i| vals[i * d..(i + 1) * d].to_vec()).collect();
            let ds = Dataset::new(times.clone(), obs, 100.0).unwrap();
            let (v, e) = ds.stack(&[true; 3]);
            let back = Dataset::unstack(&times, d, 100.0, &v, &e).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
