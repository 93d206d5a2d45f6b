//! Slot memories at instance, part and domain level.
//!
//! A bank is an `M × D` matrix of unit-norm slots. Reads are a temperature
//! softmax over cosine scores; writes blend one slot toward a new feature and
//! renormalize. Instance and part slots start at zero and take part in reads
//! with score 0 until their first write.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::core_math::{dot, l2_normalize, softmax, Matrix, ProbVector, UnitVector};
use crate::density_clustering::PseudoLabeling;
use crate::error::{MmnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Level {
    Instance,
    PartUpper,
    PartBottom,
    Domain,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Instance => "instance",
            Level::PartUpper => "part_upper",
            Level::PartBottom => "part_bottom",
            Level::Domain => "domain",
        })
    }
}

impl FromStr for Level {
    type Err = MmnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(Level::Instance),
            "part_upper" => Ok(Level::PartUpper),
            "part_bottom" => Ok(Level::PartBottom),
            "domain" => Ok(Level::Domain),
            other => Err(MmnError::Parse(format!("unknown bank level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    level: Level,
    slots: Matrix,
    written: Vec<bool>,
}

impl MemoryBank {
    /// A bank of `len` zero slots of dimension `dim`.
    pub fn zeros(level: Level, len: usize, dim: usize) -> Self {
        MemoryBank {
            level,
            slots: Matrix::zeros(len, dim),
            written: vec![false; len],
        }
    }

    pub fn from_slots(level: Level, slots: &[UnitVector]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = slots.iter().map(|s| s.as_slice().to_vec()).collect();
        let written = slots.iter().map(|s| !s.is_zero()).collect();
        Ok(MemoryBank {
            level,
            slots: Matrix::from_rows(&rows)?,
            written,
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn len(&self) -> usize {
        self.slots.rows
    }

    pub fn is_empty(&self) -> bool {
        self.slots.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.slots.cols
    }

    pub fn slot(&self, index: usize) -> &[f64] {
        self.slots.row(index)
    }

    pub fn slots(&self) -> &Matrix {
        &self.slots
    }

    /// Whether the slot has received at least one write (or was built from a
    /// centroid).
    pub fn is_written(&self, index: usize) -> bool {
        self.written[index]
    }

    fn check_query(&self, f: &UnitVector) -> Result<()> {
        if f.dim() != self.dim() {
            return Err(MmnError::DimensionMismatch {
                expected: self.dim(),
                got: f.dim(),
            });
        }
        if self.is_empty() {
            return Err(MmnError::EmptyInput);
        }
        Ok(())
    }

    /// Temperature-scaled cosine scores of `f` against every slot.
    pub fn scores(&self, f: &UnitVector, alpha1: f64) -> Result<Vec<f64>> {
        self.check_query(f)?;
        Ok((0..self.len())
            .map(|j| dot(f.as_slice(), self.slots.row(j)) / alpha1)
            .collect())
    }

    pub fn read_probabilities(&self, f: &UnitVector, alpha1: f64) -> Result<ProbVector> {
        softmax(&self.scores(f, alpha1)?)
    }

    /// Running-average write: `slot ← normalize(ρ·slot + (1−ρ)·f)`.
    pub fn write_slot(&mut self, index: usize, f: &UnitVector, rho: f64) -> Result<()> {
        if index >= self.len() {
            return Err(MmnError::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        if f.dim() != self.dim() {
            return Err(MmnError::DimensionMismatch {
                expected: self.dim(),
                got: f.dim(),
            });
        }
        let blended: Vec<f64> = self
            .slots
            .row(index)
            .iter()
            .zip(f.as_slice())
            .map(|(m, x)| rho * m + (1.0 - rho) * x)
            .collect();
        let unit = l2_normalize(&blended)?;
        self.slots.row_mut(index).copy_from_slice(unit.as_slice());
        self.written[index] = true;
        Ok(())
    }

    /// Writes the bank as a `level,M,D` header line followed by `M` rows of
    /// `D` comma-separated values.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{},{},{}", self.level, self.len(), self.dim())?;
        for r in 0..self.len() {
            let row: Vec<String> = self.slots.row(r).iter().map(f64::to_string).collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| MmnError::Parse("missing bank header".into()))??;
        let fields: Vec<&str> = header.trim().split(',').collect();
        if fields.len() != 3 {
            return Err(MmnError::Parse(format!("bad bank header `{header}`")));
        }
        let level: Level = fields[0].parse()?;
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| MmnError::Parse(format!("bank header: {e}")))
        };
        let (m, d) = (parse_usize(fields[1])?, parse_usize(fields[2])?);
        let mut rows = Vec::with_capacity(m);
        for line in lines.take(m) {
            let line = line?;
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|e| MmnError::Parse(e.to_string())))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != d {
                return Err(MmnError::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                });
            }
            rows.push(UnitVector::from_raw(row));
        }
        if rows.len() != m {
            return Err(MmnError::Parse(format!("expected {m} bank rows, got {}", rows.len())));
        }
        if m == 0 {
            return Ok(MemoryBank::zeros(level, 0, d));
        }
        MemoryBank::from_slots(level, &rows)
    }
}

/// Builds the domain bank: one slot per cluster holding the normalized mean of
/// its members' features. Noise samples contribute to no slot.
pub fn rebuild_domain_bank(features: &[UnitVector], labeling: &PseudoLabeling) -> Result<MemoryBank> {
    let dim = features.first().map(UnitVector::dim).ok_or(MmnError::EmptyInput)?;
    if labeling.num_clusters() == 0 {
        return Err(MmnError::NoClusters);
    }
    let mut slots = Vec::with_capacity(labeling.num_clusters());
    for (c, members) in labeling.members().iter().enumerate() {
        if members.is_empty() {
            return Err(MmnError::EmptyCluster(c));
        }
        let mut mean = vec![0.0; dim];
        for &i in members {
            let f = features.get(i).ok_or(MmnError::IndexOutOfRange {
                index: i,
                len: features.len(),
            })?;
            if f.dim() != dim {
                return Err(MmnError::DimensionMismatch {
                    expected: dim,
                    got: f.dim(),
                });
            }
            for (m, x) in mean.iter_mut().zip(f.as_slice()) {
                *m += x;
            }
        }
        let n = members.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        slots.push(l2_normalize(&mean)?);
    }
    MemoryBank::from_slots(Level::Domain, &slots)
}
