//! Per-row coordinate grids: the regression label and prediction format.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("invalid target: {0}")]
    Invalid(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed target csv at {path}: {message}")]
    Parse { path: String, message: String },
}

/// An `n_branches × height` grid of horizontal pixel coordinates with a
/// per-row validity mask.
///
/// `coords[b][r]` is the real-valued horizontal center of branch `b` at scan
/// line `r`. For vertically scanned scenes a scan line is an image row; for
/// horizontal vines the grid is stored in scan convention, i.e. `r` indexes
/// image columns and coordinates are vertical positions.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionTarget {
    /// `[branch][row]`, meaningful only where `valid[row]`.
    pub coords: Vec<Vec<f64>>,
    /// Per-row validity shared by all branch channels.
    pub valid: Vec<bool>,
    /// Extent of the coordinate axis in pixels.
    pub width: usize,
    /// Number of scan lines.
    pub height: usize,
}

impl PositionTarget {
    pub fn new(n_branches: usize, width: usize, height: usize) -> Self {
        Self {
            coords: vec![vec![0.0; height]; n_branches],
            valid: vec![false; height],
            width,
            height,
        }
    }

    pub fn n_branches(&self) -> usize {
        self.coords.len()
    }

    pub fn valid_rows(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.height).filter(|&r| self.valid[r])
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Check the structural invariants: coordinates of valid rows within
    /// `[0, width-1]` and valid rows forming one contiguous run.
    pub fn validate(&self) -> Result<(), TargetError> {
        if self.coords.is_empty() {
            return Err(TargetError::Invalid("no branch channels".into()));
        }
        for ch in &self.coords {
            if ch.len() != self.height {
                return Err(TargetError::Invalid(format!(
                    "channel length {} != height {}",
                    ch.len(),
                    self.height
                )));
            }
        }
        if self.valid.len() != self.height {
            return Err(TargetError::Invalid(format!(
                "valid length {} != height {}",
                self.valid.len(),
                self.height
            )));
        }
        let hi = (self.width - 1) as f64;
        for r in self.valid_rows() {
            for (b, ch) in self.coords.iter().enumerate() {
                let c = ch[r];
                if !c.is_finite() || c < 0.0 || c > hi {
                    return Err(TargetError::Invalid(format!(
                        "coord {c} out of [0, {hi}] at branch {b} row {r}"
                    )));
                }
            }
        }
        // Contiguity: no valid row after the first gap.
        let mut seen = false;
        let mut ended = false;
        for &v in &self.valid {
            if v {
                if ended {
                    return Err(TargetError::Invalid(
                        "valid rows are not a contiguous run".into(),
                    ));
                }
                seen = true;
            } else if seen {
                ended = true;
            }
        }
        Ok(())
    }

    /// Write the `target.csv` sample format: one line per scan line with
    /// `row_index, branch_0_x, branch_1_x, ..., valid_flag`.
    pub fn save_csv(&self, path: &Path) -> Result<(), TargetError> {
        let io_err = |e: std::io::Error| TargetError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        let mut header = String::from("row_index");
        for b in 0..self.n_branches() {
            header.push_str(&format!(",branch_{b}_x"));
        }
        header.push_str(",valid_flag");
        writeln!(out, "{header}").map_err(io_err)?;
        for r in 0..self.height {
            let mut line = r.to_string();
            for ch in &self.coords {
                line.push(',');
                line.push_str(&ch[r].to_string());
            }
            line.push_str(if self.valid[r] { ",1" } else { ",0" });
            writeln!(out, "{line}").map_err(io_err)?;
        }
        Ok(())
    }

    /// Read the `target.csv` sample format. `width` is not stored in the csv
    /// and must be supplied by the caller (it comes from the image).
    pub fn load_csv(path: &Path, width: usize) -> Result<PositionTarget, TargetError> {
        let parse_err = |m: String| TargetError::Parse {
            path: path.display().to_string(),
            message: m,
        };
        let text = std::fs::read_to_string(path).map_err(|e| TargetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| parse_err("empty file".into()))?;
        let cols = header.split(',').count();
        if cols < 3 {
            return Err(parse_err(format!("expected >= 3 columns, got {cols}")));
        }
        let n_branches = cols - 2;
        let mut rows: Vec<(usize, Vec<f64>, bool)> = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(parse_err(format!("line {}: wrong field count", i + 2)));
            }
            let row: usize = fields[0]
                .parse()
                .map_err(|e| parse_err(format!("line {}: {e}", i + 2)))?;
            let mut xs = Vec::with_capacity(n_branches);
            for f in &fields[1..=n_branches] {
                xs.push(
                    f.parse::<f64>()
                        .map_err(|e| parse_err(format!("line {}: {e}", i + 2)))?,
                );
            }
            let valid = match fields[cols - 1] {
                "1" => true,
                "0" => false,
                other => return Err(parse_err(format!("line {}: bad flag {other}", i + 2))),
            };
            rows.push((row, xs, valid));
        }
        let height = rows.iter().map(|(r, _, _)| r + 1).max().unwrap_or(0);
        let mut t = PositionTarget::new(n_branches, width, height);
        for (r, xs, valid) in rows {
            for (b, x) in xs.into_iter().enumerate() {
                t.coords[b][r] = x;
            }
            t.valid[r] = valid;
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target.csv");
        let mut t = PositionTarget::new(2, 64, 8);
        for r in 0..8 {
            t.coords[0][r] = 10.0 + r as f64 * 0.5;
            t.coords[1][r] = 40.25;
            t.valid[r] = r >= 2 && r < 7;
        }
        t.save_csv(&path).unwrap();
        let back = PositionTarget::load_csv(&path, 64).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn validate_rejects_gap() {
        let mut t = PositionTarget::new(1, 32, 5);
        t.valid = vec![true, false, true, false, false];
        assert!(t.validate().is_err());
        t.valid = vec![false, true, true, true, false];
        assert!(t.validate().is_ok());
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let mut t = PositionTarget::new(1, 32, 2);
        t.valid = vec![true, true];
        t.coords[0][0] = 31.0;
        t.coords[0][1] = 31.000001;
        assert!(t.validate().is_err());
    }
}
