//! Diffusion acquisition protocols.
//!
//! Internally b-values are stored in ms/µm², times in ms. Protocol files use
//! the scanner convention (s/mm²) and are converted on load.
//!
//! File format: one entry per line,
//! `bvalue_s_per_mm2 gx gy gz delta_ms Delta_ms`, `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// s/mm² per ms/µm².
pub const BVALUE_SCALE: f64 = 1000.0;

/// Entries with b below this (s/mm²) are treated as non-diffusion-weighted.
pub const B0_THRESHOLD_S_MM2: f64 = 50.0;

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientEntry {
    /// ms/µm²
    pub bvalue: f64,
    pub direction: [f64; 3],
    /// Gradient duration δ (ms).
    pub delta_small: f64,
    /// Gradient separation Δ (ms).
    pub delta_big: f64,
}

impl GradientEntry {
    pub fn new(bvalue: f64, direction: [f64; 3], delta_small: f64, delta_big: f64) -> Result<Self> {
        let entry = GradientEntry {
            bvalue,
            direction,
            delta_small,
            delta_big,
        };
        entry.validate()?;
        Ok(entry)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bvalue.is_finite() && self.bvalue >= 0.0) {
            return Err(Error::Validation(format!("negative or non-finite b-value {}", self.bvalue)));
        }
        if !(self.delta_small > 0.0) {
            return Err(Error::Validation(format!("gradient duration must be positive, got {}", self.delta_small)));
        }
        if !(self.delta_big >= self.delta_small) {
            return Err(Error::Validation(format!(
                "gradient separation {} shorter than duration {}",
                self.delta_big, self.delta_small
            )));
        }
        if !self.is_b0() {
            let norm = self.direction.iter().map(|g| g * g).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Validation(format!(
                    "direction {:?} has norm {norm}, expected unit length",
                    self.direction
                )));
            }
        }
        Ok(())
    }

    pub fn bvalue_s_mm2(&self) -> f64 {
        self.bvalue * BVALUE_SCALE
    }

    pub fn is_b0(&self) -> bool {
        self.bvalue_s_mm2() < B0_THRESHOLD_S_MM2
    }

    /// q² (µm⁻²) for a pulsed-gradient experiment: b / (Δ − δ/3).
    pub fn q_squared(&self) -> f64 {
        self.bvalue / (self.delta_big - self.delta_small / 3.0)
    }
}

/// A group of entries sharing a nominal b-value.
#[derive(Debug, Clone, PartialEq)]
pub struct Shell {
    /// Nominal b-value rounded to 1 s/mm².
    pub bvalue_s_mm2: f64,
    pub indices: Vec<usize>,
    pub is_b0: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionProtocol {
    entries: Vec<GradientEntry>,
    shells: Vec<Shell>,
}

impl AcquisitionProtocol {
    pub fn new(entries: Vec<GradientEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Validation("protocol has no entries".into()));
        }
        for e in &entries {
            e.validate()?;
        }
        let shells = partition_shells(&entries);
        Ok(AcquisitionProtocol { entries, shells })
    }

    pub fn entries(&self) -> &[GradientEntry] {
        &self.entries
    }

    /// b0 group first (when present), then diffusion-weighted shells by
    /// ascending b-value.
    pub fn shells(&self) -> &[Shell] {
        &self.shells
    }

    pub fn weighted_shells(&self) -> impl Iterator<Item = &Shell> {
        self.shells.iter().filter(|s| !s.is_b0)
    }

    pub fn n_weighted_shells(&self) -> usize {
        self.weighted_shells().count()
    }

    pub fn b0_indices(&self) -> &[usize] {
        match self.shells.first() {
            Some(s) if s.is_b0 => &s.indices,
            _ => &[],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn check_signal_len(&self, len: usize) -> Result<()> {
        if len != self.entries.len() {
            return Err(Error::Dimension {
                expected: self.entries.len(),
                got: len,
            });
        }
        Ok(())
    }

    /// Per-shell mean of `signal`. The b0 mean comes first when the protocol
    /// has b0 entries.
    pub fn direction_average(&self, signal: &[f64]) -> Result<Vec<f64>> {
        self.check_signal_len(signal.len())?;
        Ok(self
            .shells
            .iter()
            .map(|s| s.indices.iter().map(|&i| signal[i]).sum::<f64>() / s.indices.len() as f64)
            .collect())
    }

    /// Direction-averaged signal of the diffusion-weighted shells only.
    pub fn shell_means(&self, signal: &[f64]) -> Result<Vec<f64>> {
        self.check_signal_len(signal.len())?;
        Ok(self
            .weighted_shells()
            .map(|s| s.indices.iter().map(|&i| signal[i]).sum::<f64>() / s.indices.len() as f64)
            .collect())
    }

    /// Keeps entries with b ≤ `max_bvalue_s_mm2`; returns the reduced
    /// protocol and the retained entry indices.
    pub fn with_max_bvalue(&self, max_bvalue_s_mm2: f64) -> Result<(Self, Vec<usize>)> {
        let keep: Vec<usize> = (0..self.entries.len())
            .filter(|&i| self.entries[i].bvalue_s_mm2() <= max_bvalue_s_mm2 + 0.5)
            .collect();
        let entries = keep.iter().map(|&i| self.entries[i]).collect();
        Ok((AcquisitionProtocol::new(entries)?, keep))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let malformed = |reason: String| Error::MalformedLine {
                path: origin.to_path_buf(),
                line: lineno + 1,
                reason,
            };
            let fields: Vec<f64> = line
                .split_whitespace()
                .map(|tok| tok.parse::<f64>().map_err(|_| malformed(format!("cannot parse `{tok}`"))))
                .collect::<Result<_>>()?;
            if fields.len() != 6 {
                return Err(malformed(format!("expected 6 columns, found {}", fields.len())));
            }
            let entry = GradientEntry {
                bvalue: fields[0] / BVALUE_SCALE,
                direction: [fields[1], fields[2], fields[3]],
                delta_small: fields[4],
                delta_big: fields[5],
            };
            entry.validate().map_err(|e| match e {
                Error::Validation(msg) => Error::Validation(format!("{}:{}: {msg}", origin.display(), lineno + 1)),
                other => other,
            })?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# bvalue[s/mm^2] gx gy gz delta[ms] Delta[ms]\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:?} {:?} {:?} {:?} {:?} {:?}",
                e.bvalue_s_mm2(),
                e.direction[0],
                e.direction[1],
                e.direction[2],
                e.delta_small,
                e.delta_big
            );
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Six-shell protocol with 13 b0 images and 20, 20, 30, 61, 61, 61
    /// directions at b = 200, 500, 1200, 2400, 4000, 6000 s/mm²,
    /// δ = 7 ms and Δ = 24 ms. Directions are spread on the half sphere
    /// with a golden-angle spiral.
    pub fn reference_multishell() -> Self {
        let shells: [(f64, usize); 6] = [
            (200.0, 20),
            (500.0, 20),
            (1200.0, 30),
            (2400.0, 61),
            (4000.0, 61),
            (6000.0, 61),
        ];
        let (delta_small, delta_big) = (7.0, 24.0);
        let mut entries = vec![
            GradientEntry {
                bvalue: 0.0,
                direction: [0.0; 3],
                delta_small,
                delta_big,
            };
            13
        ];
        for (k, &(b, n)) in shells.iter().enumerate() {
            for dir in hemisphere_directions(n, k as f64 * 0.7) {
                entries.push(GradientEntry {
                    bvalue: b / BVALUE_SCALE,
                    direction: dir,
                    delta_small,
                    delta_big,
                });
            }
        }
        Self::new(entries).expect("reference protocol is valid")
    }
}

/// `n` near-uniform unit vectors on the upper half sphere.
pub fn hemisphere_directions(n: usize, phase: f64) -> Vec<[f64; 3]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (k as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = k as f64 * golden + phase;
            [r * phi.cos(), r * phi.sin(), z]
        })
        .collect()
}

fn partition_shells(entries: &[GradientEntry]) -> Vec<Shell> {
    let mut b0 = Vec::new();
    let mut weighted: Vec<(i64, Vec<usize>)> = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        if e.is_b0() {
            b0.push(i);
            continue;
        }
        let key = e.bvalue_s_mm2().round() as i64;
        match weighted.iter_mut().find(|(k, _)| *k == key) {
            Some((_, idx)) => idx.push(i),
            None => weighted.push((key, vec![i])),
        }
    }
    weighted.sort_by_key(|(k, _)| *k);
    let mut shells = Vec::with_capacity(weighted.len() + 1);
    if !b0.is_empty() {
        shells.push(Shell {
            bvalue_s_mm2: 0.0,
            indices: b0,
            is_b0: true,
        });
    }
    shells.extend(weighted.into_iter().map(|(k, indices)| Shell {
        bvalue_s_mm2: k as f64,
        indices,
        is_b0: false,
    }));
    shells
}
