//! Homography-based match evaluation: per-match pixel error, MMA curve and MMAscore.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{epipolar_line, FundamentalMatrix, Pt2};
use crate::inference::Match;

/// Thresholds 1..=10 px.
pub const THRESHOLDS: usize = 10;

/// Per-threshold weights `2 - 0.1 t`; they sum to 14.5.
pub fn mmascore_weights() -> [f64; THRESHOLDS] {
    std::array::from_fn(|k| 2.0 - 0.1 * (k + 1) as f64)
}

/// Invertible image-1 to image-2 pixel mapping with `H[2][2] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("homography has non-finite entries"));
        }
        let h22 = m[(2, 2)];
        if h22.abs() <= 1e-12 * m.norm() {
            return Err(Error::invalid("homography H[2][2] is zero and cannot be normalized"));
        }
        let m = m / h22;
        let sv = m.singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        if !(smin > 1e-12 * smax) {
            return Err(Error::invalid("homography is singular or ill-conditioned"));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// `None` for points mapped to infinity.
    pub fn apply(&self, x: &Pt2) -> Option<Pt2> {
        let p = self.0 * Vector3::new(x.x, x.y, 1.0);
        if p.z.abs() <= 1e-12 {
            return None;
        }
        Some(Pt2::new(p.x / p.z, p.y / p.z))
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self.0.try_inverse().ok_or_else(|| Error::invalid("homography is not invertible"))?;
        Self::new(inv)
    }

    /// Nine whitespace-separated decimals, row-major.
    pub fn parse_text(text: &str) -> Result<Self> {
        let v: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::format("homography", format!("bad number {t:?}"))))
            .collect::<Result<_>>()?;
        if v.len() != 9 {
            return Err(Error::format("homography", format!("expected 9 values, found {}", v.len())));
        }
        Self::new(Matrix3::from_row_slice(&v))
    }

    pub fn to_text(&self) -> String {
        (0..3)
            .map(|r| (0..3).map(|c| format!("{:e}", self.0[(r, c)])).collect::<Vec<_>>().join(" "))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// `|H(x1) - x2|` per match; matches whose point maps to infinity get `+inf`.
pub fn match_errors(matches: &[Match], pts1: &[Pt2], pts2: &[Pt2], h: &Homography) -> Result<Vec<f64>> {
    matches
        .iter()
        .map(|m| {
            let (a, b) = (pts1.get(m.i), pts2.get(m.j));
            match (a, b) {
                (Some(a), Some(b)) => Ok(h.apply(a).map_or(f64::INFINITY, |p| (p - b).norm())),
                _ => Err(Error::invalid(format!("match ({}, {}) indexes past the keypoint lists", m.i, m.j))),
            }
        })
        .collect()
}

/// Distance of each matched image-2 point to the epipolar line of its image-1 point.
pub fn epipolar_errors(matches: &[Match], pts1: &[Pt2], pts2: &[Pt2], f: &FundamentalMatrix) -> Result<Vec<f64>> {
    matches
        .iter()
        .map(|m| {
            let (a, b) = (pts1.get(m.i), pts2.get(m.j));
            match (a, b) {
                (Some(a), Some(b)) => Ok(epipolar_line(f, a).map_or(f64::INFINITY, |l| l.signed_distance(b).abs())),
                _ => Err(Error::invalid(format!("match ({}, {}) indexes past the keypoint lists", m.i, m.j))),
            }
        })
        .collect()
}

/// Fraction of matches within each threshold; `empty` marks a curve from no matches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmaCurve {
    pub values: [f64; THRESHOLDS],
    pub empty: bool,
}

pub fn mma(errors: &[f64]) -> MmaCurve {
    if errors.is_empty() {
        return MmaCurve { values: [0.0; THRESHOLDS], empty: true };
    }
    let n = errors.len() as f64;
    let values = std::array::from_fn(|k| errors.iter().filter(|&&e| e <= (k + 1) as f64).count() as f64 / n);
    MmaCurve { values, empty: false }
}

pub fn mmascore(curve: &MmaCurve) -> f64 {
    let w = mmascore_weights();
    let total: f64 = w.iter().sum();
    w.iter().zip(&curve.values).map(|(w, v)| w * v).sum::<f64>() / total
}

/// One evaluated image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub pair_id: String,
    pub n_matches: usize,
    pub curve: MmaCurve,
    pub score: f64,
}

impl EvalRow {
    pub fn new(pair_id: impl Into<String>, errors: &[f64]) -> Self {
        let curve = mma(errors);
        Self { pair_id: pair_id.into(), n_matches: errors.len(), curve, score: mmascore(&curve) }
    }
}

/// Mean curve and score over rows.
pub fn aggregate(rows: &[EvalRow]) -> EvalRow {
    let n = rows.len().max(1) as f64;
    let values = std::array::from_fn(|k| rows.iter().map(|r| r.curve.values[k]).sum::<f64>() / n);
    let curve = MmaCurve { values, empty: rows.iter().all(|r| r.curve.empty) };
    EvalRow {
        pair_id: "aggregate".into(),
        n_matches: rows.iter().map(|r| r.n_matches).sum(),
        curve,
        score: rows.iter().map(|r| r.score).sum::<f64>() / n,
    }
}

/// `pair_id,n_matches,mma_1..mma_10,mmascore` rows, then the aggregate row.
/// Pairs without matches carry an `empty` flag column.
pub fn report_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("pair_id,n_matches");
    for t in 1..=THRESHOLDS {
        s.push_str(&format!(",mma_{t}"));
    }
    s.push_str(",mmascore,empty\n");
    let line = |r: &EvalRow| {
        let mut l = format!("{},{}", r.pair_id, r.n_matches);
        for v in r.curve.values {
            l.push_str(&format!(",{v:.6}"));
        }
        l.push_str(&format!(",{:.6},{}\n", r.score, u8::from(r.curve.empty)));
        l
    };
    for r in rows {
        s.push_str(&line(r));
    }
    s.push_str(&line(&aggregate(rows)));
    s
}

/// Whitespace-separated `threshold mma` columns for plotting, one block per row.
pub fn gnuplot_dat(rows: &[EvalRow]) -> String {
    let mut s = String::from("# threshold_px mma\n");
    for r in rows.iter().chain(std::iter::once(&aggregate(rows))) {
        s.push_str(&format!("# {}\n", r.pair_id));
        for (k, v) in r.curve.values.iter().enumerate() {
            s.push_str(&format!("{} {v:.6}\n", k + 1));
        }
        s.push_str("\n\n");
    }
    s
}
