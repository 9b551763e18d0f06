//! Post-training analysis: PCA of slow-context activity, cluster separation
//! of the projected trajectories, and generation error against a teacher.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::action::{ChannelLayout, NormalizedSequence};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("k = {k} must be between 1 and the state width {width}")]
    Components { k: usize, width: usize },
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("matrix {index} has {got} columns, expected {expected}")]
    Width { index: usize, expected: usize, got: usize },
    #[error("separation needs at least two sequences")]
    SingleSequence,
    #[error("length mismatch: generated {generated} x {generated_dim}, teacher {teacher} x {teacher_dim}")]
    LengthMismatch {
        generated: usize,
        generated_dim: usize,
        teacher: usize,
        teacher_dim: usize,
    },
    #[error("vector width {got} does not match the channel layout ({expected})")]
    Layout { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub mean: DVector<f64>,
    /// `k x n`, one unit-length component per row.
    pub components: DMatrix<f64>,
    /// Fraction of total variance carried by each component.
    pub explained_variance: Vec<f64>,
    /// One `T x k` matrix per input sequence.
    pub projections: Vec<DMatrix<f64>>,
}

impl PcaResult {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    /// Maps projected rows back into state space.
    pub fn reconstruct(&self, projection: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = projection * &self.components;
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        out
    }
}

/// Pooled-row PCA over per-sequence state matrices (rows are time steps).
/// Each component's largest-magnitude entry is made positive.
pub fn pca(states: &[DMatrix<f64>], k: usize) -> Result<PcaResult, AnalysisError> {
    let width = states.first().map_or(0, |m| m.ncols());
    if k == 0 || k > width {
        return Err(AnalysisError::Components { k, width });
    }
    for (index, m) in states.iter().enumerate() {
        if m.ncols() != width {
            return Err(AnalysisError::Width {
                index,
                expected: width,
                got: m.ncols(),
            });
        }
    }
    let rows: usize = states.iter().map(|m| m.nrows()).sum();
    if rows < k + 1 {
        return Err(AnalysisError::TooFewRows { needed: k + 1, got: rows });
    }

    let mut mean = DVector::zeros(width);
    for m in states {
        for row in m.row_iter() {
            mean += row.transpose();
        }
    }
    mean /= rows as f64;

    let mut cov = DMatrix::zeros(width, width);
    for m in states {
        for row in m.row_iter() {
            let d = row.transpose() - &mean;
            cov.ger(1.0, &d, &d, 1.0);
        }
    }
    cov /= (rows - 1) as f64;

    let eigen = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    let total: f64 = eigen.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    // Rounding noise left over after centering constant data.
    let scale = states.iter().map(|m| m.amax()).fold(0.0, f64::max);
    let total = if total <= (scale * scale).max(f64::MIN_POSITIVE) * 1e-24 { 0.0 } else { total };

    let mut components = DMatrix::zeros(k, width);
    let mut explained_variance = Vec::with_capacity(k);
    for (r, &c) in order.iter().take(k).enumerate() {
        let mut v = eigen.eigenvectors.column(c).into_owned();
        let pivot = v.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            v = -v;
        }
        components.row_mut(r).copy_from(&v.transpose());
        let ratio = if total > 0.0 { eigen.eigenvalues[c].max(0.0) / total } else { 0.0 };
        explained_variance.push(ratio);
    }

    let projections = states
        .iter()
        .map(|m| {
            let mut centered = m.clone();
            for mut row in centered.row_iter_mut() {
                row -= mean.transpose();
            }
            centered * components.transpose()
        })
        .collect();

    Ok(PcaResult {
        mean,
        components,
        explained_variance,
        projections,
    })
}

/// Mean silhouette of all projected points, labelled by sequence, using
/// Euclidean distance in the first two components.
pub fn separation_score(projections: &[DMatrix<f64>]) -> Result<f64, AnalysisError> {
    if projections.len() < 2 {
        return Err(AnalysisError::SingleSequence);
    }
    let dims = projections.iter().map(|m| m.ncols()).min().unwrap_or(0).min(2);
    let points: Vec<(usize, [f64; 2])> = projections
        .iter()
        .enumerate()
        .flat_map(|(label, m)| {
            m.row_iter().map(move |r| {
                let mut p = [0.0; 2];
                for (d, slot) in p.iter_mut().enumerate().take(dims) {
                    *slot = r[d];
                }
                (label, p)
            })
        })
        .collect();
    if points.is_empty() {
        return Err(AnalysisError::TooFewRows { needed: 1, got: 0 });
    }
    let clusters = projections.len();
    let sizes: Vec<usize> = projections.iter().map(|m| m.nrows()).collect();

    let mut sum = 0.0;
    let mut sums = vec![0.0; clusters];
    for &(label, p) in &points {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for &(other, q) in &points {
            sums[other] += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        }
        if sizes[label] < 2 {
            continue;
        }
        let a = sums[label] / (sizes[label] - 1) as f64;
        let b = (0..clusters)
            .filter(|&c| c != label && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 && b.is_finite() {
            sum += (b - a) / denom;
        }
    }
    Ok(sum / points.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RmseReport {
    pub joints: f64,
    pub facial: f64,
    pub audio: f64,
    pub overall: f64,
}

pub fn trajectory_rmse(
    generated: &NormalizedSequence,
    teacher: &NormalizedSequence,
    layout: &ChannelLayout,
) -> Result<RmseReport, AnalysisError> {
    let mismatch = || AnalysisError::LengthMismatch {
        generated: generated.len(),
        generated_dim: generated.dim(),
        teacher: teacher.len(),
        teacher_dim: teacher.dim(),
    };
    if generated.len() != teacher.len() {
        return Err(mismatch());
    }
    if generated.vectors.iter().zip(&teacher.vectors).any(|(g, t)| g.len() != t.len()) {
        return Err(mismatch());
    }
    if let Some(v) = teacher.vectors.iter().find(|v| v.len() != layout.dim()) {
        return Err(AnalysisError::Layout {
            expected: layout.dim(),
            got: v.len(),
        });
    }
    let block = |range: std::ops::Range<usize>| {
        let mut se = 0.0;
        let mut n = 0usize;
        for (g, t) in generated.vectors.iter().zip(&teacher.vectors) {
            for i in range.clone() {
                se += (g[i] - t[i]).powi(2);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            (se / n as f64).sqrt()
        }
    };
    Ok(RmseReport {
        joints: block(layout.joint_range()),
        facial: block(layout.facial_range()),
        audio: block(layout.audio_range()),
        overall: block(0..layout.dim()),
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, AnalysisError> {
    csv::Writer::from_path(path).map_err(|source| AnalysisError::Csv {
        path: path.display().to_string(),
        source,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Csv {
        path: path.display().to_string(),
        source,
    }
}

/// `sequence_id,t,pc1..pck`
pub fn write_projections(path: &Path, result: &PcaResult) -> Result<(), AnalysisError> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    let mut header = vec!["sequence_id".to_string(), "t".to_string()];
    header.extend((1..=result.k()).map(|i| format!("pc{i}")));
    w.write_record(&header).map_err(&err)?;
    for (id, m) in result.projections.iter().enumerate() {
        for (t, row) in m.row_iter().enumerate() {
            let mut record = vec![id.to_string(), t.to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record).map_err(&err)?;
        }
    }
    w.flush().map_err(|e| err(e.into()))
}

/// `component,explained_variance`
pub fn write_variance(path: &Path, result: &PcaResult) -> Result<(), AnalysisError> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["component", "explained_variance"]).map_err(&err)?;
    for (i, v) in result.explained_variance.iter().enumerate() {
        w.write_record([format!("pc{}", i + 1), v.to_string()]).map_err(&err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}

/// `sequence,joints,facial,audio,overall`
pub fn write_rmse_report(path: &Path, rows: &[(String, RmseReport)]) -> Result<(), AnalysisError> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(["sequence", "joints", "facial", "audio", "overall"]).map_err(&err)?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            r.joints.to_string(),
            r.facial.to_string(),
            r.audio.to_string(),
            r.overall.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| err(e.into()))
}
