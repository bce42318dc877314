//! Ring-sector scan descriptors and shift-maximized cosine similarity.
//!
//! A descriptor is an `nr x ns` polar occupancy histogram of a 360° scan,
//! normalized by its max cell. Similarity maximizes cosine over all cyclic
//! sector shifts, which makes it invariant to sensor yaw.

use crate::world::RobotId;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DescriptorError {
    #[error("descriptor shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanDescriptor {
    pub robot: RobotId,
    pub keyframe: u32,
    pub nr: usize,
    pub ns: usize,
    /// Row-major `nr x ns`, non-negative.
    pub cells: Vec<f64>,
}

impl ScanDescriptor {
    pub fn key(&self) -> (RobotId, u32) {
        (self.robot, self.keyframe)
    }

    fn cell(&self, r: usize, s: usize) -> f64 {
        self.cells[r * self.ns + s]
    }

    pub fn is_zero(&self) -> bool {
        self.cells.iter().all(|c| *c == 0.0)
    }
}

/// Bins scan points (sensor frame) into the ring-sector histogram and
/// normalizes by the max cell.
pub fn compute_descriptor(
    points: &[[f64; 2]],
    robot: RobotId,
    keyframe: u32,
    nr: usize,
    ns: usize,
    r_max: f64,
) -> ScanDescriptor {
    assert!(nr >= 1 && ns >= 1 && r_max > 0.0);
    let mut cells = vec![0.0; nr * ns];
    for p in points {
        let r = p[0].hypot(p[1]);
        if r >= r_max {
            continue;
        }
        let phi = p[1].atan2(p[0]);
        let ring = ((r / r_max) * nr as f64).floor() as usize;
        let sector = (((phi + std::f64::consts::PI) / (2.0 * std::f64::consts::PI)) * ns as f64)
            .floor() as usize;
        let ring = ring.min(nr - 1);
        let sector = sector.min(ns - 1);
        cells[ring * ns + sector] += 1.0;
    }
    let max = cells.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for c in &mut cells {
            *c /= max;
        }
    }
    ScanDescriptor {
        robot,
        keyframe,
        nr,
        ns,
        cells,
    }
}

/// Max over all cyclic column shifts of the cosine similarity between the
/// flattened matrices. All-zero descriptors compare as 0.
pub fn similarity(a: &ScanDescriptor, b: &ScanDescriptor) -> Result<f64, DescriptorError> {
    if a.nr != b.nr || a.ns != b.ns {
        return Err(DescriptorError::ShapeMismatch(a.nr, a.ns, b.nr, b.ns));
    }
    let norm_a: f64 = a.cells.iter().map(|c| c * c).sum::<f64>().sqrt();
    let norm_b: f64 = b.cells.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return Ok(0.0);
    }
    let mut best = f64::NEG_INFINITY;
    for shift in 0..a.ns {
        let mut dot = 0.0;
        for r in 0..a.nr {
            for s in 0..a.ns {
                dot += a.cell(r, s) * b.cell(r, (s + shift) % a.ns);
            }
        }
        if dot > best {
            best = dot;
        }
    }
    Ok((best / (norm_a * norm_b)).clamp(0.0, 1.0))
}

/// The column shift at which `b` best aligns onto `a`, with its cosine.
pub fn best_shift(a: &ScanDescriptor, b: &ScanDescriptor) -> Result<(usize, f64), DescriptorError> {
    if a.nr != b.nr || a.ns != b.ns {
        return Err(DescriptorError::ShapeMismatch(a.nr, a.ns, b.nr, b.ns));
    }
    let norm_a: f64 = a.cells.iter().map(|c| c * c).sum::<f64>().sqrt();
    let norm_b: f64 = b.cells.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return Ok((0, 0.0));
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for shift in 0..a.ns {
        let mut dot = 0.0;
        for r in 0..a.nr {
            for s in 0..a.ns {
                dot += a.cell(r, s) * b.cell(r, (s + shift) % a.ns);
            }
        }
        if dot > best.1 {
            best = (shift, dot);
        }
    }
    Ok((best.0, (best.1 / (norm_a * norm_b)).clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn desc(nr: usize, ns: usize, cells: Vec<f64>) -> ScanDescriptor {
        ScanDescriptor {
            robot: 0,
            keyframe: 0,
            nr,
            ns,
            cells,
        }
    }

    #[test]
    fn empty_scan_gives_zero_descriptor() {
        let d = compute_descriptor(&[], 1, 0, 20, 60, 20.0);
        assert!(d.is_zero());
    }

    #[test]
    fn single_point_bins_to_expected_cell() {
        // Point just past r_max/2 at phi = 0 lands in ring nr/2, sector ns/2.
        let nr = 20;
        let ns = 60;
        let r_max = 20.0;
        let d = compute_descriptor(&[[10.0 + 1e-6, 0.0]], 1, 0, nr, ns, r_max);
        let nonzero: Vec<usize> = d
            .cells
            .iter()
            .enumerate()
            .filter(|(_, c)| **c > 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero, vec![(nr / 2) * ns + ns / 2]);
        assert_abs_diff_eq!(d.cells[(nr / 2) * ns + ns / 2], 1.0);
    }

    #[test]
    fn rotation_by_one_sector_shifts_columns() {
        let nr = 4;
        let ns = 12;
        let r_max = 10.0;
        // Points at bin centers so the rotated copies stay within bins.
        let mut pts = Vec::new();
        for k in 0..6 {
            let r = 1.0 + k as f64;
            let phi = -std::f64::consts::PI + (2.0 * k as f64 + 1.0) * std::f64::consts::PI / ns as f64;
            pts.push([r * phi.cos(), r * phi.sin()]);
        }
        let delta = 2.0 * std::f64::consts::PI / ns as f64;
        let rotated: Vec<[f64; 2]> = pts
            .iter()
            .map(|p| {
                let (s, c) = delta.sin_cos();
                [c * p[0] - s * p[1], s * p[0] + c * p[1]]
            })
            .collect();
        let d0 = compute_descriptor(&pts, 1, 0, nr, ns, r_max);
        let d1 = compute_descriptor(&rotated, 1, 1, nr, ns, r_max);
        for r in 0..nr {
            for s in 0..ns {
                assert_abs_diff_eq!(d1.cell(r, (s + 1) % ns), d0.cell(r, s), epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(similarity(&d0, &d1).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn similarity_conventions() {
        let d = desc(2, 2, vec![1.0, 0.0, 0.5, 0.0]);
        assert_abs_diff_eq!(similarity(&d, &d).unwrap(), 1.0, epsilon = 1e-12);
        let zero = desc(2, 2, vec![0.0; 4]);
        assert_abs_diff_eq!(similarity(&d, &zero).unwrap(), 0.0);
        // Shift by one column aligns these two exactly.
        let a = desc(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        let b = desc(2, 2, vec![0.0, 1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(similarity(&a, &b).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = desc(2, 2, vec![1.0; 4]);
        let b = desc(2, 3, vec![1.0; 6]);
        assert!(similarity(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn similarity_symmetric_and_bounded(
            cells_a in proptest::collection::vec(0.0..1.0f64, 12),
            cells_b in proptest::collection::vec(0.0..1.0f64, 12),
        ) {
            let a = desc(3, 4, cells_a);
            let b = desc(3, 4, cells_b);
            let ab = similarity(&a, &b).unwrap();
            let ba = similarity(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
        }
    }
}
