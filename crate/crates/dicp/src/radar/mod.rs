//! Polar intensity scans and constant/bounded false-alarm-rate detectors.
//!
//! A scan is an azimuth-major grid of nonnegative intensities. Detection
//! runs a 1D sliding window along range independently per azimuth: the cell
//! under test passes when its intensity strictly exceeds a threshold built
//! from the mean of the surrounding training bins. The threshold is
//! `a * Z` for the classic cell-averaging detector and `a * Z + b` for the
//! bounded variant, whose additive floor keeps near-empty regions from
//! firing on noise.

mod image;
mod io;

pub use image::{polar_to_cartesian_image, CartesianImage};
pub use io::{load_scan_csv, load_scan_pscn, save_scan_pscn};

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::Cloud2;
use crate::error::{Error, Result};

/// Azimuth-major polar intensity scan.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarScan {
    /// `num_azimuths * num_range_bins` intensities, azimuth-major.
    intensities: Vec<f64>,
    num_range_bins: usize,
    /// Meters per range bin.
    range_resolution: f64,
    /// Strictly increasing angles in `[0, 2*pi)`, one per scan row.
    azimuth_angles: Vec<f64>,
    timestamp: Option<f64>,
}

impl PolarScan {
    pub fn new(
        azimuth_angles: Vec<f64>,
        num_range_bins: usize,
        range_resolution: f64,
        intensities: Vec<f64>,
    ) -> Result<Self> {
        if azimuth_angles.is_empty() || num_range_bins == 0 {
            return Err(Error::Data(
                "a scan needs at least one azimuth and one range bin".into(),
            ));
        }
        if !range_resolution.is_finite() || range_resolution <= 0.0 {
            return Err(Error::Data(format!(
                "range_resolution must be positive and finite, got {range_resolution}"
            )));
        }
        for (i, &a) in azimuth_angles.iter().enumerate() {
            if !a.is_finite() || !(0.0..std::f64::consts::TAU).contains(&a) {
                return Err(Error::Data(format!(
                    "azimuth {i} is {a}; angles must lie in [0, 2*pi)"
                )));
            }
            if i > 0 && a <= azimuth_angles[i - 1] {
                return Err(Error::Data(format!(
                    "azimuth angles must be strictly increasing; entry {i} is {a} after {}",
                    azimuth_angles[i - 1]
                )));
            }
        }
        if intensities.len() != azimuth_angles.len() * num_range_bins {
            return Err(Error::Data(format!(
                "{} intensities for {} azimuths x {} range bins",
                intensities.len(),
                azimuth_angles.len(),
                num_range_bins
            )));
        }
        if let Some(v) = intensities.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Data(format!(
                "intensities must be finite and nonnegative, found {v}"
            )));
        }
        Ok(PolarScan {
            intensities,
            num_range_bins,
            range_resolution,
            azimuth_angles,
            timestamp: None,
        })
    }

    pub fn with_timestamp(mut self, timestamp: f64) -> Self {
        self.timestamp = Some(timestamp);
        self
    }

    pub fn num_azimuths(&self) -> usize {
        self.azimuth_angles.len()
    }

    pub fn num_range_bins(&self) -> usize {
        self.num_range_bins
    }

    pub fn range_resolution(&self) -> f64 {
        self.range_resolution
    }

    pub fn azimuth_angles(&self) -> &[f64] {
        &self.azimuth_angles
    }

    pub fn timestamp(&self) -> Option<f64> {
        self.timestamp
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    /// One azimuth's intensities over range.
    pub fn row(&self, azimuth: usize) -> &[f64] {
        let start = azimuth * self.num_range_bins;
        &self.intensities[start..start + self.num_range_bins]
    }

    pub fn intensity(&self, azimuth: usize, range_bin: usize) -> f64 {
        self.intensities[azimuth * self.num_range_bins + range_bin]
    }

    /// Center range of a bin, `(bin + 0.5) * resolution`.
    pub fn bin_center(&self, range_bin: usize) -> f64 {
        (range_bin as f64 + 0.5) * self.range_resolution
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Threshold `a * Z` over the training mean `Z`.
    CaCfar,
    /// Threshold `a * Z + b`; the additive floor bounds the false-alarm
    /// rate where the training mean is near zero.
    Bfar,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// Training bins per side of the cell under test.
    pub train_cells: usize,
    /// Guard bins per side, excluded from the training mean.
    pub guard_cells: usize,
    /// Multiplicative threshold factor, `> 0`.
    pub scale_a: f64,
    /// Additive threshold in raw intensity units, `>= 0`; used by the
    /// bounded detector only.
    pub offset_b: f64,
    /// Range bins below this index are never tested (sensor blind zone).
    pub min_range_bin: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kind: DetectorKind::Bfar,
            train_cells: 20,
            guard_cells: 2,
            scale_a: 1.0,
            offset_b: 0.0,
            min_range_bin: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_cells == 0 {
            return Err(Error::Config("train_cells must be at least 1".into()));
        }
        if !self.scale_a.is_finite() || self.scale_a <= 0.0 {
            return Err(Error::Config(format!(
                "scale_a must be positive and finite, got {}",
                self.scale_a
            )));
        }
        if !self.offset_b.is_finite() || self.offset_b < 0.0 {
            return Err(Error::Config(format!(
                "offset_b must be nonnegative and finite, got {}",
                self.offset_b
            )));
        }
        Ok(())
    }
}

/// Detections along one azimuth; pushed in range order so the flattened
/// output is azimuth-major then range, independent of thread scheduling.
fn detect_row(
    row: &[f64],
    angle: f64,
    scan: &PolarScan,
    cfg: &DetectorConfig,
) -> Vec<Vector2<f64>> {
    let r_bins = row.len();
    // prefix[i] = sum of row[..i]; window sums become two lookups.
    let mut prefix = Vec::with_capacity(r_bins + 1);
    let mut acc = 0.0;
    prefix.push(0.0);
    for &v in row {
        acc += v;
        prefix.push(acc);
    }
    let span = |lo: usize, hi: usize| prefix[hi] - prefix[lo];

    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::new();
    for r in cfg.min_range_bin..r_bins {
        // Training bins flank the guard region on both sides, truncated at
        // the scan edges.
        let left_hi = r.saturating_sub(cfg.guard_cells);
        let left_lo = r.saturating_sub(cfg.guard_cells + cfg.train_cells);
        let right_lo = (r + cfg.guard_cells + 1).min(r_bins);
        let right_hi = (r + cfg.guard_cells + cfg.train_cells + 1).min(r_bins);
        let count = (left_hi - left_lo) + (right_hi - right_lo);
        debug_assert!(count > 0, "window precondition guarantees training bins");
        let mean = (span(left_lo, left_hi) + span(right_lo, right_hi)) / count as f64;
        let threshold = match cfg.kind {
            DetectorKind::CaCfar => cfg.scale_a * mean,
            DetectorKind::Bfar => cfg.scale_a * mean + cfg.offset_b,
        };
        if row[r] > threshold {
            let rho = scan.bin_center(r);
            out.push(Vector2::new(rho * cos, rho * sin));
        }
    }
    out
}

/// Runs the configured detector over every azimuth and returns the passing
/// cells as Cartesian points in the sensor frame. Azimuths are processed in
/// parallel; output order is azimuth-major, then range. The cloud carries no
/// prior weights.
pub fn detect(scan: &PolarScan, cfg: &DetectorConfig) -> Result<Cloud2> {
    cfg.validate()?;
    let window = 2 * (cfg.train_cells + cfg.guard_cells) + 1;
    if scan.num_range_bins() <= window {
        return Err(Error::Data(format!(
            "scan has {} range bins but the detector window covers {window}; \
             shrink train_cells/guard_cells or provide longer scans",
            scan.num_range_bins()
        )));
    }
    let per_azimuth: Vec<Vec<Vector2<f64>>> = (0..scan.num_azimuths())
        .into_par_iter()
        .map(|a| detect_row(scan.row(a), scan.azimuth_angles()[a], scan, cfg))
        .collect();
    Cloud2::new(per_azimuth.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_scan(a: usize, r: usize, level: f64) -> PolarScan {
        let azimuths: Vec<f64> = (0..a)
            .map(|i| i as f64 / a as f64 * std::f64::consts::TAU)
            .collect();
        PolarScan::new(azimuths, r, 0.5, vec![level; a * r]).unwrap()
    }

    fn noisy_scan(seed: u64, a: usize, r: usize) -> PolarScan {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let azimuths: Vec<f64> = (0..a)
            .map(|i| i as f64 / a as f64 * std::f64::consts::TAU)
            .collect();
        let intensities: Vec<f64> = (0..a * r).map(|_| rng.gen_range(0.0..4.0)).collect();
        PolarScan::new(azimuths, r, 0.5, intensities).unwrap()
    }

    fn bfar(a: f64, b: f64) -> DetectorConfig {
        DetectorConfig {
            kind: DetectorKind::Bfar,
            scale_a: a,
            offset_b: b,
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn uniform_scan_with_an_additive_floor_yields_no_detections() {
        let scan = uniform_scan(8, 64, 3.0);
        let cloud = detect(&scan, &bfar(1.0, 0.1)).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn single_impulse_is_detected_exactly_once() {
        // 1x64 scan, background 1, impulse 100 at bin 40: the impulse's own
        // training mean stays 1 (threshold 2*1 + 5 = 7), while bins that see
        // the impulse in training get thresholds far above background.
        let mut intensities = vec![1.0; 64];
        intensities[40] = 100.0;
        let scan = PolarScan::new(vec![0.0], 64, 0.5, intensities).unwrap();
        let cloud = detect(&scan, &bfar(2.0, 5.0)).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_abs_diff_eq!(cloud.point(0)[0], (40.0 + 0.5) * 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cloud.point(0)[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn detections_sit_at_bin_centers() {
        let mut intensities = vec![0.0; 64];
        intensities[10] = 50.0;
        let scan = PolarScan::new(vec![0.0], 64, 0.5, intensities).unwrap();
        let cloud = detect(&scan, &bfar(1.0, 0.5)).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.point(0)[0], 5.25);
        assert_eq!(cloud.point(0)[1], 0.0);
    }

    #[test]
    fn edge_truncation_means_match_hand_computation() {
        // R = 12, 2 training + 1 guard per side. At the left edge the window
        // has only its right half: training bins {2, 3}.
        let mut row = vec![1.0; 12];
        row[0] = 10.0;
        row[2] = 2.0;
        row[3] = 4.0;
        let scan = PolarScan::new(vec![0.0], 12, 1.0, row).unwrap();
        let cfg = DetectorConfig {
            kind: DetectorKind::CaCfar,
            train_cells: 2,
            guard_cells: 1,
            scale_a: 2.0,
            ..DetectorConfig::default()
        };
        // Z(0) = (2 + 4) / 2 = 3, threshold 6 < 10: detected.
        let cloud = detect(&scan, &cfg).unwrap();
        assert!(cloud
            .points()
            .iter()
            .any(|p| (p[0] - 0.5).abs() < 1e-12 && p[1].abs() < 1e-12));
        // Raising the factor to 4 lifts the threshold to 12 and removes it.
        let stricter = DetectorConfig {
            scale_a: 4.0,
            ..cfg
        };
        let cloud = detect(&scan, &stricter).unwrap();
        assert!(!cloud
            .points()
            .iter()
            .any(|p| (p[0] - 0.5).abs() < 1e-12 && p[1].abs() < 1e-12));
    }

    #[test]
    fn interior_training_mean_excludes_guards_and_cut() {
        // CUT at bin 6 with train 2, guard 1: training bins {3, 4, 8, 9}
        // sum to 11, so Z = 2.75 and the threshold 5.5 sits below the CUT's
        // 6.1. Folding the guards (4.0 each) into the mean would raise the
        // threshold to 19/3 > 6.1 and lose the detection.
        let mut row = vec![0.0; 14];
        row[3] = 1.0;
        row[4] = 2.0;
        row[8] = 3.0;
        row[9] = 5.0;
        row[5] = 4.0; // guard
        row[7] = 4.0; // guard
        row[6] = 6.1;
        let scan = PolarScan::new(vec![0.0], 14, 1.0, row).unwrap();
        let cfg = DetectorConfig {
            kind: DetectorKind::CaCfar,
            train_cells: 2,
            guard_cells: 1,
            scale_a: 2.0,
            ..DetectorConfig::default()
        };
        let cloud = detect(&scan, &cfg).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.point(0)[0], 6.5);
    }

    #[test]
    fn blind_zone_bins_are_never_tested() {
        let mut intensities = vec![0.0; 64];
        intensities[2] = 50.0;
        intensities[30] = 50.0;
        let scan = PolarScan::new(vec![0.0], 64, 1.0, intensities).unwrap();
        let mut cfg = bfar(1.0, 0.5);
        cfg.min_range_bin = 10;
        let cloud = detect(&scan, &cfg).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.point(0)[0], 30.5);
    }

    #[test]
    fn rotating_azimuth_labels_rotates_detections() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut intensities = vec![1.0; 6 * 64];
        for _ in 0..10 {
            let a = rng.gen_range(0..6);
            let r = rng.gen_range(8..60);
            intensities[a * 64 + r] = rng.gen_range(40.0..80.0);
        }
        let azimuths: Vec<f64> = (0..6).map(|i| i as f64 * 0.4).collect();
        let delta = 0.3;
        let rotated: Vec<f64> = azimuths.iter().map(|a| a + delta).collect();
        let scan = PolarScan::new(azimuths, 64, 0.5, intensities.clone()).unwrap();
        let turned = PolarScan::new(rotated, 64, 0.5, intensities).unwrap();
        let cfg = bfar(2.0, 1.0);
        let base = detect(&scan, &cfg).unwrap();
        let moved = detect(&turned, &cfg).unwrap();
        assert_eq!(base.len(), moved.len());
        assert!(!base.is_empty());
        let rot = crate::geometry::Se2::new(delta, 0.0, 0.0);
        for (p, q) in base.points().iter().zip(moved.points().iter()) {
            let expected = rot.apply(p);
            assert_abs_diff_eq!(expected[0], q[0], epsilon = 1e-9);
            assert_abs_diff_eq!(expected[1], q[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn raising_the_additive_floor_never_adds_detections() {
        let scan = noisy_scan(7, 5, 80);
        let mut last = usize::MAX;
        for b in [0.0, 0.2, 0.5, 1.0, 2.0, 5.0] {
            let count = detect(&scan, &bfar(1.2, b)).unwrap().len();
            assert!(
                count <= last,
                "b {b} produced {count} detections after {last}"
            );
            last = count;
        }
    }

    #[test]
    fn cell_averaging_equals_the_bounded_detector_without_a_floor() {
        let scan = noisy_scan(19, 4, 96);
        let ca = DetectorConfig {
            kind: DetectorKind::CaCfar,
            scale_a: 1.3,
            ..DetectorConfig::default()
        };
        let b0 = DetectorConfig {
            kind: DetectorKind::Bfar,
            scale_a: 1.3,
            offset_b: 0.0,
            ..DetectorConfig::default()
        };
        let a = detect(&scan, &ca).unwrap();
        let b = detect(&scan, &b0).unwrap();
        assert_eq!(a.points(), b.points());
        assert!(!a.is_empty());
    }

    #[test]
    fn parallel_detection_matches_a_serial_reference() {
        let scan = noisy_scan(11, 7, 70);
        let cfg = bfar(1.5, 0.3);
        let parallel = detect(&scan, &cfg).unwrap();
        let mut serial = Vec::new();
        for a in 0..scan.num_azimuths() {
            serial.extend(detect_row(
                scan.row(a),
                scan.azimuth_angles()[a],
                &scan,
                &cfg,
            ));
        }
        assert_eq!(parallel.points(), serial.as_slice());
        let again = detect(&scan, &cfg).unwrap();
        assert_eq!(parallel.points(), again.points());
    }

    #[test]
    fn undersized_scans_are_rejected() {
        let cfg = DetectorConfig {
            train_cells: 2,
            guard_cells: 1,
            ..DetectorConfig::default()
        };
        // Window is 2*(2+1)+1 = 7: a 7-bin scan leaves no cell with training
        // data on either side guaranteed, an 8-bin scan is the minimum.
        let short = uniform_scan(1, 7, 1.0);
        assert!(matches!(detect(&short, &cfg), Err(Error::Data(_))));
        let ok = uniform_scan(1, 8, 1.0);
        assert!(detect(&ok, &cfg).is_ok());
    }

    #[test]
    fn scan_validation_rejects_malformed_input() {
        // Decreasing azimuths.
        assert!(PolarScan::new(vec![0.5, 0.2], 4, 1.0, vec![0.0; 8]).is_err());
        // Azimuth at 2*pi.
        assert!(PolarScan::new(vec![0.0, std::f64::consts::TAU], 4, 1.0, vec![0.0; 8]).is_err());
        // Negative azimuth.
        assert!(PolarScan::new(vec![-0.1, 0.2], 4, 1.0, vec![0.0; 8]).is_err());
        // Negative intensity.
        assert!(PolarScan::new(vec![0.0], 4, 1.0, vec![1.0, -1.0, 0.0, 0.0]).is_err());
        // Non-finite intensity.
        assert!(PolarScan::new(vec![0.0], 4, 1.0, vec![1.0, f64::NAN, 0.0, 0.0]).is_err());
        // Intensity count mismatch.
        assert!(PolarScan::new(vec![0.0], 4, 1.0, vec![0.0; 5]).is_err());
        // Degenerate dimensions and resolution.
        assert!(PolarScan::new(vec![], 4, 1.0, vec![]).is_err());
        assert!(PolarScan::new(vec![0.0], 0, 1.0, vec![]).is_err());
        assert!(PolarScan::new(vec![0.0], 4, 0.0, vec![0.0; 4]).is_err());
    }

    #[test]
    fn detector_validation_rejects_bad_parameters() {
        let mut cfg = DetectorConfig::default();
        cfg.train_cells = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = DetectorConfig::default();
        cfg.scale_a = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = DetectorConfig::default();
        cfg.offset_b = -0.5;
        assert!(cfg.validate().is_err());
        assert!(DetectorConfig::default().validate().is_ok());
    }

    #[test]
    fn detector_config_roundtrips_through_json_with_defaults() {
        let cfg: DetectorConfig =
            serde_json::from_str(r#"{"kind":"ca_cfar","offset_b":0.25}"#).unwrap();
        assert_eq!(cfg.kind, DetectorKind::CaCfar);
        assert_eq!(cfg.offset_b, 0.25);
        assert_eq!(cfg.train_cells, 20);
        assert_eq!(cfg.guard_cells, 2);
        let json = serde_json::to_string(&cfg).unwrap();
        let back: DetectorConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }
}
