//! Run-wide tunables. Every field has a default, and a JSON file with any
//! subset of the fields can override them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rectification::{KeypointTransport, RectifyConfig};
use crate::segmentation::{HistogramParams, OrthogonalParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringMode {
    #[default]
    Orthogonal,
    Histogram,
}

impl std::str::FromStr for ClusteringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthogonal" => Ok(Self::Orthogonal),
            "histogram" => Ok(Self::Histogram),
            other => Err(Error::InvalidConfig(format!("unknown clustering mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub normal_window: usize,
    /// Widest window tried when the depth is too noisy for `normal_window`.
    pub normal_window_max: usize,
    /// Median plane-fit uncertainty, in degrees, above which the window is
    /// widened.
    pub normal_uncertainty_deg: f64,
    /// Number of dominant directions kept for patch extraction.
    pub clusters: usize,
    pub theta_assign_deg: f64,
    pub glancing_max_deg: f64,
    pub min_patch_frac: f64,
    pub max_output_dim: usize,
    pub ratio: f64,
    pub homography_inlier_px: f64,
    pub sampson_px: f64,
    pub success_deg: f64,
    pub seed: u64,
    pub clustering: ClusteringMode,
    pub extractor: String,

    pub cluster_max_iters: usize,
    pub cluster_stride: usize,
    pub hist_bins: usize,
    pub hist_threshold_frac: f64,
    pub hist_nms_deg: f64,
    pub plane_refit: bool,
    pub keypoint_transport: KeypointTransport,
    pub max_features: usize,
    pub mutual: bool,
    pub ransac_confidence: f64,
    pub ransac_max_iters: usize,
    pub ground_gate_deg: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            normal_window: 5,
            normal_window_max: 25,
            normal_uncertainty_deg: 1.0,
            clusters: 3,
            theta_assign_deg: 30.0,
            glancing_max_deg: 80.0,
            min_patch_frac: 0.005,
            max_output_dim: 4096,
            ratio: 0.8,
            homography_inlier_px: 10.0,
            sampson_px: 2.0,
            success_deg: 5.0,
            seed: 0,
            clustering: ClusteringMode::Orthogonal,
            extractor: "reference".to_string(),
            cluster_max_iters: 50,
            cluster_stride: 2,
            hist_bins: 200,
            hist_threshold_frac: 0.02,
            hist_nms_deg: 20.0,
            plane_refit: true,
            keypoint_transport: KeypointTransport::Full,
            max_features: 800,
            mutual: false,
            ransac_confidence: 0.999,
            ransac_max_iters: 10_000,
            ground_gate_deg: 25.0,
        }
    }
}

fn check_angle(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v <= 90.0) {
        return Err(Error::InvalidConfig(format!(
            "{name} must be in (0, 90] degrees, got {v}"
        )));
    }
    Ok(())
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidConfig(format!("{name} must be in (0, 1), got {v}")));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check_angle("theta_assign_deg", self.theta_assign_deg)?;
        check_angle("glancing_max_deg", self.glancing_max_deg)?;
        check_angle("success_deg", self.success_deg)?;
        check_angle("hist_nms_deg", self.hist_nms_deg)?;
        check_angle("ground_gate_deg", self.ground_gate_deg)?;
        check_fraction("min_patch_frac", self.min_patch_frac)?;
        check_fraction("ratio", self.ratio)?;
        check_fraction("hist_threshold_frac", self.hist_threshold_frac)?;
        check_fraction("ransac_confidence", self.ransac_confidence)?;
        check_positive("homography_inlier_px", self.homography_inlier_px)?;
        check_positive("sampson_px", self.sampson_px)?;
        if self.normal_window < 3 || self.normal_window.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "normal_window must be odd and >= 3, got {}",
                self.normal_window
            )));
        }
        if self.normal_window_max < self.normal_window || self.normal_window_max.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "normal_window_max must be odd and >= normal_window, got {}",
                self.normal_window_max
            )));
        }
        check_positive("normal_uncertainty_deg", self.normal_uncertainty_deg)?;
        if !(1..=3).contains(&self.clusters) {
            return Err(Error::InvalidConfig(format!(
                "clusters must be 1, 2 or 3, got {}",
                self.clusters
            )));
        }
        for (name, v) in [
            ("max_output_dim", self.max_output_dim),
            ("cluster_max_iters", self.cluster_max_iters),
            ("cluster_stride", self.cluster_stride),
            ("hist_bins", self.hist_bins),
            ("max_features", self.max_features),
            ("ransac_max_iters", self.ransac_max_iters),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn rectify_config(&self) -> RectifyConfig {
        RectifyConfig {
            normal_window: self.normal_window,
            normal_window_max: self.normal_window_max,
            normal_uncertainty_deg: self.normal_uncertainty_deg,
            clustering: self.clustering,
            max_axes: self.clusters,
            orthogonal: OrthogonalParams {
                theta_assign_deg: self.theta_assign_deg,
                max_iters: self.cluster_max_iters,
                stride: self.cluster_stride,
            },
            histogram: HistogramParams {
                bins: self.hist_bins,
                threshold_frac: self.hist_threshold_frac,
                nms_radius_deg: self.hist_nms_deg,
                theta_assign_deg: self.theta_assign_deg,
                stride: self.cluster_stride,
            },
            min_patch_frac: self.min_patch_frac,
            glancing_max_deg: self.glancing_max_deg,
            max_output_dim: self.max_output_dim,
            plane_refit: self.plane_refit,
            axis_filter: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_override_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"ratio": 0.7, "clustering": "histogram"}"#).unwrap();
        assert_eq!(c.ratio, 0.7);
        assert_eq!(c.clustering, ClusteringMode::Histogram);
        assert_eq!(c.normal_window, 5);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let bad = [
            RunConfig {
                glancing_max_deg: 95.0,
                ..Default::default()
            },
            RunConfig {
                ratio: 1.0,
                ..Default::default()
            },
            RunConfig {
                normal_window: 4,
                ..Default::default()
            },
            RunConfig {
                max_output_dim: 0,
                ..Default::default()
            },
            RunConfig {
                clusters: 4,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        }
    }
}
