//! Session configuration: TOML with one table per module, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use splat4d::gaussian::DensifyConfig;
use splat4d::mapper::{Components, LearningRates, LossConfig, MapperConfig};
use splat4d::scaffold::NodeInitConfig;
use splat4d::tracker::{DbaConfig, KeyframeConfig, DEFAULT_EDGE_RADIUS, DEFAULT_FLOW_THRESH, DEFAULT_OVERLAP_THRESH, DEFAULT_STRIDE};
use splat4d::uncertainty::{DEFAULT_DELTA_RU, DEFAULT_DELTA_U, DEFAULT_LAMBDA_REG, DEFAULT_PROMPTS};

use crate::error::{read_to_string, CliError, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub session: SessionSection,
    pub tracking: TrackingSection,
    pub uncertainty: UncertaintySection,
    pub mapping: MappingSection,
    pub learning_rates: LearningRateSection,
    pub exposure: ExposureSection,
    pub densify: DensifySection,
    pub scaffold: ScaffoldSection,
    pub components: ComponentsSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionSection {
    pub seed: u64,
    /// Dataset the session was tracked from.
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingSection {
    pub stride: usize,
    pub flow_thresh: f64,
    pub overlap_thresh: f64,
    pub edge_radius: usize,
    pub max_iterations: usize,
    pub pose_tolerance: f64,
    pub lambda_init: f64,
    pub depth_prior_weight: f64,
    pub use_uncertainty: bool,
    /// Standard deviation of the flow noise, pixels.
    pub flow_noise: f64,
    /// Variance reported with each flow sample, pixels².
    pub flow_variance: f64,
    /// Magnitude of the flow corruption on dynamic pixels, pixels.
    pub outlier_px: f64,
    /// Re-solve poses with the trained uncertainty once the static phase ends.
    pub refine_after_static: bool,
}

impl Default for TrackingSection {
    fn default() -> Self {
        let d = DbaConfig::default();
        Self {
            stride: DEFAULT_STRIDE,
            flow_thresh: DEFAULT_FLOW_THRESH,
            overlap_thresh: DEFAULT_OVERLAP_THRESH,
            edge_radius: DEFAULT_EDGE_RADIUS,
            max_iterations: d.max_iterations,
            pose_tolerance: d.pose_tolerance,
            lambda_init: d.lambda_init,
            depth_prior_weight: d.depth_prior_weight,
            use_uncertainty: d.use_uncertainty,
            flow_noise: 0.0,
            flow_variance: 1.0,
            outlier_px: 10.0,
            refine_after_static: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmenterKind {
    Oracle,
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UncertaintySection {
    pub delta_u: f64,
    pub delta_ru: f64,
    pub lambda_reg: f64,
    pub lambda1_u: f64,
    pub prompts: usize,
    pub segmenter: SegmenterKind,
    /// Half size of the boxes the noisy segmenter returns for stray prompts.
    pub noisy_box: usize,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        Self {
            delta_u: DEFAULT_DELTA_U,
            delta_ru: DEFAULT_DELTA_RU,
            lambda_reg: DEFAULT_LAMBDA_REG,
            lambda1_u: LossConfig::default().lambda1_u,
            prompts: DEFAULT_PROMPTS,
            segmenter: SegmenterKind::Oracle,
            noisy_box: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingSection {
    pub phase_a_iterations: usize,
    pub phase_b_iterations: usize,
    pub interleave_every: usize,
    pub densify_every: usize,
    pub refine_poses: bool,
    pub static_seed_stride: usize,
    pub dynamic_seed_stride: usize,
    pub initial_opacity: f64,
    pub aow_init: f64,
    pub surface_tolerance: f64,
    pub free_space_tolerance: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub arap: f64,
    pub aow_smooth: f64,
    /// Standard deviation of noise added to the 2D tracks, pixels.
    pub track_noise: f64,
}

impl Default for MappingSection {
    fn default() -> Self {
        let m = MapperConfig::default();
        Self {
            phase_a_iterations: m.phase_a_iterations,
            phase_b_iterations: m.phase_b_iterations,
            interleave_every: m.interleave_every,
            densify_every: m.densify_every,
            refine_poses: m.refine_poses,
            static_seed_stride: m.static_seed_stride,
            dynamic_seed_stride: m.dynamic_seed_stride,
            initial_opacity: m.initial_opacity,
            aow_init: m.aow_init,
            surface_tolerance: m.surface_tolerance,
            free_space_tolerance: m.free_space_tolerance,
            lambda1: m.loss.lambda1,
            lambda2: m.loss.lambda2,
            velocity: m.loss.velocity,
            acceleration: m.loss.acceleration,
            arap: m.loss.arap,
            aow_smooth: m.loss.aow_smooth,
            track_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRateSection {
    pub mean: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub scaffold: f64,
    pub aow: f64,
    pub exposure: f64,
    pub pose: f64,
    pub uncertainty: f64,
}

impl Default for LearningRateSection {
    fn default() -> Self {
        let l = LearningRates::default();
        Self {
            mean: l.mean,
            rotation: l.rotation,
            log_scale: l.log_scale,
            opacity: l.opacity,
            color: l.color,
            scaffold: l.scaffold,
            aow: l.aow,
            exposure: l.exposure,
            pose: l.pose,
            uncertainty: l.uncertainty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExposureSection {
    pub rot_step: f64,
    pub trans_step: f64,
    pub max_samples: usize,
}

impl Default for ExposureSection {
    fn default() -> Self {
        let m = MapperConfig::default();
        Self {
            rot_step: m.exposure_rot_step,
            trans_step: m.exposure_trans_step,
            max_samples: m.exposure_max_samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifySection {
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    pub percent_dense: f64,
    pub split_scale_divisor: f64,
}

impl Default for DensifySection {
    fn default() -> Self {
        let d = DensifyConfig::default();
        Self {
            grad_threshold: d.grad_threshold,
            prune_opacity: d.prune_opacity,
            percent_dense: d.percent_dense,
            split_scale_divisor: d.split_scale_divisor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaffoldSection {
    pub neighbor_count: usize,
    pub max_nodes: usize,
    pub default_radius: f64,
    pub min_radius: f64,
}

impl Default for ScaffoldSection {
    fn default() -> Self {
        let n = NodeInitConfig::default();
        Self {
            neighbor_count: n.neighbor_count,
            max_nodes: n.max_nodes,
            default_radius: n.default_radius,
            min_radius: n.min_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComponentsSection {
    pub ir: bool,
    pub aow: bool,
    pub rum: bool,
}

impl Default for ComponentsSection {
    fn default() -> Self {
        let c = Components::default();
        Self {
            ir: c.ir,
            aow: c.aow,
            rum: c.rum,
        }
    }
}

fn invalid(m: impl Into<String>) -> CliError {
    CliError::InvalidConfig(m.into())
}

impl SessionConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: SessionConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `section.key=value`. The value is read as a TOML literal and
    /// falls back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| invalid(format!("`{assignment}` is not of the form section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| invalid(format!("`{}` is not of the form section.key", path.trim())))?;
        let mut root = toml::Table::try_from(&*self).expect("config serializes");
        let table = root
            .get_mut(section)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| invalid(format!("unknown section `{section}`")))?;
        let current = table.get(key).ok_or_else(|| invalid(format!("unknown key `{section}.{key}`")))?;
        let raw = raw.trim();
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let value = match (current, parsed) {
            (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(key.to_string(), value);
        let cfg: SessionConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| invalid(format!("{section}.{key}: {}", e.message())))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.tracking;
        if t.stride == 0 {
            return Err(invalid("tracking.stride must be positive"));
        }
        for (name, v) in [
            ("tracking.flow_thresh", t.flow_thresh),
            ("tracking.pose_tolerance", t.pose_tolerance),
            ("tracking.lambda_init", t.lambda_init),
            ("tracking.flow_variance", t.flow_variance),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("tracking.depth_prior_weight", t.depth_prior_weight),
            ("tracking.flow_noise", t.flow_noise),
            ("tracking.outlier_px", t.outlier_px),
            ("mapping.track_noise", self.mapping.track_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&t.overlap_thresh) {
            return Err(invalid("tracking.overlap_thresh must lie in [0, 1]"));
        }
        let u = &self.uncertainty;
        if !(u.delta_u > 0.0 && u.delta_u.is_finite()) {
            return Err(invalid("uncertainty.delta_u must be positive"));
        }
        if !(0.0..=1.0).contains(&u.delta_ru) {
            return Err(invalid("uncertainty.delta_ru must lie in [0, 1]"));
        }
        let lr = &self.learning_rates;
        let rates = [
            lr.mean, lr.rotation, lr.log_scale, lr.opacity, lr.color, lr.scaffold, lr.aow, lr.exposure, lr.pose, lr.uncertainty,
        ];
        if rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(invalid("learning rates must be finite and non-negative"));
        }
        let d = &self.densify;
        if !(d.grad_threshold > 0.0 && d.percent_dense > 0.0 && d.split_scale_divisor > 1.0 && (0.0..1.0).contains(&d.prune_opacity)) {
            return Err(invalid("densify thresholds are out of range"));
        }
        let s = &self.scaffold;
        if s.max_nodes == 0 || !(s.default_radius > 0.0 && s.min_radius > 0.0) {
            return Err(invalid("scaffold needs max_nodes > 0 and positive radii"));
        }
        self.mapper_config().validate().map_err(|e| invalid(e.to_string()))
    }

    pub fn mapper_config(&self) -> MapperConfig {
        let m = &self.mapping;
        let u = &self.uncertainty;
        let lr = &self.learning_rates;
        let d = &self.densify;
        let s = &self.scaffold;
        let c = &self.components;
        MapperConfig {
            loss: LossConfig {
                lambda1: m.lambda1,
                lambda2: m.lambda2,
                lambda1_u: u.lambda1_u,
                lambda_reg: u.lambda_reg,
                velocity: m.velocity,
                acceleration: m.acceleration,
                arap: m.arap,
                aow_smooth: m.aow_smooth,
            },
            lr: LearningRates {
                mean: lr.mean,
                rotation: lr.rotation,
                log_scale: lr.log_scale,
                opacity: lr.opacity,
                color: lr.color,
                scaffold: lr.scaffold,
                aow: lr.aow,
                exposure: lr.exposure,
                pose: lr.pose,
                uncertainty: lr.uncertainty,
            },
            components: Components {
                ir: c.ir,
                aow: c.aow,
                rum: c.rum,
            },
            phase_a_iterations: m.phase_a_iterations,
            phase_b_iterations: m.phase_b_iterations,
            interleave_every: m.interleave_every,
            densify_every: m.densify_every,
            densify: DensifyConfig {
                grad_threshold: d.grad_threshold,
                prune_opacity: d.prune_opacity,
                percent_dense: d.percent_dense,
                split_scale_divisor: d.split_scale_divisor,
                scene_extent: 1.0,
                seed: self.session.seed,
            },
            seed: self.session.seed,
            refine_poses: m.refine_poses,
            static_seed_stride: m.static_seed_stride,
            dynamic_seed_stride: m.dynamic_seed_stride,
            initial_opacity: m.initial_opacity,
            aow_init: m.aow_init,
            surface_tolerance: m.surface_tolerance,
            free_space_tolerance: m.free_space_tolerance,
            delta_u: u.delta_u,
            delta_ru: u.delta_ru,
            prompts: u.prompts,
            node_init: NodeInitConfig {
                neighbor_count: s.neighbor_count,
                max_nodes: s.max_nodes,
                default_radius: s.default_radius,
                min_radius: s.min_radius,
            },
            exposure_rot_step: self.exposure.rot_step,
            exposure_trans_step: self.exposure.trans_step,
            exposure_max_samples: self.exposure.max_samples,
        }
    }

    pub fn dba_config(&self) -> DbaConfig {
        let t = &self.tracking;
        DbaConfig {
            stride: t.stride,
            max_iterations: t.max_iterations,
            pose_tolerance: t.pose_tolerance,
            lambda_init: t.lambda_init,
            depth_prior_weight: t.depth_prior_weight,
            use_uncertainty: t.use_uncertainty,
        }
    }

    pub fn keyframe_config(&self) -> KeyframeConfig {
        KeyframeConfig {
            flow_thresh: self.tracking.flow_thresh,
            overlap_thresh: self.tracking.overlap_thresh,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_thresholds() {
        let cfg = SessionConfig::parse("").unwrap();
        assert_eq!(cfg.uncertainty.delta_u, 3.5);
        assert_eq!(cfg.uncertainty.delta_ru, 0.2);
        assert_eq!(cfg, SessionConfig::default());
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(matches!(SessionConfig::parse("[tracking]\nstrid = 2\n"), Err(CliError::InvalidConfig(_))));
        assert!(matches!(SessionConfig::parse("[nope]\nx = 1\n"), Err(CliError::InvalidConfig(_))));
        let mut cfg = SessionConfig::default();
        assert!(cfg.set("tracking.bogus=1").is_err());
        assert!(cfg.set("bogus.stride=1").is_err());
        assert!(cfg.set("stride=1").is_err());
    }

    #[test]
    fn overrides_are_typed_and_validated() {
        let mut cfg = SessionConfig::default();
        cfg.set("uncertainty.delta_u=4").unwrap();
        assert_eq!(cfg.uncertainty.delta_u, 4.0);
        cfg.set("components.aow = false").unwrap();
        assert!(!cfg.components.aow);
        cfg.set("uncertainty.segmenter=noisy").unwrap();
        assert_eq!(cfg.uncertainty.segmenter, SegmenterKind::Noisy);
        cfg.set("session.dataset=/tmp/x").unwrap();
        assert_eq!(cfg.session.dataset, "/tmp/x");
        assert!(cfg.set("uncertainty.delta_ru=1.5").is_err());
        assert!(cfg.set("tracking.stride=abc").is_err());
        assert_eq!(cfg.uncertainty.delta_ru, 0.2);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = SessionConfig::default();
        cfg.set("tracking.pose_tolerance=3e-7").unwrap();
        cfg.set("session.seed=11").unwrap();
        assert_eq!(SessionConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
