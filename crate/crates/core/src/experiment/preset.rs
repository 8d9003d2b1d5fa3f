use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::data::ImbalanceSpec;
use crate::loss::LossKind;
use crate::nn::OutputActivation;
use crate::train::{Architecture, ExperimentConfig, LossConfig};

pub const DEFAULT_RATIO_GRID: [f64; 6] = [0.005, 0.01, 0.02, 0.05, 0.1, 0.2];
pub const DEFAULT_BATCH_GRID: [f64; 6] = [8.0, 16.0, 32.0, 64.0, 128.0, 256.0];

/// One configuration of a plan, repeated over consecutive seeds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanEntry {
    /// Unique label within the plan.
    pub variant: String,
    /// Label shared by the points of one sweep curve; equals `variant` elsewhere.
    pub group: String,
    pub axis_value: Option<f64>,
    pub config: ExperimentConfig,
    /// Published F1 per source label, where one exists.
    pub reference: Vec<(usize, f64)>,
    pub expected_best: bool,
}

impl PlanEntry {
    fn new(variant: impl Into<String>, config: ExperimentConfig) -> Self {
        let variant = variant.into();
        Self {
            group: variant.clone(),
            variant,
            axis_value: None,
            config,
            reference: Vec::new(),
            expected_best: false,
        }
    }

    fn with_reference(mut self, reference: &[(usize, f64)]) -> Self {
        self.reference = reference.to_vec();
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Plan {
    pub name: String,
    pub repeats: usize,
    pub entries: Vec<PlanEntry>,
    /// Set for sweeps: the varied quantity.
    pub axis: Option<SweepAxis>,
}

impl Plan {
    /// A plan holding one configuration.
    pub fn single(
        name: &str,
        config: ExperimentConfig,
        repeats: usize,
    ) -> Result<Self, ExperimentError> {
        let plan = Plan {
            name: name.into(),
            repeats,
            entries: vec![PlanEntry::new(name, config)],
            axis: None,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Config of repeat `k` of entry `entry`.
    pub fn run_config(&self, entry: usize, k: usize) -> ExperimentConfig {
        let base = &self.entries[entry].config;
        ExperimentConfig {
            seed: base.seed.wrapping_add(k as u64),
            ..base.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.repeats == 0 {
            return Err(ExperimentError::Config("repeats must be at least 1".into()));
        }
        for e in &self.entries {
            e.config
                .validate()
                .map_err(|err| ExperimentError::Config(format!("{}: {err}", e.variant)))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ImbalanceRatio,
    BatchSize,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::ImbalanceRatio => "imbalance_ratio",
            SweepAxis::BatchSize => "batch_size",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ratio" | "imbalance_ratio" => Ok(SweepAxis::ImbalanceRatio),
            "batch" | "batch_size" => Ok(SweepAxis::BatchSize),
            other => Err(ExperimentError::Config(format!(
                "unknown sweep axis `{other}`"
            ))),
        }
    }
}

/// A base config varied along one axis, each point run with and without a
/// final batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub repeats: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.values.is_empty() {
            return bad("sweep needs at least one value".into());
        }
        if self.values.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("sweep values must be strictly increasing".into());
        }
        if self.axis == SweepAxis::BatchSize
            && self.values.iter().any(|v| v.fract() != 0.0 || *v < 2.0)
        {
            return bad("batch sizes must be integers of at least 2".into());
        }
        Ok(())
    }

    pub fn point(&self, value: f64, final_bn: bool) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            final_bn,
            strip_bn_at_inference: false,
            ..self.base.clone()
        };
        match self.axis {
            SweepAxis::ImbalanceRatio => cfg.imbalance.ratio = value,
            SweepAxis::BatchSize => cfg.batch_size = value as usize,
        }
        cfg
    }

    pub fn expand(&self, name: &str) -> Result<Plan, ExperimentError> {
        self.validate()?;
        let mut entries = Vec::new();
        for &v in &self.values {
            for (final_bn, group) in [(true, "final_bn"), (false, "no_final_bn")] {
                entries.push(PlanEntry {
                    variant: format!("{group}@{v}"),
                    group: group.into(),
                    axis_value: Some(v),
                    ..PlanEntry::new("", self.point(v, final_bn))
                });
            }
        }
        let plan = Plan {
            name: name.into(),
            repeats: self.repeats,
            entries,
            axis: Some(self.axis),
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    FcTable7,
    CnnTable4,
    SettingsTable6,
    StripBn,
    Calibration,
    RatioSweep,
    BatchSweep,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::FcTable7,
        Preset::CnnTable4,
        Preset::SettingsTable6,
        Preset::StripBn,
        Preset::Calibration,
        Preset::RatioSweep,
        Preset::BatchSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::FcTable7 => "fc-table7",
            Preset::CnnTable4 => "cnn-table4",
            Preset::SettingsTable6 => "settings-table6",
            Preset::StripBn => "strip-bn",
            Preset::Calibration => "calibration",
            Preset::RatioSweep => "ratio-sweep",
            Preset::BatchSweep => "batch-sweep",
        }
    }

    pub fn default_repeats(self) -> usize {
        match self {
            Preset::CnnTable4 => 10,
            Preset::RatioSweep | Preset::BatchSweep => 3,
            _ => 5,
        }
    }

    /// Expands the preset into concrete configurations.
    pub fn plan(self, opts: &PresetOptions) -> Result<Plan, ExperimentError> {
        let repeats = opts.repeats.unwrap_or(self.default_repeats());
        let entries = match self {
            Preset::FcTable7 => fc_table7(),
            Preset::CnnTable4 => cnn_table4(),
            Preset::SettingsTable6 => settings_table6(),
            Preset::StripBn => strip_bn(),
            Preset::Calibration => calibration(),
            Preset::RatioSweep | Preset::BatchSweep => {
                let (axis, grid) = if self == Preset::RatioSweep {
                    (SweepAxis::ImbalanceRatio, &DEFAULT_RATIO_GRID)
                } else {
                    (SweepAxis::BatchSize, &DEFAULT_BATCH_GRID)
                };
                let spec = SweepSpec {
                    base: opts.apply(fc_base()),
                    axis,
                    values: opts.values.clone().unwrap_or_else(|| grid.to_vec()),
                    repeats,
                };
                return spec.expand(self.name());
            }
        };
        let plan = Plan {
            name: self.name().into(),
            repeats,
            entries: entries
                .into_iter()
                .map(|e| PlanEntry {
                    config: opts.apply(e.config.clone()),
                    ..e
                })
                .collect(),
            axis: None,
        };
        plan.validate()?;
        Ok(plan)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ExperimentError::UnknownPreset(s.to_string()))
    }
}

/// Overrides applied to every configuration of a preset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PresetOptions {
    pub repeats: Option<usize>,
    pub epochs: Option<usize>,
    pub majority_count: Option<usize>,
    pub test_per_class: Option<usize>,
    pub seed: Option<u64>,
    /// Sweep grid override.
    pub values: Option<Vec<f64>>,
}

impl PresetOptions {
    fn apply(&self, mut cfg: ExperimentConfig) -> ExperimentConfig {
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(n) = self.majority_count {
            cfg.imbalance.majority_train_count = n;
        }
        if let Some(n) = self.test_per_class {
            cfg.imbalance.test_per_class = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg
    }
}

fn fc_base() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn fc_table7() -> Vec<PlanEntry> {
    use LossKind::{Bce, Cce};
    use OutputActivation::{Sigmoid, Softmax};
    // (output, loss, first BN, final BN, minority F1, majority F1)
    let rows = [
        (Sigmoid, Bce, false, false, 0.17, 0.67),
        (Softmax, Bce, false, false, 0.00, 0.67),
        (Softmax, Bce, true, false, 0.60, 0.78),
        (Softmax, Cce, false, false, 0.67, 0.80),
        (Sigmoid, Bce, false, true, 0.05, 0.67),
        (Softmax, Bce, false, true, 0.85, 0.88),
        (Softmax, Bce, true, true, 0.83, 0.87),
        (Softmax, Cce, false, true, 0.88, 0.90),
        (Softmax, Cce, true, true, 0.78, 0.85),
    ];
    rows.into_iter()
        .map(|(output, kind, first_bn, final_bn, minor, major)| {
            let mut variant = format!("{}-{}", output.name(), kind.name());
            if first_bn {
                variant.push_str("-first_bn");
            }
            if final_bn {
                variant.push_str("-final_bn");
            }
            let cfg = ExperimentConfig {
                output,
                first_bn,
                final_bn,
                loss: LossConfig {
                    kind,
                    ..LossConfig::default()
                },
                ..fc_base()
            };
            let mut e = PlanEntry::new(variant, cfg).with_reference(&[(3, minor), (8, major)]);
            e.expected_best = output == Softmax && kind == Cce && final_bn && !first_bn;
            e
        })
        .collect()
}

fn cnn_base() -> ExperimentConfig {
    ExperimentConfig {
        arch: Architecture::SimpleCnn,
        epochs: 20,
        ..ExperimentConfig::default()
    }
}

fn cnn_table4() -> Vec<PlanEntry> {
    let mut out = Vec::new();
    for ratio in [0.01, 0.1] {
        for (final_bn, tag, minor, major) in [
            (true, "final_bn", 0.9299, 0.9447),
            (false, "no_bn", 0.7378, 0.8354),
        ] {
            let mut cfg = cnn_base();
            cfg.final_bn = final_bn;
            cfg.imbalance.ratio = ratio;
            out.push(
                PlanEntry::new(format!("r{ratio}-{tag}"), cfg)
                    .with_reference(&[(3, minor), (8, major)]),
            );
        }
    }
    out
}

fn settings_table6() -> Vec<PlanEntry> {
    type Ref = &'static [(usize, f64)];
    // (name, majorities, minorities, without final BN, with final BN)
    let settings: [(&str, &[usize], &[usize], Ref, Ref); 5] = [
        (
            "s1",
            &[8],
            &[3],
            &[(3, 0.19), (8, 0.69)],
            &[(3, 0.55), (8, 0.76)],
        ),
        (
            "s2",
            &[8],
            &[2],
            &[(2, 0.25), (8, 0.70)],
            &[(2, 0.50), (8, 0.74)],
        ),
        (
            "s3",
            &[5],
            &[3],
            &[(3, 0.24), (5, 0.70)],
            &[(3, 0.54), (5, 0.76)],
        ),
        (
            "s4",
            &[5, 8],
            &[3],
            &[(3, 0.06), (5, 0.77), (8, 0.78)],
            &[(3, 0.00), (5, 0.77), (8, 0.78)],
        ),
        (
            "s5",
            &[8],
            &[3, 5],
            &[(3, 0.28), (5, 0.32), (8, 0.56)],
            &[(3, 0.58), (5, 0.59), (8, 0.69)],
        ),
    ];
    let mut out = Vec::new();
    for (name, majors, minors, without, with) in settings {
        for (final_bn, reference) in [(false, without), (true, with)] {
            let cfg = ExperimentConfig {
                final_bn,
                imbalance: ImbalanceSpec {
                    majority_classes: majors.to_vec(),
                    minority_classes: minors.to_vec(),
                    ..ImbalanceSpec::default()
                },
                ..cnn_base()
            };
            let tag = if final_bn { "final_bn" } else { "no_bn" };
            out.push(PlanEntry::new(format!("{name}-{tag}"), cfg).with_reference(reference));
        }
    }
    out
}

fn strip_bn() -> Vec<PlanEntry> {
    let with_bn = ExperimentConfig {
        final_bn: true,
        ..fc_base()
    };
    vec![
        PlanEntry::new("no_final_bn", fc_base()).with_reference(&[(3, 0.22), (8, 0.71)]),
        PlanEntry::new("final_bn", with_bn.clone()).with_reference(&[(3, 0.91), (8, 0.92)]),
        PlanEntry::new(
            "final_bn-stripped",
            ExperimentConfig {
                strip_bn_at_inference: true,
                ..with_bn
            },
        )
        .with_reference(&[(3, 0.83), (8, 0.74)]),
    ]
}

fn calibration() -> Vec<PlanEntry> {
    vec![
        PlanEntry::new("no_final_bn", fc_base()),
        PlanEntry::new(
            "final_bn",
            ExperimentConfig {
                final_bn: true,
                ..fc_base()
            },
        ),
    ]
}
