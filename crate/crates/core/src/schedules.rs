//! Learning-rate schedules: linear warmup, constant stable phase and a
//! family of cooldown shapes, composed into warmup-stable-decay (WSD),
//! cosine and linear-decay schedules.
//!
//! Step indexing: update number `s` (1-based, `1..=total_steps`) is taken
//! with `lr_at(s)`. Step 0 is the initial point, so `lr_at(0) = 0` during
//! warmup and the final update uses cooldown fraction `x = 1`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multiplier curve applied to the peak learning rate during cooldown.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CooldownShape {
    Linear,
    Cosine,
    MirrorCosine,
    Square,
    Sqrt,
    /// Linear decay starting at `alpha * peak_lr` instead of `peak_lr`.
    LoweredLinear { alpha: f64 },
}

impl CooldownShape {
    /// The non-parametric shapes plus `lowered_linear` at the given alphas.
    pub fn family(alphas: &[f64]) -> Vec<CooldownShape> {
        let mut v = vec![
            CooldownShape::Linear,
            CooldownShape::Cosine,
            CooldownShape::MirrorCosine,
            CooldownShape::Square,
            CooldownShape::Sqrt,
        ];
        v.extend(alphas.iter().map(|&alpha| CooldownShape::LoweredLinear { alpha }));
        v
    }

    pub fn lowered_linear(alpha: f64) -> Result<Self> {
        let s = CooldownShape::LoweredLinear { alpha };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if let CooldownShape::LoweredLinear { alpha } = *self {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(Error::Domain {
                    value: alpha,
                    domain: "lowered_linear alpha in (0, 1]",
                });
            }
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            CooldownShape::Linear => "linear",
            CooldownShape::Cosine => "cosine",
            CooldownShape::MirrorCosine => "mirror_cosine",
            CooldownShape::Square => "square",
            CooldownShape::Sqrt => "sqrt",
            CooldownShape::LoweredLinear { .. } => "lowered_linear",
        }
    }

    /// `alpha` for lowered linear, `1.0` for every other shape.
    pub fn alpha(&self) -> f64 {
        match *self {
            CooldownShape::LoweredLinear { alpha } => alpha,
            _ => 1.0,
        }
    }

    /// Evaluate the shape at cooldown fraction `x`.
    pub fn value(&self, x: f64) -> Result<f64> {
        shape_value(*self, x)
    }
}

/// Closed-form cooldown multiplier at fraction `x ∈ [0, 1]`.
pub fn shape_value(shape: CooldownShape, x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain {
            value: x,
            domain: "cooldown fraction [0, 1]",
        });
    }
    shape.validate()?;
    // f(1) = 0 exactly, independent of libm rounding in cos/sqrt.
    if x == 1.0 {
        return Ok(0.0);
    }
    let cosine = |x: f64| (1.0 + (PI * x).cos()) / 2.0;
    Ok(match shape {
        CooldownShape::Linear => 1.0 - x,
        CooldownShape::Cosine => cosine(x),
        CooldownShape::MirrorCosine => 2.0 * (1.0 - x) - cosine(x),
        CooldownShape::Square => 1.0 - x * x,
        CooldownShape::Sqrt => 1.0 - x.sqrt(),
        CooldownShape::LoweredLinear { alpha } => alpha * (1.0 - x),
    })
}

impl fmt::Display for CooldownShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CooldownShape::LoweredLinear { alpha } => write!(f, "lowered_linear:{alpha}"),
            other => f.write_str(other.kind_name()),
        }
    }
}

impl FromStr for CooldownShape {
    type Err = Error;

    /// Accepts `linear`, `cosine`, `mirror_cosine`, `square`, `sqrt` and
    /// `lowered_linear:<alpha>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let shape = match s {
            "linear" => CooldownShape::Linear,
            "cosine" => CooldownShape::Cosine,
            "mirror_cosine" => CooldownShape::MirrorCosine,
            "square" => CooldownShape::Square,
            "sqrt" => CooldownShape::Sqrt,
            _ => {
                let alpha = s
                    .strip_prefix("lowered_linear:")
                    .ok_or_else(|| Error::Config(format!("unknown cooldown shape `{s}`")))?;
                let alpha: f64 = alpha
                    .parse()
                    .map_err(|_| Error::Config(format!("bad lowered_linear alpha in `{s}`")))?;
                CooldownShape::LoweredLinear { alpha }
            }
        };
        shape.validate()?;
        Ok(shape)
    }
}

impl Serialize for CooldownShape {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CooldownShape {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Wsd,
    Cosine,
    LinearDecay,
}

/// A piecewise learning-rate function of the step index.
///
/// For `cosine` and `linear_decay` the decay spans every post-warmup step
/// (`stable_steps + cooldown_steps`) and `shape` is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleFile", into = "ScheduleFile")]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub stable_steps: u64,
    pub cooldown_steps: u64,
    pub shape: CooldownShape,
}

/// On-disk form: `{kind, shape, alpha, warmup_steps, stable_steps,
/// cooldown_steps, peak_lr}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFile {
    kind: ScheduleKind,
    #[serde(default = "default_shape_name")]
    shape: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    warmup_steps: u64,
    stable_steps: u64,
    cooldown_steps: u64,
    peak_lr: f64,
}

fn default_shape_name() -> String {
    "linear".into()
}

impl TryFrom<ScheduleFile> for ScheduleSpec {
    type Error = Error;

    fn try_from(f: ScheduleFile) -> Result<Self> {
        let shape = match (f.shape.as_str(), f.alpha) {
            ("lowered_linear", Some(alpha)) => CooldownShape::lowered_linear(alpha)?,
            ("lowered_linear", None) => {
                return Err(Error::Config("lowered_linear requires `alpha`".into()))
            }
            (name, Some(_)) if !name.starts_with("lowered_linear") => {
                return Err(Error::Config(format!("`alpha` is only valid for lowered_linear, not `{name}`")))
            }
            (name, _) => name.parse()?,
        };
        let spec = ScheduleSpec {
            kind: f.kind,
            peak_lr: f.peak_lr,
            warmup_steps: f.warmup_steps,
            stable_steps: f.stable_steps,
            cooldown_steps: f.cooldown_steps,
            shape,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<ScheduleSpec> for ScheduleFile {
    fn from(s: ScheduleSpec) -> Self {
        let alpha = match s.shape {
            CooldownShape::LoweredLinear { alpha } => Some(alpha),
            _ => None,
        };
        ScheduleFile {
            kind: s.kind,
            shape: s.shape.kind_name().to_string(),
            alpha,
            warmup_steps: s.warmup_steps,
            stable_steps: s.stable_steps,
            cooldown_steps: s.cooldown_steps,
            peak_lr: s.peak_lr,
        }
    }
}

impl ScheduleSpec {
    pub fn wsd(
        peak_lr: f64,
        warmup_steps: u64,
        stable_steps: u64,
        cooldown_steps: u64,
        shape: CooldownShape,
    ) -> Result<Self> {
        let spec = ScheduleSpec {
            kind: ScheduleKind::Wsd,
            peak_lr,
            warmup_steps,
            stable_steps,
            cooldown_steps,
            shape,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Warmup followed by a half-period cosine to zero over `decay_steps`.
    pub fn cosine(peak_lr: f64, warmup_steps: u64, decay_steps: u64) -> Result<Self> {
        let spec = ScheduleSpec {
            kind: ScheduleKind::Cosine,
            peak_lr,
            warmup_steps,
            stable_steps: 0,
            cooldown_steps: decay_steps,
            shape: CooldownShape::Cosine,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn linear_decay(peak_lr: f64, warmup_steps: u64, decay_steps: u64) -> Result<Self> {
        let spec = ScheduleSpec {
            kind: ScheduleKind::LinearDecay,
            peak_lr,
            warmup_steps,
            stable_steps: 0,
            cooldown_steps: decay_steps,
            shape: CooldownShape::Linear,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Domain {
                value: self.peak_lr,
                domain: "peak_lr > 0",
            });
        }
        if self.total_steps() == 0 {
            return Err(Error::Config("schedule has zero total steps".into()));
        }
        self.shape.validate()
    }

    pub fn total_steps(&self) -> u64 {
        self.warmup_steps + self.stable_steps + self.cooldown_steps
    }

    /// First step of the cooldown phase (the last step at stable lr).
    pub fn cooldown_start(&self) -> u64 {
        self.warmup_steps + self.stable_steps
    }

    /// Learning rate used by update number `step`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        let total = self.total_steps();
        if step > total {
            return Err(Error::Domain {
                value: step as f64,
                domain: "step in [0, total_steps]",
            });
        }
        let peak = self.peak_lr;
        if step < self.warmup_steps {
            return Ok(peak * step as f64 / self.warmup_steps as f64);
        }
        let (decay_start, decay_len) = match self.kind {
            ScheduleKind::Wsd => (self.cooldown_start(), self.cooldown_steps),
            ScheduleKind::Cosine | ScheduleKind::LinearDecay => {
                (self.warmup_steps, total - self.warmup_steps)
            }
        };
        if step <= decay_start || decay_len == 0 {
            return Ok(peak);
        }
        let x = (step - decay_start) as f64 / decay_len as f64;
        let m = match self.kind {
            ScheduleKind::Wsd => shape_value(self.shape, x)?,
            ScheduleKind::Cosine => shape_value(CooldownShape::Cosine, x)?,
            ScheduleKind::LinearDecay => shape_value(CooldownShape::Linear, x)?,
        };
        Ok(peak * m)
    }

    /// `(step, lr)` for every step in `0..=total_steps`.
    pub fn curve(&self) -> Vec<(u64, f64)> {
        (0..=self.total_steps())
            .map(|s| (s, self.lr_at(s).expect("step within range")))
            .collect()
    }

    /// CSV with header `step,lr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr\n");
        for (s, lr) in self.curve() {
            out.push_str(&format!("{s},{lr}\n"));
        }
        out
    }

    /// Same run length, but constant lr after warmup: the no-cooldown
    /// control for a WSD run.
    pub fn constant_continuation(&self) -> ScheduleSpec {
        ScheduleSpec {
            kind: ScheduleKind::Wsd,
            stable_steps: self.stable_steps + self.cooldown_steps,
            cooldown_steps: 0,
            ..*self
        }
    }

    /// Same shape but with a different cooldown curve.
    pub fn with_shape(&self, shape: CooldownShape) -> ScheduleSpec {
        ScheduleSpec { shape, ..*self }
    }
}

/// The cosine schedule with the same peak, warmup and total length as
/// `spec`.
pub fn cosine_baseline(spec: &ScheduleSpec) -> Result<ScheduleSpec> {
    ScheduleSpec::cosine(spec.peak_lr, spec.warmup_steps, spec.total_steps() - spec.warmup_steps)
}
