//! Experiment manifests.
//!
//! A manifest is a TOML file with a `version` header. Unknown keys are
//! rejected everywhere so a typo in a sweep axis fails loudly.
//!
//! ```toml
//! version = 1
//! name = "desk"
//!
//! [corpus]
//! synthetic = { seed = 7, bytes = 600000 }
//!
//! [schedule]
//! kind = "wsd"
//! shape = "linear"
//! warmup_steps = 300
//! stable_steps = 2700
//! cooldown_steps = 750
//! peak_lr = 0.003
//!
//! [sweep]
//! shapes = ["linear", "sqrt", "square"]
//! alphas = [0.1, 0.4, 0.7]
//! seeds = [1, 2, 3, 4, 5]
//!
//! [reference]
//! seeds = [101, 102, 103, 104, 105]
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cooldown_lab::analysis::Space;
use cooldown_lab::data::{load_corpus, synthetic_text, ByteTokenizer, DataConfig, TokenCorpus};
use cooldown_lab::landscape::GridSpec;
use cooldown_lab::model::{ModelConfig, ProbeConfig};
use cooldown_lab::optimizer::{LrScaleRule, OptimizerConfig};
use cooldown_lab::schedules::{CooldownShape, ScheduleKind, ScheduleSpec};
use serde::{Deserialize, Serialize};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub name: String,
    /// Artifact directory, relative to the output root unless absolute.
    /// Defaults to `name`.
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub base: BaseSpec,
    #[serde(default)]
    pub control: Option<ControlSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub reference: Option<ReferenceSpec>,
    #[serde(default)]
    pub soup: Option<SoupSpec>,
    #[serde(default)]
    pub batch_sweep: Option<BatchSweepSpec>,
    #[serde(default)]
    pub beta_sweep: Option<BetaSweepSpec>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub landscape: Option<LandscapeSpec>,
    #[serde(default)]
    pub probe: Option<ProbeSpec>,
}

/// Either a file or directory of text (or a pre-tokenized file), or a
/// generated synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "byte")]
    pub tokenizer: String,
}

fn byte() -> String {
    "byte".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseSpec {
    pub init_seed: u64,
    pub order_seed: u64,
    /// Validation interval in steps for every run (0: end only).
    pub eval_every: u64,
    /// Trailing window for grad-norm and alignment exports.
    pub dynamics_window: usize,
}

impl Default for BaseSpec {
    fn default() -> Self {
        BaseSpec {
            init_seed: 0,
            order_seed: 0,
            eval_every: 100,
            dynamics_window: 40,
        }
    }
}

/// Cooldown versus constant-lr continuation pairs, one per order seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub shapes: Vec<CooldownShape>,
    /// Each alpha adds a `lowered_linear` shape.
    #[serde(default)]
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    /// Shapes in sweep order, alphas first, duplicates removed.
    pub fn all_shapes(&self) -> Result<Vec<CooldownShape>> {
        let mut out: Vec<CooldownShape> = Vec::new();
        for a in &self.alphas {
            let s = CooldownShape::lowered_linear(*a)?;
            if !out.contains(&s) {
                out.push(s);
            }
        }
        for s in &self.shapes {
            s.validate()?;
            if !out.contains(s) {
                out.push(*s);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    pub seeds: Vec<u64>,
    #[serde(default = "two")]
    pub factor: u64,
}

fn two() -> u64 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoupSpec {
    pub shapes: Vec<CooldownShape>,
    #[serde(default = "four")]
    pub parts: usize,
    #[serde(default)]
    pub order_seed: u64,
    /// Also run one cooldown over all parts, `parts` times longer.
    #[serde(default = "yes")]
    pub long_run: bool,
}

fn four() -> usize {
    4
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrRule {
    Sqrt,
    Table,
}

impl LrRule {
    pub fn rule(self) -> LrScaleRule {
        match self {
            LrRule::Sqrt => LrScaleRule::Sqrt,
            LrRule::Table => LrScaleRule::tuned_table(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSweepSpec {
    pub scales: Vec<u64>,
    #[serde(default)]
    pub match_half_life: bool,
    #[serde(default = "table")]
    pub lr_rule: LrRule,
    #[serde(default = "sqrt_shape")]
    pub shape: CooldownShape,
    pub seeds: Vec<u64>,
}

fn table() -> LrRule {
    LrRule::Table
}

fn sqrt_shape() -> CooldownShape {
    CooldownShape::Sqrt
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaVary {
    Both,
    Beta2Only,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSweepSpec {
    pub powers: Vec<f64>,
    #[serde(default = "both")]
    pub vary: BetaVary,
    #[serde(default = "sqrt_shape")]
    pub shape: CooldownShape,
    pub seeds: Vec<u64>,
}

fn both() -> BetaVary {
    BetaVary::Both
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSpec {
    pub spaces: Vec<Space>,
    /// Shift and deviation of retrospective per-batch perplexity.
    pub shift: bool,
    /// Validation positions used for KL-space predictions.
    pub kl_tokens: usize,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec {
            spaces: vec![Space::Loss, Space::Weight],
            shift: true,
            kl_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum At {
    Start,
    Mid,
    End,
}

impl std::str::FromStr for At {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "start" => Ok(At::Start),
            "mid" => Ok(At::Mid),
            "end" => Ok(At::End),
            _ => bail!("unknown landscape point `{s}` (start, mid, end)"),
        }
    }
}

impl std::fmt::Display for At {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            At::Start => "start",
            At::Mid => "mid",
            At::End => "end",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSpec {
    #[serde(default = "all_points")]
    pub at: Vec<At>,
    #[serde(default = "sqrt_shape")]
    pub shape: CooldownShape,
    #[serde(default)]
    pub order_seed: u64,
    #[serde(default = "coarse")]
    pub grid: GridSpec,
    /// Optional second, finer grid around the same center.
    #[serde(default)]
    pub fine: Option<GridSpec>,
    #[serde(default = "ten")]
    pub adam_steps: usize,
    /// Learning rate of the probing steps. Defaults to the schedule's lr
    /// at the step after the center, or the peak lr past the schedule end.
    #[serde(default)]
    pub probe_lr: Option<f64>,
}

fn all_points() -> Vec<At> {
    vec![At::Start, At::Mid, At::End]
}

fn coarse() -> GridSpec {
    GridSpec::coarse()
}

fn ten() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub layers: Vec<usize>,
    #[serde(default = "sqrt_shape")]
    pub shape: CooldownShape,
    #[serde(default)]
    pub order_seed: u64,
    /// Training batches for each probe, taken from the start of the base
    /// portion.
    #[serde(default = "eight")]
    pub train_batches: usize,
    #[serde(default)]
    pub config: ProbeConfig,
}

fn eight() -> usize {
    8
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest> {
        let m: Manifest = toml::from_str(text).context("parsing manifest")?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut m = Manifest::parse(&text).with_context(|| format!("in {}", path.display()))?;
        if let Some(p) = &m.corpus.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                m.corpus.path = Some(base.join(p));
            }
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            bail!("manifest version {} is not supported (expected {MANIFEST_VERSION})", self.version);
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            bail!("manifest name must be a non-empty single path component");
        }
        match (&self.corpus.path, &self.corpus.synthetic) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => bail!("corpus needs exactly one of `path` or `synthetic`"),
        }
        if self.corpus.tokenizer != "byte" {
            bail!("unknown tokenizer `{}`", self.corpus.tokenizer);
        }
        self.model.validate()?;
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.schedule.kind != ScheduleKind::Wsd {
            bail!("experiments need a wsd schedule");
        }
        if self.schedule.cooldown_steps == 0 {
            bail!("schedule needs cooldown_steps > 0");
        }
        if self.data.seq_len != self.model.seq_len {
            bail!("data.seq_len {} differs from model.seq_len {}", self.data.seq_len, self.model.seq_len);
        }
        if let Some(s) = &self.sweep {
            if s.seeds.len() < 2 {
                bail!("sweep needs at least two seeds");
            }
            if s.all_shapes()?.is_empty() {
                bail!("sweep has no shapes");
            }
        }
        if let Some(r) = &self.reference {
            if r.seeds.is_empty() || r.factor < 2 {
                bail!("reference needs seeds and factor >= 2");
            }
        }
        if let Some(s) = &self.soup {
            if s.parts < 2 {
                bail!("soup needs at least two parts");
            }
        }
        if let Some(b) = &self.batch_sweep {
            if b.scales.contains(&0) || b.seeds.is_empty() {
                bail!("batch_sweep scales must be >= 1 and seeds non-empty");
            }
        }
        if let Some(b) = &self.beta_sweep {
            if b.powers.iter().any(|p| !(p.is_finite() && *p > 0.0)) || b.seeds.is_empty() {
                bail!("beta_sweep powers must be positive and seeds non-empty");
            }
        }
        if let Some(l) = &self.landscape {
            if l.adam_steps == 0 {
                bail!("landscape.adam_steps must be >= 1");
            }
        }
        Ok(())
    }

    /// Artifact directory under `root`.
    pub fn artifact_dir(&self, root: &Path) -> PathBuf {
        match &self.output {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => root.join(p),
            None => root.join(&self.name),
        }
    }

    pub fn load_corpus(&self) -> Result<TokenCorpus> {
        Ok(match (&self.corpus.path, &self.corpus.synthetic) {
            (Some(p), _) => load_corpus(p, &ByteTokenizer)?,
            (None, Some(s)) => TokenCorpus::from_text(&synthetic_text(s.seed, s.bytes), &ByteTokenizer)?,
            (None, None) => bail!("corpus needs `path` or `synthetic`"),
        })
    }

    /// Pre-cooldown step count `P`.
    pub fn pre_steps(&self) -> u64 {
        self.schedule.cooldown_start()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
name = "t"
[corpus]
synthetic = { seed = 1, bytes = 1000 }
[data]
seq_len = 16
[model]
seq_len = 16
[schedule]
kind = "wsd"
warmup_steps = 2
stable_steps = 8
cooldown_steps = 4
peak_lr = 0.001
"#;

    #[test]
    fn minimal_parses_with_defaults() {
        let m = Manifest::parse(MINIMAL).unwrap();
        assert_eq!(m.pre_steps(), 10);
        assert!(m.sweep.is_none());
        assert_eq!(m.base.eval_every, 100);
        let again = Manifest::parse(&m.to_toml()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(Manifest::parse(&MINIMAL.replace("name = \"t\"", "name = \"t\"\nnmae = 1")).is_err());
        assert!(Manifest::parse(&MINIMAL.replace("version = 1", "version = 2")).is_err());
        let typo = format!("{MINIMAL}[sweep]\nseeds = [1, 2]\nshpes = [\"sqrt\"]\n");
        assert!(Manifest::parse(&typo).is_err());
    }

    #[test]
    fn sweep_shapes_expand_alphas() {
        let text = format!("{MINIMAL}[sweep]\nseeds = [1, 2]\nshapes = [\"sqrt\", \"lowered_linear:0.4\"]\nalphas = [0.4, 0.7]\n");
        let m = Manifest::parse(&text).unwrap();
        let shapes = m.sweep.unwrap().all_shapes().unwrap();
        assert_eq!(shapes.len(), 3);
        assert_eq!(shapes[2], CooldownShape::Sqrt);
        let one_seed = format!("{MINIMAL}[sweep]\nseeds = [1]\nshapes = [\"sqrt\"]\n");
        assert!(Manifest::parse(&one_seed).is_err());
    }
}
