//! Run configuration: a TOML document with an optional single `include`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SceneConfig;
use crate::error::{bail, DprError, Result};
use crate::evaluation::{MapProtocol, ToyDetector};
use crate::imaging::Interpolation;
use crate::nn::derive_seed;
use crate::organizer::AssemblyMode;
use crate::refiner::{RefinerConfig, TrainRefinerParams};
use crate::selector::{SelectorConfig, TrainSelectorParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; defaults to `<out_dir>/data`.
    pub root: Option<PathBuf>,
    pub count: usize,
    pub val_fraction: f64,
    /// Full-resolution scene parameters.
    pub scene: SceneConfig,
    /// Scenes whose object-pixel ratio falls outside `[low, high)` are redrawn.
    pub ratio_band: [f64; 2],
    /// Redraw limit per kept scene.
    pub max_attempts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            count: 64,
            val_fraction: 0.25,
            scene: SceneConfig {
                width: 128,
                height: 128,
                min_objects: 1,
                max_objects: 3,
                min_size: 8,
                max_size: 16,
                ..SceneConfig::default()
            },
            ratio_band: [0.0, 0.05],
            max_attempts: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Selection threshold; overrides `selector.tau` when set.
    pub tau: Option<f64>,
    pub enlarge_method: Interpolation,
    pub assembly: AssemblyMode,
    /// Images scored per selector forward pass.
    pub batch_size: usize,
    /// Caps the number of validation images processed.
    pub max_images: Option<usize>,
    /// Writes every tile directory and assembled PNG when true.
    pub write_images: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau: None,
            enlarge_method: Interpolation::Bilinear,
            assembly: AssemblyMode::Full,
            batch_size: 8,
            max_images: None,
            write_images: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorConfig {
    Toy(ToyDetector),
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self::Toy(ToyDetector::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub protocol: MapProtocol,
    /// Side of the area-downsampled pixel features used for the distribution distances.
    pub feature_side: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            protocol: MapProtocol::default(),
            feature_side: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub taus: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            taus: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

fn default_selector_training() -> TrainSelectorParams {
    TrainSelectorParams {
        epochs: 16,
        batch_size: 4,
        learning_rate: Some(1e-3),
        ..TrainSelectorParams::default()
    }
}

fn default_refiner_training() -> TrainRefinerParams {
    TrainRefinerParams {
        steps: 300,
        ..TrainRefinerParams::default()
    }
}

/// Everything one run needs. Every key has a default, so an empty file is valid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every stochastic stage; component seeds are derived from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub selector: SelectorConfig,
    pub selector_training: TrainSelectorParams,
    pub refiner: RefinerConfig,
    pub refiner_training: TrainRefinerParams,
    /// Training stages continue from existing checkpoints instead of fresh initializations.
    pub resume: bool,
    pub inference: InferenceConfig,
    pub detector: DetectorConfig,
    pub metrics: MetricsConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            selector: SelectorConfig::desk(),
            selector_training: default_selector_training(),
            refiner: RefinerConfig {
                timesteps: 100,
                beta_start: 1e-3,
                beta_end: 0.2,
                ..RefinerConfig::default()
            },
            refiner_training: default_refiner_training(),
            resume: false,
            inference: InferenceConfig::default(),
            detector: DetectorConfig::default(),
            metrics: MetricsConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() => merge(existing, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

fn read_table(path: &Path) -> Result<toml::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| DprError::Config(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| DprError::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    /// Parses a config file. An `include = "<path>"` key (relative to the file)
    /// names a base document whose keys the file overrides; the base may not include another.
    pub fn load(path: &Path) -> Result<Self> {
        let mut top = read_table(path)?;
        let include = top.as_table_mut().and_then(|t| t.remove("include"));
        let value = match include {
            None => top,
            Some(toml::Value::String(rel)) => {
                let base_path = path.parent().unwrap_or(Path::new(".")).join(rel);
                let mut base = read_table(&base_path)?;
                if base.get("include").is_some() {
                    bail!(Config, "{}: nested includes are not supported", base_path.display());
                }
                merge(&mut base, top);
                base
            }
            Some(other) => bail!(Config, "include must be a path string, got {other}"),
        };
        Self::from_value(value).map_err(|e| DprError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| DprError::Config(e.to_string()))?;
        Self::from_value(value)
    }

    /// Missing keys, including keys inside a partially given table, keep the values of `RunConfig::default()`.
    fn from_value(value: toml::Value) -> Result<Self> {
        let mut base = toml::Value::try_from(RunConfig::default()).map_err(|e| DprError::Config(e.to_string()))?;
        merge(&mut base, value);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| DprError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DprError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.selector.validate()?;
        self.refiner.validate()?;
        self.data.scene.validate().map_err(|e| DprError::Config(e.to_string()))?;
        let [lo, hi] = self.data.ratio_band;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            bail!(Config, "data.ratio_band must satisfy 0 <= low < high <= 1");
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            bail!(Config, "data.val_fraction must lie in [0, 1)");
        }
        let (w, h) = (self.data.scene.width, self.data.scene.height);
        let k = self.refiner.scale;
        if w != h || w % k != 0 {
            bail!(Config, "scenes must be square and divisible by refiner.scale {k}, got {w}x{h}");
        }
        let low = w / k;
        if low % self.selector.embed_stride != 0 {
            bail!(Config, "low-res side {low} is not divisible by selector.embed_stride");
        }
        let grid = self.mask_grid();
        if grid == 0 || low % grid != 0 || (low / grid) % 4 != 0 {
            bail!(
                Config,
                "low-res side {low} must split into a {grid}x{grid} grid of tiles whose side is a multiple of 4"
            );
        }
        let tau = self.tau();
        if !(tau > 0.0 && tau < 1.0) {
            bail!(Config, "tau must lie in (0, 1), got {tau}");
        }
        if self.inference.batch_size == 0 {
            bail!(Config, "inference.batch_size must be positive");
        }
        if self.inference.enlarge_method == Interpolation::Area {
            bail!(Config, "inference.enlarge_method cannot be area");
        }
        if self.metrics.feature_side == 0 {
            bail!(Config, "metrics.feature_side must be positive");
        }
        if self.sweep.taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            bail!(Config, "sweep.taus must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.inference.tau.unwrap_or(self.selector.tau)
    }

    pub fn low_res_side(&self) -> usize {
        self.data.scene.width / self.refiner.scale
    }

    /// Side of the selection grid: the coarsest selector output.
    pub fn mask_grid(&self) -> usize {
        let side = self.low_res_side();
        self.selector.score_grids(side, side).last().map(|g| g.0).unwrap_or(0)
    }

    /// Nested label grids (fine to coarse) for full-resolution scenes.
    pub fn label_grids(&self) -> Vec<usize> {
        let side = self.low_res_side();
        self.selector.score_grids(side, side).iter().map(|g| g.0).collect()
    }

    pub fn data_root(&self) -> PathBuf {
        self.data.root.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    pub fn selector_checkpoint(&self) -> PathBuf {
        self.out_dir.join("selector").join("selector.ckpt")
    }

    pub fn refiner_checkpoint(&self) -> PathBuf {
        self.out_dir.join("refiner").join("refiner.ckpt")
    }

    /// Copies of the component configs with seeds derived from the run seed.
    pub fn seeded_selector(&self) -> SelectorConfig {
        SelectorConfig {
            seed: derive_seed(self.seed, "selector-init"),
            ..self.selector.clone()
        }
    }

    pub fn seeded_refiner(&self) -> RefinerConfig {
        RefinerConfig {
            seed: derive_seed(self.seed, "refiner-init"),
            ..self.refiner.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.mask_grid(), 4);
        assert_eq!(cfg.label_grids(), vec![16, 8, 4]);
        let back = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(RunConfig::from_toml_str("sed = 3").unwrap_err().is_config());
        assert!(RunConfig::from_toml_str("[inference]\ntau = 1.5").unwrap_err().is_config());
        assert!(RunConfig::from_toml_str("[selector]\nnum_heads = 3").unwrap_err().is_config());
        let partial = RunConfig::from_toml_str("[selector]\nnum_heads = 4").unwrap();
        assert_eq!(partial.selector, SelectorConfig { num_heads: 4, ..SelectorConfig::desk() });
        assert!(RunConfig::from_toml_str("[data.scene]\nwidth = 100").unwrap_err().is_config());
    }

    #[test]
    fn include_overrides_one_level() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.toml"), "seed = 5\n[inference]\ntau = 0.3\nbatch_size = 2\n").unwrap();
        std::fs::write(dir.path().join("run.toml"), "include = \"base.toml\"\n[inference]\ntau = 0.6\n").unwrap();
        let cfg = RunConfig::load(&dir.path().join("run.toml")).unwrap();
        assert_eq!((cfg.seed, cfg.tau(), cfg.inference.batch_size), (5, 0.6, 2));

        std::fs::write(dir.path().join("base.toml"), "include = \"other.toml\"\n").unwrap();
        assert!(RunConfig::load(&dir.path().join("run.toml")).unwrap_err().is_config());
    }

    #[test]
    fn derived_seeds_follow_run_seed() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.seeded_selector().seed, b.seeded_selector().seed);
        assert_ne!(a.seeded_refiner().seed, a.seeded_selector().seed);
    }
}
