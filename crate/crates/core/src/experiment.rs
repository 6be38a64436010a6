//! Experiment configuration and the stage pipeline behind the command line:
//! adversarial training, translation, segmenter training, evaluation and the
//! final method comparison.
//!
//! Configuration is layered: an embedded preset, then a TOML file, then
//! `SPCG_`-prefixed environment variables (`__` separates nested keys, e.g.
//! `SPCG_DA__LOSS__ZETA=2.5`), then explicit command-line values.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_segmenter;
use crate::data::{
    crop_all, load_directory_dataset, load_unlabelled_dataset, CropKind, CropSpec, PairedSample,
};
use crate::error::{Error, Result};
use crate::evaluation::{compare_methods, evaluate, per_image_csv, Comparison, DaMethod, MetricsRecord};
use crate::losses::LossConfig;
use crate::models::{discriminator_grid, ModelBundle, ModelConfig};
use crate::synth::{generate_synthetic_domains, SynthSpec, MANIFEST_FILE};
use crate::training::{
    train_segmenter, train_sp_cyclegan, translate_dataset, Identity, TrainConfig, TrainOutput,
    FINAL_CHECKPOINT,
};

pub const ENV_PREFIX: &str = "SPCG_";

const PRESETS: [(&str, &str); 6] = [
    ("stare2drive", include_str!("../presets/stare2drive.toml")),
    ("drive2stare", include_str!("../presets/drive2stare.toml")),
    ("ct2mr", include_str!("../presets/ct2mr.toml")),
    ("mr2ct", include_str!("../presets/mr2ct.toml")),
    ("synthetic", include_str!("../presets/synthetic.toml")),
    ("synthetic_cardiac", include_str!("../presets/synthetic_cardiac.toml")),
];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset_source(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown preset {name:?}; available: {}",
                preset_names().collect::<Vec<_>>().join(", ")
            ))
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Labelled source-domain directory dataset.
    pub source: PathBuf,
    /// Target-domain images; labels, if present, are never read.
    pub target: PathBuf,
    /// Labelled target-domain test set.
    pub test: PathBuf,
}

/// Crop applied at each stage; `None` uses images as stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageCrops {
    pub da: Option<CropSpec>,
    /// Applied to source images before translation (and, untranslated, for
    /// the no-adaptation arm).
    pub translate: Option<CropSpec>,
    pub seg: Option<CropSpec>,
    pub test: Option<CropSpec>,
}

fn default_arms() -> Vec<DaMethod> {
    DaMethod::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub direction: String,
    pub output: PathBuf,
    #[serde(default)]
    pub deterministic: bool,
    /// Overrides the model, adversarial, segmenter and synthetic-data seeds
    /// together.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_arms")]
    pub arms: Vec<DaMethod>,
    /// Explicit dataset directories. Required unless `synth` is given.
    #[serde(default)]
    pub data: Option<DataPaths>,
    /// Procedural data, generated into `<output>/data` when missing.
    #[serde(default)]
    pub synth: Option<SynthSpec>,
    pub model: ModelConfig,
    pub da: TrainConfig,
    pub seg: TrainConfig,
    #[serde(default)]
    pub crops: StageCrops,
    /// Also write per-image Dice as CSV next to each metrics file.
    #[serde(default)]
    pub per_image_csv: bool,
}

/// Values given on the command line; they take precedence over everything.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub deterministic: bool,
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))
}

/// Interprets an override as a TOML value, falling back to a bare string.
fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = table;
    for key in parents {
        let entry = cur
            .entry(key.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path crosses non-table key {key}")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Applies `SPCG_A__B=value` pairs to the table.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<()> {
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_ascii_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::Config(format!("malformed override variable {key}")));
        }
        set_path(table, &path, parse_env_value(&raw))?;
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Self::from_table(parse_table(preset_source(name)?, name)?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let mut cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.model.init_seed = seed;
            cfg.da.seed = seed;
            cfg.seg.seed = seed;
            if let Some(synth) = &mut cfg.synth {
                synth.seed = seed;
            }
        }
        Ok(cfg)
    }

    /// Layers preset, file, environment and command-line values, then
    /// validates the result without touching any data.
    pub fn resolve(
        preset: Option<&str>,
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &Overrides,
    ) -> Result<Self> {
        let mut table = match preset {
            Some(name) => parse_table(preset_source(name)?, name)?,
            None => toml::Table::new(),
        };
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let mut file_table = parse_table(&text, &path.display().to_string())?;
            // A config file may name its own base preset.
            if let Some(toml::Value::String(base)) = file_table.remove("preset") {
                if preset.is_none() {
                    table = parse_table(preset_source(&base)?, &base)?;
                }
            }
            merge(&mut table, file_table);
        }
        if table.is_empty() {
            return Err(Error::Config("no configuration: pass --preset or --config".into()));
        }
        apply_env_overrides(&mut table, env)?;
        if let Some(seed) = overrides.seed {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        if let Some(out) = &overrides.output {
            table.insert("output".into(), toml::Value::String(out.display().to_string()));
        }
        if overrides.deterministic {
            table.insert("deterministic".into(), toml::Value::Boolean(true));
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Validation(msg) | Error::Dimension(msg) => Error::Config(msg),
            other => Error::Config(other.to_string()),
        };
        if self.direction.trim().is_empty() {
            return Err(Error::Config("direction must be named".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("at least one arm is required".into()));
        }
        self.model.validate().map_err(cfg_err)?;
        self.da.validate().map_err(cfg_err)?;
        self.seg.validate().map_err(cfg_err)?;
        match (&self.data, &self.synth) {
            (None, None) => {
                return Err(Error::Config("either [data] or [synth] must be given".into()))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config("[data] and [synth] are mutually exclusive".into()))
            }
            (_, Some(s)) => {
                s.validate().map_err(cfg_err)?;
                if s.channels != self.model.image_channels {
                    return Err(Error::Config("synth.channels must equal model.image_channels".into()));
                }
                if s.label_classes() != self.model.label_classes() {
                    return Err(Error::Config(
                        "synth foreground classes do not match model.num_classes".into(),
                    ));
                }
            }
            _ => {}
        }
        let crops = [
            ("da", &self.crops.da),
            ("translate", &self.crops.translate),
            ("seg", &self.crops.seg),
            ("test", &self.crops.test),
        ];
        for (stage, crop) in crops {
            if let Some(c) = crop {
                c.validate().map_err(cfg_err)?;
                if stage == "test" && c.kind == CropKind::Random {
                    return Err(Error::Config("test crop must be deterministic".into()));
                }
            }
        }
        // Generator and discriminator constraints on the adversarial inputs.
        let da_size = self
            .crops
            .da
            .map(|c| c.size)
            .or_else(|| self.synth.as_ref().map(|s| (s.image_size, s.image_size)));
        if let Some((h, w)) = da_size {
            if h % 4 != 0 || w % 4 != 0 {
                return Err(Error::Config(format!(
                    "adversarial inputs {h}x{w} must have sides divisible by 4"
                )));
            }
            if discriminator_grid(h.min(w)).is_none() {
                return Err(Error::Config(format!(
                    "adversarial inputs {h}x{w} are too small for the patch discriminator"
                )));
            }
        }
        Ok(())
    }

    pub fn data_paths(&self) -> DataPaths {
        match &self.data {
            Some(d) => d.clone(),
            None => {
                let root = self.output.join("data");
                DataPaths {
                    source: root.join("source"),
                    target: root.join("target"),
                    test: root.join("target_test"),
                }
            }
        }
    }

    fn arm_train_config(&self, arm: DaMethod) -> TrainConfig {
        match arm {
            DaMethod::DefaultCyclegan => TrainConfig {
                loss: LossConfig {
                    zeta: 0.0,
                    ..self.da.loss
                },
                ..self.da.clone()
            },
            _ => self.da.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    TrainDa,
    Translate,
    TrainSeg,
    Eval,
    All,
}

impl Stage {
    pub const NAMES: [&'static str; 5] = ["train_da", "translate", "train_seg", "eval", "all"];
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train_da" => Stage::TrainDa,
            "translate" => Stage::Translate,
            "train_seg" => Stage::TrainSeg,
            "eval" => Stage::Eval,
            "all" => Stage::All,
            other => {
                return Err(Error::Config(format!(
                    "unknown stage {other:?}; expected one of {}",
                    Stage::NAMES.join(", ")
                )))
            }
        })
    }
}

/// File layout of a run below `output`.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn arm(&self, arm: DaMethod) -> PathBuf {
        self.root.join(arm.as_str())
    }

    pub fn da_dir(&self, arm: DaMethod) -> PathBuf {
        self.arm(arm).join("da")
    }

    pub fn da_checkpoint(&self, arm: DaMethod) -> PathBuf {
        self.da_dir(arm).join("checkpoints").join(FINAL_CHECKPOINT)
    }

    pub fn translated(&self, arm: DaMethod) -> PathBuf {
        self.arm(arm).join("translated")
    }

    pub fn seg_dir(&self, arm: DaMethod) -> PathBuf {
        self.arm(arm).join("seg")
    }

    pub fn seg_checkpoint(&self, arm: DaMethod) -> PathBuf {
        self.seg_dir(arm).join("checkpoints").join(FINAL_CHECKPOINT)
    }

    pub fn metrics(&self, arm: DaMethod) -> PathBuf {
        self.arm(arm).join("eval").join("metrics.json")
    }

    pub fn comparison_stem(&self) -> PathBuf {
        self.root.join("comparison")
    }
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            stage,
            path: path.to_path_buf(),
        })
    }
}

/// Runs pipeline stages for every configured arm.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub layout: RunLayout,
    device: Device,
}

/// What a run produced.
#[derive(Debug, Default)]
pub struct RunReport {
    pub records: Vec<MetricsRecord>,
    pub comparison: Option<Comparison>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            layout: RunLayout {
                root: cfg.output.clone(),
            },
            cfg,
            device: Device::Cpu,
        })
    }

    fn da_arms(&self) -> impl Iterator<Item = DaMethod> + '_ {
        self.cfg
            .arms
            .iter()
            .copied()
            .filter(|a| *a != DaMethod::NoDa)
    }

    /// Generates procedural data if the config asks for it and it is absent.
    pub fn ensure_synthetic_data(&self) -> Result<Option<PathBuf>> {
        let Some(spec) = &self.cfg.synth else {
            return Ok(None);
        };
        let root = self.cfg.output.join("data");
        let manifest = root.join(MANIFEST_FILE);
        if manifest.exists() {
            return Ok(Some(manifest));
        }
        log::info!("generating synthetic data in {}", root.display());
        generate_synthetic_domains(spec, &root).map(Some)
    }

    fn source(&self) -> Result<Vec<PairedSample>> {
        load_directory_dataset(
            &self.cfg.data_paths().source,
            self.cfg.model.image_channels,
            self.cfg.model.label_classes(),
        )
    }

    fn target(&self) -> Result<Vec<PairedSample>> {
        load_unlabelled_dataset(&self.cfg.data_paths().target, self.cfg.model.image_channels)
    }

    fn test_set(&self) -> Result<Vec<PairedSample>> {
        let raw = load_directory_dataset(
            &self.cfg.data_paths().test,
            self.cfg.model.image_channels,
            self.cfg.model.label_classes(),
        )?;
        match &self.cfg.crops.test {
            Some(spec) => crop_all(&raw, spec, 0),
            None => Ok(raw),
        }
    }

    /// Fails fast when a single stage is requested before its inputs exist.
    fn preflight(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Translate => {
                for arm in self.da_arms() {
                    require(&self.layout.da_checkpoint(arm), "train_da")?;
                }
            }
            Stage::TrainSeg => {
                for arm in self.da_arms() {
                    require(&self.layout.translated(arm), "translate")?;
                }
            }
            Stage::Eval => {
                for &arm in &self.cfg.arms {
                    require(&self.layout.seg_checkpoint(arm), "train_seg")?;
                }
            }
            Stage::TrainDa | Stage::All => {}
        }
        Ok(())
    }

    pub fn run(&self, stage: Stage) -> Result<RunReport> {
        self.preflight(stage)?;
        self.ensure_synthetic_data()?;
        let mut report = RunReport::default();
        if matches!(stage, Stage::TrainDa | Stage::All) {
            let (source, target) = (self.source()?, self.target()?);
            for arm in self.da_arms() {
                self.train_da(arm, &source, &target)?;
            }
        }
        if matches!(stage, Stage::Translate | Stage::All) {
            let source = self.source()?;
            for arm in self.da_arms() {
                self.translate(arm, &source)?;
            }
        }
        if matches!(stage, Stage::TrainSeg | Stage::All) {
            for &arm in &self.cfg.arms {
                self.train_seg(arm)?;
            }
        }
        if matches!(stage, Stage::Eval | Stage::All) {
            let test = self.test_set()?;
            for &arm in &self.cfg.arms {
                report.records.push(self.evaluate(arm, &test)?);
            }
            let comparison = compare_methods(&report.records)?;
            comparison.write(&self.layout.root, "comparison")?;
            report.comparison = Some(comparison);
        }
        Ok(report)
    }

    fn train_da(&self, arm: DaMethod, source: &[PairedSample], target: &[PairedSample]) -> Result<()> {
        log::info!("[{arm}] adversarial training");
        let bundle = match arm {
            DaMethod::SpCyclegan => ModelBundle::new(&self.cfg.model, &self.device)?,
            _ => ModelBundle::without_segmenter(&self.cfg.model, &self.device)?,
        };
        train_sp_cyclegan(
            source,
            target,
            bundle,
            &self.cfg.arm_train_config(arm),
            self.cfg.crops.da,
            &TrainOutput::in_dir(self.layout.da_dir(arm)),
        )?;
        Ok(())
    }

    fn translate(&self, arm: DaMethod, source: &[PairedSample]) -> Result<()> {
        log::info!("[{arm}] translating source data");
        let ckpt = self.layout.da_checkpoint(arm);
        require(&ckpt, "train_da")?;
        let (bundle, _) = ModelBundle::load(&ckpt, &self.cfg.model, &self.device)?;
        let out = self.layout.translated(arm);
        if out.exists() {
            fs::remove_dir_all(&out)?;
        }
        translate_dataset(
            &bundle.g,
            source,
            self.cfg.crops.translate.as_ref(),
            self.cfg.da.seed,
            Some(&out),
        )?;
        Ok(())
    }

    fn train_seg(&self, arm: DaMethod) -> Result<()> {
        log::info!("[{arm}] segmenter training");
        let data = match arm {
            DaMethod::NoDa => translate_dataset(
                &Identity,
                &self.source()?,
                self.cfg.crops.translate.as_ref(),
                self.cfg.da.seed,
                None,
            )?,
            _ => {
                let dir = self.layout.translated(arm);
                require(&dir, "translate")?;
                load_directory_dataset(
                    &dir,
                    self.cfg.model.image_channels,
                    self.cfg.model.label_classes(),
                )?
            }
        };
        train_segmenter(
            &data,
            &self.cfg.model,
            &self.cfg.seg,
            self.cfg.crops.seg,
            &TrainOutput::in_dir(self.layout.seg_dir(arm)),
        )?;
        Ok(())
    }

    fn evaluate(&self, arm: DaMethod, test: &[PairedSample]) -> Result<MetricsRecord> {
        log::info!("[{arm}] evaluating");
        let ckpt = self.layout.seg_checkpoint(arm);
        require(&ckpt, "train_seg")?;
        let (segmenter, _) = load_segmenter(&ckpt, &self.cfg.model, &self.device)?;
        let record = evaluate(&segmenter, test, arm, &self.cfg.direction)?;
        let path = self.layout.metrics(arm);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut json = serde_json::to_string_pretty(&record)?;
        json.push('\n');
        fs::write(&path, json)?;
        if self.cfg.per_image_csv {
            fs::write(path.with_file_name("per_image.csv"), per_image_csv(&record))?;
        }
        Ok(record)
    }
}
