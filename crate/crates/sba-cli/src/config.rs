//! Flat key/value experiment configs.
//!
//! Format: one `key = value` per line, `#` comments, blank lines ignored.
//! Dotted keys form sections (`vicinity.sigma = 0.1`). Lists are
//! comma-separated (`widths = 784, 256, 128, 10`). `sweep.<key>` declares a
//! sweep axis over any run-template key; the runner takes the cross product
//! of all axes times `seed_list`.
//!
//! Setting `mode` applies its scheduler preset (`baseline`: omega = pi/2 and
//! eta = 0; `ba`: omega = 0); an explicit `omega_radians` or `eta` key
//! overrides the preset regardless of file position.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use sba_core::data::{self, Dataset, SynthImagesConfig};
use sba_core::trainer::{LossMode, Mode, RunConfig, Seeds, UpdateStyle};
use sba_core::vicinity::BasisMode;

/// Errors that should exit with status 1 (bad config) vs 2 (runtime).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<sba_core::Error> for CliError {
    fn from(e: sba_core::Error) -> Self {
        match e {
            sba_core::Error::Config(_) | sba_core::Error::Format { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn cfg_err<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Config(msg.into()))
}

/// Raw parsed key/value pairs with line provenance and consumption tracking
/// (unconsumed keys are reported as unknown).
#[derive(Debug)]
pub struct ConfigMap {
    entries: BTreeMap<String, (String, usize)>,
    consumed: std::cell::RefCell<BTreeSet<String>>,
    source: String,
}

impl ConfigMap {
    pub fn parse(text: &str, source: &str) -> CliResult<ConfigMap> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match line.find('#') {
                Some(at) => &line[..at],
                None => line,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return cfg_err(format!("{source}:{line_no}: expected `key = value`"));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return cfg_err(format!("{source}:{line_no}: empty key"));
            }
            if entries.insert(key.clone(), (value, line_no)).is_some() {
                return cfg_err(format!("{source}:{line_no}: duplicate key `{key}`"));
            }
        }
        Ok(ConfigMap {
            entries,
            consumed: std::cell::RefCell::new(BTreeSet::new()),
            source: source.to_string(),
        })
    }

    pub fn load(path: &Path) -> CliResult<ConfigMap> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.consumed.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Any keys never touched by a getter: almost certainly typos.
    pub fn check_fully_consumed(&self) -> CliResult<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !consumed.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            let lines: Vec<String> = unknown
                .iter()
                .map(|k| format!("{}:{}: unknown key `{k}`", self.source, self.entries[*k].1))
                .collect();
            cfg_err(lines.join("\n"))
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, raw: &str) -> CliResult<T> {
    raw.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("key `{key}`: cannot parse `{raw}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, raw: &str) -> CliResult<Vec<T>> {
    raw.split(',')
        .map(|cell| parse_scalar(key, cell))
        .collect()
}

/// Applies one run-template key. Shared by template parsing and sweep axes,
/// so anything settable is sweepable.
pub fn apply_run_key(cfg: &mut RunConfig, key: &str, raw: &str) -> CliResult<()> {
    match key {
        "mode" => match raw {
            "baseline" => {
                cfg.mode = Mode::Baseline;
                cfg.omega = std::f64::consts::FRAC_PI_2;
                cfg.eta = 0.0;
            }
            "ba" => {
                cfg.mode = Mode::Ba;
                cfg.omega = 0.0;
            }
            "sba" => cfg.mode = Mode::Sba,
            other => return cfg_err(format!("key `mode`: unknown mode `{other}`")),
        },
        "loss_mode" => {
            cfg.loss_mode = match raw {
                "soft_kl" => LossMode::SoftKl,
                "hard_ce" => LossMode::HardCe,
                other => return cfg_err(format!("key `loss_mode`: unknown value `{other}`")),
            }
        }
        "update_style" => {
            cfg.update_style = match raw {
                "combined" => UpdateStyle::Combined,
                "sequential" => UpdateStyle::Sequential,
                other => return cfg_err(format!("key `update_style`: unknown value `{other}`")),
            }
        }
        "eta" => cfg.eta = parse_scalar(key, raw)?,
        "omega_radians" => cfg.omega = parse_scalar(key, raw)?,
        "learning_rate" => cfg.learning_rate = parse_scalar(key, raw)?,
        "momentum" => cfg.momentum = parse_scalar(key, raw)?,
        "epochs" => cfg.epochs = parse_scalar(key, raw)?,
        "batch_size" => cfg.batch_size = parse_scalar(key, raw)?,
        "widths" => cfg.widths = parse_list(key, raw)?,
        "split_set" => cfg.split_set = parse_list(key, raw)?,
        "fixed_split" => cfg.fixed_split = Some(parse_scalar(key, raw)?),
        "kl_full_grad" => cfg.kl_full_grad = parse_scalar(key, raw)?,
        "vicinity.p_gauss" => cfg.vicinity.p_gauss = parse_scalar(key, raw)?,
        "vicinity.q_drop" => cfg.vicinity.q_drop = parse_scalar(key, raw)?,
        "vicinity.sigma" => cfg.vicinity.sigma = parse_scalar(key, raw)?,
        "vicinity.tau" => cfg.vicinity.tau = parse_scalar(key, raw)?,
        "vicinity.keep_prob" => cfg.vicinity.keep_prob = parse_scalar(key, raw)?,
        "vicinity.basis_mode" => {
            cfg.vicinity.basis_mode = match raw {
                "orthonormal" => BasisMode::Orthonormal,
                "column_normalized" => BasisMode::ColumnNormalized,
                other => {
                    return cfg_err(format!("key `vicinity.basis_mode`: unknown value `{other}`"))
                }
            }
        }
        "seed_base" => cfg.seeds = Seeds::from_base(parse_scalar(key, raw)?),
        "seeds.init" => cfg.seeds.init = parse_scalar(key, raw)?,
        "seeds.shuffle" => cfg.seeds.shuffle = parse_scalar(key, raw)?,
        "seeds.scheduler" => cfg.seeds.scheduler = parse_scalar(key, raw)?,
        "seeds.noise" => cfg.seeds.noise = parse_scalar(key, raw)?,
        "seeds.mask" => cfg.seeds.mask = parse_scalar(key, raw)?,
        "seeds.split" => cfg.seeds.split = parse_scalar(key, raw)?,
        other => return cfg_err(format!("unknown run key `{other}`")),
    }
    Ok(())
}

const RUN_KEYS: &[&str] = &[
    "mode",
    "loss_mode",
    "update_style",
    "eta",
    "omega_radians",
    "learning_rate",
    "momentum",
    "epochs",
    "batch_size",
    "widths",
    "split_set",
    "fixed_split",
    "kl_full_grad",
    "vicinity.p_gauss",
    "vicinity.q_drop",
    "vicinity.sigma",
    "vicinity.tau",
    "vicinity.keep_prob",
    "vicinity.basis_mode",
    "seed_base",
    "seeds.init",
    "seeds.shuffle",
    "seeds.scheduler",
    "seeds.noise",
    "seeds.mask",
    "seeds.split",
];

/// Where the train/test datasets come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Delimited {
        train_path: PathBuf,
        test_path: PathBuf,
        label_column: usize,
        normalize: Normalize,
    },
    TwoMoons {
        train_n: usize,
        test_n: usize,
        noise_std: f64,
        seed: u64,
    },
    SynthImages {
        train_n: usize,
        test_n: usize,
        seed: u64,
        images: SynthImagesConfig,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalize {
    None,
    ZScore,
    MinMax,
}

impl DatasetSpec {
    pub fn from_config(map: &ConfigMap) -> CliResult<DatasetSpec> {
        let kind = map
            .get("dataset.kind")
            .ok_or_else(|| CliError::Config("missing `dataset.kind`".into()))?;
        let req = |key: &str| -> CliResult<String> {
            map.get(key)
                .map(str::to_string)
                .ok_or_else(|| CliError::Config(format!("missing `{key}` for dataset.kind = {kind}")))
        };
        match kind {
            "idx" => Ok(DatasetSpec::Idx {
                train_images: req("dataset.train_images")?.into(),
                train_labels: req("dataset.train_labels")?.into(),
                test_images: req("dataset.test_images")?.into(),
                test_labels: req("dataset.test_labels")?.into(),
                train_limit: map
                    .get("dataset.train_limit")
                    .map(|v| parse_scalar("dataset.train_limit", v))
                    .transpose()?,
                test_limit: map
                    .get("dataset.test_limit")
                    .map(|v| parse_scalar("dataset.test_limit", v))
                    .transpose()?,
            }),
            "delimited" => Ok(DatasetSpec::Delimited {
                train_path: req("dataset.train_path")?.into(),
                test_path: req("dataset.test_path")?.into(),
                label_column: parse_scalar("dataset.label_column", &req("dataset.label_column")?)?,
                normalize: match map.get("dataset.normalize").unwrap_or("none") {
                    "none" => Normalize::None,
                    "zscore" => Normalize::ZScore,
                    "minmax" => Normalize::MinMax,
                    other => {
                        return cfg_err(format!("dataset.normalize: unknown value `{other}`"))
                    }
                },
            }),
            "two_moons" => Ok(DatasetSpec::TwoMoons {
                train_n: parse_scalar("dataset.train_n", &req("dataset.train_n")?)?,
                test_n: parse_scalar("dataset.test_n", &req("dataset.test_n")?)?,
                noise_std: parse_scalar("dataset.noise_std", &req("dataset.noise_std")?)?,
                seed: parse_scalar("dataset.seed", &req("dataset.seed")?)?,
            }),
            "synth_images" => {
                let mut images = SynthImagesConfig::default();
                if let Some(v) = map.get("dataset.classes") {
                    images.classes = parse_scalar("dataset.classes", v)?;
                }
                if let Some(v) = map.get("dataset.side") {
                    images.side = parse_scalar("dataset.side", v)?;
                }
                if let Some(v) = map.get("dataset.max_shift") {
                    images.max_shift = parse_scalar("dataset.max_shift", v)?;
                }
                if let Some(v) = map.get("dataset.pixel_noise") {
                    images.pixel_noise = parse_scalar("dataset.pixel_noise", v)?;
                }
                if let Some(v) = map.get("dataset.template_seed") {
                    images.template_seed = parse_scalar("dataset.template_seed", v)?;
                }
                Ok(DatasetSpec::SynthImages {
                    train_n: parse_scalar("dataset.train_n", &req("dataset.train_n")?)?,
                    test_n: parse_scalar("dataset.test_n", &req("dataset.test_n")?)?,
                    seed: parse_scalar("dataset.seed", &req("dataset.seed")?)?,
                    images,
                })
            }
            other => cfg_err(format!("dataset.kind: unknown value `{other}`")),
        }
    }

    /// Loads (train, test).
    pub fn load(&self) -> CliResult<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let mut train = data::idx::load_idx(train_images, train_labels)?;
                let mut test = data::idx::load_idx(test_images, test_labels)?;
                if let Some(n) = train_limit {
                    train = train.take(*n)?;
                }
                if let Some(n) = test_limit {
                    test = test.take(*n)?;
                }
                Ok((train, test))
            }
            DatasetSpec::Delimited {
                train_path,
                test_path,
                label_column,
                normalize,
            } => {
                let mut train = data::delimited::load_delimited(train_path, *label_column)?;
                let mut test = data::delimited::load_delimited(test_path, *label_column)?;
                match normalize {
                    Normalize::None => {}
                    Normalize::ZScore => {
                        train.normalize_zscore()?;
                        test.normalize_zscore()?;
                    }
                    Normalize::MinMax => {
                        train.normalize_minmax()?;
                        test.normalize_minmax()?;
                    }
                }
                Ok((train, test))
            }
            DatasetSpec::TwoMoons {
                train_n,
                test_n,
                noise_std,
                seed,
            } => Ok((
                data::synth_two_moons(*train_n, *noise_std, *seed)?,
                data::synth_two_moons(*test_n, *noise_std, seed.wrapping_add(1))?,
            )),
            DatasetSpec::SynthImages {
                train_n,
                test_n,
                seed,
                images,
            } => Ok((
                data::synth_images(*train_n, *seed, images)?,
                data::synth_images(*test_n, seed.wrapping_add(1), images)?,
            )),
        }
    }

    /// Canonical lines for config hashing.
    pub fn canonical_lines(&self) -> Vec<String> {
        match self {
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => vec![
                "dataset.kind=idx".into(),
                format!("dataset.train_images={}", train_images.display()),
                format!("dataset.train_labels={}", train_labels.display()),
                format!("dataset.test_images={}", test_images.display()),
                format!("dataset.test_labels={}", test_labels.display()),
                format!("dataset.train_limit={train_limit:?}"),
                format!("dataset.test_limit={test_limit:?}"),
            ],
            DatasetSpec::Delimited {
                train_path,
                test_path,
                label_column,
                normalize,
            } => vec![
                "dataset.kind=delimited".into(),
                format!("dataset.train_path={}", train_path.display()),
                format!("dataset.test_path={}", test_path.display()),
                format!("dataset.label_column={label_column}"),
                format!("dataset.normalize={normalize:?}"),
            ],
            DatasetSpec::TwoMoons {
                train_n,
                test_n,
                noise_std,
                seed,
            } => vec![
                "dataset.kind=two_moons".into(),
                format!("dataset.train_n={train_n}"),
                format!("dataset.test_n={test_n}"),
                format!("dataset.noise_std={noise_std:?}"),
                format!("dataset.seed={seed}"),
            ],
            DatasetSpec::SynthImages {
                train_n,
                test_n,
                seed,
                images,
            } => vec![
                "dataset.kind=synth_images".into(),
                format!("dataset.train_n={train_n}"),
                format!("dataset.test_n={test_n}"),
                format!("dataset.seed={seed}"),
                format!("dataset.classes={}", images.classes),
                format!("dataset.side={}", images.side),
                format!("dataset.max_shift={}", images.max_shift),
                format!("dataset.pixel_noise={:?}", images.pixel_noise),
                format!("dataset.template_seed={}", images.template_seed),
            ],
        }
    }
}

/// A parsed experiment: run template, sweep axes, seeds, outputs.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub base: RunConfig,
    /// `(key, values)` in declaration order; cross product on execution.
    pub sweep_axes: Vec<(String, Vec<String>)>,
    pub seed_list: Vec<u64>,
    pub out_dir: PathBuf,
    pub workers: usize,
    pub dataset: DatasetSpec,
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> CliResult<ExperimentSpec> {
        let map = ConfigMap::load(path)?;
        Self::from_map(&map)
    }

    pub fn from_map(map: &ConfigMap) -> CliResult<ExperimentSpec> {
        let mut base = RunConfig::default();
        for key in RUN_KEYS {
            if let Some(raw) = map.get(key) {
                apply_run_key(&mut base, key, raw)?;
            }
        }

        let mut sweep_axes = Vec::new();
        for sweep_key in map.keys_with_prefix("sweep.") {
            let key = sweep_key.trim_start_matches("sweep.").to_string();
            if !RUN_KEYS.contains(&key.as_str()) {
                return cfg_err(format!("sweep axis `{sweep_key}`: `{key}` is not a run key"));
            }
            let raw = map.get(&sweep_key).expect("listed key exists");
            let values: Vec<String> = raw.split(',').map(|v| v.trim().to_string()).collect();
            if values.is_empty() || values.iter().any(|v| v.is_empty()) {
                return cfg_err(format!("sweep axis `{sweep_key}`: empty value list"));
            }
            // Validate every value against a scratch config now, not mid-run.
            for v in &values {
                let mut scratch = base.clone();
                apply_run_key(&mut scratch, &key, v)?;
            }
            sweep_axes.push((key, values));
        }

        let seed_list: Vec<u64> = match map.get("seed_list") {
            Some(raw) => parse_list("seed_list", raw)?,
            None => vec![0],
        };
        if seed_list.is_empty() {
            return cfg_err("seed_list must not be empty");
        }

        let out_dir: PathBuf = match std::env::var_os("SBA_OUT_DIR") {
            Some(root) => PathBuf::from(root),
            None => map
                .get("out_dir")
                .ok_or_else(|| CliError::Config("missing `out_dir` (or set SBA_OUT_DIR)".into()))?
                .into(),
        };
        let workers: usize = match map.get("workers") {
            Some(raw) => parse_scalar("workers", raw)?,
            None => 1,
        };
        if workers == 0 {
            return cfg_err("workers must be >= 1");
        }

        let dataset = DatasetSpec::from_config(map)?;
        map.check_fully_consumed()?;

        let spec = ExperimentSpec {
            base,
            sweep_axes,
            seed_list,
            out_dir,
            workers,
            dataset,
        };
        // Validate the whole cross product up front: a bad combination
        // should fail before any run starts.
        for run in spec.enumerate()? {
            run.config.validate().map_err(CliError::from)?;
        }
        Ok(spec)
    }

    /// The fully resolved run list: cross product of sweep axes, times the
    /// seed list (seed offsets every named stream seed).
    pub fn enumerate(&self) -> CliResult<Vec<PlannedRun>> {
        let mut combos: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (key, values) in &self.sweep_axes {
            let mut next = Vec::with_capacity(combos.len() * values.len());
            for combo in &combos {
                for v in values {
                    let mut c = combo.clone();
                    c.push((key.clone(), v.clone()));
                    next.push(c);
                }
            }
            combos = next;
        }

        let mut runs = Vec::with_capacity(combos.len() * self.seed_list.len());
        for combo in &combos {
            for &seed in &self.seed_list {
                let mut config = self.base.clone();
                for (key, value) in combo {
                    apply_run_key(&mut config, key, value)?;
                }
                config.seeds = config.seeds.offset(seed);
                let mut parts: Vec<String> = combo
                    .iter()
                    .map(|(k, v)| format!("{}={}", k.replace('.', "_"), v))
                    .collect();
                parts.push(format!("seed={seed}"));
                let run_id = parts.join("_");
                runs.push(PlannedRun {
                    index: runs.len(),
                    run_id,
                    seed,
                    config,
                });
            }
        }
        Ok(runs)
    }
}

/// One resolved run of a sweep.
#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub index: usize,
    pub run_id: String,
    pub seed: u64,
    pub config: RunConfig,
}

/// Canonical key=value lines of a resolved run config (for hashing).
pub fn canonical_run_lines(cfg: &RunConfig) -> Vec<String> {
    vec![
        format!("mode={:?}", cfg.mode),
        format!("loss_mode={:?}", cfg.loss_mode),
        format!("update_style={:?}", cfg.update_style),
        format!("eta={:?}", cfg.eta),
        format!("omega_radians={:?}", cfg.omega),
        format!("learning_rate={:?}", cfg.learning_rate),
        format!("momentum={:?}", cfg.momentum),
        format!("epochs={}", cfg.epochs),
        format!("batch_size={}", cfg.batch_size),
        format!("widths={:?}", cfg.widths),
        format!("split_set={:?}", cfg.effective_split_set()),
        format!("fixed_split={:?}", cfg.fixed_split),
        format!("kl_full_grad={}", cfg.kl_full_grad),
        format!("vicinity.p_gauss={}", cfg.vicinity.p_gauss),
        format!("vicinity.q_drop={}", cfg.vicinity.q_drop),
        format!("vicinity.sigma={:?}", cfg.vicinity.sigma),
        format!("vicinity.tau={:?}", cfg.vicinity.tau),
        format!("vicinity.keep_prob={:?}", cfg.vicinity.keep_prob),
        format!("vicinity.basis_mode={:?}", cfg.vicinity.basis_mode),
        format!("seeds.init={}", cfg.seeds.init),
        format!("seeds.shuffle={}", cfg.seeds.shuffle),
        format!("seeds.scheduler={}", cfg.seeds.scheduler),
        format!("seeds.noise={}", cfg.seeds.noise),
        format!("seeds.mask={}", cfg.seeds.mask),
        format!("seeds.split={}", cfg.seeds.split),
    ]
}
