//! Experiment configuration: a TOML file of dotted keys such as
//! `stages.1.lr = 0.0002`. Every key has a default, unknown keys are
//! rejected with the nearest valid spelling, and errors carry line numbers.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mmnets::networks::{ArchConfig, Modality, SideInfo};
use mmnets::trainer::{StageConfig, TaskSpec, DESK_BATCH, DESK_ITERATIONS};
use toml_edit::{ImDocument, Item, Value};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`{}", suggestion.as_ref().map(|s| format!(", did you mean `{s}`?")).unwrap_or_default())]
    UnknownKey {
        line: usize,
        key: String,
        suggestion: Option<String>,
    },
    #[error("line {line}: `{key}` must be {expected}")]
    Type {
        line: usize,
        key: String,
        expected: &'static str,
    },
    #[error("{}{msg}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Invalid { line: Option<usize>, msg: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Scenes,
    Opponent,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Scenes => "scenes",
            TaskKind::Opponent => "opponent",
        }
    }

    pub fn anchor(self) -> Modality {
        match self {
            TaskKind::Scenes => Modality::Rgb,
            TaskKind::Opponent => Modality::Theta1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub task: TaskKind,
    pub n_train: usize,
    pub n_test: usize,
    /// Segmentation classes including background; scenes only.
    pub classes: usize,
    pub max_objects: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub log_every: u64,
    pub monitor_samples: usize,
    /// Iterations between rolling checkpoints; 0 keeps only stage ends.
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    /// Dataset written by `gen-data`; regenerated from the seed when unset.
    pub data_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub alpha: f64,
    pub cascade: bool,
    pub fusion: bool,
    /// Also train and score a stage-3 branch without pseudo-pairs.
    pub no_pp: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arch: ArchConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub stages: Vec<StageConfig>,
    pub paths: PathsConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `task`.
    pub fn defaults(task: TaskKind) -> Self {
        ExperimentConfig {
            seed: 0,
            arch: ArchConfig::default(),
            data: DataConfig {
                task,
                n_train: 2000,
                n_test: 200,
                classes: 8,
                max_objects: 4,
            },
            train: TrainConfig {
                batch: DESK_BATCH,
                log_every: 100,
                monitor_samples: 32,
                checkpoint_every: 500,
            },
            stages: StageConfig::schedule(DESK_ITERATIONS, task.anchor()),
            paths: PathsConfig {
                out_dir: PathBuf::from("runs/default"),
                data_dir: None,
            },
            eval: EvalConfig {
                alpha: 0.2,
                cascade: true,
                fusion: true,
                no_pp: false,
            },
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        match self.data.task {
            TaskKind::Scenes => TaskSpec::scenes(self.data.classes),
            TaskKind::Opponent => TaskSpec::opponent(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ConfigError::Invalid { line: None, msg });
        self.arch.validate().or_else(|e| bad(format!("arch: {e}")))?;
        let d = &self.data;
        if d.n_train < 2 || d.n_train % 2 != 0 {
            return bad(format!("data.n_train = {} must be even and at least 2", d.n_train));
        }
        if d.n_test == 0 {
            return bad("data.n_test must be positive".into());
        }
        if d.task == TaskKind::Scenes && !(2..=8).contains(&d.classes) {
            return bad(format!("data.classes = {} must be between 2 and 8", d.classes));
        }
        if d.max_objects == 0 {
            return bad("data.max_objects must be positive".into());
        }
        if self.train.batch == 0 {
            return bad("train.batch must be positive".into());
        }
        if self.stages.is_empty() {
            return bad("at least one stage is required".into());
        }
        for st in &self.stages {
            st.validate().or_else(|e| bad(e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.eval.alpha) {
            return bad(format!("eval.alpha = {} must lie in [0, 1]", self.eval.alpha));
        }
        Ok(())
    }
}

const STAGE_COUNT: usize = 3;
const WEIGHT_KEYS: [&str; 6] = ["rgb", "seg", "depth", "lat", "l2", "pp"];
const STAGE_KEYS: [&str; 7] = [
    "iterations",
    "lr",
    "noise_sigma",
    "autoencoders",
    "latent_consistency",
    "pseudo_pairs",
    "frozen",
];
const TOP_KEYS: [&str; 20] = [
    "seed",
    "arch.stage_widths",
    "arch.convs_per_stage",
    "arch.input_hw",
    "arch.side_info",
    "arch.noise_sigma",
    "arch.init_sigma",
    "data.task",
    "data.n_train",
    "data.n_test",
    "data.classes",
    "data.max_objects",
    "train.batch",
    "train.log_every",
    "train.monitor_samples",
    "train.checkpoint_every",
    "paths.out_dir",
    "paths.data_dir",
    "eval.alpha",
    "eval.cascade",
];
const EVAL_EXTRA: [&str; 2] = ["eval.fusion", "eval.no_pp"];

/// Every key the parser accepts.
pub fn valid_keys() -> Vec<String> {
    let mut keys: Vec<String> = TOP_KEYS.iter().chain(&EVAL_EXTRA).map(|s| s.to_string()).collect();
    for n in 1..=STAGE_COUNT {
        keys.extend(STAGE_KEYS.iter().map(|k| format!("stages.{n}.{k}")));
        keys.extend(WEIGHT_KEYS.iter().map(|k| format!("stages.{n}.weights.{k}")));
    }
    keys
}

fn nearest_key(key: &str) -> Option<String> {
    valid_keys()
        .into_iter()
        .map(|k| (strsim::levenshtein(key, &k), k))
        .min()
        .filter(|(d, _)| *d <= key.len().max(4) / 2)
        .map(|(_, k)| k)
}

struct Entry {
    key: String,
    value: Value,
    line: usize,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn table_pairs(t: &dyn toml_edit::TableLike) -> Vec<(&toml_edit::Key, &Item)> {
    t.iter().map(|(k, _)| t.get_key_value(k).expect("own key")).collect()
}

fn flatten_pairs(pairs: Vec<(&toml_edit::Key, &Item)>, prefix: &str, text: &str, out: &mut Vec<Entry>) -> Result<()> {
    for (key, item) in pairs {
        let full = if prefix.is_empty() {
            key.get().to_string()
        } else {
            format!("{prefix}.{}", key.get())
        };
        let line = key
            .span()
            .or_else(|| item.span())
            .map_or(0, |s| line_of(text, s.start));
        match item {
            Item::Table(t) => flatten_pairs(table_pairs(t), &full, text, out)?,
            Item::Value(Value::InlineTable(t)) => flatten_pairs(table_pairs(t), &full, text, out)?,
            Item::Value(v) => out.push(Entry {
                key: full,
                value: v.clone(),
                line,
            }),
            Item::ArrayOfTables(_) => {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("`{full}`: arrays of tables are not supported"),
                })
            }
            Item::None => {}
        }
    }
    Ok(())
}

fn entries(text: &str) -> Result<Vec<Entry>> {
    let doc = ImDocument::parse(text.to_string()).map_err(|e| ConfigError::Syntax {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        msg: e.message().trim().to_string(),
    })?;
    let root = doc.as_table();
    let mut out = Vec::new();
    flatten_pairs(table_pairs(root), "", text, &mut out)?;
    Ok(out)
}

impl Entry {
    fn type_err(&self, expected: &'static str) -> ConfigError {
        ConfigError::Type {
            line: self.line,
            key: self.key.clone(),
            expected,
        }
    }

    fn invalid(&self, msg: impl std::fmt::Display) -> ConfigError {
        ConfigError::Invalid {
            line: Some(self.line),
            msg: format!("`{}`: {msg}", self.key),
        }
    }

    fn uint(&self) -> Result<u64> {
        self.value
            .as_integer()
            .and_then(|v| u64::try_from(v).ok())
            .ok_or_else(|| self.type_err("a non-negative integer"))
    }

    fn usize(&self) -> Result<usize> {
        self.uint().map(|v| v as usize)
    }

    fn real(&self) -> Result<f64> {
        match &self.value {
            Value::Float(f) => Ok(*f.value()),
            Value::Integer(i) => Ok(*i.value() as f64),
            _ => Err(self.type_err("a number")),
        }
    }

    fn boolean(&self) -> Result<bool> {
        self.value.as_bool().ok_or_else(|| self.type_err("true or false"))
    }

    fn string(&self) -> Result<&str> {
        self.value.as_str().ok_or_else(|| self.type_err("a string"))
    }

    fn uint_list(&self) -> Result<Vec<usize>> {
        let arr = self.value.as_array().ok_or_else(|| self.type_err("an array of integers"))?;
        arr.iter()
            .map(|v| {
                v.as_integer()
                    .and_then(|i| usize::try_from(i).ok())
                    .ok_or_else(|| self.type_err("an array of integers"))
            })
            .collect()
    }

    fn string_list(&self) -> Result<Vec<String>> {
        let arr = self.value.as_array().ok_or_else(|| self.type_err("an array of strings"))?;
        arr.iter()
            .map(|v| v.as_str().map(str::to_string).ok_or_else(|| self.type_err("an array of strings")))
            .collect()
    }
}

fn apply(cfg: &mut ExperimentConfig, e: &Entry) -> Result<()> {
    let parts: Vec<&str> = e.key.split('.').collect();
    match parts.as_slice() {
        ["seed"] => cfg.seed = e.uint()?,
        ["arch", "stage_widths"] => cfg.arch.stage_widths = e.uint_list()?,
        ["arch", "convs_per_stage"] => cfg.arch.convs_per_stage = e.uint_list()?,
        ["arch", "input_hw"] => match e.uint_list()?.as_slice() {
            &[h, w] => cfg.arch.input_hw = (h, w),
            _ => return Err(e.type_err("a [height, width] pair")),
        },
        ["arch", "side_info"] => cfg.arch.side_info = e.string()?.parse::<SideInfo>().map_err(|m| e.invalid(m))?,
        ["arch", "noise_sigma"] => cfg.arch.noise_sigma = e.real()?,
        ["arch", "init_sigma"] => cfg.arch.init_sigma = e.real()?,
        ["data", "task"] => {}
        ["data", "n_train"] => cfg.data.n_train = e.usize()?,
        ["data", "n_test"] => cfg.data.n_test = e.usize()?,
        ["data", "classes"] => cfg.data.classes = e.usize()?,
        ["data", "max_objects"] => cfg.data.max_objects = e.usize()?,
        ["train", "batch"] => cfg.train.batch = e.usize()?,
        ["train", "log_every"] => cfg.train.log_every = e.uint()?,
        ["train", "monitor_samples"] => cfg.train.monitor_samples = e.usize()?,
        ["train", "checkpoint_every"] => cfg.train.checkpoint_every = e.uint()?,
        ["paths", "out_dir"] => cfg.paths.out_dir = PathBuf::from(e.string()?),
        ["paths", "data_dir"] => cfg.paths.data_dir = Some(PathBuf::from(e.string()?)),
        ["eval", "alpha"] => cfg.eval.alpha = e.real()?,
        ["eval", "cascade"] => cfg.eval.cascade = e.boolean()?,
        ["eval", "fusion"] => cfg.eval.fusion = e.boolean()?,
        ["eval", "no_pp"] => cfg.eval.no_pp = e.boolean()?,
        ["stages", n, rest @ ..] => {
            let idx = n
                .parse::<usize>()
                .ok()
                .filter(|i| (1..=STAGE_COUNT).contains(i))
                .ok_or_else(|| unknown(e))?;
            let st = &mut cfg.stages[idx - 1];
            match rest {
                ["iterations"] => st.iterations = e.uint()?,
                ["lr"] => st.lr = e.real()?,
                ["noise_sigma"] => st.noise_sigma = e.real()?,
                ["autoencoders"] => st.autoencoders = e.boolean()?,
                ["latent_consistency"] => st.latent_consistency = e.boolean()?,
                ["pseudo_pairs"] => st.pseudo_pairs = e.boolean()?,
                ["frozen"] => st.frozen = e.string_list()?.into_iter().collect::<BTreeSet<_>>(),
                ["weights", w] => {
                    let v = e.real()?;
                    let slot = match *w {
                        "rgb" => &mut st.weights.rgb,
                        "seg" => &mut st.weights.seg,
                        "depth" => &mut st.weights.depth,
                        "lat" => &mut st.weights.lat,
                        "l2" => &mut st.weights.l2,
                        "pp" => &mut st.weights.pp,
                        _ => return Err(unknown(e)),
                    };
                    *slot = v;
                }
                _ => return Err(unknown(e)),
            }
        }
        _ => return Err(unknown(e)),
    }
    Ok(())
}

fn unknown(e: &Entry) -> ConfigError {
    ConfigError::UnknownKey {
        line: e.line,
        key: e.key.clone(),
        suggestion: nearest_key(&e.key),
    }
}

/// Parses configuration text; an empty text yields the scene-task defaults.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let entries = entries(text)?;
    // The task decides the default schedule's frozen anchor, so it goes first.
    let task = match entries.iter().find(|e| e.key == "data.task") {
        Some(e) => match e.string()? {
            "scenes" => TaskKind::Scenes,
            "opponent" => TaskKind::Opponent,
            other => return Err(e.invalid(format!("unknown task {other:?} (scenes or opponent)"))),
        },
        None => TaskKind::Scenes,
    };
    let mut cfg = ExperimentConfig::defaults(task);
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.key.clone()) {
            return Err(e.invalid("key given twice"));
        }
        apply(&mut cfg, e)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}

fn list<T: std::fmt::Display>(v: &[T]) -> String {
    let items: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", items.join(", "))
}

fn quoted(s: &str) -> String {
    Value::from(s).to_string().trim().to_string()
}

/// The full effective configuration, one key per line; parses back to an
/// equal config.
pub fn render_config(cfg: &ExperimentConfig) -> String {
    let mut o = String::new();
    let mut kv = |k: &str, v: String| writeln!(o, "{k} = {v}").expect("string write");
    kv("seed", cfg.seed.to_string());
    let a = &cfg.arch;
    kv("arch.stage_widths", list(&a.stage_widths));
    kv("arch.convs_per_stage", list(&a.convs_per_stage));
    kv("arch.input_hw", list(&[a.input_hw.0, a.input_hw.1]));
    kv("arch.side_info", quoted(&a.side_info.to_string()));
    kv("arch.noise_sigma", format!("{:?}", a.noise_sigma));
    kv("arch.init_sigma", format!("{:?}", a.init_sigma));
    let d = &cfg.data;
    kv("data.task", quoted(d.task.name()));
    kv("data.n_train", d.n_train.to_string());
    kv("data.n_test", d.n_test.to_string());
    kv("data.classes", d.classes.to_string());
    kv("data.max_objects", d.max_objects.to_string());
    let t = &cfg.train;
    kv("train.batch", t.batch.to_string());
    kv("train.log_every", t.log_every.to_string());
    kv("train.monitor_samples", t.monitor_samples.to_string());
    kv("train.checkpoint_every", t.checkpoint_every.to_string());
    kv("paths.out_dir", quoted(&cfg.paths.out_dir.to_string_lossy()));
    if let Some(dd) = &cfg.paths.data_dir {
        kv("paths.data_dir", quoted(&dd.to_string_lossy()));
    }
    kv("eval.alpha", format!("{:?}", cfg.eval.alpha));
    kv("eval.cascade", cfg.eval.cascade.to_string());
    kv("eval.fusion", cfg.eval.fusion.to_string());
    kv("eval.no_pp", cfg.eval.no_pp.to_string());
    for (i, st) in cfg.stages.iter().enumerate() {
        let p = format!("stages.{}", i + 1);
        kv(&format!("{p}.iterations"), st.iterations.to_string());
        kv(&format!("{p}.lr"), format!("{:?}", st.lr));
        kv(&format!("{p}.noise_sigma"), format!("{:?}", st.noise_sigma));
        kv(&format!("{p}.autoencoders"), st.autoencoders.to_string());
        kv(&format!("{p}.latent_consistency"), st.latent_consistency.to_string());
        kv(&format!("{p}.pseudo_pairs"), st.pseudo_pairs.to_string());
        let frozen: Vec<String> = st.frozen.iter().map(|g| quoted(g)).collect();
        kv(&format!("{p}.frozen"), format!("[{}]", frozen.join(", ")));
        for (name, v) in st.weights.named() {
            kv(&format!("{p}.weights.{name}"), format!("{v:?}"));
        }
    }
    o
}
