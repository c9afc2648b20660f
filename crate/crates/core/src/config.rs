//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Unknown keys, duplicate keys and ill-typed values are errors that name the
//! offending line.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::selection::{InferMode, TtaConfig, DEFAULT_H, DEFAULT_THRESHOLD};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub vos_root: Option<PathBuf>,
    pub sod_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub mode: InferMode,
    pub infer_resolution: usize,
    pub h: f64,
    pub threshold: f64,
    pub tta: bool,
    pub tta_scales: Vec<usize>,
    pub tta_flip: bool,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tta = TtaConfig::desk_scale();
        RunConfig {
            train: TrainConfig::default(),
            vos_root: None,
            sod_root: None,
            out_dir: None,
            mode: InferMode::Select,
            infer_resolution: 64,
            h: DEFAULT_H,
            threshold: DEFAULT_THRESHOLD,
            tta: false,
            tta_scales: tta.scales,
            tta_flip: tta.flip,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Usize,
    U64,
    F64,
    Bool,
    Path,
    UsizeList,
    Mode,
}

impl Kind {
    fn describe(self) -> &'static str {
        match self {
            Kind::Usize | Kind::U64 => "a non-negative integer",
            Kind::F64 => "a number",
            Kind::Bool => "true or false",
            Kind::Path => "a path",
            Kind::UsizeList => "a comma-separated list of integers",
            Kind::Mode => "an inference mode",
        }
    }
}

/// Every accepted key with a short description.
pub const KEYS: &[(&str, &str)] = &[
    ("resolution", "training resolution"),
    ("batch_size", "training batch size"),
    ("learning_rate", "Adam learning rate"),
    ("steps", "number of training steps"),
    ("p_sod", "probability of drawing a SOD sample"),
    ("seed", "random seed"),
    ("freeze_norm", "freeze normalization layers"),
    ("channels", "encoder block widths"),
    ("decoder_width", "decoder block width"),
    ("vos_root", "VOS dataset root"),
    ("sod_root", "SOD dataset root"),
    ("out_dir", "output directory"),
    ("mode", "inference mode"),
    ("infer_resolution", "inference processing resolution"),
    ("h", "confidence threshold"),
    ("threshold", "mask quantization threshold"),
    ("tta", "enable test-time augmentation"),
    ("tta_scales", "test-time scales"),
    ("tta_flip", "add horizontally flipped variants"),
    ("jobs", "worker threads"),
];

fn kind_of(key: &str) -> Option<Kind> {
    Some(match key {
        "resolution" | "batch_size" | "steps" | "decoder_width" | "infer_resolution" | "jobs" => Kind::Usize,
        "seed" => Kind::U64,
        "learning_rate" | "p_sod" | "h" | "threshold" => Kind::F64,
        "freeze_norm" | "tta" | "tta_flip" => Kind::Bool,
        "vos_root" | "sod_root" | "out_dir" => Kind::Path,
        "channels" | "tta_scales" => Kind::UsizeList,
        "mode" => Kind::Mode,
        _ => return None,
    })
}

enum Value {
    Usize(usize),
    U64(u64),
    F64(f64),
    Bool(bool),
    Path(PathBuf),
    List(Vec<usize>),
    Mode(InferMode),
}

fn parse_value(kind: Kind, raw: &str) -> Option<Value> {
    Some(match kind {
        Kind::Usize => Value::Usize(raw.parse().ok()?),
        Kind::U64 => Value::U64(raw.parse().ok()?),
        Kind::F64 => Value::F64(raw.parse::<f64>().ok().filter(|v| v.is_finite())?),
        Kind::Bool => Value::Bool(match raw {
            "true" | "on" | "yes" => true,
            "false" | "off" | "no" => false,
            _ => return None,
        }),
        Kind::Path => Value::Path(PathBuf::from(raw)),
        Kind::UsizeList => Value::List(
            raw.split(',')
                .map(|s| s.trim().parse().ok())
                .collect::<Option<Vec<usize>>>()?,
        ),
        Kind::Mode => Value::Mode(raw.parse().ok()?),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<(String, usize)> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |reason: String| Error::Config {
                line: line_no,
                reason,
            };
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, raw) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, found `{content}`")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let kind = kind_of(key).ok_or_else(|| err(format!("unknown key `{key}`")))?;
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(err(format!("duplicate key `{key}` (first set on line {first})")));
            }
            seen.push((key.to_string(), line_no));
            let value = parse_value(kind, raw)
                .ok_or_else(|| err(format!("`{key}` expects {}, found `{raw}`", kind.describe())))?;
            cfg.assign(key, value);
        }
        Ok(cfg)
    }

    fn assign(&mut self, key: &str, value: Value) {
        let t = &mut self.train;
        match (key, value) {
            ("resolution", Value::Usize(v)) => t.resolution = v,
            ("batch_size", Value::Usize(v)) => t.batch_size = v,
            ("steps", Value::Usize(v)) => t.steps = v,
            ("decoder_width", Value::Usize(v)) => t.net.decoder_width = v,
            ("infer_resolution", Value::Usize(v)) => self.infer_resolution = v,
            ("jobs", Value::Usize(v)) => self.jobs = v,
            ("seed", Value::U64(v)) => t.seed = v,
            ("learning_rate", Value::F64(v)) => t.learning_rate = v,
            ("p_sod", Value::F64(v)) => t.p_sod = v,
            ("h", Value::F64(v)) => self.h = v,
            ("threshold", Value::F64(v)) => self.threshold = v,
            ("freeze_norm", Value::Bool(v)) => t.freeze_norm = v,
            ("tta", Value::Bool(v)) => self.tta = v,
            ("tta_flip", Value::Bool(v)) => self.tta_flip = v,
            ("vos_root", Value::Path(v)) => self.vos_root = Some(v),
            ("sod_root", Value::Path(v)) => self.sod_root = Some(v),
            ("out_dir", Value::Path(v)) => self.out_dir = Some(v),
            ("channels", Value::List(v)) => t.net.channels = v,
            ("tta_scales", Value::List(v)) => self.tta_scales = v,
            ("mode", Value::Mode(v)) => self.mode = v,
            (k, _) => unreachable!("registry and assignment disagree on `{k}`"),
        }
    }

    /// Reads a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.vos_root, &mut cfg.sod_root, &mut cfg.out_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn tta_config(&self) -> Option<TtaConfig> {
        self.tta.then(|| TtaConfig {
            scales: self.tta_scales.clone(),
            flip: self.tta_flip,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_typed_values_and_comments() {
        let cfg = RunConfig::parse(
            "# desk run\nresolution = 64\nlearning_rate=1e-3  # fast\nfreeze_norm = off\nchannels = 8, 16,32,64\nmode = flow_only\n\nvos_root = data/vos\n",
        )
        .unwrap();
        assert_eq!(cfg.train.resolution, 64);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert!(!cfg.train.freeze_norm);
        assert_eq!(cfg.train.net.channels, vec![8, 16, 32, 64]);
        assert_eq!(cfg.mode, InferMode::FlowOnly);
        assert_eq!(cfg.vos_root, Some(PathBuf::from("data/vos")));
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("steps = 3\nbogus = 1\n", 2, "unknown key"),
            ("\n\nsteps = many\n", 3, "expects"),
            ("steps = 3\nsteps = 4\n", 2, "duplicate"),
            ("seed 4\n", 1, "key = value"),
            ("learning_rate = nan\n", 1, "expects"),
            ("mode = both\n", 1, "expects"),
        ];
        for (text, line, needle) in cases {
            match RunConfig::parse(text) {
                Err(Error::Config { line: l, reason }) => {
                    assert_eq!(l, line, "{text:?}");
                    assert!(reason.contains(needle), "{reason}");
                }
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn every_registered_key_is_accepted() {
        for (key, _) in KEYS {
            assert!(kind_of(key).is_some(), "{key}");
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "vos_root = vos\nout_dir = /abs/out\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.vos_root, Some(dir.path().join("vos")));
        assert_eq!(cfg.out_dir, Some(PathBuf::from("/abs/out")));
    }
}
