//! Training configuration files.
//!
//! A config file is TOML laid out like [`TrainConfig`], plus three top-level
//! keys: `regime` (`epsilon` or `rf`), `preset` (`toy` or `full`) and
//! `intermediate_restorer` (path to a frozen stage-0 checkpoint). Every other
//! key overrides one leaf of the chosen preset, so a file only needs to list
//! what it changes. Unknown keys and mistyped values are reported with the
//! offending key and its line.

use std::path::{Path, PathBuf};

use hdrface_core::onestep::Regime;
use hdrface_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::de::{DeTable, DeValue};
use toml::{Table, Value};

use crate::error::{HdrError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Full,
}

impl Preset {
    pub fn config(self, regime: Regime) -> TrainConfig {
        match self {
            Preset::Toy => TrainConfig::toy(regime),
            Preset::Full => TrainConfig::full(regime),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub preset: Preset,
    pub intermediate_restorer: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(preset: Preset, regime: Regime) -> Self {
        RunConfig { train: preset.config(regime), preset, intermediate_restorer: None }
    }
}

/// Optional fields that are absent from a serialized preset but may be set.
const OPTIONAL_TABLES: &[&[&str]] = &[&["model", "schedule"]];

/// Tables carrying one of these keys are enum variants and are replaced whole.
const TAG_KEYS: &[&str] = &["kind", "family"];

struct Leaf {
    path: Vec<String>,
    value: Value,
    line: usize,
}

impl Leaf {
    fn key(&self) -> String {
        self.path.join(".")
    }
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| HdrError::io(path, e))?;
    parse(&text, path)
}

pub fn parse(src: &str, path: &Path) -> Result<RunConfig> {
    let err = |line: usize, key: &str, message: String| HdrError::Config { path: path.to_path_buf(), line, key: key.into(), message };
    let doc = DeTable::parse(src).map_err(|e| {
        let line = e.span().map_or(1, |s| line_of(src, s.start));
        err(line, "<syntax>", e.message().trim().to_string())
    })?;
    let plain: Table = toml::from_str(src).map_err(|e| err(1, "<syntax>", e.message().trim().to_string()))?;

    let mut regime = Regime::Epsilon;
    let mut preset = Preset::Toy;
    let mut restorer = None;
    let mut leaves = Vec::new();
    for (key, value) in doc.get_ref() {
        let name = key.get_ref().as_ref();
        let line = line_of(src, key.span().start);
        match name {
            "regime" => {
                let s = value.get_ref().as_str().ok_or_else(|| err(line, name, "expected a string".into()))?;
                regime = Regime::parse(s).map_err(|e| err(line, name, e.to_string()))?;
            }
            "preset" => {
                preset = match value.get_ref().as_str() {
                    Some("toy") => Preset::Toy,
                    Some("full") => Preset::Full,
                    _ => return Err(err(line, name, "expected \"toy\" or \"full\"".into())),
                }
            }
            "intermediate_restorer" => {
                let s = value.get_ref().as_str().ok_or_else(|| err(line, name, "expected a path string".into()))?;
                let p = PathBuf::from(s);
                restorer = Some(match path.parent() {
                    Some(dir) if p.is_relative() => dir.join(p),
                    _ => p,
                });
            }
            _ => collect_leaves(src, &plain, vec![name.to_string()], value, line, &mut leaves),
        }
    }

    let base = preset_table(preset, regime)?;
    let mut merged = base.clone();
    for leaf in &leaves {
        apply(&mut merged, leaf).map_err(|m| err(leaf.line, &leaf.key(), m))?;
    }
    let train = match finish(&merged) {
        Ok(t) => t,
        Err(message) => {
            let mut step = base;
            let mut blamed = None;
            for leaf in &leaves {
                apply(&mut step, leaf).map_err(|m| err(leaf.line, &leaf.key(), m))?;
                if let Err(m) = finish(&step) {
                    blamed = Some((leaf, m));
                    break;
                }
            }
            return Err(match blamed {
                Some((leaf, m)) => err(leaf.line, &leaf.key(), m),
                None => err(1, "<config>", message),
            });
        }
    };
    Ok(RunConfig { train, preset, intermediate_restorer: restorer })
}

fn collect_leaves(src: &str, plain: &Table, path: Vec<String>, value: &toml::Spanned<DeValue<'_>>, line: usize, out: &mut Vec<Leaf>) {
    let lookup = || {
        let mut cur = plain.get(&path[0])?;
        for seg in &path[1..] {
            cur = cur.as_table()?.get(seg)?;
        }
        Some(cur.clone())
    };
    match value.get_ref() {
        DeValue::Table(t) if !t.keys().any(|k| TAG_KEYS.contains(&k.get_ref().as_ref())) && !is_optional(&path) => {
            for (k, v) in t {
                let mut p = path.clone();
                p.push(k.get_ref().to_string());
                collect_leaves(src, plain, p, v, line_of(src, k.span().start), out);
            }
        }
        _ => {
            if let Some(v) = lookup() {
                out.push(Leaf { path, value: v, line });
            }
        }
    }
}

fn is_optional(path: &[String]) -> bool {
    OPTIONAL_TABLES.iter().any(|p| p.len() == path.len() && p.iter().zip(path).all(|(a, b)| a == b))
}

/// The preset serialized as a table, with implicit defaults written out.
pub fn preset_table(preset: Preset, regime: Regime) -> Result<Table> {
    let mut cfg = preset.config(regime);
    cfg.model.discriminator.conditioned = Some(cfg.model.disc_conditioned());
    match Value::try_from(&cfg) {
        Ok(Value::Table(t)) => Ok(t),
        Ok(_) => unreachable!("a struct serializes to a table"),
        Err(e) => Err(HdrError::usage(format!("cannot serialize preset: {e}"))),
    }
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

fn apply(root: &mut Table, leaf: &Leaf) -> std::result::Result<(), String> {
    let (last, parents) = leaf.path.split_last().expect("leaf path is never empty");
    let mut cur = root;
    for (i, seg) in parents.iter().enumerate() {
        cur = match cur.get_mut(seg) {
            Some(Value::Table(t)) => t,
            Some(_) => return Err(format!("`{}` is not a table", parents[..=i].join("."))),
            None => return Err("unknown key".into()),
        };
    }
    let value = match cur.get(last) {
        None if is_optional(&leaf.path) => leaf.value.clone(),
        None => return Err("unknown key".into()),
        Some(Value::Float(_)) => match leaf.value {
            Value::Integer(i) => Value::Float(i as f64),
            Value::Float(f) => Value::Float(f),
            ref other => return Err(format!("expected a float, found {}", type_name(other))),
        },
        Some(old) if old.same_type(&leaf.value) => leaf.value.clone(),
        Some(old) => return Err(format!("expected {}, found {}", type_name(old), type_name(&leaf.value))),
    };
    cur.insert(last.clone(), value);
    Ok(())
}

fn finish(table: &Table) -> std::result::Result<TrainConfig, String> {
    let cfg: TrainConfig = Value::Table(table.clone()).try_into().map_err(|e: toml::de::Error| e.message().trim().to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

/// Renders a config back to TOML; [`parse`] reads the result unchanged.
pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    let mut doc = Table::new();
    doc.insert("regime".into(), Value::String(if cfg.train.model.regime == Regime::Epsilon { "epsilon" } else { "rf" }.into()));
    doc.insert("preset".into(), Value::String(if cfg.preset == Preset::Toy { "toy" } else { "full" }.into()));
    if let Some(p) = &cfg.intermediate_restorer {
        doc.insert("intermediate_restorer".into(), Value::String(p.display().to_string()));
    }
    match Value::try_from(&cfg.train) {
        Ok(Value::Table(t)) => doc.extend(t),
        _ => return Err(HdrError::usage("cannot serialize config")),
    }
    toml::to_string(&doc).map_err(|e| HdrError::usage(format!("cannot serialize config: {e}")))
}
