//! `key = value` configuration files with `[section]` headers.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown sections
//! and unknown keys are hard errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::ctr::CtrConfig;
use crate::error::{Error, Result};
use crate::train::{TrainConfig, UiemMode, Variant};
use crate::uiem::{Pooling, Readout, UiemConfig};
use crate::world::WorldConfig;

#[derive(Clone, Debug, Default, PartialEq)]
struct Entry {
    key: String,
    value: String,
    line: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Section {
    name: String,
    entries: Vec<Entry>,
}

/// Parsed but untyped configuration text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Document {
    sections: Vec<Section>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Document::default();
        let mut current = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {lineno}: unterminated section header `{line}`"))
                })?;
                current = name.trim().to_string();
                doc.section_mut(&current);
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {lineno}: expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {lineno}: empty key")));
            }
            let section = doc.section_mut(&current);
            if section.entries.iter().any(|e| e.key == key) {
                return Err(Error::Config(format!(
                    "line {lineno}: duplicate key `{key}` in [{current}]"
                )));
            }
            section.entries.push(Entry {
                key: key.to_string(),
                value: value.trim().to_string(),
                line: lineno,
            });
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn section_mut(&mut self, name: &str) -> &mut Section {
        if let Some(i) = self.sections.iter().position(|s| s.name == name) {
            &mut self.sections[i]
        } else {
            self.sections.push(Section {
                name: name.to_string(),
                entries: Vec::new(),
            });
            self.sections.last_mut().expect("just pushed")
        }
    }

    fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.section(section)?
            .entries
            .iter()
            .find(|e| e.key == key)
            .map(|e| e.value.as_str())
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        let value = value.into();
        let s = self.section_mut(section);
        match s.entries.iter_mut().find(|e| e.key == key) {
            Some(e) => e.value = value,
            None => s.entries.push(Entry {
                key: key.to_string(),
                value,
                line: 0,
            }),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.sections {
            if !s.name.is_empty() {
                let _ = writeln!(out, "[{}]", s.name);
            }
            for e in &s.entries {
                let _ = writeln!(out, "{} = {}", e.key, e.value);
            }
            out.push('\n');
        }
        out
    }

    fn reader<'a>(&'a self, section: &'a str, keys: &'static [&'static str]) -> SectionReader<'a> {
        SectionReader {
            section,
            entries: self.section(section).map(|s| s.entries.as_slice()).unwrap_or(&[]),
            keys,
        }
    }

    fn check_sections(&self, known: &[&str]) -> Result<()> {
        for s in &self.sections {
            if !known.contains(&s.name.as_str()) {
                return Err(Error::Config(format!(
                    "unknown section [{}]; accepted sections: {}",
                    s.name,
                    known.iter().map(|k| format!("[{k}]")).collect::<Vec<_>>().join(", ")
                )));
            }
        }
        Ok(())
    }
}

struct SectionReader<'a> {
    section: &'a str,
    entries: &'a [Entry],
    keys: &'static [&'static str],
}

impl SectionReader<'_> {
    fn reject_unknown(&self, extra_allowed: &[&str]) -> Result<()> {
        for e in self.entries {
            if !self.keys.contains(&e.key.as_str()) && !extra_allowed.contains(&e.key.as_str()) {
                return Err(Error::Config(format!(
                    "line {}: unknown key `{}` in [{}]; accepted keys: {}",
                    e.line,
                    e.key,
                    self.section,
                    self.keys.join(", ")
                )));
            }
        }
        Ok(())
    }

    fn parse<T>(&self, key: &str, target: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        debug_assert!(self.keys.contains(&key), "{key} missing from key list");
        if let Some(e) = self.entries.iter().find(|e| e.key == key) {
            *target = e.value.parse().map_err(|err| {
                Error::Config(format!(
                    "line {}: [{}] {} = `{}`: {err}",
                    e.line, self.section, key, e.value
                ))
            })?;
        }
        Ok(())
    }

    fn pair(&self, key: &str, target: &mut (f64, f64)) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.key == key) {
            let bad = || {
                Error::Config(format!(
                    "line {}: [{}] {} = `{}` must be two comma-separated numbers",
                    e.line, self.section, key, e.value
                ))
            };
            let (a, b) = e.value.split_once(',').ok_or_else(bad)?;
            *target = (
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            );
        }
        Ok(())
    }
}

const WORLD_KEYS: &[&str] = &[
    "users",
    "items",
    "item_dim",
    "item_features",
    "num_days",
    "exposures_per_user_day",
    "portal_beta",
    "block_beta",
    "preference_scale",
    "habit_coupling",
    "taste_share",
    "portal_exposure_tilt",
    "promotion_strength",
    "click_bias",
    "eval_days",
];

pub fn world_from_document(doc: &Document, extra_allowed: &[&str]) -> Result<WorldConfig> {
    let r = doc.reader("world", WORLD_KEYS);
    r.reject_unknown(extra_allowed)?;
    let mut c = WorldConfig::default();
    r.parse("users", &mut c.users)?;
    r.parse("items", &mut c.items)?;
    r.parse("item_dim", &mut c.item_dim)?;
    r.parse("item_features", &mut c.item_features)?;
    r.parse("num_days", &mut c.num_days)?;
    r.parse("exposures_per_user_day", &mut c.exposures_per_user_day)?;
    r.pair("portal_beta", &mut c.portal_beta)?;
    r.pair("block_beta", &mut c.block_beta)?;
    r.parse("preference_scale", &mut c.preference_scale)?;
    r.parse("habit_coupling", &mut c.habit_coupling)?;
    r.parse("taste_share", &mut c.taste_share)?;
    r.parse("portal_exposure_tilt", &mut c.portal_exposure_tilt)?;
    r.parse("promotion_strength", &mut c.promotion_strength)?;
    r.parse("click_bias", &mut c.click_bias)?;
    r.parse("eval_days", &mut c.eval_days)?;
    Ok(c)
}

/// Serializes a world config (full precision) into a `[world]` document.
pub fn world_document(c: &WorldConfig) -> Document {
    let mut d = Document::default();
    d.set("world", "users", c.users.to_string());
    d.set("world", "items", c.items.to_string());
    d.set("world", "item_dim", c.item_dim.to_string());
    d.set("world", "item_features", c.item_features.to_string());
    d.set("world", "num_days", c.num_days.to_string());
    d.set("world", "exposures_per_user_day", c.exposures_per_user_day.to_string());
    d.set("world", "portal_beta", format!("{:?}, {:?}", c.portal_beta.0, c.portal_beta.1));
    d.set("world", "block_beta", format!("{:?}, {:?}", c.block_beta.0, c.block_beta.1));
    d.set("world", "preference_scale", format!("{:?}", c.preference_scale));
    d.set("world", "habit_coupling", format!("{:?}", c.habit_coupling));
    d.set("world", "taste_share", format!("{:?}", c.taste_share));
    d.set("world", "portal_exposure_tilt", format!("{:?}", c.portal_exposure_tilt));
    d.set("world", "promotion_strength", format!("{:?}", c.promotion_strength));
    d.set("world", "click_bias", format!("{:?}", c.click_bias));
    d.set("world", "eval_days", c.eval_days.to_string());
    d
}

const UIEM_KEYS: &[&str] = &[
    "d_model", "heads", "layers", "ffn_dim", "seq_len", "readout", "pooling",
];
const CTR_KEYS: &[&str] = &["dim", "max_behaviors", "hidden"];
const TRAIN_KEYS: &[&str] = &[
    "alpha",
    "beta",
    "clip_lo",
    "clip_hi",
    "learning_rate",
    "batch_size_ctr",
    "batch_size_uiem",
    "epochs",
    "variant",
    "decay",
    "epsilon",
    "accumulator_init",
    "uiem_mode",
    "pretrain_epochs",
];
const RUN_KEYS: &[&str] = &["seed"];
const SECTIONS: &[&str] = &["run", "world", "uiem", "ctr", "train"];

/// Everything a command needs, from one file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub uiem: UiemConfig,
    pub ctr: CtrConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            world: WorldConfig::default(),
            uiem: UiemConfig::default(),
            ctr: CtrConfig::default(),
            train: TrainConfig {
                seed: 1,
                ..TrainConfig::default()
            },
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown variant `{s}`; expected one of: {}",
                    Variant::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
                ))
            })
    }
}

impl FromStr for UiemMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cotrain" => Ok(UiemMode::CoTrain),
            "pretrain_freeze" => Ok(UiemMode::PretrainFreeze),
            _ => Err(Error::Config(format!(
                "unknown uiem_mode `{s}`; expected cotrain or pretrain_freeze"
            ))),
        }
    }
}

impl FromStr for Readout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Readout::Last),
            "mean" => Ok(Readout::Mean),
            _ => Err(Error::Config(format!("unknown readout `{s}`; expected last or mean"))),
        }
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "none" => Ok(Pooling::None),
            _ => Err(Error::Config(format!("unknown pooling `{s}`; expected mean or none"))),
        }
    }
}

impl RunConfig {
    pub fn from_document(doc: &Document) -> Result<Self> {
        doc.check_sections(SECTIONS)?;
        let mut c = RunConfig::default();

        let r = doc.reader("run", RUN_KEYS);
        r.reject_unknown(&[])?;
        r.parse("seed", &mut c.seed)?;

        c.world = world_from_document(doc, &[])?;

        let r = doc.reader("uiem", UIEM_KEYS);
        r.reject_unknown(&[])?;
        r.parse("d_model", &mut c.uiem.d_model)?;
        r.parse("heads", &mut c.uiem.heads)?;
        r.parse("layers", &mut c.uiem.layers)?;
        r.parse("ffn_dim", &mut c.uiem.ffn_dim)?;
        r.parse("seq_len", &mut c.uiem.seq_len)?;
        r.parse("readout", &mut c.uiem.readout)?;
        r.parse("pooling", &mut c.uiem.pooling)?;

        let r = doc.reader("ctr", CTR_KEYS);
        r.reject_unknown(&[])?;
        r.parse("dim", &mut c.ctr.dim)?;
        r.parse("max_behaviors", &mut c.ctr.max_behaviors)?;
        r.parse("hidden", &mut c.ctr.hidden)?;

        let r = doc.reader("train", TRAIN_KEYS);
        r.reject_unknown(&[])?;
        let t = &mut c.train;
        r.parse("alpha", &mut t.alpha)?;
        r.parse("beta", &mut t.beta)?;
        r.parse("clip_lo", &mut t.clip_lo)?;
        r.parse("clip_hi", &mut t.clip_hi)?;
        r.parse("learning_rate", &mut t.learning_rate)?;
        r.parse("batch_size_ctr", &mut t.batch_size_ctr)?;
        r.parse("batch_size_uiem", &mut t.batch_size_uiem)?;
        r.parse("epochs", &mut t.epochs)?;
        r.parse("variant", &mut t.variant)?;
        r.parse("decay", &mut t.decay)?;
        r.parse("epsilon", &mut t.epsilon)?;
        r.parse("accumulator_init", &mut t.accumulator_init)?;
        r.parse("uiem_mode", &mut t.uiem_mode)?;
        r.parse("pretrain_epochs", &mut t.pretrain_epochs)?;
        c.train.seed = c.seed;

        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_document(&Document::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_document(&Document::load(path)?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.uiem.validate()?;
        self.ctr.validate()?;
        self.train.validate()
    }

    /// Full-precision rendering that parses back to an identical config.
    pub fn render(&self) -> String {
        let mut d = world_document(&self.world);
        d.set("run", "seed", self.seed.to_string());
        let u = &self.uiem;
        d.set("uiem", "d_model", u.d_model.to_string());
        d.set("uiem", "heads", u.heads.to_string());
        d.set("uiem", "layers", u.layers.to_string());
        d.set("uiem", "ffn_dim", u.ffn_dim.to_string());
        d.set("uiem", "seq_len", u.seq_len.to_string());
        d.set("uiem", "readout", u.readout.name());
        d.set("uiem", "pooling", u.pooling.name());
        let c = &self.ctr;
        d.set("ctr", "dim", c.dim.to_string());
        d.set("ctr", "max_behaviors", c.max_behaviors.to_string());
        d.set("ctr", "hidden", c.hidden.to_string());
        let t = &self.train;
        d.set("train", "alpha", format!("{:?}", t.alpha));
        d.set("train", "beta", format!("{:?}", t.beta));
        d.set("train", "clip_lo", format!("{:?}", t.clip_lo));
        d.set("train", "clip_hi", format!("{:?}", t.clip_hi));
        d.set("train", "learning_rate", format!("{:?}", t.learning_rate));
        d.set("train", "batch_size_ctr", t.batch_size_ctr.to_string());
        d.set("train", "batch_size_uiem", t.batch_size_uiem.to_string());
        d.set("train", "epochs", t.epochs.to_string());
        d.set("train", "variant", t.variant.name());
        d.set("train", "decay", format!("{:?}", t.decay));
        d.set("train", "epsilon", format!("{:?}", t.epsilon));
        d.set("train", "accumulator_init", format!("{:?}", t.accumulator_init));
        d.set("train", "uiem_mode", t.uiem_mode.name());
        d.set("train", "pretrain_epochs", t.pretrain_epochs.to_string());
        // [run] first reads better
        let run = d.sections.iter().position(|s| s.name == "run").expect("set above");
        let s = d.sections.remove(run);
        d.sections.insert(0, s);
        d.render()
    }
}
