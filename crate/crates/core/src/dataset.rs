//! Tab-separated dataset files.
//!
//! A dataset directory holds `exposures.tsv`, `contexts.tsv` and
//! `world.meta`. Both TSV files are UTF-8 with a header line; the context
//! sequence is 30 comma-separated tokens from `{-1,0,1}`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::{self, Document};
use crate::error::{Error, Result};
use crate::world::{Behavior, ExposureRecord, UserDayContext, WorldConfig, SEQ_LEN};

pub const EXPOSURES_FILE: &str = "exposures.tsv";
pub const CONTEXTS_FILE: &str = "contexts.tsv";
pub const META_FILE: &str = "world.meta";

pub const EXPOSURES_HEADER: &str = "user_id\titem_id\tday\tlabel\titem_feature_id";
pub const CONTEXTS_HEADER: &str = "user_id\tday\ty_p\ty_b\tr_p\tsequence";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub exposures: Vec<ExposureRecord>,
    pub contexts: Vec<UserDayContext>,
}

/// Contents of `world.meta`: the generating config and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldMeta {
    pub config: WorldConfig,
    pub seed: u64,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn write_dataset(dir: &Path, exposures: &[ExposureRecord], contexts: &[UserDayContext]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join(EXPOSURES_FILE);
    let mut w = create(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(w, "{EXPOSURES_HEADER}").map_err(io)?;
    for r in exposures {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            r.user_id, r.item_id, r.day, r.label, r.item_feature_id
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)?;

    let path = dir.join(CONTEXTS_FILE);
    let mut w = create(&path)?;
    let io = |e| Error::io(&path, e);
    writeln!(w, "{CONTEXTS_HEADER}").map_err(io)?;
    for c in contexts {
        let seq: Vec<String> = c.sequence.iter().map(i8::to_string).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}",
            c.user_id,
            c.day,
            c.y_p,
            c.y_b,
            c.r_p,
            seq.join(",")
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

struct LineCursor<'a> {
    path: &'a Path,
    line: usize,
    fields: std::str::Split<'a, char>,
}

impl<'a> LineCursor<'a> {
    fn err(&self, field: &str, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            field: field.to_string(),
            msg: msg.into(),
        }
    }

    fn raw(&mut self, field: &str) -> Result<&'a str> {
        self.fields
            .next()
            .ok_or_else(|| self.err(field, "missing field (truncated line?)"))
    }

    fn num<T: std::str::FromStr>(&mut self, field: &str) -> Result<T> {
        let s = self.raw(field)?;
        s.parse()
            .map_err(|_| self.err(field, format!("cannot parse `{s}`")))
    }

    fn flag(&mut self, field: &str) -> Result<u8> {
        match self.num::<u8>(field)? {
            v @ (0 | 1) => Ok(v),
            v => Err(self.err(field, format!("expected 0 or 1, got {v}"))),
        }
    }

    fn finish(mut self) -> Result<()> {
        match self.fields.next() {
            None => Ok(()),
            Some(extra) => Err(self.err("<end>", format!("unexpected extra field `{extra}`"))),
        }
    }
}

fn read_lines(path: &Path, header: &str, mut on_line: impl FnMut(LineCursor<'_>) -> Result<()>) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .unwrap_or_default();
    if first != header {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            field: "<header>".into(),
            msg: format!("expected `{}`", header.replace('\t', "\\t")),
        });
    }
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        on_line(LineCursor {
            path,
            line: i + 2,
            fields: line.split('\t'),
        })?;
    }
    Ok(())
}

pub fn read_exposures(path: &Path) -> Result<Vec<ExposureRecord>> {
    let mut out = Vec::new();
    read_lines(path, EXPOSURES_HEADER, |mut c| {
        let rec = ExposureRecord {
            user_id: c.num("user_id")?,
            item_id: c.num("item_id")?,
            day: c.num("day")?,
            label: c.flag("label")?,
            item_feature_id: c.num("item_feature_id")?,
        };
        c.finish()?;
        out.push(rec);
        Ok(())
    })?;
    Ok(out)
}

pub fn read_contexts(path: &Path) -> Result<Vec<UserDayContext>> {
    let mut out = Vec::new();
    read_lines(path, CONTEXTS_HEADER, |mut c| {
        let user_id = c.num("user_id")?;
        let day = c.num("day")?;
        let y_p = c.flag("y_p")?;
        let y_b = c.flag("y_b")?;
        let r_p = c.flag("r_p")?;
        let raw = c.raw("sequence")?;
        let mut sequence = Vec::with_capacity(SEQ_LEN);
        for tok in raw.split(',') {
            let t: i8 = tok
                .parse()
                .map_err(|_| c.err("sequence", format!("bad token `{tok}`")))?;
            Behavior::from_token(t).map_err(|e| c.err("sequence", e.to_string()))?;
            sequence.push(t);
        }
        if sequence.len() != SEQ_LEN {
            return Err(c.err(
                "sequence",
                format!("expected {SEQ_LEN} tokens, got {}", sequence.len()),
            ));
        }
        c.finish()?;
        out.push(UserDayContext {
            user_id,
            day,
            y_p,
            y_b,
            r_p,
            sequence,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        exposures: read_exposures(&dir.join(EXPOSURES_FILE))?,
        contexts: read_contexts(&dir.join(CONTEXTS_FILE))?,
    })
}

pub fn meta_path(dir: &Path) -> PathBuf {
    dir.join(META_FILE)
}

pub fn write_meta(dir: &Path, meta: &WorldMeta) -> Result<()> {
    let path = meta_path(dir);
    let mut doc = config::world_document(&meta.config);
    doc.set("world", "seed", meta.seed.to_string());
    fs::write(&path, doc.render()).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(dir: &Path) -> Result<WorldMeta> {
    let path = meta_path(dir);
    let doc = Document::load(&path)?;
    let seed = doc
        .get("world", "seed")
        .ok_or_else(|| Error::Config(format!("{}: missing world.seed", path.display())))?
        .parse()
        .map_err(|_| Error::Config(format!("{}: world.seed is not an integer", path.display())))?;
    let config = config::world_from_document(&doc, &["seed"])?;
    Ok(WorldMeta { config, seed })
}
