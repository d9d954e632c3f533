//! Versioned plain-text checkpoints.
//!
//! ```text
//! USD-CKPT v1
//! @<key> <value>             metadata, any number, before the first tensor
//! tensor <name> <rows> <cols>
//! <rows*cols space-separated values, row-major, one line>
//! ```
//!
//! Values are written with round-trip precision, so reading a checkpoint
//! restores every parameter bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const HEADER: &str = "USD-CKPT v1";
const MAGIC: &str = "USD-CKPT";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Ordered `(key, value)` metadata; keys may repeat.
    pub meta: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn meta_values<'a>(&'a self, key: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.meta.iter().filter(move |(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_value<'a>(&'a self, key: &'a str) -> Option<&'a str> {
        self.meta_values(key).next()
    }

    pub fn render(&self) -> Result<String> {
        let mut s = format!("{HEADER}\n");
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Input(format!("metadata entry `{k}` cannot be written")));
            }
            s.push_str(&format!("@{k} {v}\n"));
        }
        for (name, t) in self.params.iter() {
            if name.contains(char::is_whitespace) {
                return Err(Error::Input(format!("parameter name `{name}` contains whitespace")));
            }
            s.push_str(&format!("tensor {name} {} {}\n", t.rows(), t.cols()));
            let vals: Vec<String> = t.values().iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Checkpoint(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, HEADER)) => {}
            Some((_, h)) if h.starts_with(MAGIC) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version `{h}`, expected `{HEADER}`"
                )))
            }
            _ => return Err(Error::Checkpoint(format!("missing `{HEADER}` header"))),
        }
        let mut ck = Checkpoint::default();
        let mut seen_tensor = false;
        while let Some((n, line)) = lines.next() {
            if let Some(rest) = line.strip_prefix('@') {
                if seen_tensor {
                    return Err(err(n, "metadata after tensor data".into()));
                }
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            let [kw, name, rows, cols] = parts[..] else {
                return Err(err(n, format!("expected `tensor <name> <rows> <cols>`, got `{line}`")));
            };
            if kw != "tensor" {
                return Err(err(n, format!("expected `tensor`, got `{kw}`")));
            }
            let dim = |s: &str| s.parse::<usize>().map_err(|e| err(n, format!("bad dimension `{s}`: {e}")));
            let (r, c) = (dim(rows)?, dim(cols)?);
            let Some((vn, vals)) = lines.next() else {
                return Err(err(n, format!("tensor `{name}` has no value line")));
            };
            let values = vals
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|e| err(vn, format!("bad value `{s}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(vec![r, c], values).map_err(|e| err(vn, format!("tensor `{name}`: {e}")))?;
            if ck.params.contains(name) {
                return Err(err(n, format!("duplicate tensor `{name}`")));
            }
            ck.params.insert(name, t);
            seen_tensor = true;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
