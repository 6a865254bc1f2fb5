use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "path,identity";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// Path relative to the manifest root.
    pub path: String,
    /// Dense identity index, assigned in first-seen order.
    pub identity: usize,
}

/// Image list with identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
    /// Identity names indexed by dense identity index.
    pub identities: Vec<String>,
}

impl Manifest {
    /// Build from `(path, identity name)` pairs.
    pub fn from_pairs<P, I>(root: impl Into<PathBuf>, pairs: impl IntoIterator<Item = (P, I)>) -> Result<Self>
    where
        P: Into<String>,
        I: AsRef<str>,
    {
        let rows = pairs
            .into_iter()
            .enumerate()
            .map(|(k, (p, i))| (k + 2, p.into(), i.as_ref().to_string()));
        build(root.into(), rows)
    }

    /// Parse manifest text; relative paths resolve against `root`.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.split('\n').enumerate();
        match lines.next() {
            Some((_, h)) if h == MANIFEST_HEADER => {}
            Some((_, h)) => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header `{MANIFEST_HEADER}`, found `{h}`"),
                })
            }
            None => unreachable!("split yields at least one item"),
        }
        let mut pairs = Vec::new();
        for (k, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: format!("expected 2 comma-separated fields, found {}", fields.len()),
                });
            }
            pairs.push((k + 1, fields[0].to_string(), fields[1].to_string()));
        }
        build(root.into(), pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for e in &self.entries {
            let _ = writeln!(s, "{},{}", e.path, self.identities[e.identity]);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    pub fn resolve(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].path)
    }

    /// Entry indices grouped by identity, in manifest order.
    pub fn by_identity(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.identities.len()];
        for (i, e) in self.entries.iter().enumerate() {
            out[e.identity].push(i);
        }
        out
    }
}

fn build(root: PathBuf, rows: impl IntoIterator<Item = (usize, String, String)>) -> Result<Manifest> {
    let mut m = Manifest {
        root,
        entries: Vec::new(),
        identities: Vec::new(),
    };
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (line, path, id) in rows {
        check_field(&path, line, "path")?;
        check_field(&id, line, "identity")?;
        if !seen.insert(path.clone()) {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate path `{path}`"),
            });
        }
        let identity = match index.get(&id) {
            Some(&k) => k,
            None => {
                index.insert(id.clone(), m.identities.len());
                m.identities.push(id);
                m.identities.len() - 1
            }
        };
        m.entries.push(Entry { path, identity });
    }
    Ok(m)
}

fn check_field(value: &str, line: usize, what: &str) -> Result<()> {
    if value.is_empty() {
        return Err(Error::Parse {
            line,
            msg: format!("empty {what}"),
        });
    }
    if value.contains([',', '\n', '\r']) {
        return Err(Error::Parse {
            line,
            msg: format!("{what} `{value}` contains a forbidden character"),
        });
    }
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path)
}
