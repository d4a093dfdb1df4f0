//! Instances, locales and corpora, plus the line-delimited corpus file format.
//!
//! A corpus file starts with one header line carrying the dimensions and
//! optional name dictionaries, followed by one locale per line:
//!
//! ```text
//! {"K":2,"V":3,"F":1,"class_names":["pos","neg"]}
//! {"id":"page-1","instances":[{"g":[0,1],"l":[0],"y":1}]}
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = usize;
pub type GlobalFeatId = usize;
pub type LocalFeatId = usize;

/// Name given to the reserved out-of-vocabulary global feature.
pub const OOV_NAME: &str = "<oov>";

/// One classification unit: a bag of global features, a bag of local
/// features and an optional gold label. Bags may repeat ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(rename = "g")]
    pub global_feats: Vec<GlobalFeatId>,
    #[serde(rename = "l")]
    pub local_feats: Vec<LocalFeatId>,
    #[serde(rename = "y", default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ClassId>,
}

impl Instance {
    pub fn new(global_feats: Vec<GlobalFeatId>, local_feats: Vec<LocalFeatId>, label: Option<ClassId>) -> Self {
        Instance {
            global_feats,
            local_feats,
            label,
        }
    }
}

/// Instances sharing one draw of the latent local parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Locale {
    pub id: String,
    pub instances: Vec<Instance>,
}

impl Locale {
    pub fn new(id: impl Into<String>, instances: Vec<Instance>) -> Self {
        Locale {
            id: id.into(),
            instances,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Total number of local-feature occurrences across all instances.
    pub fn local_occurrences(&self) -> usize {
        self.instances.iter().map(|i| i.local_feats.len()).sum()
    }
}

/// Class count `k`, global vocabulary size `v`, local vocabulary size `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(rename = "F")]
    pub f: usize,
}

impl Dims {
    pub fn new(k: usize, v: usize, f: usize) -> Self {
        Dims { k, v, f }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "K={}, V={}, F={}", self.k, self.v, self.f)
    }
}

/// Optional string dictionaries for ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Names {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_names: Option<Vec<String>>,
}

/// A validated, immutable collection of locales.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    locales: Vec<Locale>,
    dims: Dims,
    names: Names,
}

/// One invariant violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub locale: Option<String>,
    pub instance: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.locale, self.instance) {
            (Some(l), Some(i)) => write!(f, "locale `{l}`, instance {i}: {}", self.message),
            (Some(l), None) => write!(f, "locale `{l}`: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

impl Corpus {
    /// Builds a corpus, rejecting it if [`validate`] reports anything.
    pub fn new(locales: Vec<Locale>, dims: Dims, names: Names) -> Result<Self> {
        let corpus = Corpus {
            locales,
            dims,
            names,
        };
        let violations = validate(&corpus);
        match violations.into_iter().next() {
            None => Ok(corpus),
            Some(v) => Err(violation_error(v)),
        }
    }

    pub fn locales(&self) -> &[Locale] {
        &self.locales
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn names(&self) -> &Names {
        &self.names
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.locales.iter().flat_map(|l| l.instances.iter())
    }

    pub fn instance_count(&self) -> usize {
        self.locales.iter().map(Locale::len).sum()
    }

    pub fn locale(&self, id: &str) -> Option<&Locale> {
        self.locales.iter().find(|l| l.id == id)
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.instances().all(|i| i.label.is_some())
    }

    pub fn into_parts(self) -> (Vec<Locale>, Dims, Names) {
        (self.locales, self.dims, self.names)
    }
}

fn violation_error(v: Violation) -> Error {
    match (v.locale, v.instance) {
        (Some(locale), Some(instance)) => Error::OutOfRange {
            locale,
            instance,
            message: v.message,
        },
        (Some(locale), None) => Error::Malformed {
            location: format!("locale `{locale}`"),
            message: v.message,
        },
        _ => Error::Malformed {
            location: "corpus".into(),
            message: v.message,
        },
    }
}

/// Lists every invariant violation in `corpus`, with its location.
pub fn validate(corpus: &Corpus) -> Vec<Violation> {
    let mut out = Vec::new();
    let Dims { k, v, f } = corpus.dims;
    let top = |message: String| Violation {
        locale: None,
        instance: None,
        message,
    };
    if k == 0 || v == 0 || f == 0 {
        out.push(top(format!("all dimensions must be positive ({})", corpus.dims)));
    }
    if corpus.locales.is_empty() {
        out.push(top("corpus has no locales".into()));
    }
    let names = &corpus.names;
    for (what, dict, n) in [
        ("class_names", &names.class_names, k),
        ("global_names", &names.global_names, v),
        ("local_names", &names.local_names, f),
    ] {
        if let Some(d) = dict {
            if d.len() != n {
                out.push(top(format!("{what} has {} entries, expected {n}", d.len())));
            }
        }
    }

    let mut seen = HashSet::new();
    for locale in &corpus.locales {
        if !seen.insert(locale.id.as_str()) {
            out.push(Violation {
                locale: Some(locale.id.clone()),
                instance: None,
                message: "duplicate locale id".into(),
            });
        }
        if locale.instances.is_empty() {
            out.push(Violation {
                locale: Some(locale.id.clone()),
                instance: None,
                message: "locale has no instances".into(),
            });
        }
        for (n, inst) in locale.instances.iter().enumerate() {
            let mut at = |message: String| {
                out.push(Violation {
                    locale: Some(locale.id.clone()),
                    instance: Some(n),
                    message,
                })
            };
            if inst.global_feats.is_empty() {
                at("empty global feature bag".into());
            }
            if let Some(&w) = inst.global_feats.iter().find(|&&w| w >= v) {
                at(format!("global feature {w} >= V={v}"));
            }
            if let Some(&l) = inst.local_feats.iter().find(|&&l| l >= f) {
                at(format!("local feature {l} >= F={f}"));
            }
            if let Some(y) = inst.label.filter(|&y| y >= k) {
                at(format!("label {y} >= K={k}"));
            }
        }
    }
    out
}

/// String-valued instance, the input to [`build_index`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInstance {
    pub global: Vec<String>,
    pub local: Vec<String>,
    #[serde(default)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLocale {
    pub id: String,
    pub instances: Vec<RawInstance>,
}

/// Dense string-to-id maps in first-occurrence order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dictionaries {
    pub classes: Vec<String>,
    /// Global feature names; the last entry is always [`OOV_NAME`].
    pub global: Vec<String>,
    pub local: Vec<String>,
}

impl Dictionaries {
    pub fn oov_id(&self) -> GlobalFeatId {
        self.global.len() - 1
    }
}

#[derive(Default)]
struct Interner {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Interner {
    fn from_names(names: &[String]) -> Self {
        let ids = names.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Interner {
            names: names.to_vec(),
            ids,
        }
    }

    fn intern(&mut self, s: &str) -> usize {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.names.len();
        self.names.push(s.to_owned());
        self.ids.insert(s.to_owned(), id);
        id
    }
}

fn check_raw(raw: &[RawLocale]) -> Result<()> {
    if raw.is_empty() {
        return Err(Error::Empty("raw corpus has no locales".into()));
    }
    if let Some(l) = raw.iter().find(|l| l.instances.is_empty()) {
        return Err(Error::Empty(format!("locale `{}` has no instances", l.id)));
    }
    Ok(())
}

/// Assigns dense ids to every distinct string, appends the reserved OOV
/// global id, and returns the indexed corpus with its dictionaries.
pub fn build_index(raw: &[RawLocale]) -> Result<(Corpus, Dictionaries)> {
    check_raw(raw)?;
    let mut classes = Interner::default();
    let mut global = Interner::default();
    let mut local = Interner::default();
    let mut locales = Vec::with_capacity(raw.len());
    for rl in raw {
        let instances = rl
            .instances
            .iter()
            .map(|ri| Instance {
                global_feats: ri.global.iter().map(|s| global.intern(s)).collect(),
                local_feats: ri.local.iter().map(|s| local.intern(s)).collect(),
                label: ri.label.as_deref().map(|s| classes.intern(s)),
            })
            .collect();
        locales.push(Locale::new(rl.id.clone(), instances));
    }
    global.intern(OOV_NAME);
    let dicts = Dictionaries {
        classes: classes.names,
        global: global.names,
        local: local.names,
    };
    let corpus = corpus_with_dicts(locales, &dicts)?;
    Ok((corpus, dicts))
}

/// Indexes `raw` against existing class and global dictionaries. Unseen
/// global strings map to the OOV id; local strings get a fresh dictionary
/// since local vocabularies are not shared across corpora.
pub fn index_with(raw: &[RawLocale], dicts: &Dictionaries) -> Result<(Corpus, Dictionaries)> {
    check_raw(raw)?;
    let classes = Interner::from_names(&dicts.classes);
    let global = Interner::from_names(&dicts.global);
    let oov = dicts.oov_id();
    let mut local = Interner::default();
    let mut locales = Vec::with_capacity(raw.len());
    for rl in raw {
        let mut instances = Vec::with_capacity(rl.instances.len());
        for (n, ri) in rl.instances.iter().enumerate() {
            let label = match ri.label.as_deref() {
                None => None,
                Some(s) => Some(*classes.ids.get(s).ok_or_else(|| Error::OutOfRange {
                    locale: rl.id.clone(),
                    instance: n,
                    message: format!("unknown class `{s}`"),
                })?),
            };
            instances.push(Instance {
                global_feats: ri
                    .global
                    .iter()
                    .map(|s| global.ids.get(s.as_str()).copied().unwrap_or(oov))
                    .collect(),
                local_feats: ri.local.iter().map(|s| local.intern(s)).collect(),
                label,
            });
        }
        locales.push(Locale::new(rl.id.clone(), instances));
    }
    let out = Dictionaries {
        classes: dicts.classes.clone(),
        global: dicts.global.clone(),
        local: local.names,
    };
    let corpus = corpus_with_dicts(locales, &out)?;
    Ok((corpus, out))
}

fn corpus_with_dicts(locales: Vec<Locale>, dicts: &Dictionaries) -> Result<Corpus> {
    // a corpus with no labels or no local features still needs positive dims
    let k = dicts.classes.len().max(1);
    let f = dicts.local.len().max(1);
    let dims = Dims::new(k, dicts.global.len(), f);
    let names = Names {
        class_names: (dicts.classes.len() == k).then(|| dicts.classes.clone()),
        global_names: Some(dicts.global.clone()),
        local_names: (dicts.local.len() == f).then(|| dicts.local.clone()),
    };
    Corpus::new(locales, dims, names)
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    dims: Dims,
    #[serde(flatten)]
    names: Names,
}

/// Parses a corpus from line-delimited text.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut lines = reader.lines().enumerate().filter(|(_, l)| {
        l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true)
    });
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Empty("corpus file is empty".into()))?;
    let header: Header = serde_json::from_str(&header?).map_err(|e| Error::Malformed {
        location: "header line".into(),
        message: e.to_string(),
    })?;
    let mut locales = Vec::new();
    for (i, line) in lines {
        let locale: Locale = serde_json::from_str(&line?).map_err(|e| Error::Malformed {
            location: format!("line {}", i + 1),
            message: e.to_string(),
        })?;
        locales.push(locale);
    }
    if locales.is_empty() {
        return Err(Error::Empty("corpus file has no locales".into()));
    }
    Corpus::new(locales, header.dims, header.names)
}

/// Writes a corpus in the line-delimited format.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<()> {
    let header = Header {
        dims: corpus.dims,
        names: corpus.names.clone(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for locale in &corpus.locales {
        serde_json::to_writer(&mut w, locale)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    read_corpus(BufReader::new(File::open(path)?))
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_corpus(corpus, BufWriter::new(File::create(path)?))
}
