//! The options store threaded through a pipeline: a tree of dotted keys
//! holding scalars, vectors, matrices and nested stores.
//!
//! On disk a store is a JSON document plus one bigarray file per non-empty
//! matrix, written next to it:
//!
//! ```text
//! { "format_version": 1,
//!   "entries": { "<key>": { "type": "float", "value": 0.5 }, ... } }
//! ```
//!
//! Value types are `bool`, `int`, `float`, `str`, `float_vec`, `index_vec`,
//! `mat` and `store`. Non-finite floats are written as the strings `"NaN"`,
//! `"inf"` and `"-inf"`. A matrix entry carries `rows`, `cols` and, unless
//! empty, `file`: the sibling path relative to the JSON document.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Map, Value as Json};

use crate::bigarray::{default_chunk_rows, BigArray};
use crate::error::{Error, Result};
use crate::mat::Mat;

pub const OPTIONS_FORMAT_VERSION: u64 = 1;

#[derive(Clone, Debug)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    FloatVec(Vec<f64>),
    IndexVec(Vec<usize>),
    Mat(Arc<Mat>),
    Store(OptionsStore),
}

fn floats_bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Equality is bitwise for floating-point content.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        use Value::*;
        match (self, other) {
            (Bool(a), Bool(b)) => a == b,
            (Int(a), Int(b)) => a == b,
            (Float(a), Float(b)) => a.to_bits() == b.to_bits(),
            (Str(a), Str(b)) => a == b,
            (FloatVec(a), FloatVec(b)) => floats_bits_eq(a, b),
            (IndexVec(a), IndexVec(b)) => a == b,
            (Mat(a), Mat(b)) => a.shape() == b.shape() && floats_bits_eq(a.as_slice(), b.as_slice()),
            (Store(a), Store(b)) => a == b,
            _ => false,
        }
    }
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Str(_) => "str",
            Value::FloatVec(_) => "float_vec",
            Value::IndexVec(_) => "index_vec",
            Value::Mat(_) => "mat",
            Value::Store(_) => "store",
        }
    }
}

macro_rules! value_from {
    ($($t:ty => $body:expr),* $(,)?) => {
        $(impl From<$t> for Value {
            fn from(v: $t) -> Self {
                let f: fn($t) -> Value = $body;
                f(v)
            }
        })*
    };
}

value_from! {
    bool => Value::Bool,
    i64 => Value::Int,
    u64 => |v| Value::Int(v as i64),
    usize => |v| Value::Int(v as i64),
    f64 => Value::Float,
    &str => |v| Value::Str(v.to_string()),
    String => Value::Str,
    Vec<f64> => Value::FloatVec,
    Vec<usize> => Value::IndexVec,
    Mat => |v| Value::Mat(Arc::new(v)),
    Arc<Mat> => Value::Mat,
    OptionsStore => Value::Store,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptionsStore {
    entries: BTreeMap<String, Value>,
}

fn check_segment(seg: &str, path: &str) -> Result<()> {
    let ok = !seg.is_empty() && seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::Key(format!(
            "invalid key '{path}': segments must be non-empty [A-Za-z0-9_-]"
        )))
    }
}

impl OptionsStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top-level entries in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.entries.iter()
    }

    pub fn get(&self, path: &str) -> Option<&Value> {
        let mut node = self;
        let mut segs = path.split('.').peekable();
        while let Some(seg) = segs.next() {
            let v = node.entries.get(seg)?;
            if segs.peek().is_none() {
                return Some(v);
            }
            match v {
                Value::Store(s) => node = s,
                _ => return None,
            }
        }
        None
    }

    pub fn contains(&self, path: &str) -> bool {
        self.get(path).is_some()
    }

    /// Inserts at a dotted path, creating intermediate stores. Existing keys
    /// are never overwritten.
    pub fn insert(&mut self, path: &str, value: impl Into<Value>) -> Result<()> {
        let segs: Vec<&str> = path.split('.').collect();
        for seg in &segs {
            check_segment(seg, path)?;
        }
        let (last, parents) = segs.split_last().expect("split yields at least one segment");
        let mut node = self;
        for (depth, seg) in parents.iter().enumerate() {
            let entry = node
                .entries
                .entry(seg.to_string())
                .or_insert_with(|| Value::Store(OptionsStore::new()));
            node = match entry {
                Value::Store(s) => s,
                other => {
                    return Err(Error::Key(format!(
                        "'{}' holds a {}, not a store",
                        segs[..=depth].join("."),
                        other.type_name()
                    )))
                }
            };
        }
        if node.entries.contains_key(*last) {
            return Err(Error::Key(format!("'{path}' is already set")));
        }
        node.entries.insert(last.to_string(), value.into());
        Ok(())
    }

    /// Removes and returns the entry at `path`.
    pub fn remove(&mut self, path: &str) -> Option<Value> {
        let (parent, last) = match path.rsplit_once('.') {
            Some((p, l)) => (Some(p), l),
            None => (None, path),
        };
        let node = match parent {
            None => self,
            Some(p) => match self.get_mut(p)? {
                Value::Store(s) => s,
                _ => return None,
            },
        };
        node.entries.remove(last)
    }

    fn get_mut(&mut self, path: &str) -> Option<&mut Value> {
        let mut segs = path.split('.').peekable();
        let mut node = self;
        while let Some(seg) = segs.next() {
            let v = node.entries.get_mut(seg)?;
            if segs.peek().is_none() {
                return Some(v);
            }
            match v {
                Value::Store(s) => node = s,
                _ => return None,
            }
        }
        None
    }

    /// Leaf paths (non-store values) in key order.
    pub fn leaf_paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_leaves("", &mut out);
        out
    }

    fn collect_leaves(&self, prefix: &str, out: &mut Vec<String>) {
        for (k, v) in &self.entries {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                Value::Store(s) => s.collect_leaves(&path, out),
                _ => out.push(path),
            }
        }
    }

    fn require(&self, path: &str) -> Result<&Value> {
        self.get(path)
            .ok_or_else(|| Error::Key(format!("missing required key '{path}'")))
    }

    fn wrong_type(path: &str, want: &str, got: &Value) -> Error {
        Error::Key(format!("'{path}' should be {want}, found {}", got.type_name()))
    }

    pub fn f64(&self, path: &str) -> Result<f64> {
        match self.require(path)? {
            Value::Float(v) => Ok(*v),
            Value::Int(v) => Ok(*v as f64),
            other => Err(Self::wrong_type(path, "a number", other)),
        }
    }

    pub fn i64(&self, path: &str) -> Result<i64> {
        match self.require(path)? {
            Value::Int(v) => Ok(*v),
            other => Err(Self::wrong_type(path, "an integer", other)),
        }
    }

    pub fn usize(&self, path: &str) -> Result<usize> {
        let v = self.i64(path)?;
        usize::try_from(v).map_err(|_| Error::Key(format!("'{path}' must be >= 0, found {v}")))
    }

    pub fn bool(&self, path: &str) -> Result<bool> {
        match self.require(path)? {
            Value::Bool(v) => Ok(*v),
            other => Err(Self::wrong_type(path, "a bool", other)),
        }
    }

    pub fn str(&self, path: &str) -> Result<&str> {
        match self.require(path)? {
            Value::Str(v) => Ok(v),
            other => Err(Self::wrong_type(path, "a string", other)),
        }
    }

    pub fn mat(&self, path: &str) -> Result<Arc<Mat>> {
        match self.require(path)? {
            Value::Mat(v) => Ok(Arc::clone(v)),
            other => Err(Self::wrong_type(path, "a matrix", other)),
        }
    }

    pub fn float_vec(&self, path: &str) -> Result<&[f64]> {
        match self.require(path)? {
            Value::FloatVec(v) => Ok(v),
            other => Err(Self::wrong_type(path, "a float vector", other)),
        }
    }

    pub fn index_vec(&self, path: &str) -> Result<&[usize]> {
        match self.require(path)? {
            Value::IndexVec(v) => Ok(v),
            other => Err(Self::wrong_type(path, "an index vector", other)),
        }
    }

    pub fn store(&self, path: &str) -> Result<&OptionsStore> {
        match self.require(path)? {
            Value::Store(v) => Ok(v),
            other => Err(Self::wrong_type(path, "a store", other)),
        }
    }

    pub fn f64_or(&self, path: &str, default: f64) -> Result<f64> {
        if self.contains(path) {
            self.f64(path)
        } else {
            Ok(default)
        }
    }

    pub fn usize_or(&self, path: &str, default: usize) -> Result<usize> {
        if self.contains(path) {
            self.usize(path)
        } else {
            Ok(default)
        }
    }

    pub fn u64_or(&self, path: &str, default: u64) -> Result<u64> {
        if self.contains(path) {
            Ok(self.i64(path)? as u64)
        } else {
            Ok(default)
        }
    }

    pub fn bool_or(&self, path: &str, default: bool) -> Result<bool> {
        if self.contains(path) {
            self.bool(path)
        } else {
            Ok(default)
        }
    }
}

fn float_to_json(v: f64) -> Json {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        json!("NaN")
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn float_from_json(v: &Json, ctx: &str) -> std::result::Result<f64, String> {
    match v {
        Json::Number(n) => n.as_f64().ok_or_else(|| format!("{ctx}: bad number")),
        Json::String(s) => match s.as_str() {
            "NaN" => Ok(f64::NAN),
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            _ => Err(format!("{ctx}: unexpected string '{s}' for a float")),
        },
        _ => Err(format!("{ctx}: expected a float")),
    }
}

struct Writer<'a> {
    dir: &'a Path,
    stem: String,
}

impl Writer<'_> {
    fn store(&self, s: &OptionsStore, prefix: &str) -> Result<Json> {
        let mut map = Map::new();
        for (k, v) in &s.entries {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            map.insert(k.clone(), self.value(v, &path)?);
        }
        Ok(Json::Object(map))
    }

    fn value(&self, v: &Value, path: &str) -> Result<Json> {
        Ok(match v {
            Value::Bool(b) => json!({"type": "bool", "value": b}),
            Value::Int(i) => json!({"type": "int", "value": i}),
            Value::Float(f) => json!({"type": "float", "value": float_to_json(*f)}),
            Value::Str(s) => json!({"type": "str", "value": s}),
            Value::FloatVec(vs) => {
                json!({"type": "float_vec", "value": vs.iter().map(|&f| float_to_json(f)).collect::<Vec<_>>()})
            }
            Value::IndexVec(vs) => json!({"type": "index_vec", "value": vs}),
            Value::Mat(m) => {
                if m.is_empty() {
                    json!({"type": "mat", "rows": m.rows(), "cols": m.cols()})
                } else {
                    let file = format!("{}.{path}.gba", self.stem);
                    BigArray::from_mat(self.dir.join(&file), m, default_chunk_rows(m.cols()))?;
                    json!({"type": "mat", "rows": m.rows(), "cols": m.cols(), "file": file})
                }
            }
            Value::Store(s) => json!({"type": "store", "entries": self.store(s, path)?}),
        })
    }
}

/// Writes `opt` to `path` (JSON) plus sibling matrix files.
pub fn save_options(opt: &OptionsStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "options".into());
    let writer = Writer { dir, stem };
    let doc = json!({
        "format_version": OPTIONS_FORMAT_VERSION,
        "entries": writer.store(opt, "")?,
    });
    let text = serde_json::to_string_pretty(&doc).expect("JSON values always serialize");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    dir: &'a Path,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    fn store(&self, j: &Json, prefix: &str) -> Result<OptionsStore> {
        let obj = j
            .as_object()
            .ok_or_else(|| self.err(format!("'{prefix}': entries must be an object")))?;
        let mut s = OptionsStore::new();
        for (k, v) in obj {
            check_segment(k, k).map_err(|e| self.err(e.to_string()))?;
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            s.entries.insert(k.clone(), self.value(v, &path)?);
        }
        Ok(s)
    }

    fn value(&self, j: &Json, path: &str) -> Result<Value> {
        let ty = j
            .get("type")
            .and_then(Json::as_str)
            .ok_or_else(|| self.err(format!("'{path}': missing type tag")))?;
        let field = |name: &str| {
            j.get(name)
                .ok_or_else(|| self.err(format!("'{path}': missing '{name}'")))
        };
        let bad = |what: &str| self.err(format!("'{path}': {what}"));
        Ok(match ty {
            "bool" => Value::Bool(field("value")?.as_bool().ok_or_else(|| bad("expected a bool"))?),
            "int" => Value::Int(field("value")?.as_i64().ok_or_else(|| bad("expected an integer"))?),
            "float" => Value::Float(float_from_json(field("value")?, path).map_err(|e| self.err(e))?),
            "str" => Value::Str(
                field("value")?
                    .as_str()
                    .ok_or_else(|| bad("expected a string"))?
                    .to_string(),
            ),
            "float_vec" => Value::FloatVec(
                field("value")?
                    .as_array()
                    .ok_or_else(|| bad("expected an array"))?
                    .iter()
                    .map(|v| float_from_json(v, path).map_err(|e| self.err(e)))
                    .collect::<Result<_>>()?,
            ),
            "index_vec" => Value::IndexVec(
                field("value")?
                    .as_array()
                    .ok_or_else(|| bad("expected an array"))?
                    .iter()
                    .map(|v| v.as_u64().map(|u| u as usize).ok_or_else(|| bad("expected indices")))
                    .collect::<Result<_>>()?,
            ),
            "mat" => {
                let rows = field("rows")?.as_u64().ok_or_else(|| bad("bad rows"))? as usize;
                let cols = field("cols")?.as_u64().ok_or_else(|| bad("bad cols"))? as usize;
                let m = match j.get("file") {
                    None => {
                        if rows != 0 && cols != 0 {
                            return Err(bad("non-empty matrix without a file"));
                        }
                        Mat::zeros(rows, cols)
                    }
                    Some(f) => {
                        let f = f.as_str().ok_or_else(|| bad("file must be a string"))?;
                        let m = BigArray::open(self.dir.join(f))?.to_mat()?;
                        if m.shape() != (rows, cols) {
                            return Err(bad(&format!("file holds {:?}, expected {rows}x{cols}", m.shape())));
                        }
                        m
                    }
                };
                Value::Mat(Arc::new(m))
            }
            "store" => Value::Store(self.store(field("entries")?, path)?),
            other => return Err(bad(&format!("unknown type '{other}'"))),
        })
    }
}

/// Reads a store written by [`save_options`].
pub fn load_options(path: impl AsRef<Path>) -> Result<OptionsStore> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Json = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let version = doc.get("format_version").and_then(Json::as_u64).unwrap_or(0);
    if version != OPTIONS_FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: OPTIONS_FORMAT_VERSION,
        });
    }
    let dir: PathBuf = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let reader = Reader { dir: &dir, path };
    reader.store(doc.get("entries").ok_or_else(|| reader.err("missing 'entries'"))?, "")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn insert_get_and_write_once() {
        let mut s = OptionsStore::new();
        s.insert("a.b.c", 1.5).unwrap();
        s.insert("a.b.d", "x").unwrap();
        assert_eq!(s.f64("a.b.c").unwrap(), 1.5);
        assert_eq!(s.str("a.b.d").unwrap(), "x");
        assert!(matches!(s.insert("a.b.c", 2.0), Err(Error::Key(_))));
        assert!(matches!(s.insert("a.b.c.e", 2.0), Err(Error::Key(_))));
        assert!(s.insert("a..b", 1.0).is_err());
        assert!(s.insert("a.b c", 1.0).is_err());
        assert_eq!(s.leaf_paths(), vec!["a.b.c", "a.b.d"]);
        assert!(s.remove("a.b.c").is_some());
        s.insert("a.b.c", 3i64).unwrap();
        assert_eq!(s.f64("a.b.c").unwrap(), 3.0);
        assert!(s.mat("a.b.c").is_err());
        assert_eq!(s.usize_or("zz", 4).unwrap(), 4);
    }

    fn random_store(seed: u64) -> OptionsStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = OptionsStore::new();
        s.insert("flag", rng.gen::<bool>()).unwrap();
        s.insert("count", rng.gen::<i64>()).unwrap();
        s.insert("scale", rng.gen::<f64>() * 1e-300).unwrap();
        s.insert("odd.nan", f64::NAN).unwrap();
        s.insert("odd.neg_zero", -0.0).unwrap();
        s.insert("odd.vec", vec![f64::INFINITY, f64::NEG_INFINITY, 0.1 + 0.2])
            .unwrap();
        s.insert("name", "pipe \"quoted\"").unwrap();
        s.insert("idx", (0..20).map(|_| rng.gen_range(0..1000)).collect::<Vec<usize>>())
            .unwrap();
        s.insert("m.small", Mat::from_fn(3, 4, |_, _| rng.gen::<f64>()))
            .unwrap();
        s.insert("m.empty", Mat::zeros(0, 5)).unwrap();
        s.insert("nested.deeper.m", Mat::from_fn(2, 2, |_, _| rng.gen::<f64>() - 0.5))
            .unwrap();
        s
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..4 {
            let s = random_store(seed);
            let p = dir.path().join(format!("opt{seed}.json"));
            save_options(&s, &p).unwrap();
            assert_eq!(load_options(&p).unwrap(), s);
        }
    }

    #[test]
    fn large_matrix_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Mat::from_fn(1000, 10, |_, _| rng.gen::<f64>() * 1e3 - 5e2);
        let mut s = OptionsStore::new();
        s.insert("big", m.clone()).unwrap();
        let p = dir.path().join("o.json");
        save_options(&s, &p).unwrap();
        let back = load_options(&p).unwrap().mat("big").unwrap();
        let bytes = |m: &Mat| m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
        assert_eq!(bytes(&back), bytes(&m));
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.json");
        std::fs::write(&p, r#"{"format_version": 7, "entries": {}}"#).unwrap();
        assert!(matches!(load_options(&p), Err(Error::Version { found: 7, .. })));
        std::fs::write(&p, r#"{"entries": {}}"#).unwrap();
        assert!(matches!(load_options(&p), Err(Error::Version { found: 0, .. })));
    }
}
