//! The configuration tree: parsing from indentation-based YAML, a
//! deterministic writer, and dotted-path access.

use std::fmt::Write as _;

use indexmap::IndexMap;
use yaml_rust2::{Yaml, YamlLoader};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Node>),
    Map(IndexMap<String, Node>),
}

impl Node {
    pub fn empty_map() -> Self {
        Node::Map(IndexMap::new())
    }

    /// Parses one YAML document. Aliases expand to copies of their anchor;
    /// non-string keys are rejected and an empty document is an empty map.
    pub fn parse(text: &str) -> Result<Node> {
        let docs = YamlLoader::load_from_str(text).map_err(|e| Error::Parse {
            line: e.marker().line(),
            msg: e.info().to_string(),
        })?;
        match docs.len() {
            0 => Ok(Node::empty_map()),
            1 => from_yaml(&docs[0], ""),
            n => Err(Error::Parse {
                line: 0,
                msg: format!("expected one document, found {n}"),
            }),
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Node::Null => "null",
            Node::Bool(_) => "bool",
            Node::Int(_) => "int",
            Node::Float(_) => "float",
            Node::Str(_) => "string",
            Node::List(_) => "list",
            Node::Map(_) => "map",
        }
    }

    pub fn as_map(&self) -> Option<&IndexMap<String, Node>> {
        match self {
            Node::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Node::Int(i) => Some(i as f64),
            Node::Float(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Node::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn get(&self, path: &str) -> Option<&Node> {
        let mut cur = self;
        for seg in segments(path) {
            cur = match cur {
                Node::Map(m) => m.get(seg)?,
                Node::List(l) => l.get(seg.parse::<usize>().ok()?)?,
                _ => return None,
            };
        }
        Some(cur)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Node> {
        let mut cur = self;
        for seg in segments(path) {
            cur = match cur {
                Node::Map(m) => m.get_mut(seg)?,
                Node::List(l) => l.get_mut(seg.parse::<usize>().ok()?)?,
                _ => return None,
            };
        }
        Some(cur)
    }

    /// Replaces the value at `path`. With `create`, missing map keys along
    /// the way are added; otherwise the full path must already exist.
    pub fn set(&mut self, path: &str, value: Node, create: bool) -> Result<()> {
        let segs: Vec<&str> = segments(path).collect();
        if segs.is_empty() {
            *self = value;
            return Ok(());
        }
        let mut cur = self;
        for (i, seg) in segs.iter().enumerate() {
            let last = i + 1 == segs.len();
            cur = match cur {
                Node::Map(m) => {
                    if !m.contains_key(*seg) {
                        if !create {
                            return Err(Error::node(path, "no such key in the configuration"));
                        }
                        m.insert(seg.to_string(), if last { Node::Null } else { Node::empty_map() });
                    }
                    m.get_mut(*seg).unwrap()
                }
                Node::List(l) => {
                    let len = l.len();
                    seg.parse::<usize>()
                        .ok()
                        .and_then(|k| l.get_mut(k))
                        .ok_or_else(|| Error::node(path, format!("`{seg}` is not an index into a list of {len}")))?
                }
                other => {
                    return Err(Error::node(
                        path,
                        format!("cannot descend into a {} at `{seg}`", other.type_name()),
                    ))
                }
            };
        }
        *cur = value;
        Ok(())
    }

    pub fn remove(&mut self, path: &str) -> Result<Node> {
        let (parent, key) = match path.rfind('.') {
            Some(i) => (&path[..i], &path[i + 1..]),
            None => ("", path),
        };
        match self.get_mut(parent) {
            Some(Node::Map(m)) => m
                .shift_remove(key)
                .ok_or_else(|| Error::node(path, "no such key in the configuration")),
            _ => Err(Error::node(path, "no such key in the configuration")),
        }
    }

    /// Deep merge: maps merge key by key, anything else is replaced by `other`.
    pub fn merge(&mut self, other: Node) {
        match (self, other) {
            (Node::Map(a), Node::Map(b)) => {
                for (k, v) in b {
                    match a.get_mut(&k) {
                        Some(slot) => slot.merge(v),
                        None => {
                            a.insert(k, v);
                        }
                    }
                }
            }
            (slot, v) => *slot = v,
        }
    }

    /// Block-style YAML that parses back to an equal tree.
    pub fn to_yaml(&self) -> String {
        let mut out = String::new();
        match self {
            Node::Map(m) if !m.is_empty() => write_map(&mut out, m, 0),
            Node::List(l) if !l.is_empty() => write_list(&mut out, l, 0),
            other => {
                out.push_str(&scalar_text(other));
                out.push('\n');
            }
        }
        out
    }
}

fn segments(path: &str) -> impl Iterator<Item = &str> {
    path.split('.').filter(|s| !s.is_empty())
}

fn from_yaml(y: &Yaml, path: &str) -> Result<Node> {
    let join = |k: &str| {
        if path.is_empty() {
            k.to_string()
        } else {
            format!("{path}.{k}")
        }
    };
    Ok(match y {
        Yaml::Null => Node::Null,
        Yaml::Boolean(b) => Node::Bool(*b),
        Yaml::Integer(i) => Node::Int(*i),
        Yaml::Real(s) => {
            Node::Float(parse_yaml_float(s).ok_or_else(|| Error::node(path, format!("bad float literal `{s}`")))?)
        }
        Yaml::String(s) => Node::Str(s.clone()),
        Yaml::Array(a) => Node::List(
            a.iter()
                .enumerate()
                .map(|(i, v)| from_yaml(v, &join(&i.to_string())))
                .collect::<Result<_>>()?,
        ),
        Yaml::Hash(h) => {
            let mut m = IndexMap::new();
            for (k, v) in h {
                let key = match k {
                    Yaml::String(s) => s.clone(),
                    Yaml::Integer(i) => i.to_string(),
                    _ => return Err(Error::node(path, "map keys must be strings")),
                };
                let child = from_yaml(v, &join(&key))?;
                m.insert(key, child);
            }
            Node::Map(m)
        }
        Yaml::Alias(_) => return Err(Error::node(path, "aliases are not supported")),
        Yaml::BadValue => return Err(Error::node(path, "unparseable value")),
    })
}

fn parse_yaml_float(s: &str) -> Option<f64> {
    match s.trim_start_matches('+') {
        ".inf" | ".Inf" | ".INF" => Some(f64::INFINITY),
        "-.inf" | "-.Inf" | "-.INF" => Some(f64::NEG_INFINITY),
        ".nan" | ".NaN" | ".NAN" => Some(f64::NAN),
        t => t.parse().ok(),
    }
}

/// Override values: int, then float, then bool, then string. Bracketed,
/// braced or quoted text is read as inline YAML.
pub fn parse_scalar(s: &str) -> Result<Node> {
    let t = s.trim();
    if let Ok(i) = t.parse::<i64>() {
        return Ok(Node::Int(i));
    }
    if let Ok(f) = t.parse::<f64>() {
        return Ok(Node::Float(f));
    }
    match t {
        "true" => return Ok(Node::Bool(true)),
        "false" => return Ok(Node::Bool(false)),
        "null" => return Ok(Node::Null),
        _ => {}
    }
    if t.starts_with(['[', '{', '"', '\'']) {
        return Node::parse(t);
    }
    Ok(Node::Str(t.to_string()))
}

fn float_text(f: f64) -> String {
    if f.is_nan() {
        ".nan".into()
    } else if f.is_infinite() {
        if f > 0.0 { ".inf" } else { "-.inf" }.into()
    } else {
        // Debug keeps a decimal point or exponent and round-trips exactly
        let s = format!("{f:?}");
        if s.contains('e') && !s.contains('.') {
            s.replacen('e', ".0e", 1)
        } else {
            s
        }
    }
}

fn needs_quotes(s: &str) -> bool {
    if s.is_empty() || s.trim() != s {
        return true;
    }
    let reparsed = YamlLoader::load_from_str(&format!("k: {s}"));
    !matches!(reparsed.as_deref(), Ok([Yaml::Hash(h)]) if h.len() == 1
        && matches!(h.front(), Some((_, Yaml::String(v))) if v == s))
}

fn quote(s: &str) -> String {
    let mut out = String::from("\"");
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn key_text(k: &str) -> String {
    if needs_quotes(k) || k.parse::<i64>().is_ok() {
        quote(k)
    } else {
        k.to_string()
    }
}

fn scalar_text(n: &Node) -> String {
    match n {
        Node::Null => "null".into(),
        Node::Bool(b) => b.to_string(),
        Node::Int(i) => i.to_string(),
        Node::Float(f) => float_text(*f),
        Node::Str(s) if needs_quotes(s) => quote(s),
        Node::Str(s) => s.clone(),
        Node::List(l) if l.is_empty() => "[]".into(),
        Node::Map(m) if m.is_empty() => "{}".into(),
        _ => unreachable!("collections are written in block style"),
    }
}

fn is_block(n: &Node) -> bool {
    matches!(n, Node::List(l) if !l.is_empty()) || matches!(n, Node::Map(m) if !m.is_empty())
}

fn write_map(out: &mut String, m: &IndexMap<String, Node>, indent: usize) {
    for (k, v) in m {
        let _ = write!(out, "{:indent$}{}:", "", key_text(k));
        match v {
            Node::Map(c) if !c.is_empty() => {
                out.push('\n');
                write_map(out, c, indent + 2);
            }
            Node::List(c) if !c.is_empty() => {
                out.push('\n');
                write_list(out, c, indent + 2);
            }
            s => {
                let _ = writeln!(out, " {}", scalar_text(s));
            }
        }
    }
}

fn write_list(out: &mut String, l: &[Node], indent: usize) {
    for v in l {
        let _ = write!(out, "{:indent$}-", "");
        if !is_block(v) {
            let _ = writeln!(out, " {}", scalar_text(v));
            continue;
        }
        // nested collections start on the next line, two deeper
        out.push('\n');
        match v {
            Node::Map(c) => write_map(out, c, indent + 2),
            Node::List(c) => write_list(out, c, indent + 2),
            _ => unreachable!(),
        }
    }
}
