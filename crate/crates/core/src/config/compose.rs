//! Composing a run configuration from a main file, group files listed under
//! `defaults`, and command-line overrides.
//!
//! A `defaults` entry `group: option` loads `<dir>/<group>/<option>.yaml`
//! into key `group`, where `<dir>` is the directory of the file holding the
//! entry. A bare string entry loads a sibling file into the same place, and
//! `_self_` marks where the file's own keys are merged (last by default).
//! After composition, overrides are applied left to right, then `${a.b}`
//! references are resolved.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::node::{parse_scalar, Node};
use crate::error::{Error, Result};
use crate::train::config_hash;

/// A fully composed and resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub root: Node,
    /// The tree before `${..}` resolution, so later overrides propagate
    /// through references.
    pub raw: Node,
    /// Canonical text of `root`; what gets written to `config.resolved`.
    pub text: String,
    pub hash: String,
}

impl RunConfig {
    pub fn from_node(root: Node) -> Self {
        Self::from_parts(root.clone(), root)
    }

    fn from_parts(raw: Node, root: Node) -> Self {
        let text = root.to_yaml();
        let hash = config_hash(&text);
        Self { root, raw, text, hash }
    }

    fn resolve(raw: Node) -> Result<Self> {
        let mut root = raw.clone();
        resolve_refs(&mut root)?;
        Ok(Self::from_parts(raw, root))
    }

    /// Reads a previously written `config.resolved`.
    pub fn from_resolved(text: &str) -> Result<Self> {
        let root = Node::parse(text)?;
        Ok(Self::from_node(root))
    }

    /// Applies overrides to an already composed config and re-resolves.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut raw = self.raw.clone();
        for o in overrides {
            apply_override(&mut raw, o)?;
        }
        Self::resolve(raw)
    }
}

/// A parsed `path=value` override; `+path=value` may add a key and
/// `~path` deletes one.
#[derive(Clone, Debug, PartialEq)]
pub enum Override {
    Set { path: String, value: Node, create: bool },
    Delete { path: String },
}

impl Override {
    pub fn parse(text: &str) -> Result<Self> {
        if let Some(path) = text.strip_prefix('~') {
            return Ok(Override::Delete {
                path: path.trim().into(),
            });
        }
        let (create, body) = match text.strip_prefix('+') {
            Some(rest) => (true, rest),
            None => (false, text),
        };
        let (path, value) = body
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form path=value")))?;
        let path = path.trim();
        if path.is_empty() {
            return Err(Error::Config(format!("override `{text}` has an empty path")));
        }
        Ok(Override::Set {
            path: path.into(),
            value: parse_scalar(value)?,
            create,
        })
    }
}

pub fn apply_override(root: &mut Node, text: &str) -> Result<()> {
    match Override::parse(text)? {
        Override::Set { path, value, create } => root.set(&path, value, create),
        Override::Delete { path } => root.remove(&path).map(|_| ()),
    }
}

/// Composes `main` with explicit group selections (`package -> option`)
/// and overrides. An override whose path names a group loaded through
/// `defaults` selects that group's option instead of setting a value.
pub fn compose(main: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut selections = IndexMap::new();
    let mut values = Vec::new();
    let groups = group_packages(main)?;
    for o in overrides {
        match o.split_once('=') {
            Some((k, v)) if !o.starts_with(['+', '~']) && groups.contains(&k.trim().to_string()) => {
                selections.insert(k.trim().to_string(), v.trim().to_string());
            }
            _ => values.push(o.clone()),
        }
    }
    compose_with(main, &selections, &values)
}

pub fn compose_with(main: &Path, selections: &IndexMap<String, String>, overrides: &[String]) -> Result<RunConfig> {
    let mut stack = Vec::new();
    let mut root = load(main, "", selections, &mut stack)?;
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    RunConfig::resolve(root)
}

fn read_file(path: &Path) -> Result<Node> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let node = Node::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    match node {
        Node::Map(_) => Ok(node),
        Node::Null => Ok(Node::empty_map()),
        other => Err(Error::Config(format!(
            "{}: top level must be a map, found {}",
            path.display(),
            other.type_name()
        ))),
    }
}

fn option_path(dir: &Path, group: &str, option: &str) -> PathBuf {
    let mut p = dir.join(group).join(option);
    if p.extension().is_none() {
        p.set_extension("yaml");
    }
    p
}

fn child_package(package: &str, key: &str) -> String {
    if package.is_empty() {
        key.to_string()
    } else {
        format!("{package}.{key}")
    }
}

/// Packages of the groups listed in `main`'s own `defaults`.
fn group_packages(main: &Path) -> Result<Vec<String>> {
    let node = read_file(main)?;
    let mut out = Vec::new();
    if let Some(Node::List(entries)) = node.get("defaults") {
        for e in entries {
            if let Node::Map(m) = e {
                out.extend(m.keys().cloned());
            }
        }
    }
    Ok(out)
}

fn load(path: &Path, package: &str, selections: &IndexMap<String, String>, stack: &mut Vec<PathBuf>) -> Result<Node> {
    let canon = path.canonicalize().map_err(|e| Error::io(path, e))?;
    if stack.contains(&canon) {
        let chain: Vec<String> = stack
            .iter()
            .chain(std::iter::once(&canon))
            .map(|p| p.display().to_string())
            .collect();
        return Err(Error::Config(format!(
            "cyclic config reference: {}",
            chain.join(" -> ")
        )));
    }
    stack.push(canon);
    let mut body = read_file(path)?;
    let defaults = match &mut body {
        Node::Map(m) => m.shift_remove("defaults"),
        _ => None,
    };
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut out = Node::empty_map();
    let mut self_merged = false;
    let entries = match defaults {
        None | Some(Node::Null) => Vec::new(),
        Some(Node::List(l)) => l,
        Some(other) => {
            return Err(Error::Config(format!(
                "{}: defaults must be a list, found {}",
                path.display(),
                other.type_name()
            )))
        }
    };
    for entry in entries {
        match entry {
            Node::Str(s) if s == "_self_" => {
                out.merge(body.clone());
                self_merged = true;
            }
            Node::Str(name) => {
                let p = option_path(dir, "", &name);
                out.merge(load(&p, package, selections, stack)?);
            }
            Node::Map(m) if m.len() == 1 => {
                let (group, option) = m.into_iter().next().unwrap();
                let pkg = child_package(package, &group);
                let option = match selections.get(&pkg) {
                    Some(sel) => Node::Str(sel.clone()),
                    None => option,
                };
                let option = match option {
                    Node::Null => continue,
                    Node::Str(s) if s == "null" => continue,
                    Node::Str(s) => s,
                    other => {
                        return Err(Error::node(
                            &pkg,
                            format!("group option must be a name, found {}", other.type_name()),
                        ))
                    }
                };
                let p = option_path(dir, &group, &option);
                if !p.exists() {
                    return Err(Error::node(&pkg, format!("no option `{option}` ({})", p.display())));
                }
                let child = load(&p, &pkg, selections, stack)?;
                let mut wrapper = Node::empty_map();
                wrapper.set(&group, child, true)?;
                out.merge(wrapper);
            }
            other => {
                return Err(Error::Config(format!(
                    "{}: defaults entries are names or single-key maps, found {}",
                    path.display(),
                    other.type_name()
                )))
            }
        }
    }
    if !self_merged {
        out.merge(body);
    }
    stack.pop();
    Ok(out)
}

/// Replaces `${a.b}` references with the referenced values. A string that
/// is exactly one reference takes the referenced node; references inside
/// longer strings are substituted as text.
pub fn resolve_refs(root: &mut Node) -> Result<()> {
    let snapshot = root.clone();
    resolve_in(root, &snapshot, "", 0)
}

const MAX_REF_DEPTH: usize = 32;

fn resolve_in(node: &mut Node, root: &Node, path: &str, depth: usize) -> Result<()> {
    match node {
        Node::Map(m) => {
            for (k, v) in m.iter_mut() {
                resolve_in(v, root, &child_package(path, k), depth)?;
            }
        }
        Node::List(l) => {
            for (i, v) in l.iter_mut().enumerate() {
                resolve_in(v, root, &child_package(path, &i.to_string()), depth)?;
            }
        }
        Node::Str(s) if s.contains("${") => {
            if depth > MAX_REF_DEPTH {
                return Err(Error::node(path, "reference chain too deep (cycle?)"));
            }
            let lookup = |r: &str| -> Result<Node> {
                let mut target = root
                    .get(r)
                    .cloned()
                    .ok_or_else(|| Error::node(path, format!("reference to missing key `{r}`")))?;
                resolve_in(&mut target, root, path, depth + 1)?;
                Ok(target)
            };
            let whole = s.strip_prefix("${").and_then(|r| r.strip_suffix('}'));
            if let Some(r) = whole.filter(|r| !r.contains('}')) {
                *node = lookup(r)?;
                return Ok(());
            }
            let mut out = String::new();
            let mut rest = s.as_str();
            while let Some(i) = rest.find("${") {
                out.push_str(&rest[..i]);
                let j = rest[i..]
                    .find('}')
                    .ok_or_else(|| Error::node(path, "unterminated `${`"))?;
                let text = match lookup(&rest[i + 2..i + j])? {
                    Node::Str(t) => t,
                    Node::Int(v) => v.to_string(),
                    Node::Float(v) => format!("{v:?}"),
                    Node::Bool(v) => v.to_string(),
                    other => {
                        return Err(Error::node(
                            path,
                            format!("cannot splice a {} into text", other.type_name()),
                        ))
                    }
                };
                out.push_str(&text);
                rest = &rest[i + j + 1..];
            }
            out.push_str(rest);
            *s = out;
        }
        _ => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(files: &[(&str, &str)]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (name, text) in files {
            let p = dir.path().join(name);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, text).unwrap();
        }
        dir
    }

    fn sample() -> tempfile::TempDir {
        tree(&[
            (
                "main.yaml",
                "defaults:\n  - model: small\n  - trainer: fast\nseed: 3\ntrainer:\n  lr: 0.01\n",
            ),
            ("model/small.yaml", "dim: 4\nco_dim: 2\nprior:\n  size: ${model.dim}\n"),
            ("model/big.yaml", "dim: 64\nco_dim: 2\nprior:\n  size: ${model.dim}\n"),
            ("trainer/fast.yaml", "lr: 0.1\nepochs: 2\nname: run-${seed}\n"),
        ])
    }

    #[test]
    fn composes_groups_and_self_wins() {
        let d = sample();
        let c = compose(&d.path().join("main.yaml"), &[]).unwrap();
        assert_eq!(
            c.text,
            "model:\n  dim: 4\n  co_dim: 2\n  prior:\n    size: 4\ntrainer:\n  lr: 0.01\n  epochs: 2\n  name: run-3\nseed: 3\n"
        );
        assert_eq!(c, compose(&d.path().join("main.yaml"), &[]).unwrap());
    }

    #[test]
    fn overrides_replace_leaves_last_wins() {
        let d = sample();
        let main = d.path().join("main.yaml");
        let base = compose(&main, &[]).unwrap();
        let c = compose(&main, &["model.co_dim=0".into()]).unwrap();
        let mut expect = base.root.clone();
        expect.set("model.co_dim", Node::Int(0), false).unwrap();
        assert_eq!(c.root, expect);
        let c = compose(&main, &["seed=1".into(), "seed=2".into()]).unwrap();
        assert_eq!(c.root.get("seed"), Some(&Node::Int(2)));
        assert_eq!(c.root.get("trainer.name"), Some(&Node::Str("run-2".into())));
        let c = compose(&main, &["model.dim=8".into()]).unwrap();
        assert_eq!(c.root.get("model.prior.size"), Some(&Node::Int(8)));
    }

    #[test]
    fn unknown_override_path_is_named() {
        let d = sample();
        let err = compose(&d.path().join("main.yaml"), &["model.nope=1".into()]).unwrap_err();
        assert!(
            matches!(&err, Error::ConfigNode { path, .. } if path == "model.nope"),
            "{err}"
        );
        let c = compose(&d.path().join("main.yaml"), &["+model.extra=x".into()]).unwrap();
        assert_eq!(c.root.get("model.extra"), Some(&Node::Str("x".into())));
    }

    #[test]
    fn group_selection_by_override() {
        let d = sample();
        let c = compose(&d.path().join("main.yaml"), &["model=big".into()]).unwrap();
        assert_eq!(c.root.get("model.prior.size"), Some(&Node::Int(64)));
        assert!(compose(&d.path().join("main.yaml"), &["model=huge".into()]).is_err());
    }

    #[test]
    fn cycles_are_reported() {
        let d = tree(&[
            ("main.yaml", "defaults:\n  - a\nx: 1\n"),
            ("a.yaml", "defaults:\n  - b\n"),
            ("b.yaml", "defaults:\n  - a\n"),
        ]);
        let err = compose(&d.path().join("main.yaml"), &[]).unwrap_err();
        assert!(err.to_string().contains("cyclic"), "{err}");
        let d = tree(&[("main.yaml", "a: ${b}\nb: ${a}\n")]);
        assert!(compose(&d.path().join("main.yaml"), &[]).is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let d = sample();
        let c = compose(&d.path().join("main.yaml"), &["trainer.lr=0.1".into()]).unwrap();
        let again = RunConfig::from_resolved(&c.text).unwrap();
        assert_eq!((&again.root, &again.text, &again.hash), (&c.root, &c.text, &c.hash));
        let later = c.with_overrides(&["model.dim=5".into()]).unwrap();
        assert_eq!(later.root.get("model.prior.size"), Some(&Node::Int(5)));
    }
}
