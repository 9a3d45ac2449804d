//! Hyperparameter search spaces.
//!
//! A space file maps dotted config paths to one sampler each:
//!
//! ```yaml
//! trainer.lr_init: {loguniform: [1.0e-4, 1.0e-2]}
//! model.dropout_rate: {uniform: [0.0, 0.3]}
//! model.co_dim: {choice: [0, 2, 4]}
//! trainer.max_epochs: {const: 20}
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, RngCore};

use super::node::Node;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Sampler {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Choice(Vec<Node>),
    Const(Node),
}

impl Sampler {
    pub fn sample(&self, rng: &mut dyn RngCore) -> Node {
        match self {
            Sampler::Uniform { lo, hi } => Node::Float(lo + (hi - lo) * rng.random::<f64>()),
            Sampler::LogUniform { lo, hi } => {
                let (a, b) = (lo.ln(), hi.ln());
                Node::Float((a + (b - a) * rng.random::<f64>()).exp())
            }
            Sampler::Choice(opts) => opts[rng.random_range(0..opts.len())].clone(),
            Sampler::Const(v) => v.clone(),
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, Sampler::Uniform { .. } | Sampler::LogUniform { .. })
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        match *self {
            Sampler::Uniform { lo, hi } | Sampler::LogUniform { lo, hi } => Some((lo, hi)),
            _ => None,
        }
    }

    /// `value * factor` clamped into the sampler's range; `None` for
    /// samplers without a range or non-numeric values.
    pub fn perturb(&self, value: &Node, factor: f64) -> Option<Node> {
        let (lo, hi) = self.bounds()?;
        Some(Node::Float((value.as_f64()? * factor).clamp(lo, hi)))
    }

    fn from_node(path: &str, node: &Node) -> Result<Self> {
        let bad = |msg: String| Err(Error::node(path, msg));
        let map = match node.as_map() {
            Some(m) if m.len() == 1 => m,
            _ => return bad("expected a single-key map such as {uniform: [lo, hi]}".into()),
        };
        let (kind, arg) = map.iter().next().unwrap();
        let range = || -> Result<(f64, f64)> {
            match arg {
                Node::List(l) if l.len() == 2 => match (l[0].as_f64(), l[1].as_f64()) {
                    (Some(lo), Some(hi)) if lo < hi => Ok((lo, hi)),
                    (Some(lo), Some(hi)) => Err(Error::node(path, format!("need lo < hi, got [{lo}, {hi}]"))),
                    _ => Err(Error::node(path, "bounds must be numbers")),
                },
                _ => Err(Error::node(path, "expected [lo, hi]")),
            }
        };
        match kind.as_str() {
            "uniform" => {
                let (lo, hi) = range()?;
                Ok(Sampler::Uniform { lo, hi })
            }
            "loguniform" => {
                let (lo, hi) = range()?;
                if lo <= 0.0 {
                    return bad(format!("loguniform needs lo > 0, got {lo}"));
                }
                Ok(Sampler::LogUniform { lo, hi })
            }
            "choice" => match arg {
                Node::List(l) if !l.is_empty() => Ok(Sampler::Choice(l.clone())),
                _ => bad("choice needs a non-empty list".into()),
            },
            "const" => Ok(Sampler::Const(arg.clone())),
            other => bad(format!("unknown sampler `{other}`")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SearchSpace {
    pub entries: IndexMap<String, Sampler>,
}

/// One sampled assignment of every searched path.
pub type Assignment = IndexMap<String, Node>;

impl SearchSpace {
    pub fn parse(text: &str) -> Result<Self> {
        let node = Node::parse(text)?;
        let map = match &node {
            Node::Map(m) => m,
            Node::Null => return Ok(Self::default()),
            other => {
                return Err(Error::Config(format!(
                    "search space must be a map, found {}",
                    other.type_name()
                )))
            }
        };
        let entries = map
            .iter()
            .map(|(k, v)| Ok((k.clone(), Sampler::from_node(k, v)?)))
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every searched path must already exist in `base`.
    pub fn validate(&self, base: &Node) -> Result<()> {
        match self.entries.keys().find(|p| base.get(p).is_none()) {
            Some(p) => Err(Error::node(p, "search path does not exist in the base config")),
            None => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> Assignment {
        self.entries.iter().map(|(p, s)| (p.clone(), s.sample(rng))).collect()
    }
}

/// `path=value` overrides that reproduce `values` exactly.
pub fn as_overrides(values: &Assignment) -> Vec<String> {
    values
        .iter()
        .map(|(p, v)| {
            let text = v.to_yaml();
            let text = text.trim_end();
            // block collections do not fit on one line; write them inline
            let text = match v {
                Node::List(_) | Node::Map(_) if text.contains('\n') => inline(v),
                _ => text.to_string(),
            };
            format!("{p}={text}")
        })
        .collect()
}

fn inline(v: &Node) -> String {
    match v {
        Node::List(l) => format!("[{}]", l.iter().map(inline).collect::<Vec<_>>().join(", ")),
        Node::Map(m) => format!(
            "{{{}}}",
            m.iter()
                .map(|(k, v)| format!("{k}: {}", inline(v)))
                .collect::<Vec<_>>()
                .join(", ")
        ),
        other => other.to_yaml().trim_end().to_string(),
    }
}
