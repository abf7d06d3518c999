//! JSON model documents.
//!
//! ```json
//! {
//!   "factors": [
//!     { "name": "V1", "levels": ["a", "b"], "prior": [0.5, 0.5] }
//!   ],
//!   "parameter": "theta",
//!   "backend": { "family": "bernoulli-fixed", "cells": [ { "p": 0.2 }, { "p": 0.6 } ] }
//! }
//! ```
//!
//! `prior` is optional (uniform), a single weight row, or one row per
//! assignment of the earlier factors. `backend` holds fields shared by every
//! cell; `cells` is either a list in grid order (first factor slowest) or an
//! object keyed by comma-joined level labels. Each cell is the shared object
//! overlaid with its own fields and must name a `family`.

use std::path::Path;
use std::sync::Arc;

use serde::Deserialize;
use serde_json::{Map, Value};

use crate::backend::CellModel;
use crate::conjugate::{BernoulliFixedSpec, BetaBinomialSpec, NormalInvGammaSpec, NormalKnownVarSpec};
use crate::error::{Error, Result};
use crate::glm::GlmCellSpec;
use crate::hierarchy::{FactorSpec, HierarchicalModel};

/// Backend families accepted in model documents.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum BackendDescriptor {
    NormalKnownVar(NormalKnownVarSpec),
    NormalInvgamma(NormalInvGammaSpec),
    BetaBinomial(BetaBinomialSpec),
    BernoulliFixed(BernoulliFixedSpec),
    GlmBinomial(GlmCellSpec),
}

impl BackendDescriptor {
    pub fn into_cell(self) -> Result<Arc<dyn CellModel>> {
        Ok(match self {
            BackendDescriptor::NormalKnownVar(s) => {
                s.validate()?;
                Arc::new(s)
            }
            BackendDescriptor::NormalInvgamma(s) => {
                s.validate()?;
                Arc::new(s)
            }
            BackendDescriptor::BetaBinomial(s) => {
                s.validate()?;
                Arc::new(s)
            }
            BackendDescriptor::BernoulliFixed(s) => {
                s.validate()?;
                Arc::new(s)
            }
            BackendDescriptor::GlmBinomial(s) => {
                s.model.validate()?;
                Arc::new(s)
            }
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorDoc {
    name: String,
    levels: Vec<String>,
    #[serde(default)]
    prior: Option<PriorDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PriorDoc {
    Row(Vec<f64>),
    Rows(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    #[serde(default)]
    factors: Vec<FactorDoc>,
    #[serde(default)]
    parameter: Option<String>,
    backend: Map<String, Value>,
}

/// One-based line of the first occurrence of `needle`, or 1.
fn line_of(text: &str, needle: &str) -> usize {
    text.find(needle).map(|pos| text[..pos].matches('\n').count() + 1).unwrap_or(1)
}

fn doc_error(text: &str, path: String, needle: &str, message: String) -> Error {
    Error::Document { line: line_of(text, needle), path, message }
}

/// Parses and validates a model document.
pub fn parse_model(text: &str) -> Result<HierarchicalModel> {
    let doc: ModelDoc = serde_json::from_str(text).map_err(|e| Error::Document {
        path: "<document>".into(),
        line: e.line(),
        message: e.to_string(),
    })?;

    let mut factors = Vec::with_capacity(doc.factors.len());
    for (i, f) in doc.factors.into_iter().enumerate() {
        let needle = format!("\"{}\"", f.name);
        let prior = match f.prior {
            None => vec![vec![1.0 / f.levels.len().max(1) as f64; f.levels.len()]],
            Some(PriorDoc::Row(r)) => vec![r],
            Some(PriorDoc::Rows(rows)) => rows,
        };
        let spec = FactorSpec { name: f.name, levels: f.levels, prior };
        let earlier: usize = factors.iter().map(FactorSpec::len).product();
        spec.validate(earlier).map_err(|e| doc_error(text, format!("factors[{i}]"), &needle, e.to_string()))?;
        factors.push(spec);
    }

    let dims: Vec<usize> = factors.iter().map(FactorSpec::len).collect();
    let n_cells: usize = dims.iter().product();
    let mut shared = doc.backend;
    let cells_value = shared.remove("cells");
    let cell_objs: Vec<Map<String, Value>> = match cells_value {
        None => vec![Map::new(); n_cells],
        Some(Value::Array(items)) => {
            if items.len() != n_cells {
                return Err(doc_error(
                    text,
                    "backend.cells".into(),
                    "\"cells\"",
                    format!("{} cells listed for a grid of {n_cells} assignments", items.len()),
                ));
            }
            items
                .into_iter()
                .enumerate()
                .map(|(j, v)| match v {
                    Value::Object(o) => Ok(o),
                    _ => Err(doc_error(
                        text,
                        format!("backend.cells[{j}]"),
                        "\"cells\"",
                        "cell must be an object".into(),
                    )),
                })
                .collect::<Result<_>>()?
        }
        Some(Value::Object(by_label)) => {
            let mut out = vec![None; n_cells];
            for (key, v) in by_label {
                let labels: Vec<&str> = key.split(',').map(str::trim).collect();
                if labels.len() != factors.len() {
                    return Err(doc_error(
                        text,
                        format!("backend.cells.{key}"),
                        &format!("\"{key}\""),
                        "key must name one level per factor".into(),
                    ));
                }
                let mut flat = 0;
                for (k, l) in labels.iter().enumerate() {
                    let idx = factors[k].levels.iter().position(|x| x == l).ok_or_else(|| {
                        doc_error(
                            text,
                            format!("backend.cells.{key}"),
                            &format!("\"{key}\""),
                            format!("unknown level `{l}` of factor `{}`", factors[k].name),
                        )
                    })?;
                    flat = flat * dims[k] + idx;
                }
                match v {
                    Value::Object(o) => out[flat] = Some(o),
                    _ => {
                        return Err(doc_error(
                            text,
                            format!("backend.cells.{key}"),
                            &format!("\"{key}\""),
                            "cell must be an object".into(),
                        ))
                    }
                }
            }
            out.into_iter()
                .enumerate()
                .map(|(j, o)| {
                    o.ok_or_else(|| {
                        doc_error(
                            text,
                            "backend.cells".into(),
                            "\"cells\"",
                            format!("no cell given for grid position {j}"),
                        )
                    })
                })
                .collect::<Result<_>>()?
        }
        Some(_) => {
            return Err(doc_error(
                text,
                "backend.cells".into(),
                "\"cells\"",
                "cells must be a list or an object".into(),
            ))
        }
    };

    let mut cells = Vec::with_capacity(n_cells);
    for (j, own) in cell_objs.into_iter().enumerate() {
        let mut merged = shared.clone();
        merged.extend(own);
        let path = format!("backend.cells[{j}]");
        let needle = if text.contains("\"cells\"") { "\"cells\"" } else { "\"backend\"" };
        let desc: BackendDescriptor = serde_json::from_value(Value::Object(merged))
            .map_err(|e| doc_error(text, path.clone(), needle, e.to_string()))?;
        cells.push(desc.into_cell().map_err(|e| doc_error(text, path, needle, e.to_string()))?);
    }

    HierarchicalModel::new(factors, doc.parameter, cells)
        .map_err(|e| doc_error(text, "<model>".into(), "\"factors\"", e.to_string()))
}

pub fn load_model(path: &Path) -> Result<HierarchicalModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_model(&text)
}
