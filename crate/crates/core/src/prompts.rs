//! Query prompt templates.
//!
//! Templates are data: the built-in set is the golden file
//! `data/prompts.jsonl`, and further sets can be loaded at runtime from a
//! file of the same shape (`{"template_id": ..., "body": ...}` per line).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PLACEHOLDER: &str = "{element}";

/// Golden bodies of the built-in templates.
pub const BUILTIN_PROMPTS: &str = include_str!("../data/prompts.jsonl");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("element is empty")]
    EmptyElement,
    #[error("template {0} has no {PLACEHOLDER} placeholder")]
    MissingPlaceholder(TemplateId),
    #[error("unknown template {0}")]
    UnknownTemplate(String),
    #[error("prompt file line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    Original,
    P1,
    P2,
    P3,
    Gpt1,
    Gpt2,
    Custom(String),
}

impl TemplateId {
    pub const BUILTIN: [TemplateId; 6] = [
        TemplateId::Original,
        TemplateId::P1,
        TemplateId::P2,
        TemplateId::P3,
        TemplateId::Gpt1,
        TemplateId::Gpt2,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            TemplateId::Original => "original",
            TemplateId::P1 => "p1",
            TemplateId::P2 => "p2",
            TemplateId::P3 => "p3",
            TemplateId::Gpt1 => "gpt1",
            TemplateId::Gpt2 => "gpt2",
            TemplateId::Custom(s) => s,
        }
    }
}

impl FromStr for TemplateId {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "original" => TemplateId::Original,
            "p1" => TemplateId::P1,
            "p2" => TemplateId::P2,
            "p3" => TemplateId::P3,
            "gpt1" => TemplateId::Gpt1,
            "gpt2" => TemplateId::Gpt2,
            _ => TemplateId::Custom(s.to_string()),
        })
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for TemplateId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for TemplateId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(template_id: TemplateId, body: impl Into<String>) -> Result<Self, PromptError> {
        let body = body.into();
        if !body.contains(PLACEHOLDER) {
            return Err(PromptError::MissingPlaceholder(template_id));
        }
        Ok(Self { template_id, body })
    }

    /// Built-in template by id, from the golden file.
    pub fn builtin(id: &TemplateId) -> Result<Self, PromptError> {
        PromptSet::builtin().get(id).cloned().ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn render(&self, element: &str) -> Result<String, PromptError> {
        render(self, element)
    }
}

/// Substitutes `element` for every placeholder; nothing else changes.
pub fn render(t: &PromptTemplate, element: &str) -> Result<String, PromptError> {
    if element.is_empty() {
        return Err(PromptError::EmptyElement);
    }
    Ok(t.body.replace(PLACEHOLDER, element))
}

/// An ordered set of templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    templates: Vec<PromptTemplate>,
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_PROMPTS).expect("golden prompt file is valid")
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut templates: Vec<PromptTemplate> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t: PromptTemplate = serde_json::from_str(line)
                .map_err(|e| PromptError::Malformed { line: i + 1, reason: e.to_string() })?;
            let t = PromptTemplate::new(t.template_id, t.body)?;
            if templates.iter().any(|o| o.template_id == t.template_id) {
                return Err(PromptError::Malformed {
                    line: i + 1,
                    reason: format!("duplicate template {}", t.template_id),
                });
            }
            templates.push(t);
        }
        Ok(Self { templates })
    }

    pub fn get(&self, id: &TemplateId) -> Option<&PromptTemplate> {
        self.templates.iter().find(|t| &t.template_id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PromptTemplate> {
        self.templates.iter()
    }

    pub fn to_jsonl(&self) -> String {
        self.templates
            .iter()
            .map(|t| serde_json::to_string(t).expect("template serializes") + "\n")
            .collect()
    }
}
