//! Prompt construction for the five in-context-learning methods and the
//! blind variant. Each method extends the previous one.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::config::{render_value, ConfigSchema, FieldKind, SimulationConfig};
use crate::geometry::{meters_to_rel, Extents, PointSet};
use crate::integrity::{strict_parse, REASONING_KEY};
use crate::solar::SunPosition;

pub const BLIND_PROMPT: &str = "Answer now:";
pub const ANSWER_PROMPT: &str = "Answer:";
pub const DEFAULT_NUM_EXAMPLES: usize = 3;
pub const DEFAULT_CONTEXT_TOKENS: usize = 32768;
pub const METHODS: [u8; 5] = [1, 2, 3, 4, 5];

const ROLE_TEXT: &str = "You are a plant phenotyping expert analyzing top-down images of simulated crop plots. \
Estimate every simulation parameter that produced the image and output them as JSON.";

const FORMAT_TEXT: &str = "Respond with a single valid JSON object and nothing else. \
Put the \"reasoning\" key first and use it to describe your visual analysis step by step, \
then fill in every parameter listed above.";

const EXAMPLE_IMAGE_TEXT: &str = "The examples below include their plot images. \
Relate the visual features of each example image to its parameters before answering for the target image.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("unknown method {0}; expected 1-5")]
    UnknownMethod(u8),
    #[error("method {method} needs {expected} few-shot examples, got {got}")]
    MissingExamples { method: u8, expected: usize, got: usize },
    #[error("few-shot example {0} has no image")]
    MissingExampleImage(usize),
    #[error("few-shot example {index} is not a valid answer: {message}")]
    BadExample { index: usize, message: String },
    #[error("method 5 needs grounding information")]
    MissingGrounding,
    #[error("method {0} does not accept grounding information")]
    GroundingForbidden(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Part {
    Text { text: String },
    Image { path: PathBuf },
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text { text: s.into() }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Part::Text { text } => Some(text),
            Part::Image { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub parts: Vec<Part>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub method: u8,
    pub blind: bool,
    pub messages: Vec<Message>,
    pub token_estimate: usize,
}

impl PromptBundle {
    pub fn text_parts(&self) -> impl Iterator<Item = &str> {
        self.messages
            .iter()
            .flat_map(|m| m.parts.iter().filter_map(Part::as_text))
    }

    pub fn images(&self) -> impl Iterator<Item = &PathBuf> {
        self.messages.iter().flat_map(|m| {
            m.parts.iter().filter_map(|p| match p {
                Part::Image { path } => Some(path),
                Part::Text { .. } => None,
            })
        })
    }

    pub fn exceeds_context(&self, context_tokens: usize) -> bool {
        self.token_estimate > context_tokens
    }

    /// Label used in records and reports, e.g. `m3` or `m3-blind`.
    pub fn label(&self) -> String {
        method_label(self.method, self.blind)
    }
}

pub fn method_label(method: u8, blind: bool) -> String {
    if blind {
        format!("m{method}-blind")
    } else {
        format!("m{method}")
    }
}

/// Advisory token count: one token per four characters of text.
pub fn estimate_tokens(messages: &[Message]) -> usize {
    messages
        .iter()
        .flat_map(|m| &m.parts)
        .filter_map(Part::as_text)
        .map(|t| t.chars().count().div_ceil(4))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    pub answer_json: String,
}

impl FewShotExample {
    fn check(&self, index: usize) -> Result<(), PromptError> {
        let bad = |message: String| PromptError::BadExample { index, message };
        let v = strict_parse(&self.answer_json).map_err(|e| bad(e.to_string()))?;
        let first = v.as_object().and_then(|o| o.keys().next());
        if first.map(String::as_str) != Some(REASONING_KEY) {
            return Err(bad("\"reasoning\" must be the first key".into()));
        }
        Ok(())
    }
}

/// Reasoning text for generated few-shot answers.
pub fn example_reasoning(c: &SimulationConfig) -> String {
    format!(
        "Visual analysis: Plant maturity suggests {} days growth. {} plants are visible along a single row. \
Shadow direction and length indicate a sun elevation near {:.0} deg and azimuth near {:.0} deg. \
Leaf color suggests chlorophyll around {:.0} ug/cm2.",
        c.metadata.dap,
        c.plant_count(),
        c.environment.sun_elevation_deg,
        c.environment.sun_azimuth_deg,
        c.plant_properties.chlorophyll_ug_cm2,
    )
}

/// Parameter reference reconstructed from the schema descriptions.
pub fn parameter_reference(schema: &ConfigSchema) -> String {
    let mut out = String::from("--- Parameter Reference ---");
    let mut section = 0;
    for e in &schema.entries {
        let mut line = e.describe();
        if let Some(list) = e.enum_ref.as_deref() {
            if list == "soil_categories" {
                let _ = write!(line, "; one of: {}", schema.soil_categories.join(", "));
            }
        }
        if e.depth() == 0 {
            section += 1;
            if e.kind == FieldKind::Object {
                let _ = write!(out, "\n{section}. {}: {line}", e.path);
            } else {
                let _ = write!(out, "\n{section}. {} ({}): {line}", e.path, kind_name(e.kind));
            }
        } else {
            let _ = write!(out, "\n   - {} ({}): {line}", e.leaf_name(), kind_name(e.kind));
        }
    }
    out
}

fn kind_name(k: FieldKind) -> &'static str {
    match k {
        FieldKind::Integer => "integer",
        FieldKind::Number => "number",
        FieldKind::String => "string",
        FieldKind::Object => "object",
        FieldKind::Array => "array",
    }
}

/// JSON-schema style skeleton: `"reasoning"` first, then every schema path
/// with its type name (or element shape for arrays).
pub fn schema_skeleton(schema: &ConfigSchema) -> Value {
    let mut root = Map::new();
    root.insert(REASONING_KEY.into(), Value::from("string"));
    for e in &schema.entries {
        let value = match e.kind {
            FieldKind::Object => Value::Object(Map::new()),
            FieldKind::Array => e.shape.clone().unwrap_or_else(|| Value::from("array")),
            k => Value::from(kind_name(k)),
        };
        let mut node = &mut root;
        let mut keys = e.path.split('.').peekable();
        while let Some(key) = keys.next() {
            if keys.peek().is_none() {
                node.insert(key.to_string(), value);
                break;
            }
            node = node
                .entry(key.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("schema parents are objects");
        }
    }
    Value::Object(root)
}

pub fn schema_block(schema: &ConfigSchema) -> String {
    format!("JSON SCHEMA: {}", render_value(&schema_skeleton(schema)))
}

/// Method-5 hint text from measured or known values.
pub fn grounding_from_truth(dap: u32, plants: &PointSet, sun: SunPosition, extents: Extents) -> String {
    let locations: Vec<String> = plants
        .points
        .iter()
        .map(|&p| {
            let (rx, ry) = meters_to_rel(p, extents);
            format!("({rx:.3}, {ry:.3})")
        })
        .collect();
    format!(
        "Ground truth hints for target image: Plant age: {dap} DAP, Plant count: {}, \
Sun position: {:.1}° elev., {:.1}° azim., Plant locations (rx, ry): [{}]. \
Convert to meters: x = (r_x - 0.5) × {:.4}, y = -(r_y - 0.5) × {:.4}",
        plants.len(),
        sun.elevation_deg,
        sun.azimuth_deg,
        locations.join(", "),
        extents.width_m,
        extents.height_m,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptOptions {
    pub num_examples: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            num_examples: DEFAULT_NUM_EXAMPLES,
        }
    }
}

pub fn build(
    method: u8,
    schema: &ConfigSchema,
    examples: &[FewShotExample],
    grounding: Option<&str>,
    target_image: PathBuf,
    opts: PromptOptions,
) -> Result<PromptBundle, PromptError> {
    if !METHODS.contains(&method) {
        return Err(PromptError::UnknownMethod(method));
    }
    match (method, grounding) {
        (5, None) => return Err(PromptError::MissingGrounding),
        (m, Some(_)) if m < 5 => return Err(PromptError::GroundingForbidden(m)),
        _ => {}
    }

    let mut system = vec![
        Part::text(ROLE_TEXT),
        Part::text(parameter_reference(schema)),
        Part::text(FORMAT_TEXT),
    ];
    if method >= 2 {
        system.push(Part::text(schema_block(schema)));
    }
    if method >= 4 {
        system.push(Part::text(EXAMPLE_IMAGE_TEXT));
    }
    let mut messages = vec![Message {
        role: Role::System,
        parts: system,
    }];

    if method >= 3 {
        if examples.len() != opts.num_examples {
            return Err(PromptError::MissingExamples {
                method,
                expected: opts.num_examples,
                got: examples.len(),
            });
        }
        for (i, ex) in examples.iter().enumerate() {
            ex.check(i)?;
            let mut parts = vec![Part::text(format!("Example {}:", i + 1))];
            if method >= 4 {
                let path = ex.image.clone().ok_or(PromptError::MissingExampleImage(i))?;
                parts.push(Part::Image { path });
            }
            messages.push(Message {
                role: Role::User,
                parts,
            });
            messages.push(Message {
                role: Role::Assistant,
                parts: vec![Part::text(ex.answer_json.clone())],
            });
        }
    }

    let mut last = vec![Part::Image { path: target_image }];
    if let Some(g) = grounding {
        last.push(Part::text(g));
    }
    last.push(Part::text(ANSWER_PROMPT));
    messages.push(Message {
        role: Role::User,
        parts: last,
    });

    Ok(PromptBundle {
        method,
        blind: false,
        token_estimate: estimate_tokens(&messages),
        messages,
    })
}

/// Drops the target image: the final user turn becomes `"Answer now:"`.
pub fn build_blind(bundle: &PromptBundle) -> PromptBundle {
    let mut messages = bundle.messages.clone();
    let last = messages
        .iter()
        .rposition(|m| m.role == Role::User)
        .expect("built bundles end with a user turn");
    messages[last].parts = vec![Part::text(BLIND_PROMPT)];
    PromptBundle {
        method: bundle.method,
        blind: true,
        token_estimate: estimate_tokens(&messages),
        messages,
    }
}

/// True when every text part of `lower` appears, in order, among the text
/// parts of `upper`, and `upper` carries strictly more text.
pub fn extends(lower: &PromptBundle, upper: &PromptBundle) -> bool {
    let mut hi = upper.text_parts();
    let contained = lower.text_parts().all(|t| hi.any(|u| u == t));
    let len = |b: &PromptBundle| b.text_parts().map(str::len).sum::<usize>();
    contained && len(upper) > len(lower)
}
