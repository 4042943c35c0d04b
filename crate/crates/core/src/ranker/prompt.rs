//! Listwise ranking prompt.

use serde::{Deserialize, Serialize};

use crate::corpus::Entity;

use super::RankError;

/// A piece of a multimodal prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum PromptPart {
    Text(String),
    /// Attachment reference: a file path or URI.
    Image(String),
}

/// Text segments interleaved with image references.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptDocument {
    pub parts: Vec<PromptPart>,
}

impl PromptDocument {
    fn text(&mut self, text: impl Into<String>) {
        let text = text.into();
        // Merge adjacent text so the wire format stays compact.
        if let Some(PromptPart::Text(last)) = self.parts.last_mut() {
            last.push_str(&text);
        } else {
            self.parts.push(PromptPart::Text(text));
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(|p| match p {
            PromptPart::Image(r) => Some(r.as_str()),
            PromptPart::Text(_) => None,
        })
    }

    /// Flattened text with `<image:ref>` placeholders.
    pub fn to_text(&self) -> String {
        self.parts
            .iter()
            .map(|p| match p {
                PromptPart::Text(t) => t.clone(),
                PromptPart::Image(r) => format!("<image:{r}>"),
            })
            .collect()
    }
}

fn instruction(count: usize) -> String {
    format!(
        "Given an input seed entity set. The set defines a particular semantic class based on the \
         common attributes of its members. Then input {count} candidate entities. Each entity is \
         combined with a corresponding image. Your task is to generate a ranking of the provided \
         candidate entities, based on their relevance to the seed entity set (the probability that \
         each entity belongs to the same semantic class of the seed set).\n\n\
         Output the {count} candidate entities with ranking order, from the most relevant to least \
         relevant, without regard to the initial order of the candidates. Answer only with the \
         entity names separated by \" > \".\n\n"
    )
}

fn entity_line(doc: &mut PromptDocument, entity: &Entity) {
    doc.text(format!("  {{{}}}", entity.surface));
    for image in &entity.images {
        doc.parts.push(PromptPart::Image(image.clone()));
    }
    doc.text("\n");
}

/// Instruction, then seeds with their images, then candidates with theirs.
pub fn render_prompt(seeds: &[&Entity], candidates: &[&Entity]) -> Result<PromptDocument, RankError> {
    if candidates.is_empty() {
        return Err(RankError::EmptyList);
    }
    let mut doc = PromptDocument::default();
    doc.text(instruction(candidates.len()));
    doc.text("[Seed entity set with images]:\n");
    for seed in seeds {
        entity_line(&mut doc, seed);
    }
    doc.text("[Candidate entities with images]:\n");
    for candidate in candidates {
        entity_line(&mut doc, candidate);
    }
    doc.text("Response:\n");
    Ok(doc)
}
