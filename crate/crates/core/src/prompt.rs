//! Sentence-template augmentation of target texts.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Built-in templates in table order (left column, then right, row by row).
const DEFAULT_TEMPLATES: [&str; 74] = [
    "a bad photo of a",
    "a sculpture of a",
    "a photo of the hard to see",
    "a low resolution photo of the",
    "a rendering of a",
    "graffiti of a",
    "a bad photo of the",
    "a cropped photo of the",
    "a photo of a hard to see",
    "a bright photo of a",
    "a photo of a clean",
    "a photo of a dirty",
    "a dark photo of the",
    "a drawing of a",
    "a photo of my",
    "the plastic",
    "a photo of the cool",
    "a close-up photo of a",
    "a painting of the",
    "a painting of a",
    "a pixelated photo of the",
    "a sculpture of the",
    "a bright photo of the",
    "a cropped photo of a",
    "a plastic",
    "a photo of the dirty",
    "a blurry photo of the",
    "a photo of the",
    "a good photo of the",
    "a rendering of the",
    "a in a video game.",
    "a photo of one",
    "a doodle of a",
    "a close-up photo of the",
    "a photo of a",
    "the in a video game.",
    "a sketch of a",
    "a face of the",
    "a doodle of the",
    "a low resolution photo of a",
    "the toy",
    "a rendition of the",
    "a photo of the clean",
    "a photo of a large",
    "a rendition of a",
    "a photo of a nice",
    "a photo of a weird",
    "a blurry photo of a",
    "a cartoon",
    "art of a",
    "a sketch of the",
    "a pixelated photo of a",
    "itap of the",
    "a good photo of a",
    "a plushie",
    "a photo of the nice",
    "a photo of the small",
    "a photo of the weird",
    "the cartoon",
    "art of the",
    "a drawing of the",
    "a photo of the large",
    "the plushie",
    "a dark photo of a",
    "itap of a",
    "graffiti of the",
    "a toy",
    "itap of my",
    "a photo of a cool",
    "a photo of a small",
    "a 3d object of the",
    "a 3d object of a",
    "a 3d face of a",
    "a 3d face of the",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplateSet {
    templates: Vec<String>,
}

impl PromptTemplateSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::invalid("template set is empty"));
        }
        if templates.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::invalid("template set contains an empty template"));
        }
        Ok(Self { templates })
    }

    /// One template per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(|l| l.trim_end_matches('\r'))
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn extend(&mut self, other: &PromptTemplateSet) {
        self.templates.extend(other.templates.iter().cloned());
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

pub fn default_templates() -> PromptTemplateSet {
    PromptTemplateSet {
        templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBatch {
    pub prompts: Vec<String>,
    pub source: Vec<String>,
}

impl PromptBatch {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Appends each text to each template, template-major.
pub fn expand_prompt(texts: &[String], tset: &PromptTemplateSet) -> Result<PromptBatch> {
    if texts.is_empty() {
        return Err(Error::invalid("at least one target text is required"));
    }
    let source: Vec<String> = texts.iter().map(|t| t.trim().to_string()).collect();
    if source.iter().any(String::is_empty) {
        return Err(Error::invalid("target texts must not be empty"));
    }
    let prompts = tset
        .templates
        .iter()
        .flat_map(|p| source.iter().map(move |t| format!("{p} {t}")))
        .collect();
    Ok(PromptBatch { prompts, source })
}
