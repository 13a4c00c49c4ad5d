//! Prompt templates for background extraction, decomposition, and execution.
//!
//! Templates use brace placeholders: `{user_input}`, `{context}`, `{instruction}`.
//! `{{` and `}}` render as single braces; any other brace text is left as is, so
//! LaTeX such as `\frac{1}{2}` passes through untouched.

use std::path::Path;

pub const DECOMPOSITION_TEMPLATE: &str = include_str!("../templates/decomposition.txt");
pub const EXECUTION_TEMPLATE: &str = include_str!("../templates/execution.txt");
pub const BACKGROUND_TEMPLATE: &str = include_str!("../templates/background.txt");

const PLACEHOLDERS: [&str; 3] = ["user_input", "context", "instruction"];

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    pub decomposition: String,
    pub execution: String,
    pub background: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            decomposition: DECOMPOSITION_TEMPLATE.to_string(),
            execution: EXECUTION_TEMPLATE.to_string(),
            background: BACKGROUND_TEMPLATE.to_string(),
        }
    }
}

impl PromptTemplates {
    /// Shipped templates, with any provided path overriding its counterpart.
    pub fn load(
        decomposition: Option<&Path>,
        execution: Option<&Path>,
        background: Option<&Path>,
    ) -> std::io::Result<Self> {
        let mut t = Self::default();
        if let Some(p) = decomposition {
            t.decomposition = std::fs::read_to_string(p)?;
        }
        if let Some(p) = execution {
            t.execution = std::fs::read_to_string(p)?;
        }
        if let Some(p) = background {
            t.background = std::fs::read_to_string(p)?;
        }
        Ok(t)
    }

    pub fn decomposition_prompt(&self, user_input: &str) -> String {
        render(&self.decomposition, &[("user_input", user_input)])
    }

    pub fn background_prompt(&self, user_input: &str) -> String {
        render(&self.background, &[("user_input", user_input)])
    }

    pub fn execution_prompt(&self, context: &str, instruction: &str) -> String {
        render(
            &self.execution,
            &[("context", context), ("instruction", instruction)],
        )
    }
}

/// Single-pass substitution; substituted values are never rescanned.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(i) = rest.find(['{', '}']) {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        if tail.starts_with("{{") {
            out.push('{');
            rest = &tail[2..];
        } else if tail.starts_with("}}") {
            out.push('}');
            rest = &tail[2..];
        } else if tail.starts_with('{') {
            let name = tail[1..].find('}').map(|end| &tail[1..1 + end]);
            match name.filter(|n| PLACEHOLDERS.contains(n)) {
                Some(n) => {
                    let value = values.iter().find(|(k, _)| *k == n).map_or("", |(_, v)| v);
                    out.push_str(value);
                    rest = &tail[n.len() + 2..];
                }
                None => {
                    out.push('{');
                    rest = &tail[1..];
                }
            }
        } else {
            out.push('}');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}
