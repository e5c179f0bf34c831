use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EvalError;
use crate::corpus::Example;

const INPUT: &str = "{input}";
const OUTPUT: &str = "{output}";

fn default_stop() -> Vec<String> {
    vec!["\n".to_string()]
}

fn default_max_tokens() -> usize {
    64
}

/// How demonstrations and the query are rendered for one task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task: String,
    pub demo_format: String,
    pub query_format: String,
    pub separator: String,
    #[serde(default = "default_stop")]
    pub stop: Vec<String>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
}

impl PromptTemplate {
    /// `Question: <q>` / `Answer: <a>` layout used for open-domain QA.
    pub fn question_answer(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            demo_format: "Question: {input}\nAnswer: {output}".into(),
            query_format: "Question: {input}\nAnswer:".into(),
            separator: "\n\n".into(),
            stop: default_stop(),
            max_tokens: default_max_tokens(),
        }
    }

    /// Reading-comprehension layout. The example input carries both the
    /// `Support:` passage and the `Question:` line.
    pub fn support_question_answer(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            demo_format: "{input}\nAnswer: {output}".into(),
            query_format: "{input}\nAnswer:".into(),
            separator: "\n\n".into(),
            stop: default_stop(),
            max_tokens: default_max_tokens(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let t: Self = serde_json::from_str(text).map_err(|e| EvalError::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let count = |s: &str, p: &str| s.matches(p).count();
        if count(&self.demo_format, INPUT) != 1 || count(&self.demo_format, OUTPUT) != 1 {
            return Err(EvalError::Template("demo_format needs {input} and {output} exactly once each".into()));
        }
        if count(&self.query_format, INPUT) != 1 || count(&self.query_format, OUTPUT) != 0 {
            return Err(EvalError::Template("query_format needs {input} exactly once and no {output}".into()));
        }
        Ok(())
    }

    /// A demonstration: the input/output pair as the model sees it.
    pub fn render_demo(&self, input: &str, output: &str) -> String {
        render(&self.demo_format, input, Some(output))
    }

    pub fn render_query(&self, input: &str) -> String {
        render(&self.query_format, input, None)
    }

    /// Character offset at which the output starts inside
    /// `render_demo(input, _)`, when `{output}` comes after `{input}`.
    pub fn output_char_offset(&self, input: &str) -> Option<usize> {
        let out_at = self.demo_format.find(OUTPUT)?;
        let in_at = self.demo_format.find(INPUT)?;
        if in_at > out_at {
            return None;
        }
        let prefix = &self.demo_format[..out_at];
        Some(prefix.chars().count() - INPUT.chars().count() + input.chars().count())
    }

    /// Short stable digest, used in backend tags.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.demo_format, &self.query_format, &self.separator] {
            h.update(part.as_bytes());
            h.update([0x1f]);
        }
        hex::encode(&h.finalize()[..6])
    }
}

/// Single left-to-right pass so placeholder text inside values is left alone.
fn render(format: &str, input: &str, output: Option<&str>) -> String {
    let mut out = String::with_capacity(format.len() + input.len() + output.map_or(0, str::len));
    let mut rest = format;
    while !rest.is_empty() {
        if let Some(tail) = rest.strip_prefix(INPUT) {
            out.push_str(input);
            rest = tail;
        } else if let (Some(tail), Some(o)) = (rest.strip_prefix(OUTPUT), output) {
            out.push_str(o);
            rest = tail;
        } else {
            let ch = rest.chars().next().expect("non-empty");
            out.push(ch);
            rest = &rest[ch.len_utf8()..];
        }
    }
    out
}

/// Renders the demonstrations in order, then the query, joined by the
/// template separator.
pub fn assemble_prompt(demos: &[&Example], test_input: &Example, template: &PromptTemplate) -> String {
    let mut parts: Vec<String> = demos.iter().map(|d| template.render_demo(&d.input_text, &d.output_text)).collect();
    parts.push(template.render_query(&test_input.input_text));
    parts.join(&template.separator)
}
