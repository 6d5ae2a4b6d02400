use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Timestamp;

/// Per-recipient variable bindings, keyed by placeholder name.
pub type Variables = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("no value bound for placeholder {{{{{0}}}}}")]
    MissingVariable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub template_id: String,
    pub subject_part: String,
    pub html_part: String,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rendered {
    pub subject: String,
    pub body: String,
}

impl Rendered {
    /// Bytes counted against the payload limit: subject plus body.
    pub fn size_bytes(&self) -> usize {
        self.subject.len() + self.body.len()
    }
}

pub fn is_placeholder_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// Substitutes every `{{name}}` placeholder in `text`. Braces that do not
/// enclose a valid name are copied through untouched, and substituted values
/// are not rescanned.
pub fn render_str(text: &str, vars: &Variables) -> Result<String, RenderError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) if is_placeholder_name(&after[..close]) => {
                let name = &after[..close];
                let value = vars.get(name).ok_or_else(|| RenderError::MissingVariable(name.to_owned()))?;
                out.push_str(&rest[..open]);
                out.push_str(value);
                rest = &after[close + 2..];
            }
            _ => {
                out.push_str(&rest[..open + 1]);
                rest = &rest[open + 1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Placeholder names referenced by `text`, in order of first appearance.
pub fn placeholders(text: &str) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) if is_placeholder_name(&after[..close]) => {
                let name = &after[..close];
                if !names.iter().any(|n| n == name) {
                    names.push(name.to_owned());
                }
                rest = &after[close + 2..];
            }
            _ => rest = &rest[open + 1..],
        }
    }
    names
}

pub fn render_template(t: &Template, vars: &Variables) -> Result<Rendered, RenderError> {
    Ok(Rendered { subject: render_str(&t.subject_part, vars)?, body: render_str(&t.html_part, vars)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, &str)]) -> Variables {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn single_substitution() {
        assert_eq!(render_str("Hello {{name}}", &vars(&[("name", "Ada")])).unwrap(), "Hello Ada");
    }

    #[test]
    fn no_placeholders() {
        assert_eq!(render_str("Hi", &Variables::new()).unwrap(), "Hi");
    }

    #[test]
    fn missing_variable() {
        assert_eq!(render_str("Hi {{x}}", &Variables::new()), Err(RenderError::MissingVariable("x".into())));
    }

    #[test]
    fn non_placeholder_braces_pass_through() {
        let v = vars(&[("a", "1")]);
        assert_eq!(render_str("{{ a }} {{a-b}} {{a}} {{", &v).unwrap(), "{{ a }} {{a-b}} 1 {{");
        assert_eq!(render_str("{{{a}}}", &v).unwrap(), "{1}");
    }

    #[test]
    fn values_are_not_rescanned() {
        let v = vars(&[("a", "{{b}}")]);
        assert_eq!(render_str("{{a}}", &v).unwrap(), "{{b}}");
    }

    #[test]
    fn template_renders_both_parts() {
        let t = Template {
            template_id: "t".into(),
            subject_part: "Hi {{name}}".into(),
            html_part: "<p>{{name}} owes {{amount}}</p>".into(),
            created_at: Timestamp::EPOCH,
        };
        let r = render_template(&t, &vars(&[("name", "Ada"), ("amount", "3")])).unwrap();
        assert_eq!(r.subject, "Hi Ada");
        assert_eq!(r.body, "<p>Ada owes 3</p>");
        assert_eq!(r.size_bytes(), 6 + 17);
        assert_eq!(placeholders(&t.html_part), vec!["name", "amount"]);
    }
}
