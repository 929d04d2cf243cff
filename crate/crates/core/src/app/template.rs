//! Command templates for shell apps.
//!
//! Placeholders: `{0}` positional, `{name}` keyword, `{name[i]}` element `i`
//! of a list (`inputs`, `outputs`, or a list-valued keyword). `{{` and `}}`
//! are literal braces. Substitution is textual; nothing is shell-escaped.

use std::collections::BTreeMap;
use std::fmt;

use crate::staging::FileRef;
use crate::task::ArgValue;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("malformed placeholder at byte {pos}: {reason}")]
    Malformed { pos: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RenderError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("placeholder {{{0}}} is not bound")]
    Unbound(String),
    #[error("placeholder {{{name}[{index}]}} out of range (length {len})")]
    IndexOutOfRange { name: String, index: usize, len: usize },
    #[error("placeholder {{{0}}} refers to a file that has not been staged")]
    NotStaged(String),
    #[error("placeholder {{{name}}} has a {kind} value, which cannot be rendered")]
    Unrenderable { name: String, kind: &'static str },
    #[error("command is empty after rendering")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Placeholder {
    Positional(usize),
    Keyword(String),
    Indexed(String, usize),
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placeholder::Positional(i) => write!(f, "{i}"),
            Placeholder::Keyword(k) => f.write_str(k),
            Placeholder::Indexed(k, i) => write!(f, "{k}[{i}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Field(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandTemplate {
    source: String,
    segments: Vec<Segment>,
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_field(body: &str, pos: usize) -> Result<Placeholder, TemplateError> {
    let malformed = |reason: &str| TemplateError::Malformed {
        pos,
        reason: reason.to_string(),
    };
    if body.is_empty() {
        return Err(malformed("empty placeholder"));
    }
    if body.bytes().all(|b| b.is_ascii_digit()) {
        return body
            .parse()
            .map(Placeholder::Positional)
            .map_err(|_| malformed("positional index too large"));
    }
    if let Some(open) = body.find('[') {
        let name = &body[..open];
        let rest = &body[open + 1..];
        let index = rest
            .strip_suffix(']')
            .ok_or_else(|| malformed("index must end with ']'"))?;
        if !is_ident(name) {
            return Err(malformed("invalid name before index"));
        }
        if index.is_empty() || !index.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed("index must be a non-negative integer"));
        }
        let index = index.parse().map_err(|_| malformed("index too large"))?;
        return Ok(Placeholder::Indexed(name.to_string(), index));
    }
    if is_ident(body) {
        Ok(Placeholder::Keyword(body.to_string()))
    } else {
        Err(malformed("expected a position, a name, or name[index]"))
    }
}

impl CommandTemplate {
    pub fn parse(source: &str) -> Result<Self, TemplateError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let bytes = source.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'{' if bytes.get(i + 1) == Some(&b'{') => {
                    literal.push('{');
                    i += 2;
                }
                b'}' if bytes.get(i + 1) == Some(&b'}') => {
                    literal.push('}');
                    i += 2;
                }
                b'{' => {
                    let close = source[i + 1..].find(['}', '{']).map(|o| i + 1 + o);
                    match close {
                        Some(c) if bytes[c] == b'}' => {
                            let field = parse_field(&source[i + 1..c], i)?;
                            if !literal.is_empty() {
                                segments.push(Segment::Literal(std::mem::take(&mut literal)));
                            }
                            segments.push(Segment::Field(field));
                            i = c + 1;
                        }
                        _ => {
                            return Err(TemplateError::Malformed {
                                pos: i,
                                reason: "unbalanced '{'".into(),
                            })
                        }
                    }
                }
                b'}' => {
                    return Err(TemplateError::Malformed {
                        pos: i,
                        reason: "unbalanced '}'".into(),
                    })
                }
                _ => {
                    // Copy the whole UTF-8 character.
                    let ch = source[i..].chars().next().unwrap();
                    literal.push(ch);
                    i += ch.len_utf8();
                }
            }
        }
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self {
            source: source.to_string(),
            segments,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn render(
        &self,
        args: &[ArgValue],
        kwargs: &BTreeMap<String, ArgValue>,
        inputs: &[FileRef],
        outputs: &[FileRef],
    ) -> Result<String, RenderError> {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Field(p) => {
                    let name = p.to_string();
                    let text = match p {
                        Placeholder::Positional(i) => {
                            let v = args.get(*i).ok_or_else(|| RenderError::Unbound(name.clone()))?;
                            render_value(v, &name)?
                        }
                        Placeholder::Keyword(k) => match k.as_str() {
                            "inputs" if !kwargs.contains_key(k) => render_files(inputs, &name)?,
                            "outputs" => render_files(outputs, &name)?,
                            _ => {
                                let v = kwargs.get(k).ok_or_else(|| RenderError::Unbound(name.clone()))?;
                                render_value(v, &name)?
                            }
                        },
                        Placeholder::Indexed(k, i) => {
                            let pick = |len: usize| RenderError::IndexOutOfRange {
                                name: k.clone(),
                                index: *i,
                                len,
                            };
                            match k.as_str() {
                                "inputs" if !kwargs.contains_key(k) => {
                                    let f = inputs.get(*i).ok_or_else(|| pick(inputs.len()))?;
                                    render_file(f, &name)?
                                }
                                "outputs" => {
                                    let f = outputs.get(*i).ok_or_else(|| pick(outputs.len()))?;
                                    render_file(f, &name)?
                                }
                                _ => {
                                    let v = kwargs.get(k).ok_or_else(|| RenderError::Unbound(name.clone()))?;
                                    let items = v.as_list().ok_or_else(|| RenderError::Unrenderable {
                                        name: name.clone(),
                                        kind: v.type_name(),
                                    })?;
                                    let item = items.get(*i).ok_or_else(|| pick(items.len()))?;
                                    render_value(item, &name)?
                                }
                            }
                        }
                    };
                    out.push_str(&text);
                }
            }
        }
        if out.trim().is_empty() {
            return Err(RenderError::Empty);
        }
        Ok(out)
    }
}

fn render_file(f: &FileRef, name: &str) -> Result<String, RenderError> {
    f.filepath()
        .map(|p| p.to_string_lossy().into_owned())
        .map_err(|_| RenderError::NotStaged(name.to_string()))
}

fn render_files(files: &[FileRef], name: &str) -> Result<String, RenderError> {
    let parts: Result<Vec<_>, _> = files.iter().map(|f| render_file(f, name)).collect();
    Ok(parts?.join(" "))
}

fn render_value(v: &ArgValue, name: &str) -> Result<String, RenderError> {
    Ok(match v {
        ArgValue::Null => String::new(),
        ArgValue::Int(i) => i.to_string(),
        ArgValue::Real(r) => r.to_string(),
        ArgValue::Bool(b) => b.to_string(),
        ArgValue::Text(s) => s.clone(),
        ArgValue::Bytes(b) => String::from_utf8_lossy(b).into_owned(),
        ArgValue::File(f) => render_file(f, name)?,
        ArgValue::List(items) => {
            let parts: Result<Vec<_>, _> = items.iter().map(|x| render_value(x, name)).collect();
            parts?.join(" ")
        }
        other => {
            return Err(RenderError::Unrenderable {
                name: name.to_string(),
                kind: other.type_name(),
            })
        }
    })
}
