//! Runtime message descriptors parsed from a flat proto3 subset.
//!
//! Only what tabular rows need is accepted: top-level messages whose fields
//! are one of six scalar kinds, optionally `repeated`. Anything else in the
//! protobuf language is rejected with [`SchemaError::UnsupportedFeature`]
//! rather than ignored.

use std::collections::HashSet;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Largest field number protobuf allows (2^29 - 1).
pub const MAX_TAG: u64 = 536_870_911;
/// Field numbers reserved for the protobuf implementation.
pub const RESERVED_TAGS: std::ops::RangeInclusive<u64> = 19_000..=19_999;

/// Line and column (both 1-based) in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub line: usize,
    pub column: usize,
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("syntax error at {position}: {message}")]
    SyntaxError { position: Position, message: String },
    #[error("unsupported feature at {position}: {feature}")]
    UnsupportedFeature { position: Position, feature: String },
    #[error("duplicate field number {tag} in message {message}")]
    DuplicateTag { message: String, tag: u32 },
    #[error("duplicate name {name:?}{}", in_message(.message))]
    DuplicateName { message: Option<String>, name: String },
    #[error("invalid field number {tag} for field {field:?} at {position}")]
    InvalidTag { position: Position, field: String, tag: String },
    #[error("message {name:?} not found (available: {})", .available.join(", "))]
    MessageNotFound { name: String, available: Vec<String> },
}

fn in_message(message: &Option<String>) -> String {
    match message {
        Some(m) => format!(" in message {m}"),
        None => String::new(),
    }
}

/// Scalar kinds a field may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldKind {
    Double,
    Float,
    Int32,
    Int64,
    Bool,
    String,
}

impl FieldKind {
    pub fn from_keyword(word: &str) -> Option<FieldKind> {
        Some(match word {
            "double" => FieldKind::Double,
            "float" => FieldKind::Float,
            "int32" => FieldKind::Int32,
            "int64" => FieldKind::Int64,
            "bool" => FieldKind::Bool,
            "string" => FieldKind::String,
            _ => return None,
        })
    }

    pub fn keyword(self) -> &'static str {
        match self {
            FieldKind::Double => "double",
            FieldKind::Float => "float",
            FieldKind::Int32 => "int32",
            FieldKind::Int64 => "int64",
            FieldKind::Bool => "bool",
            FieldKind::String => "string",
        }
    }

    /// True for kinds a predictor can consume as a feature.
    pub fn is_numeric(self) -> bool {
        matches!(
            self,
            FieldKind::Double | FieldKind::Float | FieldKind::Int32 | FieldKind::Int64
        )
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDescriptor {
    pub name: String,
    pub tag: u32,
    pub kind: FieldKind,
    pub repeated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageDescriptor {
    name: String,
    fields: Vec<FieldDescriptor>,
}

impl MessageDescriptor {
    /// Builds a descriptor, enforcing unique names and valid, unique tags.
    pub fn new(name: impl Into<String>, fields: Vec<FieldDescriptor>) -> Result<Self, SchemaError> {
        let name = name.into();
        let mut names = HashSet::new();
        let mut tags = HashSet::new();
        for field in &fields {
            if !valid_tag(u64::from(field.tag)) {
                return Err(SchemaError::InvalidTag {
                    position: Position { line: 0, column: 0 },
                    field: field.name.clone(),
                    tag: field.tag.to_string(),
                });
            }
            if !names.insert(field.name.as_str()) {
                return Err(SchemaError::DuplicateName {
                    message: Some(name),
                    name: field.name.clone(),
                });
            }
            if !tags.insert(field.tag) {
                return Err(SchemaError::DuplicateTag { message: name, tag: field.tag });
            }
        }
        Ok(MessageDescriptor { name, fields })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Fields in declaration order.
    pub fn fields(&self) -> &[FieldDescriptor] {
        &self.fields
    }

    /// Fields sorted by ascending tag, the canonical order on the wire and in tables.
    pub fn fields_by_tag(&self) -> Vec<&FieldDescriptor> {
        let mut fields: Vec<_> = self.fields.iter().collect();
        fields.sort_by_key(|f| f.tag);
        fields
    }

    pub fn field(&self, name: &str) -> Option<&FieldDescriptor> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn field_by_tag(&self, tag: u32) -> Option<&FieldDescriptor> {
        self.fields.iter().find(|f| f.tag == tag)
    }
}

pub fn valid_tag(tag: u64) -> bool {
    (1..=MAX_TAG).contains(&tag) && !RESERVED_TAGS.contains(&tag)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    messages: Vec<MessageDescriptor>,
    source_hash: String,
}

impl Schema {
    /// Assembles a schema from descriptors; `source_hash` is computed over
    /// the canonical printed form.
    pub fn from_messages(messages: Vec<MessageDescriptor>) -> Result<Self, SchemaError> {
        check_messages(&messages, Position { line: 1, column: 1 })?;
        let mut schema = Schema { messages, source_hash: String::new() };
        schema.source_hash = content_hash(print_schema(&schema).as_bytes());
        Ok(schema)
    }

    /// Always `"proto3"`; other syntaxes are rejected at parse time.
    pub fn syntax(&self) -> &'static str {
        "proto3"
    }

    pub fn messages(&self) -> &[MessageDescriptor] {
        &self.messages
    }

    /// Hex SHA-256 of the source bytes this schema was parsed from.
    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn message_names(&self) -> Vec<String> {
        self.messages.iter().map(|m| m.name.clone()).collect()
    }

    pub fn find_message(&self, name: &str) -> Result<&MessageDescriptor, SchemaError> {
        find_message(self, name)
    }

    /// Structural equality, ignoring `source_hash`.
    pub fn same_structure(&self, other: &Schema) -> bool {
        self.messages == other.messages
    }
}

fn check_messages(messages: &[MessageDescriptor], end: Position) -> Result<(), SchemaError> {
    if messages.is_empty() {
        return Err(SchemaError::SyntaxError {
            position: end,
            message: "schema declares no message".into(),
        });
    }
    let mut seen = HashSet::new();
    for m in messages {
        if !seen.insert(m.name.as_str()) {
            return Err(SchemaError::DuplicateName { message: None, name: m.name.clone() });
        }
    }
    Ok(())
}

/// Hex SHA-256 digest.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn find_message<'a>(schema: &'a Schema, name: &str) -> Result<&'a MessageDescriptor, SchemaError> {
    schema
        .messages
        .iter()
        .find(|m| m.name == name)
        .ok_or_else(|| SchemaError::MessageNotFound {
            name: name.to_string(),
            available: schema.message_names(),
        })
}

/// Canonical text form. Parsing the output yields a structurally equal schema.
pub fn print_schema(schema: &Schema) -> String {
    let mut out = String::from("syntax = \"proto3\";\n");
    for message in &schema.messages {
        out.push('\n');
        out.push_str(&format!("message {} {{\n", message.name));
        for field in &message.fields {
            let label = if field.repeated { "repeated " } else { "" };
            out.push_str(&format!("  {label}{} {} = {};\n", field.kind, field.name, field.tag));
        }
        out.push_str("}\n");
    }
    out
}

pub fn parse_schema(source: &str) -> Result<Schema, SchemaError> {
    let tokens = tokenize(source)?;
    let mut parser = Parser { tokens, pos: 0 };
    let messages = parser.file()?;
    check_messages(&messages, parser.end_position())?;
    Ok(Schema { messages, source_hash: content_hash(source.as_bytes()) })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(String),
    Str(String),
    Sym(char),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    pos: Position,
}

fn tokenize(source: &str) -> Result<Vec<Token>, SchemaError> {
    let chars: Vec<char> = source.chars().collect();
    let mut tokens = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);

    macro_rules! advance {
        () => {{
            if chars[i] == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            i += 1;
        }};
    }

    while i < chars.len() {
        let c = chars[i];
        let pos = Position { line, column: col };
        if c.is_whitespace() {
            advance!();
        } else if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                advance!();
            }
        } else if c == '/' && chars.get(i + 1) == Some(&'*') {
            advance!();
            advance!();
            loop {
                if i >= chars.len() {
                    return Err(SchemaError::SyntaxError {
                        position: pos,
                        message: "unterminated block comment".into(),
                    });
                }
                if chars[i] == '*' && chars.get(i + 1) == Some(&'/') {
                    advance!();
                    advance!();
                    break;
                }
                advance!();
            }
        } else if c.is_ascii_alphabetic() || c == '_' {
            let mut word = String::new();
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                word.push(chars[i]);
                advance!();
            }
            tokens.push(Token { tok: Tok::Ident(word), pos });
        } else if c.is_ascii_digit() {
            let mut digits = String::new();
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                digits.push(chars[i]);
                advance!();
            }
            tokens.push(Token { tok: Tok::Int(digits), pos });
        } else if c == '"' || c == '\'' {
            let quote = c;
            advance!();
            let mut text = String::new();
            loop {
                if i >= chars.len() || chars[i] == '\n' {
                    return Err(SchemaError::SyntaxError {
                        position: pos,
                        message: "unterminated string literal".into(),
                    });
                }
                if chars[i] == quote {
                    advance!();
                    break;
                }
                if chars[i] == '\\' {
                    advance!();
                    if i >= chars.len() {
                        continue;
                    }
                }
                text.push(chars[i]);
                advance!();
            }
            tokens.push(Token { tok: Tok::Str(text), pos });
        } else if "{}[]()<>;=,.-+".contains(c) {
            tokens.push(Token { tok: Tok::Sym(c), pos });
            advance!();
        } else {
            return Err(SchemaError::SyntaxError {
                position: pos,
                message: format!("unexpected character {c:?}"),
            });
        }
    }
    tokens.push(Token { tok: Tok::Eof, pos: Position { line, column: col } });
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn end_position(&self) -> Position {
        self.tokens.last().map(|t| t.pos).unwrap_or(Position { line: 1, column: 1 })
    }

    fn syntax<T>(&self, at: Position, message: impl Into<String>) -> Result<T, SchemaError> {
        Err(SchemaError::SyntaxError { position: at, message: message.into() })
    }

    fn unsupported<T>(&self, at: Position, feature: impl Into<String>) -> Result<T, SchemaError> {
        Err(SchemaError::UnsupportedFeature { position: at, feature: feature.into() })
    }

    fn expect_sym(&mut self, sym: char) -> Result<Position, SchemaError> {
        let t = self.next();
        match t.tok {
            Tok::Sym(c) if c == sym => Ok(t.pos),
            other => self.syntax(t.pos, format!("expected '{sym}', found {}", describe(&other))),
        }
    }

    fn expect_ident(&mut self, what: &str) -> Result<(String, Position), SchemaError> {
        let t = self.next();
        match t.tok {
            Tok::Ident(name) => Ok((name, t.pos)),
            other => self.syntax(t.pos, format!("expected {what}, found {}", describe(&other))),
        }
    }

    fn file(&mut self) -> Result<Vec<MessageDescriptor>, SchemaError> {
        let mut messages = Vec::new();
        let mut first = true;
        loop {
            let t = self.peek().clone();
            match &t.tok {
                Tok::Eof => break,
                Tok::Sym(';') => {
                    self.next();
                }
                Tok::Ident(word) => match word.as_str() {
                    "syntax" if first => self.syntax_decl()?,
                    "syntax" => return self.syntax(t.pos, "syntax declaration must come first"),
                    "message" => messages.push(self.message()?),
                    "import" | "package" | "option" | "enum" | "service" | "extend" => {
                        return self.unsupported(t.pos, format!("top-level `{word}`"))
                    }
                    _ => return self.syntax(t.pos, format!("unexpected identifier {word:?}")),
                },
                other => return self.syntax(t.pos, format!("unexpected {}", describe(other))),
            }
            first = false;
        }
        Ok(messages)
    }

    fn syntax_decl(&mut self) -> Result<(), SchemaError> {
        self.next();
        self.expect_sym('=')?;
        let t = self.next();
        match t.tok {
            Tok::Str(s) if s == "proto3" => {}
            Tok::Str(s) => return self.unsupported(t.pos, format!("syntax {s:?} (only proto3)")),
            other => return self.syntax(t.pos, format!("expected syntax string, found {}", describe(&other))),
        }
        self.expect_sym(';')?;
        Ok(())
    }

    fn message(&mut self) -> Result<MessageDescriptor, SchemaError> {
        self.next();
        let (name, _) = self.expect_ident("message name")?;
        self.expect_sym('{')?;
        let mut fields: Vec<(FieldDescriptor, Position)> = Vec::new();
        loop {
            let t = self.peek().clone();
            match &t.tok {
                Tok::Sym('}') => {
                    self.next();
                    break;
                }
                Tok::Sym(';') => {
                    self.next();
                }
                Tok::Eof => return self.syntax(t.pos, format!("unterminated message {name}")),
                Tok::Ident(_) => fields.push(self.field()?),
                other => return self.syntax(t.pos, format!("unexpected {} in message body", describe(other))),
            }
        }
        let mut names = HashSet::new();
        let mut tags = HashSet::new();
        for (field, _) in &fields {
            if !names.insert(field.name.clone()) {
                return Err(SchemaError::DuplicateName {
                    message: Some(name),
                    name: field.name.clone(),
                });
            }
            if !tags.insert(field.tag) {
                return Err(SchemaError::DuplicateTag { message: name, tag: field.tag });
            }
        }
        Ok(MessageDescriptor { name, fields: fields.into_iter().map(|(f, _)| f).collect() })
    }

    fn field(&mut self) -> Result<(FieldDescriptor, Position), SchemaError> {
        let (mut word, mut at) = self.expect_ident("field type")?;
        let mut repeated = false;
        match word.as_str() {
            "repeated" => {
                repeated = true;
                (word, at) = self.expect_ident("field type")?;
            }
            "optional" => return self.unsupported(at, "`optional` label"),
            "required" => return self.unsupported(at, "`required` label (proto2)"),
            "message" => return self.unsupported(at, "nested message"),
            "enum" => return self.unsupported(at, "enum"),
            "oneof" => return self.unsupported(at, "oneof"),
            "map" => return self.unsupported(at, "map field"),
            "reserved" | "extensions" | "option" | "extend" | "group" => {
                return self.unsupported(at, format!("`{word}` statement"))
            }
            _ => {}
        }
        let kind = match FieldKind::from_keyword(&word) {
            Some(kind) => kind,
            None if word == "map" => return self.unsupported(at, "map field"),
            None if is_other_scalar(&word) => return self.unsupported(at, format!("scalar type {word}")),
            None => return self.unsupported(at, format!("message-typed field {word}")),
        };
        let (name, name_at) = self.expect_ident("field name")?;
        self.expect_sym('=')?;
        let t = self.next();
        let tag = match &t.tok {
            Tok::Int(digits) => match digits.parse::<u64>() {
                Ok(n) if valid_tag(n) => n as u32,
                _ => {
                    return Err(SchemaError::InvalidTag {
                        position: t.pos,
                        field: name,
                        tag: digits.clone(),
                    })
                }
            },
            Tok::Sym('-') => {
                let digits = match self.next().tok {
                    Tok::Int(d) => d,
                    other => return self.syntax(t.pos, format!("expected field number, found {}", describe(&other))),
                };
                return Err(SchemaError::InvalidTag { position: t.pos, field: name, tag: format!("-{digits}") });
            }
            other => return self.syntax(t.pos, format!("expected field number, found {}", describe(other))),
        };
        let t = self.peek().clone();
        if t.tok == Tok::Sym('[') {
            return self.unsupported(t.pos, "field options");
        }
        self.expect_sym(';')?;
        Ok((FieldDescriptor { name, tag, kind, repeated }, name_at))
    }
}

fn is_other_scalar(word: &str) -> bool {
    matches!(
        word,
        "uint32" | "uint64" | "sint32" | "sint64" | "fixed32" | "fixed64" | "sfixed32" | "sfixed64" | "bytes"
    )
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Ident(s) => format!("identifier {s:?}"),
        Tok::Int(s) => format!("number {s}"),
        Tok::Str(s) => format!("string {s:?}"),
        Tok::Sym(c) => format!("'{c}'"),
        Tok::Eof => "end of input".into(),
    }
}
