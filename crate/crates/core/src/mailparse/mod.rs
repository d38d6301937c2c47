//! RFC822/MIME parsing, render-part selection, banner removal and rewriting.
//!
//! The parser is tolerant: anything short of a missing header/body separator
//! produces a record. Every part remembers the byte spans it came from so that
//! [`rewrite_email`] can replace one body while leaving the rest of the message
//! byte-for-byte intact.

mod banner;
mod mbox;
mod rewrite;
pub mod transfer;

use std::ops::Range;

use thiserror::Error;

pub use banner::{strip_banners, BannerPatternSet, BannerRule, RuleKind};
pub use mbox::split_mbox;
pub use rewrite::rewrite_email;
pub use transfer::TransferEncoding;

use crate::codec::sha256_hex;

/// Nesting limit for multipart containers; deeper parts are kept as leaves.
const MAX_DEPTH: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MailError {
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("no text/html or text/plain part to render")]
    NoRenderablePart,
}

impl MailError {
    pub fn kind(&self) -> &'static str {
        match self {
            MailError::MalformedMessage(_) => "MalformedMessage",
            MailError::NoRenderablePart => "NoRenderablePart",
        }
    }
}

/// Non-fatal findings recorded while parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseWarning {
    /// The part at `path` (child indices from the root) uses a transfer
    /// encoding we cannot decode; its body holds the raw bytes.
    UnsupportedEncoding { path: Vec<usize>, encoding: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub name: String,
    /// Unfolded value with surrounding whitespace trimmed.
    pub value: String,
    /// Byte range of the full header field (including folded lines and EOL).
    pub(crate) span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContentType {
    /// Lowercase `type/subtype`.
    pub mime_type: String,
    /// Parameters in order of appearance; names lowercased.
    pub params: Vec<(String, String)>,
}

impl ContentType {
    pub fn text_plain() -> Self {
        Self {
            mime_type: "text/plain".into(),
            params: Vec::new(),
        }
    }

    pub fn parse(value: &str) -> Self {
        let mut pieces = split_params(value).into_iter();
        let head = pieces.next().unwrap_or_default();
        let mime_type = head.trim().to_ascii_lowercase();
        let mime_type = if mime_type.contains('/') && !mime_type.contains(char::is_whitespace) {
            mime_type
        } else {
            "text/plain".into()
        };
        let params = pieces
            .filter_map(|p| {
                let (k, v) = p.split_once('=')?;
                let k = k.trim().to_ascii_lowercase();
                if k.is_empty() {
                    return None;
                }
                Some((k, unquote(v.trim())))
            })
            .collect();
        Self { mime_type, params }
    }

    pub fn param(&self, name: &str) -> Option<&str> {
        self.params
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn is_multipart(&self) -> bool {
        self.mime_type.starts_with("multipart/")
    }

    pub(crate) fn to_header_value(&self) -> String {
        let mut s = self.mime_type.clone();
        for (k, v) in &self.params {
            s.push_str("; ");
            s.push_str(k);
            s.push('=');
            if v.is_empty() || v.contains(|c: char| !(c.is_ascii_alphanumeric() || "-_.+".contains(c))) {
                s.push('"');
                s.push_str(&v.replace('\\', "\\\\").replace('"', "\\\""));
                s.push('"');
            } else {
                s.push_str(v);
            }
        }
        s
    }
}

/// Splits on `;` outside double quotes.
fn split_params(value: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_quotes = false;
    let mut escaped = false;
    for c in value.chars() {
        if escaped {
            cur.push(c);
            escaped = false;
            continue;
        }
        match c {
            '\\' if in_quotes => {
                cur.push(c);
                escaped = true;
            }
            '"' => {
                in_quotes = !in_quotes;
                cur.push(c);
            }
            ';' if !in_quotes => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

fn unquote(v: &str) -> String {
    let Some(inner) = v.strip_prefix('"') else {
        return v.to_string();
    };
    let inner = inner.strip_suffix('"').unwrap_or(inner);
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// One node of the MIME tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MimePart {
    pub headers: Vec<Header>,
    pub content_type: ContentType,
    pub transfer_encoding: TransferEncoding,
    /// Decoded body for leaves; empty for multipart containers.
    pub body: Vec<u8>,
    pub children: Vec<MimePart>,
    pub(crate) header_span: Range<usize>,
    pub(crate) body_span: Range<usize>,
}

impl MimePart {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn charset(&self) -> Option<&str> {
        self.content_type.param("charset")
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    /// Leaves in document order.
    pub fn leaves(&self) -> Vec<&MimePart> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a MimePart>) {
        if self.is_leaf() {
            out.push(self);
        } else {
            for c in &self.children {
                c.collect_leaves(out);
            }
        }
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(MimePart::depth).max().unwrap_or(0)
    }

    /// Raw bytes of this part's body as they appear in the message.
    pub fn raw_body<'a>(&self, raw: &'a [u8]) -> &'a [u8] {
        &raw[self.body_span.clone()]
    }
}

fn find_header<'a>(headers: &'a [Header], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|h| h.name.eq_ignore_ascii_case(name))
        .map(|h| h.value.as_str())
}

/// A parsed email.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmailRecord {
    /// Lowercase hex SHA-256 of the raw bytes.
    pub id: String,
    /// Seconds since the Unix epoch.
    pub received_at: i64,
    pub source: String,
    pub headers: Vec<Header>,
    pub root: MimePart,
    pub warnings: Vec<ParseWarning>,
    raw: Vec<u8>,
}

impl EmailRecord {
    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn leaves(&self) -> Vec<&MimePart> {
        self.root.leaves()
    }
}

/// Deterministic content-addressed id of a raw message.
pub fn email_id(raw: &[u8]) -> String {
    sha256_hex(raw)
}

/// Parses a raw RFC822/MIME message. `received_at` comes from the Date header
/// when it parses, otherwise from `fallback_time`.
pub fn parse_email(raw: &[u8], source: &str, fallback_time: i64) -> Result<EmailRecord, MailError> {
    if raw.is_empty() {
        return Err(MailError::MalformedMessage("empty input".into()));
    }
    let (headers, body_start) = split_headers(raw, 0, raw.len())
        .ok_or_else(|| MailError::MalformedMessage("no header/body separator".into()))?;
    let mut warnings = Vec::new();
    let root = build_part(raw, headers, 0..body_start, body_start..raw.len(), None, 0, &mut Vec::new(), &mut warnings);
    let received_at = find_header(&root.headers, "date")
        .and_then(parse_date)
        .unwrap_or(fallback_time);
    Ok(EmailRecord {
        id: email_id(raw),
        received_at,
        source: source.to_string(),
        headers: root.headers.clone(),
        root,
        warnings,
        raw: raw.to_vec(),
    })
}

/// RFC 2822 date, tolerating a trailing comment such as "(UTC)".
pub fn parse_date(value: &str) -> Option<i64> {
    let mut v = value.trim();
    if let Some(idx) = v.find('(') {
        v = v[..idx].trim_end();
    }
    chrono::DateTime::parse_from_rfc2822(v)
        .ok()
        .map(|d| d.timestamp())
}

/// Returns (line_end_exclusive_of_eol, next_line_start).
fn line_at(raw: &[u8], start: usize, end: usize) -> (usize, usize) {
    match raw[start..end].iter().position(|&b| b == b'\n') {
        Some(off) => {
            let nl = start + off;
            let content_end = if nl > start && raw[nl - 1] == b'\r' { nl - 1 } else { nl };
            (content_end, nl + 1)
        }
        None => (end, end),
    }
}

/// Parses the header block of `raw[start..end]`. Returns headers and the body
/// start offset, or `None` when no empty line terminates the headers.
fn split_headers(raw: &[u8], start: usize, end: usize) -> Option<(Vec<Header>, usize)> {
    let mut headers: Vec<Header> = Vec::new();
    let mut pos = start;
    while pos < end {
        let (content_end, next) = line_at(raw, pos, end);
        let terminated = next > content_end;
        if !terminated {
            // final line without EOL cannot be the separator
            return None;
        }
        if content_end == pos {
            return Some((headers, next));
        }
        push_header_line(&mut headers, raw, pos, content_end, next);
        pos = next;
    }
    None
}

fn push_header_line(headers: &mut Vec<Header>, raw: &[u8], start: usize, content_end: usize, next: usize) {
    let line = &raw[start..content_end];
    if matches!(line.first(), Some(b' ' | b'\t')) {
        if let Some(last) = headers.last_mut() {
            let cont = String::from_utf8_lossy(line);
            let cont = cont.trim();
            if !cont.is_empty() {
                if !last.value.is_empty() {
                    last.value.push(' ');
                }
                last.value.push_str(cont);
            }
            last.span.end = next;
        }
        return;
    }
    let Some(colon) = line.iter().position(|&b| b == b':') else {
        // not a header field; tolerated and ignored
        return;
    };
    let name = String::from_utf8_lossy(&line[..colon]).trim().to_string();
    if name.is_empty() {
        return;
    }
    let value = String::from_utf8_lossy(&line[colon + 1..]).trim().to_string();
    headers.push(Header {
        name,
        value,
        span: start..next,
    });
}

#[allow(clippy::too_many_arguments)]
fn build_part(
    raw: &[u8],
    headers: Vec<Header>,
    header_span: Range<usize>,
    body_span: Range<usize>,
    parent: Option<&ContentType>,
    depth: usize,
    path: &mut Vec<usize>,
    warnings: &mut Vec<ParseWarning>,
) -> MimePart {
    let content_type = match find_header(&headers, "content-type") {
        Some(v) => ContentType::parse(v),
        None if parent.is_some_and(|p| p.mime_type == "multipart/digest") => ContentType {
            mime_type: "message/rfc822".into(),
            params: Vec::new(),
        },
        None => ContentType::text_plain(),
    };
    let transfer_encoding =
        TransferEncoding::from_header(find_header(&headers, "content-transfer-encoding"));

    let boundary = content_type
        .param("boundary")
        .filter(|b| !b.is_empty())
        .map(str::to_string);
    if content_type.is_multipart() && depth < MAX_DEPTH {
        if let Some(boundary) = boundary {
            let mut children = Vec::new();
            for (i, span) in multipart_bodies(raw, body_span.clone(), boundary.as_bytes())
                .into_iter()
                .enumerate()
            {
                path.push(i);
                let (child_headers, child_body) = match split_headers(raw, span.start, span.end) {
                    Some((h, b)) => (h, b),
                    None => (Vec::new(), span.start),
                };
                children.push(build_part(
                    raw,
                    child_headers,
                    span.start..child_body,
                    child_body..span.end,
                    Some(&content_type),
                    depth + 1,
                    path,
                    warnings,
                ));
                path.pop();
            }
            if !children.is_empty() {
                return MimePart {
                    headers,
                    content_type,
                    transfer_encoding,
                    body: Vec::new(),
                    children,
                    header_span,
                    body_span,
                };
            }
        }
    }

    let encoded = &raw[body_span.clone()];
    let body = match transfer::decode_body(&transfer_encoding, encoded) {
        Some(b) => b,
        None => {
            warnings.push(ParseWarning::UnsupportedEncoding {
                path: path.clone(),
                encoding: transfer_encoding.as_str().to_string(),
            });
            encoded.to_vec()
        }
    };
    MimePart {
        headers,
        content_type,
        transfer_encoding,
        body,
        children: Vec::new(),
        header_span,
        body_span,
    }
}

/// Splits a multipart body into the byte spans of its body parts. The line
/// break before each delimiter belongs to the delimiter.
fn multipart_bodies(raw: &[u8], span: Range<usize>, boundary: &[u8]) -> Vec<Range<usize>> {
    let mut parts = Vec::new();
    let mut current: Option<usize> = None;
    let mut pos = span.start;
    while pos < span.end {
        let (content_end, next) = line_at(raw, pos, span.end);
        let line = &raw[pos..content_end];
        if let Some(rest) = line.strip_prefix(b"--").and_then(|l| l.strip_prefix(boundary)) {
            let closing = rest.starts_with(b"--");
            let tail = if closing { &rest[2..] } else { rest };
            if tail.iter().all(|b| b.is_ascii_whitespace()) {
                if let Some(start) = current.take() {
                    parts.push(start..preceding_eol(raw, start, pos));
                }
                if closing {
                    return parts;
                }
                current = Some(next);
            }
        }
        pos = next;
    }
    if let Some(start) = current {
        parts.push(start..span.end.max(start));
    }
    parts
}

/// Start of the line break that ends just before `pos`, not moving before `floor`.
fn preceding_eol(raw: &[u8], floor: usize, pos: usize) -> usize {
    let mut end = pos;
    if end > floor && raw[end - 1] == b'\n' {
        end -= 1;
        if end > floor && raw[end - 1] == b'\r' {
            end -= 1;
        }
    }
    end
}

/// Which leaf feeds the renderer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RenderSource {
    Html,
    PlainText,
}

/// Index (in document order among leaves) of the part used for rendering.
pub(crate) fn select_render_leaf(rec: &EmailRecord) -> Option<(usize, RenderSource)> {
    let leaves = rec.leaves();
    if let Some(i) = leaves
        .iter()
        .rposition(|p| p.content_type.mime_type == "text/html")
    {
        return Some((i, RenderSource::Html));
    }
    leaves
        .iter()
        .position(|p| p.content_type.mime_type == "text/plain")
        .map(|i| (i, RenderSource::PlainText))
}

/// The html document to render: the last text/html leaf, or the first
/// text/plain leaf wrapped in a `<pre>` scaffold.
pub fn select_render_part(rec: &EmailRecord) -> Result<String, MailError> {
    let (idx, source) = select_render_leaf(rec).ok_or(MailError::NoRenderablePart)?;
    let part = rec.leaves()[idx];
    let text = transfer::decode_text(&part.body, part.charset());
    Ok(match source {
        RenderSource::Html => text,
        RenderSource::PlainText => wrap_plain_text(&text),
    })
}

pub(crate) fn wrap_plain_text(text: &str) -> String {
    let mut escaped = String::with_capacity(text.len() + 16);
    for c in text.chars() {
        match c {
            '&' => escaped.push_str("&amp;"),
            '<' => escaped.push_str("&lt;"),
            '>' => escaped.push_str("&gt;"),
            _ => escaped.push(c),
        }
    }
    format!("<html><body><pre>{escaped}</pre></body></html>")
}
