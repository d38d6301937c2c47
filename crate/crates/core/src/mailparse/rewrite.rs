use super::transfer::{self, TransferEncoding};
use super::{select_render_leaf, wrap_plain_text, EmailRecord, MailError, MimePart, RenderSource};

/// Leaves in document order, each with the boundaries of its multipart ancestors.
fn leaves_with_boundaries(root: &MimePart) -> Vec<(&MimePart, Vec<String>)> {
    fn walk<'a>(part: &'a MimePart, bounds: &mut Vec<String>, out: &mut Vec<(&'a MimePart, Vec<String>)>) {
        if part.is_leaf() {
            out.push((part, bounds.clone()));
            return;
        }
        let pushed = match part.content_type.param("boundary") {
            Some(b) => {
                bounds.push(b.to_string());
                true
            }
            None => false,
        };
        for c in &part.children {
            walk(c, bounds, out);
        }
        if pushed {
            bounds.pop();
        }
    }
    let mut out = Vec::new();
    walk(root, &mut Vec::new(), &mut out);
    out
}

fn collides_with_boundary(body: &[u8], boundaries: &[String]) -> bool {
    body.split(|&b| b == b'\n').any(|line| {
        line.strip_prefix(b"--")
            .is_some_and(|rest| boundaries.iter().any(|b| rest.starts_with(b.as_bytes())))
    })
}

fn is_7bit_clean(body: &[u8]) -> bool {
    body.iter().all(|&b| b != 0 && b < 0x80)
        && body.split(|&b| b == b'\n').all(|l| l.len() <= 998)
}

/// Serializes `rec` with the render part's body replaced by `new_html`.
///
/// The part keeps its charset when `new_html` is representable in it, else it
/// becomes UTF-8 and the charset parameter is updated. Transfer encoding is
/// kept where possible. Bytes outside the replaced part are copied verbatim.
pub fn rewrite_email(rec: &EmailRecord, new_html: &str) -> Result<Vec<u8>, MailError> {
    let (idx, source) = select_render_leaf(rec).ok_or(MailError::NoRenderablePart)?;
    let leaves = leaves_with_boundaries(&rec.root);
    let (part, boundaries) = &leaves[idx];
    let raw = rec.raw();

    if source == RenderSource::PlainText
        && new_html == wrap_plain_text(&transfer::decode_text(&part.body, part.charset()))
    {
        return Ok(raw.to_vec());
    }

    let header_block = &raw[part.header_span.clone()];
    let eol = if header_block.windows(2).any(|w| w == b"\r\n")
        || (header_block.is_empty() && raw.windows(2).any(|w| w == b"\r\n"))
    {
        "\r\n"
    } else {
        "\n"
    };

    let mut content_type = part.content_type.clone();
    let mut ct_changed = false;
    if source == RenderSource::PlainText {
        content_type.mime_type = "text/html".into();
        ct_changed = true;
    }

    let body = match part.charset() {
        Some(cs) => match transfer::encode_text_exact(new_html, cs) {
            Some(bytes) => bytes,
            None => {
                set_param(&mut content_type, "charset", "utf-8");
                ct_changed = true;
                new_html.as_bytes().to_vec()
            }
        },
        None => {
            if !new_html.is_ascii() {
                set_param(&mut content_type, "charset", "utf-8");
                ct_changed = true;
            }
            new_html.as_bytes().to_vec()
        }
    };

    let mut encoding = match &part.transfer_encoding {
        TransferEncoding::SevenBit if !is_7bit_clean(&body) => TransferEncoding::QuotedPrintable,
        TransferEncoding::Unknown(_) => TransferEncoding::Base64,
        other => other.clone(),
    };
    let mut encoded = encode(&encoding, &body, eol);
    if encoding != TransferEncoding::Base64 && collides_with_boundary(&encoded, boundaries) {
        encoding = TransferEncoding::Base64;
        encoded = encode(&encoding, &body, eol);
    }
    let cte_changed = encoding != part.transfer_encoding;

    let mut out = Vec::with_capacity(raw.len() + encoded.len());
    out.extend_from_slice(&raw[..part.header_span.start]);
    out.extend_from_slice(&rebuild_headers(
        raw,
        part,
        ct_changed.then(|| content_type.to_header_value()),
        cte_changed.then(|| encoding.as_str().to_string()),
        eol,
    ));
    out.extend_from_slice(&encoded);
    out.extend_from_slice(&raw[part.body_span.end..]);
    Ok(out)
}

fn encode(enc: &TransferEncoding, body: &[u8], eol: &str) -> Vec<u8> {
    match enc {
        TransferEncoding::Base64 => transfer::encode_base64(body, eol),
        TransferEncoding::QuotedPrintable => transfer::encode_quoted_printable(body, eol),
        _ => body.to_vec(),
    }
}

fn set_param(ct: &mut super::ContentType, name: &str, value: &str) {
    match ct.params.iter_mut().find(|(k, _)| k == name) {
        Some(p) => p.1 = value.to_string(),
        None => ct.params.push((name.to_string(), value.to_string())),
    }
}

/// Copies the part's header block, substituting the Content-Type and
/// Content-Transfer-Encoding fields when they changed.
fn rebuild_headers(
    raw: &[u8],
    part: &MimePart,
    content_type: Option<String>,
    cte: Option<String>,
    eol: &str,
) -> Vec<u8> {
    let span = part.header_span.clone();
    if span.is_empty() {
        let mut out = Vec::new();
        if let Some(ct) = &content_type {
            out.extend_from_slice(format!("Content-Type: {ct}{eol}").as_bytes());
        }
        if let Some(cte) = &cte {
            out.extend_from_slice(format!("Content-Transfer-Encoding: {cte}{eol}").as_bytes());
        }
        if !out.is_empty() {
            out.extend_from_slice(eol.as_bytes());
        }
        return out;
    }

    // the blank separator line closes the block
    let block_end = span.end;
    let sep_start = if raw[..block_end].ends_with(b"\r\n") && block_end - 2 >= span.start {
        block_end - 2
    } else {
        block_end - 1
    };

    let mut edits: Vec<(std::ops::Range<usize>, Vec<u8>)> = Vec::new();
    let replace = |name: &str, value: &Option<String>, edits: &mut Vec<_>| {
        let Some(value) = value else { return };
        let line = format!("{}: {value}{eol}", canonical(name)).into_bytes();
        let mut matches = part
            .headers
            .iter()
            .filter(|h| h.name.eq_ignore_ascii_case(name));
        match matches.next() {
            Some(h) => edits.push((h.span.clone(), line)),
            None => edits.push((sep_start..sep_start, line)),
        }
    };
    replace("content-type", &content_type, &mut edits);
    replace("content-transfer-encoding", &cte, &mut edits);
    edits.sort_by_key(|(r, _)| r.start);

    let mut out = Vec::with_capacity(span.len() + 64);
    let mut pos = span.start;
    for (range, bytes) in edits {
        out.extend_from_slice(&raw[pos..range.start]);
        out.extend_from_slice(&bytes);
        pos = range.end;
    }
    out.extend_from_slice(&raw[pos..span.end]);
    out
}

fn canonical(name: &str) -> &'static str {
    if name.eq_ignore_ascii_case("content-type") {
        "Content-Type"
    } else {
        "Content-Transfer-Encoding"
    }
}
