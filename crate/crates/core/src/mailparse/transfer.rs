//! Content-transfer-encoding and charset codecs.

use base64::alphabet;
use base64::engine::{DecodePaddingMode, Engine, GeneralPurpose, GeneralPurposeConfig};
use encoding_rs::Encoding;

const LENIENT_B64: GeneralPurpose = GeneralPurpose::new(
    &alphabet::STANDARD,
    GeneralPurposeConfig::new()
        .with_decode_padding_mode(DecodePaddingMode::Indifferent)
        .with_decode_allow_trailing_bits(true),
);

const STRICT_B64: GeneralPurpose = base64::engine::general_purpose::STANDARD;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransferEncoding {
    SevenBit,
    EightBit,
    Binary,
    QuotedPrintable,
    Base64,
    Unknown(String),
}

impl TransferEncoding {
    pub fn from_header(value: Option<&str>) -> Self {
        let Some(v) = value else {
            return TransferEncoding::SevenBit;
        };
        match v.trim().to_ascii_lowercase().as_str() {
            "" | "7bit" => TransferEncoding::SevenBit,
            "8bit" => TransferEncoding::EightBit,
            "binary" => TransferEncoding::Binary,
            "quoted-printable" => TransferEncoding::QuotedPrintable,
            "base64" => TransferEncoding::Base64,
            other => TransferEncoding::Unknown(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            TransferEncoding::SevenBit => "7bit",
            TransferEncoding::EightBit => "8bit",
            TransferEncoding::Binary => "binary",
            TransferEncoding::QuotedPrintable => "quoted-printable",
            TransferEncoding::Base64 => "base64",
            TransferEncoding::Unknown(s) => s,
        }
    }
}

/// Decodes a transfer-encoded body. `None` means the encoding is not understood.
pub fn decode_body(enc: &TransferEncoding, raw: &[u8]) -> Option<Vec<u8>> {
    match enc {
        TransferEncoding::SevenBit | TransferEncoding::EightBit | TransferEncoding::Binary => {
            Some(raw.to_vec())
        }
        TransferEncoding::QuotedPrintable => Some(decode_quoted_printable(raw)),
        TransferEncoding::Base64 => Some(decode_base64(raw)),
        TransferEncoding::Unknown(_) => None,
    }
}

/// Base64 decode that skips anything outside the alphabet (line breaks, stray
/// characters) and tolerates missing or excess padding.
pub fn decode_base64(raw: &[u8]) -> Vec<u8> {
    let mut clean: Vec<u8> = raw
        .iter()
        .copied()
        .take_while(|&b| b != b'=')
        .filter(|b| b.is_ascii_alphanumeric() || *b == b'+' || *b == b'/')
        .collect();
    if clean.len() % 4 == 1 {
        clean.pop();
    }
    LENIENT_B64.decode(&clean).unwrap_or_default()
}

/// Base64 with lines of at most 76 characters joined by `eol`.
pub fn encode_base64(data: &[u8], eol: &str) -> Vec<u8> {
    let flat = STRICT_B64.encode(data);
    let mut out = Vec::with_capacity(flat.len() + flat.len() / 76 * eol.len());
    for (i, chunk) in flat.as_bytes().chunks(76).enumerate() {
        if i > 0 {
            out.extend_from_slice(eol.as_bytes());
        }
        out.extend_from_slice(chunk);
    }
    out
}

fn hex_val(b: u8) -> Option<u8> {
    match b {
        b'0'..=b'9' => Some(b - b'0'),
        b'a'..=b'f' => Some(b - b'a' + 10),
        b'A'..=b'F' => Some(b - b'A' + 10),
        _ => None,
    }
}

/// Quoted-printable decode. Malformed escapes are kept literally; hard line
/// breaks are kept as they appear in the input.
pub fn decode_quoted_printable(raw: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        let b = raw[i];
        if b != b'=' {
            out.push(b);
            i += 1;
            continue;
        }
        // soft line break: '=' followed by optional whitespace then EOL
        let mut j = i + 1;
        while j < raw.len() && (raw[j] == b' ' || raw[j] == b'\t') {
            j += 1;
        }
        if j < raw.len() && raw[j] == b'\n' {
            i = j + 1;
            continue;
        }
        if j + 1 < raw.len() && raw[j] == b'\r' && raw[j + 1] == b'\n' {
            i = j + 2;
            continue;
        }
        if j == raw.len() {
            i = j;
            continue;
        }
        match (raw.get(i + 1).copied().and_then(hex_val), raw.get(i + 2).copied().and_then(hex_val)) {
            (Some(h), Some(l)) => {
                out.push(h << 4 | l);
                i += 3;
            }
            _ => {
                out.push(b'=');
                i += 1;
            }
        }
    }
    out
}

/// Quoted-printable encode that decodes back to exactly `data`. CRLF pairs are
/// emitted as hard line breaks; lone CR or LF bytes are escaped.
pub fn encode_quoted_printable(data: &[u8], eol: &str) -> Vec<u8> {
    const MAX_LINE: usize = 76;
    let mut out = Vec::with_capacity(data.len() + data.len() / 8);
    let mut line_len = 0usize;
    let mut i = 0;
    while i < data.len() {
        let b = data[i];
        if b == b'\r' && data.get(i + 1) == Some(&b'\n') {
            out.extend_from_slice(b"\r\n");
            line_len = 0;
            i += 2;
            continue;
        }
        let next_is_break = i + 1 == data.len()
            || (data[i + 1] == b'\r' && data.get(i + 2) == Some(&b'\n'));
        let literal = match b {
            b'=' => false,
            b' ' | b'\t' => !next_is_break,
            33..=126 => true,
            _ => false,
        };
        let width = if literal { 1 } else { 3 };
        // keep one column for the soft-break '='
        if line_len + width > MAX_LINE - 1 {
            out.push(b'=');
            out.extend_from_slice(eol.as_bytes());
            line_len = 0;
        }
        if literal {
            out.push(b);
        } else {
            out.extend_from_slice(format!("={b:02X}").as_bytes());
        }
        line_len += width;
        i += 1;
    }
    out
}

/// Resolves a charset label; unknown labels yield `None`.
pub fn lookup_charset(label: &str) -> Option<&'static Encoding> {
    Encoding::for_label(label.trim().as_bytes())
}

/// Decodes bytes with the part charset, falling back to UTF-8. Invalid
/// sequences become U+FFFD.
pub fn decode_text(bytes: &[u8], charset: Option<&str>) -> String {
    let enc = charset.and_then(lookup_charset).unwrap_or(encoding_rs::UTF_8);
    let (text, _, _) = enc.decode(bytes);
    text.into_owned()
}

/// Encodes `text` with `charset` if that is lossless; otherwise returns `None`.
pub fn encode_text_exact(text: &str, charset: &str) -> Option<Vec<u8>> {
    let enc = lookup_charset(charset)?;
    let (bytes, used, unmappable) = enc.encode(text);
    if unmappable || used != enc {
        return None;
    }
    let (back, _, malformed) = enc.decode(&bytes);
    if malformed || back != text {
        return None;
    }
    Some(bytes.into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn qp_decodes_escapes_and_soft_breaks() {
        assert_eq!(decode_quoted_printable(b"a=3Db=\r\nc"), b"a=bc");
        assert_eq!(decode_quoted_printable(b"caf=C3=A9=\nx"), "caféx".as_bytes());
        assert_eq!(decode_quoted_printable(b"bad=ZZ"), b"bad=ZZ");
        assert_eq!(decode_quoted_printable(b"end="), b"end");
    }

    #[test]
    fn qp_line_length_bounded() {
        let data = vec![b'x'; 500];
        let enc = encode_quoted_printable(&data, "\r\n");
        for line in enc.split(|&b| b == b'\n') {
            assert!(line.len() <= 77, "line too long: {}", line.len());
        }
    }

    #[test]
    fn base64_lenient() {
        assert_eq!(decode_base64(b"aGVs\r\nbG8=\r\n"), b"hello");
        assert_eq!(decode_base64(b"aGVsbG8"), b"hello");
        assert_eq!(decode_base64(b"aGVs*bG8=="), b"hello");
    }

    #[test]
    fn charset_fallback() {
        assert_eq!(decode_text(b"caf\xe9", Some("iso-8859-1")), "café");
        assert_eq!(decode_text(b"caf\xe9", Some("no-such-charset")), "caf\u{fffd}");
        assert!(encode_text_exact("日本", "iso-8859-1").is_none());
        assert_eq!(encode_text_exact("café", "latin1").unwrap(), b"caf\xe9");
    }

    proptest! {
        #[test]
        fn qp_round_trip(data in proptest::collection::vec(any::<u8>(), 0..400)) {
            let enc = encode_quoted_printable(&data, "\r\n");
            prop_assert_eq!(decode_quoted_printable(&enc), data);
        }

        #[test]
        fn base64_round_trip(data in proptest::collection::vec(any::<u8>(), 0..400)) {
            let enc = encode_base64(&data, "\n");
            prop_assert_eq!(decode_base64(&enc), data);
        }
    }
}
