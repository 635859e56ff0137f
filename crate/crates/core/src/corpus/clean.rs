//! Minimal text normalization applied to every section before tokenization.

/// Normalizes free text: decodes character-entity escapes, lowercases and
/// collapses whitespace.
///
/// Only the five XML entities (`&amp;`, `&lt;`, `&gt;`, `&quot;`, `&apos;`)
/// and numeric escapes (`&#38;`, `&#x26;`) are decoded; anything else is left
/// as written. Decoding and lowercasing are repeated until nothing changes so
/// that doubly-escaped input such as `&amp;amp;` ends in the same place as a
/// second pass would, which makes the function idempotent.
pub fn clean_text(raw: &str) -> String {
    let mut current = raw.to_lowercase();
    loop {
        let decoded = decode_entities(&current);
        let lowered = decoded.to_lowercase();
        if lowered == current {
            break;
        }
        current = lowered;
    }
    current.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn decode_entities(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        let tail = &rest[amp..];
        match parse_entity(tail) {
            Some((ch, consumed)) => {
                out.push(ch);
                rest = &tail[consumed..];
            }
            None => {
                out.push('&');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Parses an entity at the start of `s` (which begins with `&`), returning the
/// decoded character and the number of bytes consumed.
fn parse_entity(s: &str) -> Option<(char, usize)> {
    // longest accepted entity is `&#x10FFFF;` / `&#1114111;`
    let semi = s.bytes().take(12).position(|b| b == b';')?;
    let body = &s[1..semi];
    let ch = match body {
        "amp" => '&',
        "lt" => '<',
        "gt" => '>',
        "quot" => '"',
        "apos" => '\'',
        _ => {
            let num = body.strip_prefix('#')?;
            let value = match num.strip_prefix(['x', 'X']) {
                Some(hex) if !hex.is_empty() && hex.chars().all(|c| c.is_ascii_hexdigit()) => {
                    u32::from_str_radix(hex, 16).ok()?
                }
                Some(_) => return None,
                None if !num.is_empty() && num.chars().all(|c| c.is_ascii_digit()) => {
                    num.parse().ok()?
                }
                None => return None,
            };
            if value == 0 {
                return None;
            }
            char::from_u32(value)?
        }
    };
    Some((ch, semi + 1))
}
