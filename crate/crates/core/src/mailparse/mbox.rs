/// Splits an mbox stream into raw messages. Each message starts at a line
/// beginning with `From ` (at file start or after a line break); the
/// separator line itself is dropped and `>From ` quoting is undone.
pub fn split_mbox(data: &[u8]) -> Vec<Vec<u8>> {
    let mut messages = Vec::new();
    let mut current: Option<Vec<u8>> = None;
    for line in data.split_inclusive(|&b| b == b'\n') {
        if line.starts_with(b"From ") {
            if let Some(msg) = current.take() {
                messages.push(finish(msg));
            }
            current = Some(Vec::new());
            continue;
        }
        let Some(msg) = current.as_mut() else {
            // junk before the first separator
            continue;
        };
        let unquoted = match line.iter().position(|&b| b != b'>') {
            Some(n) if n > 0 && line[n..].starts_with(b"From ") => &line[1..],
            _ => line,
        };
        msg.extend_from_slice(unquoted);
    }
    if let Some(msg) = current {
        messages.push(finish(msg));
    }
    messages.retain(|m| !m.is_empty());
    messages
}

/// Drops the blank line that precedes the next separator.
fn finish(mut msg: Vec<u8>) -> Vec<u8> {
    if msg.ends_with(b"\r\n\r\n") {
        msg.truncate(msg.len() - 2);
    } else if msg.ends_with(b"\n\n") {
        msg.truncate(msg.len() - 1);
    }
    msg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_and_unquotes() {
        let mbox = b"From a@b Tue Apr  2 10:00:00 2024\nSubject: one\n\nbody\n>From here\n\nFrom c@d Tue Apr  2 11:00:00 2024\nSubject: two\n\nx\n";
        let msgs = split_mbox(mbox);
        assert_eq!(msgs.len(), 2);
        assert_eq!(msgs[0], b"Subject: one\n\nbody\nFrom here\n".to_vec());
        assert_eq!(msgs[1], b"Subject: two\n\nx\n".to_vec());
    }

    #[test]
    fn no_separator_no_messages() {
        assert!(split_mbox(b"Subject: x\n\nbody").is_empty());
        assert!(split_mbox(b"").is_empty());
    }
}
