use super::ExecutionError;

const BOXED: &str = "\\boxed{";

/// Contents of the last balanced `\boxed{...}` group, trimmed.
pub fn extract_boxed(raw: &str) -> Result<String, ExecutionError> {
    let mut found = None;
    let mut from = 0;
    while let Some(i) = raw[from..].find(BOXED) {
        let open = from + i + BOXED.len();
        if let Some(close) = matching_brace(&raw[open..]) {
            found = Some(raw[open..open + close].trim().to_string());
        }
        from = open;
    }
    found.ok_or(ExecutionError::NoBoxedAnswer)
}

/// Contents of the first balanced `\boxed{...}` group, trimmed.
pub fn first_boxed(raw: &str) -> Option<String> {
    let mut from = 0;
    while let Some(i) = raw[from..].find(BOXED) {
        let open = from + i + BOXED.len();
        if let Some(close) = matching_brace(&raw[open..]) {
            return Some(raw[open..open + close].trim().to_string());
        }
        from = open;
    }
    None
}

/// Offset of the brace closing a group whose opening brace precedes `s`.
fn matching_brace(s: &str) -> Option<usize> {
    let mut depth = 1usize;
    for (i, c) in s.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Equality key for answers: trimmed, whitespace collapsed, lowercased, trailing
/// periods removed, and numbers rendered in canonical decimal form.
pub fn normalize_answer(answer: &str) -> String {
    let collapsed = answer.split_whitespace().collect::<Vec<_>>().join(" ");
    let lowered = collapsed.to_lowercase();
    let stripped = lowered.trim_end_matches('.').trim_end().to_string();
    canonical_number(&stripped).unwrap_or(stripped)
}

fn canonical_number(s: &str) -> Option<String> {
    let numeric_chars = s
        .chars()
        .all(|c| c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e'));
    if s.is_empty() || !numeric_chars || !s.chars().any(|c| c.is_ascii_digit()) {
        return None;
    }
    let x: f64 = s.parse().ok()?;
    if !x.is_finite() {
        return None;
    }
    let x = if x == 0.0 { 0.0 } else { x };
    Some(format!("{x}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_last_balanced_group() {
        assert_eq!(extract_boxed("text $\\boxed{42}$ text").unwrap(), "42");
        assert_eq!(extract_boxed("$\\boxed{\\frac{1}{2}}$").unwrap(), "\\frac{1}{2}");
        assert_eq!(extract_boxed("\\boxed{a} then \\boxed{ b }").unwrap(), "b");
        assert_eq!(extract_boxed("$\\boxed{5}$").unwrap(), "5");
        assert_eq!(
            extract_boxed("$\\boxed{2, 4, 6, 8, 10, 12, 14}$").unwrap(),
            "2, 4, 6, 8, 10, 12, 14"
        );
    }

    #[test]
    fn unbalanced_or_missing_box_fails() {
        assert_eq!(extract_boxed("no box"), Err(ExecutionError::NoBoxedAnswer));
        assert_eq!(extract_boxed("\\boxed{open"), Err(ExecutionError::NoBoxedAnswer));
        // An unbalanced trailing group does not hide an earlier balanced one.
        assert_eq!(extract_boxed("\\boxed{1} \\boxed{2").unwrap(), "1");
        assert_eq!(first_boxed("\\boxed{1} \\boxed{2}").unwrap(), "1");
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("  No. "), "no");
        assert_eq!(normalize_answer("Yes"), "yes");
        assert_eq!(normalize_answer("a   b\tc"), "a b c");
        assert_eq!(normalize_answer("5.0"), "5");
        assert_eq!(normalize_answer("05"), "5");
        assert_eq!(normalize_answer("0.50"), "0.5");
        assert_eq!(normalize_answer("-0"), "0");
        assert_eq!(normalize_answer("1e3"), "1000");
        assert_eq!(normalize_answer("inf"), "inf");
        assert_eq!(normalize_answer("2, 4"), "2, 4");
    }
}
