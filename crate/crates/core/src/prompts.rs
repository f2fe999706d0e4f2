//! Versioned prompt assets and the placeholder renderer they use.
//!
//! Assets are plain text compiled into the binary. Placeholders are written
//! `{name}`; substitution is single-pass, so braces inside substituted values
//! are never re-expanded.

/// Bumped whenever any asset text changes; recorded alongside generations.
pub const PROMPT_VERSION: &str = "v1";

pub const QUESTION_SYSTEM: &str = include_str!("../prompts/question_system.v1.txt");
pub const QUESTION_USER: &str = include_str!("../prompts/question_user.v1.txt");
pub const REFINE_SYSTEM: &str = include_str!("../prompts/refine_system.v1.txt");
pub const REFINE_USER: &str = include_str!("../prompts/refine_user.v1.txt");
pub const PHRASES_SYSTEM: &str = include_str!("../prompts/phrases_system.v1.txt");
pub const PHRASES_USER: &str = include_str!("../prompts/phrases_user.v1.txt");

/// Replaces each `{key}` in `template` with its value. Unknown placeholders
/// are left as written.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out =
        String::with_capacity(template.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}').map(|close| (&after[..close], close)) {
            Some((name, close)) if vars.iter().any(|(k, _)| *k == name) => {
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .unwrap();
                out.push_str(value);
                rest = &after[close + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_once() {
        assert_eq!(
            render("a {x} b {y}", &[("x", "{y}"), ("y", "2")]),
            "a {y} b 2"
        );
        assert_eq!(render("{unknown} {x}", &[("x", "1")]), "{unknown} 1");
        assert_eq!(render("no braces", &[]), "no braces");
        assert_eq!(render("tail {", &[]), "tail {");
    }

    #[test]
    fn assets_have_expected_placeholders() {
        assert!(QUESTION_USER.contains("{caption}") && QUESTION_USER.contains("{dialogue}"));
        assert!(REFINE_USER.contains("{caption}") && REFINE_USER.contains("{dialogue}"));
        assert!(PHRASES_USER.contains("{text}"));
        assert!(QUESTION_SYSTEM.contains("DONE"));
    }
}
