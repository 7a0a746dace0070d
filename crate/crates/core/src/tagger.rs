//! Tiny lookup tagger for hand-typed demo input.
//!
//! This is a most-frequent-tag lexicon plus suffix rules. It is much weaker
//! than a statistical tagger and real datasets should carry their own tags.

const LEXICON: &[(&str, &str)] = &[
    ("what", "WP"),
    ("who", "WP"),
    ("whom", "WP"),
    ("whose", "WP$"),
    ("which", "WDT"),
    ("why", "WRB"),
    ("where", "WRB"),
    ("when", "WRB"),
    ("how", "WRB"),
    ("is", "VBZ"),
    ("are", "VBP"),
    ("was", "VBD"),
    ("were", "VBD"),
    ("be", "VB"),
    ("been", "VBN"),
    ("do", "VBP"),
    ("does", "VBZ"),
    ("did", "VBD"),
    ("has", "VBZ"),
    ("have", "VBP"),
    ("had", "VBD"),
    ("can", "MD"),
    ("could", "MD"),
    ("will", "MD"),
    ("would", "MD"),
    ("the", "DT"),
    ("a", "DT"),
    ("an", "DT"),
    ("this", "DT"),
    ("that", "DT"),
    ("these", "DT"),
    ("those", "DT"),
    ("some", "DT"),
    ("no", "DT"),
    ("of", "IN"),
    ("in", "IN"),
    ("on", "IN"),
    ("at", "IN"),
    ("for", "IN"),
    ("with", "IN"),
    ("over", "IN"),
    ("under", "IN"),
    ("by", "IN"),
    ("from", "IN"),
    ("near", "IN"),
    ("behind", "IN"),
    ("to", "TO"),
    ("and", "CC"),
    ("or", "CC"),
    ("but", "CC"),
    ("it", "PRP"),
    ("he", "PRP"),
    ("she", "PRP"),
    ("they", "PRP"),
    ("his", "PRP$"),
    ("her", "PRP$"),
    ("their", "PRP$"),
    ("its", "PRP$"),
    ("not", "RB"),
    ("there", "EX"),
    ("one", "CD"),
    ("two", "CD"),
    ("three", "CD"),
    ("four", "CD"),
    ("five", "CD"),
    ("many", "JJ"),
    ("left", "JJ"),
    ("right", "JJ"),
    ("big", "JJ"),
    ("small", "JJ"),
    ("red", "JJ"),
    ("blue", "JJ"),
    ("green", "JJ"),
    ("white", "JJ"),
    ("black", "JJ"),
];

pub fn lexicon_tag(token: &str) -> &'static str {
    let lower = token.to_lowercase();
    if let Some((_, tag)) = LEXICON.iter().find(|(w, _)| *w == lower) {
        return tag;
    }
    if !token.is_empty() && token.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',') {
        return "CD";
    }
    if token.chars().all(|c| !c.is_alphanumeric()) {
        return ".";
    }
    if token.chars().next().is_some_and(char::is_uppercase) {
        return "NNP";
    }
    if lower.ends_with("ing") && lower.len() > 4 {
        "VBG"
    } else if lower.ends_with("ed") && lower.len() > 3 {
        "VBD"
    } else if lower.ends_with("ly") && lower.len() > 3 {
        "RB"
    } else if lower.ends_with("est") && lower.len() > 4 {
        "JJS"
    } else if lower.ends_with("ous") || lower.ends_with("ful") || lower.ends_with("able") {
        "JJ"
    } else if lower.ends_with('s') && !lower.ends_with("ss") && lower.len() > 3 {
        "NNS"
    } else {
        "NN"
    }
}

pub fn tag_tokens<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    tokens.iter().map(|t| lexicon_tag(t.as_ref()).to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_question() {
        let toks = [
            "Why", "was", "the", "hand", "of", "the", "woman", "over", "the", "left", "shoulder",
        ];
        assert_eq!(
            tag_tokens(&toks),
            ["WRB", "VBD", "DT", "NN", "IN", "DT", "NN", "IN", "DT", "JJ", "NN"]
        );
    }

    #[test]
    fn suffix_rules() {
        assert_eq!(lexicon_tag("running"), "VBG");
        assert_eq!(lexicon_tag("jumped"), "VBD");
        assert_eq!(lexicon_tag("dogs"), "NNS");
        assert_eq!(lexicon_tag("42"), "CD");
        assert_eq!(lexicon_tag("?"), ".");
    }
}
