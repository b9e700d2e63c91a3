//! Hand-worked F1 oracle and the perturbation used by the invariance checks.

/// (prediction, gold, precision, recall, f1), all worked by hand after
/// normalization (lowercase, ASCII punctuation removed, a/an/the dropped).
pub const F1_TABLE: [(&str, &str, f64, f64, f64); 25] = [
    ("Keith Nichol", "Keith Nichol", 1.0, 1.0, 1.0),
    ("Paris", "London", 0.0, 0.0, 0.0),
    ("the cat sat", "cat sat down", 1.0, 2.0 / 3.0, 0.8),
    ("", "anything", 0.0, 0.0, 0.0),
    ("anything", "", 0.0, 0.0, 0.0),
    ("", "", 0.0, 0.0, 0.0),
    ("The Beatles", "beatles", 1.0, 1.0, 1.0),
    ("a an the", "the", 0.0, 0.0, 0.0),
    ("New York City", "New York", 2.0 / 3.0, 1.0, 0.8),
    ("1970", "the 1970s", 0.0, 0.0, 0.0),
    ("U.S.A.", "USA", 1.0, 1.0, 1.0),
    ("red red red", "red", 1.0 / 3.0, 1.0, 0.5),
    ("red", "red red", 1.0, 0.5, 2.0 / 3.0),
    ("red blue red", "red red green", 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0),
    ("yes", "Yes.", 1.0, 1.0, 1.0),
    ("no", "yes", 0.0, 0.0, 0.0),
    ("Barack Obama", "President Barack Hussein Obama", 1.0, 0.5, 2.0 / 3.0),
    ("a b c d", "d c b a", 1.0, 1.0, 1.0),
    ("x y", "y z w", 0.5, 1.0 / 3.0, 0.4),
    ("it's", "its", 1.0, 1.0, 1.0),
    ("state-of-the-art", "stateoftheart", 1.0, 1.0, 1.0),
    ("one two three four", "one", 0.25, 1.0, 0.4),
    ("  MIXED   case  ", "mixed CASE", 1.0, 1.0, 1.0),
    ("an apple a day", "apple day", 1.0, 1.0, 1.0),
    ("alpha beta gamma delta epsilon", "beta delta zeta", 0.4, 2.0 / 3.0, 0.5),
];

/// Sprinkle articles between words and punctuation onto word edges.
pub fn perturb(ws: &[String], seed: &[u8]) -> String {
    const PUNCT: [&str; 6] = [",", ".", "!", "?", "\"", ";"];
    const ARTICLES: [&str; 6] = ["a", "an", "the", "The", "A", "AN"];
    let mut out = Vec::new();
    for (i, w) in ws.iter().enumerate() {
        let r = seed.get(i).copied().unwrap_or(0);
        if r % 3 == 0 {
            out.push(ARTICLES[(r / 3) as usize % 6].to_string());
        }
        let mut tok = w.clone();
        if r % 2 == 0 {
            tok.push_str(PUNCT[r as usize % 6]);
        }
        if r % 5 == 0 {
            tok.insert_str(0, PUNCT[(r / 5) as usize % 6]);
        }
        if r % 7 == 0 {
            tok = tok.to_uppercase();
        }
        out.push(tok);
    }
    out.join(" ")
}

