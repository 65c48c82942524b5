//! Human friendly dataset identifiers of the form `adjective_name`.
//!
//! Candidates are drawn uniformly and rejected while taken. After
//! [`MAX_RANDOM_ATTEMPTS`] rejections a numeric suffix (`_2`, `_3`, ...) is
//! appended to the last candidate.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

const BUNDLED_ADJECTIVES: &str = include_str!("../words/adjectives.txt");
const BUNDLED_NAMES: &str = include_str!("../words/names.txt");

pub const MAX_RANDOM_ATTEMPTS: usize = 100;
const MAX_SUFFIX: u64 = 1_000_000;

#[derive(Debug, thiserror::Error)]
pub enum MnemonicError {
    #[error("word list {list} is empty")]
    EmptyList { list: &'static str },
    #[error("word {word:?} in {list} list is not lowercase ascii")]
    InvalidWord { list: &'static str, word: String },
    #[error("no free identifier left")]
    Exhausted,
    #[error("reading word list: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct WordLists {
    adjectives: Vec<String>,
    names: Vec<String>,
}

impl WordLists {
    pub fn new(adjectives: Vec<String>, names: Vec<String>) -> Result<Self, MnemonicError> {
        validate("adjectives", &adjectives)?;
        validate("names", &names)?;
        Ok(Self { adjectives, names })
    }

    /// The word lists compiled into the binary.
    pub fn bundled() -> Self {
        Self::new(parse_list(BUNDLED_ADJECTIVES), parse_list(BUNDLED_NAMES))
            .expect("bundled word lists are valid")
    }

    /// Loads two word list files, one word per line.
    pub fn from_files(adjectives: &Path, names: &Path) -> Result<Self, MnemonicError> {
        let adjectives = parse_list(&std::fs::read_to_string(adjectives)?);
        let names = parse_list(&std::fs::read_to_string(names)?);
        Self::new(adjectives, names)
    }

    pub fn adjectives(&self) -> &[String] {
        &self.adjectives
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Number of distinct identifiers available before suffixes are needed.
    pub fn capacity(&self) -> u64 {
        self.adjectives.len() as u64 * self.names.len() as u64
    }

    /// Generates an identifier for which `taken` returns false.
    pub fn generate<R, F>(&self, rng: &mut R, taken: F) -> Result<String, MnemonicError>
    where
        R: Rng + ?Sized,
        F: Fn(&str) -> bool,
    {
        let mut candidate = String::new();
        for _ in 0..MAX_RANDOM_ATTEMPTS {
            candidate = self.draw(rng);
            if !taken(&candidate) {
                return Ok(candidate);
            }
        }
        for suffix in 2..=MAX_SUFFIX {
            let with_suffix = format!("{candidate}_{suffix}");
            if !taken(&with_suffix) {
                return Ok(with_suffix);
            }
        }
        Err(MnemonicError::Exhausted)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let adjective = self.adjectives.choose(rng).expect("non-empty");
        let name = self.names.choose(rng).expect("non-empty");
        format!("{adjective}_{name}")
    }
}

fn parse_list(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect()
}

fn validate(list: &'static str, words: &[String]) -> Result<(), MnemonicError> {
    if words.is_empty() {
        return Err(MnemonicError::EmptyList { list });
    }
    if let Some(bad) = words
        .iter()
        .find(|w| w.is_empty() || !w.bytes().all(|b| b.is_ascii_lowercase()))
    {
        return Err(MnemonicError::InvalidWord {
            list,
            word: bad.clone(),
        });
    }
    Ok(())
}

/// Whether `s` has the shape of a generated identifier:
/// `^[a-z]+_[a-z]+(_[0-9]+)?$`.
pub fn is_valid_mnemonic(s: &str) -> bool {
    let mut parts = s.split('_');
    let lower = |p: Option<&str>| p.is_some_and(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_lowercase()));
    if !lower(parts.next()) || !lower(parts.next()) {
        return false;
    }
    match parts.next() {
        None => true,
        Some(n) => !n.is_empty() && n.bytes().all(|b| b.is_ascii_digit()) && parts.next().is_none(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use std::cell::RefCell;
    use std::collections::HashSet;

    fn tiny(adj: &[&str], names: &[&str]) -> WordLists {
        WordLists::new(
            adj.iter().map(|s| s.to_string()).collect(),
            names.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn bundled_lists_are_large_and_valid() {
        let lists = WordLists::bundled();
        assert!(lists.adjectives().len() >= 1000);
        assert!(lists.names().len() >= 1000);
        assert!(lists.capacity() >= 1_000_000);
        assert!(lists.adjectives().iter().any(|a| a == "vampiric"));
        assert!(lists.names().iter().any(|n| n == "aviyana"));
    }

    #[test]
    fn format_matches_shape() {
        let lists = WordLists::bundled();
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let m = lists.generate(&mut rng, |_| false).unwrap();
            assert!(is_valid_mnemonic(&m), "{m}");
            assert_eq!(m.matches('_').count(), 1);
        }
        assert!(is_valid_mnemonic("vampiric_aviyana"));
        assert!(is_valid_mnemonic("vampiric_aviyana_12"));
        assert!(!is_valid_mnemonic("Vampiric_aviyana"));
        assert!(!is_valid_mnemonic("vampiric"));
        assert!(!is_valid_mnemonic("vampiric_aviyana_"));
        assert!(!is_valid_mnemonic("../etc_passwd"));
        assert!(!is_valid_mnemonic("a_b_1_2"));
    }

    #[test]
    fn last_free_combination_is_found() {
        let lists = tiny(&["red", "blue"], &["ann", "bob"]);
        let all: Vec<String> = ["red", "blue"]
            .iter()
            .flat_map(|a| ["ann", "bob"].iter().map(move |n| format!("{a}_{n}")))
            .collect();
        for free in &all {
            let taken: HashSet<&String> = all.iter().filter(|m| *m != free).collect();
            let mut rng = StdRng::seed_from_u64(42);
            let got = lists.generate(&mut rng, |m| taken.iter().any(|t| *t == m)).unwrap();
            assert_eq!(&got, free);
        }
    }

    #[test]
    fn full_lists_fall_back_to_suffix() {
        let lists = tiny(&["red"], &["ann"]);
        let mut rng = StdRng::seed_from_u64(1);
        let got = lists.generate(&mut rng, |m| m == "red_ann" || m == "red_ann_2").unwrap();
        assert_eq!(got, "red_ann_3");
    }

    #[test]
    fn exhaustion_is_reported() {
        let lists = tiny(&["red"], &["ann"]);
        let mut rng = StdRng::seed_from_u64(1);
        assert!(matches!(
            lists.generate(&mut rng, |_| true),
            Err(MnemonicError::Exhausted)
        ));
    }

    #[test]
    fn accumulating_taken_set_never_repeats() {
        let lists = tiny(&["red", "blue", "green"], &["ann", "bob"]);
        let taken = RefCell::new(HashSet::new());
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..500 {
            let m = lists.generate(&mut rng, |m| taken.borrow().contains(m)).unwrap();
            assert!(taken.borrow_mut().insert(m));
        }
    }

    #[test]
    fn rejects_invalid_words() {
        assert!(matches!(
            WordLists::new(vec![], vec!["ann".into()]),
            Err(MnemonicError::EmptyList { list: "adjectives" })
        ));
        assert!(matches!(
            WordLists::new(vec!["Red".into()], vec!["ann".into()]),
            Err(MnemonicError::InvalidWord { .. })
        ));
        assert!(matches!(
            WordLists::new(vec!["red".into()], vec!["ann-marie".into()]),
            Err(MnemonicError::InvalidWord { .. })
        ));
    }

    #[test]
    fn loads_word_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("adj");
        let n = dir.path().join("names");
        std::fs::write(&a, "red\n\nblue\n").unwrap();
        std::fs::write(&n, "ann\r\n").unwrap();
        let lists = WordLists::from_files(&a, &n).unwrap();
        assert_eq!(lists.capacity(), 2);
    }

    #[test]
    fn draws_are_roughly_uniform_over_free_combinations() {
        let lists = tiny(&["a", "b"], &["x", "y"]);
        let mut rng = StdRng::seed_from_u64(9);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..30_000 {
            let m = lists.generate(&mut rng, |m| m == "a_x").unwrap();
            *counts.entry(m).or_insert(0u32) += 1;
        }
        assert_eq!(counts.len(), 3);
        for (m, c) in counts {
            assert!((9_000..11_000).contains(&c), "{m}: {c}");
        }
    }
}
