use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::ops::Range;

use super::LangError;

/// Closed word-level vocabulary with stable reserved ids.
///
/// The reserved block always comes first: padding, the no-object class, the
/// three pronouns and a placeholder that any configured "random string"
/// pronoun tokenizes to.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    random_string: String,
}

/// Category-free object slot of a verb-pronoun prompt.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Pronoun {
    Something,
    It,
    Them,
    /// A meaningless string standing in for the object, e.g. `abcd`.
    Random(String),
}

impl Pronoun {
    pub fn word(&self) -> &str {
        match self {
            Pronoun::Something => "something",
            Pronoun::It => "it",
            Pronoun::Them => "them",
            Pronoun::Random(s) => s,
        }
    }

    pub fn parse(s: &str) -> Self {
        match s {
            "something" => Pronoun::Something,
            "it" => Pronoun::It,
            "them" => Pronoun::Them,
            other => Pronoun::Random(other.to_string()),
        }
    }
}

impl fmt::Display for Pronoun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

/// Token ids of a text, padded to `n_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub content_len: usize,
    /// Positions holding a reserved pronoun token (empty range if none).
    pub pronoun_span: Range<usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const NO_OBJECT: usize = 1;
    pub const SOMETHING: usize = 2;
    pub const IT: usize = 3;
    pub const THEM: usize = 4;
    pub const RANDOM: usize = 5;
    pub const RESERVED: [&'static str; 6] =
        ["<pad>", "<no-object>", "something", "it", "them", "<random>"];
    pub const DEFAULT_RANDOM_STRING: &'static str = "abcd";

    /// Reserved tokens followed by the distinct words of `phrases`, sorted.
    pub fn from_phrases<'a>(phrases: impl IntoIterator<Item = &'a str>) -> Self {
        let reserved: BTreeSet<&str> = Self::RESERVED.iter().copied().collect();
        let words: BTreeSet<&str> = phrases
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !reserved.contains(w))
            .collect();
        let tokens = Self::RESERVED
            .iter()
            .copied()
            .chain(words)
            .map(str::to_string)
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            index,
            random_string: Self::DEFAULT_RANDOM_STRING.to_string(),
        }
    }

    /// Parses the line-oriented file format: one token per line, reserved
    /// tokens first and in order.
    pub fn parse(text: &str) -> Result<Self, LangError> {
        let tokens: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        for (i, r) in Self::RESERVED.iter().enumerate() {
            match tokens.get(i) {
                Some(t) if t == r => {}
                Some(t) => {
                    return Err(LangError::BadVocabulary(format!(
                        "line {}: expected reserved token `{r}`, found `{t}`",
                        i + 1
                    )))
                }
                None => return Err(LangError::BadVocabulary(format!("missing reserved token `{r}`"))),
            }
        }
        let mut seen = BTreeSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if !seen.insert(t) {
                return Err(LangError::BadVocabulary(format!("line {}: duplicate token `{t}`", i + 1)));
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn with_random_string(mut self, s: &str) -> Self {
        self.random_string = s.to_string();
        self
    }

    pub fn random_string(&self) -> &str {
        &self.random_string
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Result<usize, LangError> {
        if word == self.random_string {
            return Ok(Self::RANDOM);
        }
        match self.index.get(word) {
            Some(&id) if !Self::is_marker(id) => Ok(id),
            _ => Err(LangError::OutOfVocabulary(word.to_string())),
        }
    }

    fn is_marker(id: usize) -> bool {
        matches!(id, Self::PAD | Self::NO_OBJECT | Self::RANDOM)
    }

    pub fn is_pronoun(id: usize) -> bool {
        matches!(id, Self::SOMETHING | Self::IT | Self::THEM | Self::RANDOM)
    }

    /// Whitespace tokenization padded with PAD to `n_max`. The last slot is
    /// kept free for the no-object class, so at most `n_max − 1` words fit.
    pub fn tokenize(&self, text: &str, n_max: usize) -> Result<Tokenized, LangError> {
        let mut ids = text
            .split_whitespace()
            .map(|w| self.id(w))
            .collect::<Result<Vec<_>, _>>()?;
        let content_len = ids.len();
        if content_len + 1 > n_max {
            return Err(LangError::PromptTooLong {
                required: content_len + 1,
                n_max,
            });
        }
        let start = ids.iter().position(|&i| Self::is_pronoun(i));
        let pronoun_span = match start {
            Some(s) => {
                let len = ids[s..].iter().take_while(|&&i| Self::is_pronoun(i)).count();
                s..s + len
            }
            None => 0..0,
        };
        ids.resize(n_max, Self::PAD);
        Ok(Tokenized {
            ids,
            content_len,
            pronoun_span,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_phrases(["sit comfortably on", "chair", "bed"])
    }

    #[test]
    fn reserved_ids_are_stable() {
        let v = vocab();
        for (i, r) in Vocabulary::RESERVED.iter().enumerate() {
            assert_eq!(v.token(i), Some(*r));
        }
        assert_eq!(v.len(), 6 + 5);
        let other = Vocabulary::from_phrases(["drink water with", "cup"]);
        assert_eq!(other.id("something").unwrap(), Vocabulary::SOMETHING);
    }

    #[test]
    fn pronoun_prompt_tokenizes_with_span() {
        let t = vocab().tokenize("sit comfortably on something", 8).unwrap();
        assert_eq!(t.content_len, 4);
        assert_eq!(t.pronoun_span, 3..4);
        assert_eq!(&t.ids[4..], &[Vocabulary::PAD; 4]);
    }

    #[test]
    fn empty_text_is_all_padding() {
        let t = vocab().tokenize("", 5).unwrap();
        assert_eq!(t.ids, vec![Vocabulary::PAD; 5]);
        assert_eq!(t.content_len, 0);
        assert!(t.pronoun_span.is_empty());
    }

    #[test]
    fn random_string_maps_to_reserved_token() {
        let v = vocab();
        let t = v.tokenize("sit comfortably on abcd", 8).unwrap();
        assert_eq!(t.ids[3], Vocabulary::RANDOM);
        assert_eq!(t.pronoun_span, 3..4);
        let v = vocab().with_random_string("qwer");
        assert!(v.tokenize("sit on abcd", 8).is_err());
        assert_eq!(v.tokenize("sit on qwer", 8).unwrap().ids[2], Vocabulary::RANDOM);
    }

    #[test]
    fn out_of_vocabulary_names_the_word() {
        assert_eq!(
            vocab().tokenize("sit on sofa", 8),
            Err(LangError::OutOfVocabulary("sofa".into()))
        );
        // markers cannot be typed
        assert!(vocab().tokenize("<pad>", 8).is_err());
    }

    #[test]
    fn too_long_reports_required_slots() {
        assert_eq!(
            vocab().tokenize("sit comfortably on chair", 4),
            Err(LangError::PromptTooLong { required: 5, n_max: 4 })
        );
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        let back = Vocabulary::parse(&v.to_file_string()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::parse("chair\n").is_err());
        let dup = format!("{}chair\n", v.to_file_string());
        assert!(Vocabulary::parse(&dup).is_err());
    }
}
