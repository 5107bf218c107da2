use std::ops::Range;

use super::vocab::{Pronoun, Tokenized, Vocabulary};
use super::LangError;

/// Shape of a task description.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum PromptForm {
    /// "verb pronoun", the category-free student form.
    VerbPronoun(Pronoun),
    /// "verb category" phrases, one per target category (teacher form).
    VerbNoun,
    Empty,
}

impl PromptForm {
    pub fn is_empty(&self) -> bool {
        matches!(self, PromptForm::Empty)
    }
}

/// A tokenized task description with its span bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub text: String,
    pub form: PromptForm,
    pub tokens: Tokenized,
    /// Tokens of the first verb phrase. `verb_span.start` is the verb token.
    pub verb_span: Range<usize>,
    /// Object slot of each phrase: the pronoun, or one range per category.
    pub object_spans: Vec<Range<usize>>,
    /// Whole "verb object" phrase per object span.
    pub phrase_spans: Vec<Range<usize>>,
    /// Category names in phrase order (empty unless verb-noun).
    pub categories: Vec<String>,
}

impl Prompt {
    pub fn ids(&self) -> &[usize] {
        &self.tokens.ids
    }

    pub fn n_max(&self) -> usize {
        self.tokens.ids.len()
    }

    pub fn content_len(&self) -> usize {
        self.tokens.content_len
    }

    /// `true` for content positions, `false` for PAD.
    pub fn content_mask(&self) -> Vec<bool> {
        (0..self.n_max()).map(|i| i < self.content_len()).collect()
    }

    /// Index of the first verb token, if any.
    pub fn verb_index(&self) -> Option<usize> {
        (!self.verb_span.is_empty()).then_some(self.verb_span.start)
    }

    pub fn phrase_of(&self, category: &str) -> Option<&Range<usize>> {
        self.categories
            .iter()
            .position(|c| c == category)
            .map(|i| &self.phrase_spans[i])
    }

    fn empty(n_max: usize) -> Self {
        Self {
            text: String::new(),
            form: PromptForm::Empty,
            tokens: Tokenized {
                ids: vec![Vocabulary::PAD; n_max],
                content_len: 0,
                pronoun_span: 0..0,
            },
            verb_span: 0..0,
            object_spans: Vec::new(),
            phrase_spans: Vec::new(),
            categories: Vec::new(),
        }
    }
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Builds the task description for an image with `n_gt` targets.
///
/// Without targets the prompt is the null string. With targets, the
/// verb-noun form repeats "verb category" once per category and the
/// verb-pronoun form is "verb pronoun".
pub fn build_prompt(
    vocab: &Vocabulary,
    verb: &str,
    form: &PromptForm,
    categories: &[&str],
    n_gt: usize,
    n_max: usize,
) -> Result<Prompt, LangError> {
    if word_count(verb) == 0 {
        return Err(LangError::EmptyVerb);
    }
    let noun = matches!(form, PromptForm::VerbNoun);
    if (noun && n_gt > 0) != !categories.is_empty() {
        return Err(LangError::CategoryFormMismatch(format!(
            "{} categories for {:?} with n_gt={n_gt}",
            categories.len(),
            form
        )));
    }
    if n_gt == 0 || form.is_empty() {
        return Ok(Prompt::empty(n_max));
    }
    match form {
        PromptForm::VerbPronoun(p) => pronoun_prompt(vocab, verb, p, n_max),
        _ => noun_prompt(vocab, verb, categories, n_max),
    }
}

/// "verb pronoun" regardless of how many targets the image holds, so the
/// text carries no information about the target count.
pub fn pronoun_prompt(
    vocab: &Vocabulary,
    verb: &str,
    pronoun: &Pronoun,
    n_max: usize,
) -> Result<Prompt, LangError> {
    let verb_len = word_count(verb);
    if verb_len == 0 {
        return Err(LangError::EmptyVerb);
    }
    let verb = verb.split_whitespace().collect::<Vec<_>>().join(" ");
    let text = format!("{verb} {}", pronoun.word());
    let tokens = vocab.tokenize(&text, n_max)?;
    let object = verb_len..tokens.content_len;
    Ok(Prompt {
        text,
        form: PromptForm::VerbPronoun(pronoun.clone()),
        verb_span: 0..verb_len,
        object_spans: vec![object],
        phrase_spans: vec![0..tokens.content_len],
        categories: Vec::new(),
        tokens,
    })
}

fn noun_prompt(vocab: &Vocabulary, verb: &str, categories: &[&str], n_max: usize) -> Result<Prompt, LangError> {
    let verb_len = word_count(verb);
    let verb = verb.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut phrases = Vec::with_capacity(categories.len());
    let mut object_spans = Vec::with_capacity(categories.len());
    let mut phrase_spans = Vec::with_capacity(categories.len());
    let mut at = 0;
    for c in categories {
        let c_len = word_count(c);
        if c_len == 0 {
            return Err(LangError::CategoryFormMismatch("empty category name".into()));
        }
        phrases.push(format!("{verb} {}", c.split_whitespace().collect::<Vec<_>>().join(" ")));
        object_spans.push(at + verb_len..at + verb_len + c_len);
        phrase_spans.push(at..at + verb_len + c_len);
        at += verb_len + c_len;
    }
    let text = phrases.join(" ");
    let tokens = vocab.tokenize(&text, n_max)?;
    Ok(Prompt {
        text,
        form: PromptForm::VerbNoun,
        tokens,
        verb_span: 0..verb_len,
        object_spans,
        phrase_spans,
        categories: categories.iter().map(|c| c.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn vocab() -> Vocabulary {
        Vocabulary::from_phrases(["sit comfortably on", "drink water with", "chair", "bed", "wine glass", "cup"])
    }

    #[test]
    fn pronoun_form() {
        let p = build_prompt(&vocab(), "sit comfortably on", &PromptForm::VerbPronoun(Pronoun::Something), &[], 2, 32)
            .unwrap();
        assert_eq!(p.text, "sit comfortably on something");
        assert_eq!(p.tokens.pronoun_span, 3..4);
        assert_eq!(p.object_spans, vec![3..4]);
        assert_eq!(p.verb_span, 0..3);
        assert_eq!(p.verb_index(), Some(0));
    }

    #[test]
    fn null_string_without_targets() {
        for form in [PromptForm::VerbNoun, PromptForm::VerbPronoun(Pronoun::It), PromptForm::Empty] {
            let p = build_prompt(&vocab(), "sit comfortably on", &form, &[], 0, 8).unwrap();
            assert_eq!(p.form, PromptForm::Empty);
            assert_eq!(p.text, "");
            assert_eq!(p.ids(), &[Vocabulary::PAD; 8]);
            assert_eq!(p.verb_index(), None);
        }
    }

    #[test]
    fn multi_category_concatenation() {
        let p = build_prompt(&vocab(), "sit comfortably on", &PromptForm::VerbNoun, &["chair", "bed"], 3, 32).unwrap();
        assert_eq!(p.text, "sit comfortably on chair sit comfortably on bed");
        assert_eq!(p.object_spans, vec![3..4, 7..8]);
        assert_eq!(p.phrase_spans, vec![0..4, 4..8]);
        assert_eq!(p.phrase_of("bed"), Some(&(4..8)));
    }

    #[test]
    fn multi_token_category_span() {
        let p = build_prompt(&vocab(), "drink water with", &PromptForm::VerbNoun, &["wine glass"], 1, 32).unwrap();
        assert_eq!(p.object_spans, vec![3..5]);
        assert_eq!(p.content_len(), 5);
    }

    #[test]
    fn category_presence_must_match_form() {
        let v = vocab();
        assert!(build_prompt(&v, "sit comfortably on", &PromptForm::VerbNoun, &[], 1, 32).is_err());
        assert!(build_prompt(&v, "sit comfortably on", &PromptForm::VerbPronoun(Pronoun::It), &["bed"], 1, 32).is_err());
        assert!(build_prompt(&v, "sit comfortably on", &PromptForm::VerbNoun, &["bed"], 0, 32).is_err());
        assert_eq!(
            build_prompt(&v, "  ", &PromptForm::VerbNoun, &["bed"], 1, 32),
            Err(LangError::EmptyVerb)
        );
    }

    #[test]
    fn overlong_prompt_reports_required_length() {
        let err = build_prompt(&vocab(), "sit comfortably on", &PromptForm::VerbNoun, &["chair", "bed"], 2, 8).unwrap_err();
        assert_eq!(err, LangError::PromptTooLong { required: 9, n_max: 8 });
    }

    #[test]
    fn pronoun_prompt_ignores_target_count() {
        let v = vocab();
        let p = pronoun_prompt(&v, "drink water with", &Pronoun::Random("abcd".into()), 16).unwrap();
        assert_eq!(p.ids()[3], Vocabulary::RANDOM);
        assert_eq!(p.object_spans, vec![3..4]);
    }

    proptest! {
        #[test]
        fn injective_over_inputs(picks in proptest::collection::vec((0usize..2, 0usize..3, proptest::collection::btree_set(0usize..4, 1..4)), 1..20)) {
            let v = vocab();
            let verbs = ["sit comfortably on", "drink water with"];
            let cats = ["chair", "bed", "wine glass", "cup"];
            let forms = [PromptForm::VerbNoun, PromptForm::VerbPronoun(Pronoun::Something), PromptForm::VerbPronoun(Pronoun::Them)];
            let mut seen = HashSet::new();
            let mut texts = HashSet::new();
            for (vi, fi, cs) in picks {
                let cs: Vec<&str> = if fi == 0 { cs.iter().map(|&i| cats[i]).collect() } else { Vec::new() };
                let key = (vi, fi, cs.clone());
                let p = build_prompt(&v, verbs[vi], &forms[fi], &cs, 1, 32).unwrap();
                if seen.insert(key) {
                    prop_assert!(texts.insert(p.text.clone()), "collision on {}", p.text);
                }
                prop_assert!(!p.verb_span.is_empty());
                prop_assert_eq!(p.ids().len(), 32);
            }
        }
    }
}
