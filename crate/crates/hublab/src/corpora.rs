//! Deterministic generators for synthetic multi-data-type corpora.
//!
//! Two surface "languages" (A and B) share one abstract lexicon: every
//! lexeme has a single-token surface form in each language, and the two
//! alphabets are disjoint. Operators, punctuation, the begin-of-sequence
//! marker, and numerals `0..=20` are shared tokens belonging to neither
//! language, the way digit symbols co-occur with words in natural corpora.
//!
//! Three document families make up the training mixture:
//! - templated subject-verb-object sentences (optionally negated, with an
//!   optional polarity-carrying adjective or an alternative object),
//! - arithmetic equations `a = b op c` in numeral or word form,
//! - lists of nouns in code form `[ x , y , z ]`, prose form
//!   `x and y and z`, or a combo form `[ x , y ] = x and y` that pairs the
//!   two renderings of one list in a single document.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{HubError, Result};
use crate::rng;

pub const NUM_CONNECTIVES: usize = 3; // and, or, not
pub const N_SPECIALS: usize = 7; // <bos> = + * [ ] ,

const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen", "twenty",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataType {
    A,
    B,
}

impl DataType {
    pub fn label(self) -> &'static str {
        match self {
            DataType::A => "A",
            DataType::B => "B",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Noun,
    Verb,
    AdjPositive,
    AdjNegative,
    Number(u8),
    /// and / or / not. Not part of the sentence content vocabulary proper,
    /// but required by the prose-list rendering and as control tokens.
    Connective(u8),
    /// `=`, `+`, `*`: surface shared between languages.
    Operator(u8),
    /// `[`, `]`, `,`: surface shared between languages.
    Punctuation(u8),
}

#[derive(Debug, Clone)]
pub struct Lexeme {
    pub role: Role,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LexiconSizes {
    pub nouns: usize,
    pub verbs: usize,
    pub adj_pos: usize,
    pub adj_neg: usize,
    pub max_number: u8,
}

impl Default for LexiconSizes {
    fn default() -> Self {
        LexiconSizes {
            nouns: 40,
            verbs: 20,
            adj_pos: 10,
            adj_neg: 10,
            max_number: 20,
        }
    }
}

impl LexiconSizes {
    fn word_lexemes(&self) -> usize {
        self.nouns + self.verbs + self.adj_pos + self.adj_neg + self.max_number as usize + 1
            + NUM_CONNECTIVES
    }
}

/// Token-level metadata: which language a token belongs to, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    Numeral(u8),
    Word { lexeme: usize, lang: DataType },
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    pub seed: u64,
    pub sizes: LexiconSizes,
    lexemes: Vec<Lexeme>,
    vocab: Vec<String>,
    token_class: Vec<TokenClass>,
    lookup: HashMap<String, u32>,
    surface_a: Vec<u32>,
    surface_b: Vec<u32>,
    numeral_tok: Vec<u32>,
    pub bos: u32,
    pub eq: u32,
    pub plus: u32,
    pub times: u32,
    pub lbracket: u32,
    pub rbracket: u32,
    pub comma: u32,
}

fn pseudoword(rng: &mut rand_chacha::ChaCha8Rng, syllables: usize) -> String {
    const ONSETS: [&str; 14] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
    ];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    w
}

/// Deterministic lexicon construction. Surface tokens carry language
/// prefixes (`a_`, `b_`) so the two alphabets are visibly disjoint.
pub fn build_lexicon(seed: u64, sizes: LexiconSizes) -> Lexicon {
    let mut lexemes = Vec::new();
    for i in 0..sizes.nouns {
        lexemes.push(Lexeme {
            role: Role::Noun,
            name: format!("noun{i:02}"),
        });
    }
    for i in 0..sizes.verbs {
        lexemes.push(Lexeme {
            role: Role::Verb,
            name: format!("verb{i:02}"),
        });
    }
    for i in 0..sizes.adj_pos {
        lexemes.push(Lexeme {
            role: Role::AdjPositive,
            name: format!("adjpos{i:02}"),
        });
    }
    for i in 0..sizes.adj_neg {
        lexemes.push(Lexeme {
            role: Role::AdjNegative,
            name: format!("adjneg{i:02}"),
        });
    }
    for v in 0..=sizes.max_number {
        lexemes.push(Lexeme {
            role: Role::Number(v),
            name: NUMBER_WORDS[v as usize].to_string(),
        });
    }
    for (i, name) in ["and", "or", "not"].iter().enumerate() {
        lexemes.push(Lexeme {
            role: Role::Connective(i as u8),
            name: (*name).to_string(),
        });
    }
    let n_words = lexemes.len();
    for (i, name) in ["=", "+", "*"].iter().enumerate() {
        lexemes.push(Lexeme {
            role: Role::Operator(i as u8),
            name: (*name).to_string(),
        });
    }
    for (i, name) in ["[", "]", ","].iter().enumerate() {
        lexemes.push(Lexeme {
            role: Role::Punctuation(i as u8),
            name: (*name).to_string(),
        });
    }

    // Unique word stems per lexeme, shared across the two languages so a
    // pair like a_velu / b_velu is visibly a translation pair.
    let mut r = rng::stream(seed, "lexicon/stems");
    let mut stems: Vec<String> = Vec::with_capacity(n_words);
    let mut used = HashSet::new();
    for lex in lexemes.iter().take(n_words) {
        let stem = match lex.role {
            Role::Number(_) | Role::Connective(_) => lex.name.clone(),
            _ => loop {
                let syl = 2 + (r.random_range(0..2u8) as usize);
                let cand = pseudoword(&mut r, syl);
                if used.insert(cand.clone()) {
                    break cand;
                }
            },
        };
        used.insert(stem.clone());
        stems.push(stem);
    }

    let mut vocab = Vec::new();
    let mut token_class = Vec::new();
    for s in ["<bos>", "=", "+", "*", "[", "]", ","] {
        vocab.push(s.to_string());
        token_class.push(TokenClass::Special);
    }
    let mut numeral_tok = Vec::new();
    for v in 0..=sizes.max_number {
        numeral_tok.push(vocab.len() as u32);
        vocab.push(format!("{v}"));
        token_class.push(TokenClass::Numeral(v));
    }
    let mut surface_a = vec![0u32; lexemes.len()];
    let mut surface_b = vec![0u32; lexemes.len()];
    for (i, stem) in stems.iter().enumerate() {
        surface_a[i] = vocab.len() as u32;
        vocab.push(format!("a_{stem}"));
        token_class.push(TokenClass::Word {
            lexeme: i,
            lang: DataType::A,
        });
    }
    for (i, stem) in stems.iter().enumerate() {
        surface_b[i] = vocab.len() as u32;
        vocab.push(format!("b_{stem}"));
        token_class.push(TokenClass::Word {
            lexeme: i,
            lang: DataType::B,
        });
    }
    // Operator and punctuation lexemes surface as the shared specials.
    for (i, lex) in lexemes.iter().enumerate().skip(n_words) {
        let tok = match lex.role {
            Role::Operator(k) => 1 + k as u32,
            Role::Punctuation(k) => 4 + k as u32,
            _ => unreachable!(),
        };
        surface_a[i] = tok;
        surface_b[i] = tok;
    }

    let lookup = vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();
    Lexicon {
        seed,
        sizes,
        lexemes,
        vocab,
        token_class,
        lookup,
        surface_a,
        surface_b,
        numeral_tok,
        bos: 0,
        eq: 1,
        plus: 2,
        times: 3,
        lbracket: 4,
        rbracket: 5,
        comma: 6,
    }
}

impl Lexicon {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token_str(&self, tok: u32) -> &str {
        &self.vocab[tok as usize]
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn token_id(&self, s: &str) -> Result<u32> {
        self.lookup
            .get(s)
            .copied()
            .ok_or_else(|| HubError::lexicon(format!("unknown token `{s}`")))
    }

    pub fn token_class(&self, tok: u32) -> TokenClass {
        self.token_class[tok as usize]
    }

    pub fn token_language(&self, tok: u32) -> Option<DataType> {
        match self.token_class(tok) {
            TokenClass::Word { lang, .. } => Some(lang),
            _ => None,
        }
    }

    pub fn n_lexemes(&self) -> usize {
        self.lexemes.len()
    }

    pub fn lexeme(&self, id: usize) -> &Lexeme {
        &self.lexemes[id]
    }

    /// Single surface token of a lexeme in one language (word form for
    /// numbers).
    pub fn surface(&self, lexeme: usize, dt: DataType) -> Result<u32> {
        let table = match dt {
            DataType::A => &self.surface_a,
            DataType::B => &self.surface_b,
        };
        table.get(lexeme).copied().ok_or_else(|| {
            HubError::lexicon(format!("lexeme {lexeme} has no {} surface", dt.label()))
        })
    }

    pub fn numeral_token(&self, value: u8) -> Result<u32> {
        self.numeral_tok
            .get(value as usize)
            .copied()
            .ok_or_else(|| HubError::lexicon(format!("no numeral token for {value}")))
    }

    pub fn number_lexeme(&self, value: u8) -> usize {
        let base = self.sizes.nouns + self.sizes.verbs + self.sizes.adj_pos + self.sizes.adj_neg;
        base + value as usize
    }

    fn connective(&self, k: usize) -> usize {
        self.sizes.nouns
            + self.sizes.verbs
            + self.sizes.adj_pos
            + self.sizes.adj_neg
            + self.sizes.max_number as usize
            + 1
            + k
    }

    pub fn and_lexeme(&self) -> usize {
        self.connective(0)
    }
    pub fn or_lexeme(&self) -> usize {
        self.connective(1)
    }
    pub fn not_lexeme(&self) -> usize {
        self.connective(2)
    }

    pub fn nouns(&self) -> std::ops::Range<usize> {
        0..self.sizes.nouns
    }
    pub fn verbs(&self) -> std::ops::Range<usize> {
        self.sizes.nouns..self.sizes.nouns + self.sizes.verbs
    }
    pub fn adj_pos(&self) -> std::ops::Range<usize> {
        let s = self.sizes.nouns + self.sizes.verbs;
        s..s + self.sizes.adj_pos
    }
    pub fn adj_neg(&self) -> std::ops::Range<usize> {
        let s = self.sizes.nouns + self.sizes.verbs + self.sizes.adj_pos;
        s..s + self.sizes.adj_neg
    }

    /// Lexeme of a token. `<bos>` is the only token without one.
    pub fn token_lexeme(&self, tok: u32) -> Option<usize> {
        match self.token_class(tok) {
            TokenClass::Word { lexeme, .. } => Some(lexeme),
            TokenClass::Numeral(v) => Some(self.number_lexeme(v)),
            // Operator and punctuation lexemes sit after the word lexemes in
            // the same order as their special tokens (= + * [ ] ,).
            TokenClass::Special if tok >= 1 && tok <= 6 => {
                Some(self.sizes.word_lexemes() + (tok as usize - 1))
            }
            TokenClass::Special => None,
        }
    }
}

// ── rendering ───────────────────────────────────────────────────────────

/// Word-form rendering: one surface token per lexeme, prefixed by the
/// data-type-neutral begin-of-sequence token.
pub fn render(lex: &Lexicon, lexemes: &[usize], dt: DataType) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(lexemes.len() + 1);
    out.push(lex.bos);
    for &l in lexemes {
        out.push(lex.surface(l, dt)?);
    }
    Ok(out)
}

/// Numeral-form rendering: numbers become shared numeral tokens; operators
/// and punctuation keep their shared surfaces. Other roles are not
/// expressible in numeral form.
pub fn render_numeric(lex: &Lexicon, lexemes: &[usize]) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(lexemes.len() + 1);
    out.push(lex.bos);
    for &l in lexemes {
        match lex.lexeme(l).role {
            Role::Number(v) => out.push(lex.numeral_token(v)?),
            Role::Operator(_) | Role::Punctuation(_) => out.push(lex.surface(l, DataType::A)?),
            other => {
                return Err(HubError::lexicon(format!(
                    "role {other:?} has no numeral-form surface"
                )))
            }
        }
    }
    Ok(out)
}

/// Invert a rendering (with or without the leading BOS) back to lexemes.
pub fn invert(lex: &Lexicon, tokens: &[u32]) -> Result<Vec<usize>> {
    let body = if tokens.first() == Some(&lex.bos) {
        &tokens[1..]
    } else {
        tokens
    };
    body.iter()
        .map(|&t| {
            lex.token_lexeme(t)
                .ok_or_else(|| HubError::lexicon(format!("token {t} has no lexeme")))
        })
        .collect()
}

// ── sentences ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// noun verb noun
    Plain,
    /// noun verb adjective noun
    Adjective,
    /// noun not verb noun
    Negated,
    /// noun verb noun or noun
    Alternative,
}

pub const TEMPLATE_WEIGHTS: [(Template, f64); 4] = [
    (Template::Plain, 0.35),
    (Template::Adjective, 0.40),
    (Template::Negated, 0.125),
    (Template::Alternative, 0.125),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

#[derive(Debug, Clone)]
pub struct Sentence {
    pub lexemes: Vec<usize>,
    pub template: Template,
    pub polarity: Polarity,
}

fn pick(rng: &mut rand_chacha::ChaCha8Rng, range: std::ops::Range<usize>) -> usize {
    rng.random_range(range)
}

fn gen_sentence_with(lex: &Lexicon, rng: &mut rand_chacha::ChaCha8Rng) -> Sentence {
    let roll: f64 = rng.random();
    let mut acc = 0.0;
    let mut template = Template::Plain;
    for (t, w) in TEMPLATE_WEIGHTS {
        acc += w;
        if roll < acc {
            template = t;
            break;
        }
    }
    let subject = pick(rng, lex.nouns());
    let verb = pick(rng, lex.verbs());
    let object = pick(rng, lex.nouns());
    match template {
        Template::Plain => Sentence {
            lexemes: vec![subject, verb, object],
            template,
            polarity: Polarity::Neutral,
        },
        Template::Adjective => {
            let n_adj = lex.sizes.adj_pos + lex.sizes.adj_neg;
            let a = lex.adj_pos().start + rng.random_range(0..n_adj);
            let polarity = if lex.adj_pos().contains(&a) {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            Sentence {
                lexemes: vec![subject, verb, a, object],
                template,
                polarity,
            }
        }
        Template::Negated => Sentence {
            lexemes: vec![subject, lex.not_lexeme(), verb, object],
            template,
            polarity: Polarity::Neutral,
        },
        Template::Alternative => {
            let second = pick(rng, lex.nouns());
            Sentence {
                lexemes: vec![subject, verb, object, lex.or_lexeme(), second],
                template,
                polarity: Polarity::Neutral,
            }
        }
    }
}

/// Deterministic templated sentences.
pub fn gen_sentences(lex: &Lexicon, grammar_seed: u64, n: usize) -> Vec<Sentence> {
    let mut r = rng::stream(grammar_seed, "corpora/sentences");
    (0..n).map(|_| gen_sentence_with(lex, &mut r)).collect()
}

/// Grammar checker used by tests and the holdout machinery: returns the
/// template a lexeme sequence instantiates, if any.
pub fn parse_sentence(lex: &Lexicon, lexemes: &[usize]) -> Option<Template> {
    let role = |i: usize| lex.lexeme(lexemes[i]).role;
    match lexemes.len() {
        3 => (matches!(role(0), Role::Noun)
            && matches!(role(1), Role::Verb)
            && matches!(role(2), Role::Noun))
        .then_some(Template::Plain),
        4 => {
            if matches!(role(0), Role::Noun)
                && matches!(role(1), Role::Verb)
                && matches!(role(2), Role::AdjPositive | Role::AdjNegative)
                && matches!(role(3), Role::Noun)
            {
                Some(Template::Adjective)
            } else if matches!(role(0), Role::Noun)
                && lexemes[1] == lex.not_lexeme()
                && matches!(role(2), Role::Verb)
                && matches!(role(3), Role::Noun)
            {
                Some(Template::Negated)
            } else {
                None
            }
        }
        5 => (matches!(role(0), Role::Noun)
            && matches!(role(1), Role::Verb)
            && matches!(role(2), Role::Noun)
            && lexemes[3] == lex.or_lexeme()
            && matches!(role(4), Role::Noun))
        .then_some(Template::Alternative),
        _ => None,
    }
}

// ── arithmetic ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArithOp {
    Add,
    Mul,
}

impl ArithOp {
    fn apply(self, b: u8, c: u8) -> u16 {
        match self {
            ArithOp::Add => u16::from(b) + u16::from(c),
            ArithOp::Mul => u16::from(b) * u16::from(c),
        }
    }
}

/// `a = b op c` with `c` a single positive digit and all values holding
/// single-token word forms (`<= max_number`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ArithmeticItem {
    pub a: u8,
    pub b: u8,
    pub c: u8,
    pub op: ArithOp,
}

impl ArithmeticItem {
    fn op_lexeme(&self, lex: &Lexicon) -> usize {
        let base = lex.sizes.word_lexemes();
        match self.op {
            ArithOp::Add => base + 1,
            ArithOp::Mul => base + 2,
        }
    }

    /// `a = b op c` as lexemes.
    pub fn equation_lexemes(&self, lex: &Lexicon) -> Vec<usize> {
        vec![
            lex.number_lexeme(self.a),
            lex.sizes.word_lexemes(), // "=" lexeme
            lex.number_lexeme(self.b),
            self.op_lexeme(lex),
            lex.number_lexeme(self.c),
        ]
    }

    /// Right-hand side `b op c` as lexemes.
    pub fn rhs_lexemes(&self, lex: &Lexicon) -> Vec<usize> {
        vec![
            lex.number_lexeme(self.b),
            self.op_lexeme(lex),
            lex.number_lexeme(self.c),
        ]
    }

    /// `a = b op` as lexemes: everything up to (and including) the operator,
    /// so the unique valid continuation is `c`.
    pub fn prefix_lexemes(&self, lex: &Lexicon) -> Vec<usize> {
        let mut eq = self.equation_lexemes(lex);
        eq.pop();
        eq
    }
}

/// All valid items under the word-form cap.
pub fn enumerate_arithmetic(ops: &[ArithOp], max_value: u8) -> Vec<ArithmeticItem> {
    let mut out = Vec::new();
    for &op in ops {
        for b in 0..=max_value {
            for c in 1..=9u8 {
                let a = op.apply(b, c);
                if a <= u16::from(max_value) {
                    out.push(ArithmeticItem {
                        a: a as u8,
                        b,
                        c,
                        op,
                    });
                }
            }
        }
    }
    out
}

/// Uniformly sampled valid items; duplicate-free whenever `n` does not
/// exceed the number of distinct valid triples.
pub fn gen_arithmetic(n: usize, ops: &[ArithOp], seed: u64) -> Vec<ArithmeticItem> {
    let mut all = enumerate_arithmetic(ops, LexiconSizes::default().max_number);
    let mut r = rng::stream(seed, "corpora/arithmetic");
    all.shuffle(&mut r);
    if n <= all.len() {
        all.truncate(n);
        all
    } else {
        let mut out = all.clone();
        while out.len() < n {
            out.push(all[r.random_range(0..all.len())]);
        }
        out
    }
}

// ── lists ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ListItem {
    pub elements: Vec<usize>,
}

/// Noun lists of length 2..=5.
pub fn gen_lists(n: usize, seed: u64, lex: &Lexicon) -> Vec<ListItem> {
    let mut r = rng::stream(seed, "corpora/lists");
    (0..n)
        .map(|_| {
            let len = r.random_range(2..=5usize);
            ListItem {
                elements: (0..len).map(|_| pick(&mut r, lex.nouns())).collect(),
            }
        })
        .collect()
}

/// `[ x , y , z ]` with elements in the given language.
pub fn render_list_code(lex: &Lexicon, item: &ListItem, dt: DataType) -> Result<Vec<u32>> {
    let mut out = vec![lex.bos, lex.lbracket];
    for (i, &e) in item.elements.iter().enumerate() {
        if i > 0 {
            out.push(lex.comma);
        }
        out.push(lex.surface(e, dt)?);
    }
    out.push(lex.rbracket);
    Ok(out)
}

/// `x and y and z` with the language's own connective.
pub fn render_list_prose(lex: &Lexicon, item: &ListItem, dt: DataType) -> Result<Vec<u32>> {
    let and = lex.surface(lex.and_lexeme(), dt)?;
    let mut out = vec![lex.bos];
    for (i, &e) in item.elements.iter().enumerate() {
        if i > 0 {
            out.push(and);
        }
        out.push(lex.surface(e, dt)?);
    }
    Ok(out)
}

/// `[ x , y ] = x and y`: the code rendering, an equals sign, then the
/// prose rendering of the same list.
pub fn render_list_combo(lex: &Lexicon, item: &ListItem, dt: DataType) -> Result<Vec<u32>> {
    let mut out = render_list_code(lex, item, dt)?;
    out.push(lex.eq);
    let prose = render_list_prose(lex, item, dt)?;
    out.extend_from_slice(&prose[1..]);
    Ok(out)
}

/// Cloze prefix of the combo form: `[ x , y ] =` plus the position of the
/// first element inside the brackets.
pub fn list_cloze_prefix(
    lex: &Lexicon,
    item: &ListItem,
    dt: DataType,
) -> Result<(Vec<u32>, usize)> {
    let mut out = render_list_code(lex, item, dt)?;
    out.push(lex.eq);
    Ok((out, 2))
}

/// Positions of comma tokens in a rendered sequence.
pub fn comma_positions(lex: &Lexicon, tokens: &[u32]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| (t == lex.comma).then_some(i))
        .collect()
}

// ── mixture and stream ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MixtureConfig {
    /// Fraction of language-bearing documents rendered in data type A.
    pub dominant_ratio: f64,
    pub sentence_weight: f64,
    pub arithmetic_weight: f64,
    pub list_weight: f64,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            dominant_ratio: 0.9,
            sentence_weight: 0.55,
            arithmetic_weight: 0.30,
            list_weight: 0.15,
            seed: 0,
        }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dominant_ratio) {
            return Err(HubError::usage(format!(
                "dominant_ratio {} outside [0, 1]",
                self.dominant_ratio
            )));
        }
        let sum = self.sentence_weight + self.arithmetic_weight + self.list_weight;
        if [self.sentence_weight, self.arithmetic_weight, self.list_weight]
            .iter()
            .any(|w| *w < 0.0)
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(HubError::usage(format!(
                "task weights must be nonnegative and sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

pub fn hash_lexemes(lexemes: &[usize]) -> u64 {
    let mut bytes = Vec::with_capacity(lexemes.len() * 8);
    for &l in lexemes {
        bytes.extend_from_slice(&(l as u64).to_le_bytes());
    }
    rng::fnv1a(&bytes)
}

/// Same abstract sentence rendered in both languages.
#[derive(Debug, Clone)]
pub struct ParallelPair {
    pub lexemes: Vec<usize>,
    pub a_tokens: Vec<u32>,
    pub b_tokens: Vec<u32>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalSuite {
    pub pairs: Vec<ParallelPair>,
    pub holdout: HashSet<u64>,
}

/// Held-out parallel sentence pairs, deduplicated by lexeme-sequence hash.
pub fn gen_eval_suite(lex: &Lexicon, seed: u64, n_pairs: usize) -> Result<EvalSuite> {
    let mut r = rng::stream(seed, "corpora/eval-pairs");
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut holdout = HashSet::new();
    let mut guard = 0usize;
    while pairs.len() < n_pairs {
        guard += 1;
        if guard > n_pairs * 1000 {
            return Err(HubError::usage(
                "could not generate enough distinct eval pairs",
            ));
        }
        let s = gen_sentence_with(lex, &mut r);
        let h = hash_lexemes(&s.lexemes);
        if !holdout.insert(h) {
            continue;
        }
        pairs.push(ParallelPair {
            a_tokens: render(lex, &s.lexemes, DataType::A)?,
            b_tokens: render(lex, &s.lexemes, DataType::B)?,
            lexemes: s.lexemes,
        });
    }
    Ok(EvalSuite { pairs, holdout })
}

/// Category labels used in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DocKind {
    SentA,
    SentB,
    ArithNumeral,
    ArithWordA,
    ArithWordB,
    ListA,
    ListB,
}

impl DocKind {
    pub fn label(self) -> &'static str {
        match self {
            DocKind::SentA => "sentence_a",
            DocKind::SentB => "sentence_b",
            DocKind::ArithNumeral => "arith_numeral",
            DocKind::ArithWordA => "arith_word_a",
            DocKind::ArithWordB => "arith_word_b",
            DocKind::ListA => "list_a",
            DocKind::ListB => "list_b",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct StreamManifest {
    pub docs: HashMap<&'static str, usize>,
    pub tokens: HashMap<&'static str, usize>,
    pub total_tokens: usize,
    pub total_docs: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingStream {
    pub docs: Vec<Vec<u32>>,
    pub manifest: StreamManifest,
}

/// Interleaved document stream totalling at least `n_tokens` tokens.
/// Documents whose lexeme-sequence hash is in `holdout` never appear.
pub fn build_training_stream(
    mix: &MixtureConfig,
    lex: &Lexicon,
    n_tokens: usize,
    holdout: &HashSet<u64>,
) -> Result<TrainingStream> {
    mix.validate()?;
    let mut task_rng = rng::stream(mix.seed, "stream/tasks");
    let mut sent_rng = rng::stream(mix.seed, "stream/sentences");
    let mut arith_rng = rng::stream(mix.seed, "stream/arithmetic");
    let mut list_rng = rng::stream(mix.seed, "stream/lists");

    let arith_items = enumerate_arithmetic(&[ArithOp::Add, ArithOp::Mul], lex.sizes.max_number);
    let mut docs = Vec::new();
    let mut manifest = StreamManifest::default();
    let mut total = 0usize;

    while total < n_tokens {
        let roll: f64 = task_rng.random();
        let (kind, tokens) = if roll < mix.sentence_weight {
            let lang = if task_rng.random::<f64>() < mix.dominant_ratio {
                DataType::A
            } else {
                DataType::B
            };
            let mut s = gen_sentence_with(lex, &mut sent_rng);
            let mut guard = 0;
            while holdout.contains(&hash_lexemes(&s.lexemes)) {
                s = gen_sentence_with(lex, &mut sent_rng);
                guard += 1;
                if guard > 10_000 {
                    return Err(HubError::usage("holdout set rejects all sentences"));
                }
            }
            let kind = match lang {
                DataType::A => DocKind::SentA,
                DataType::B => DocKind::SentB,
            };
            (kind, render(lex, &s.lexemes, lang)?)
        } else if roll < mix.sentence_weight + mix.arithmetic_weight {
            let item = arith_items[arith_rng.random_range(0..arith_items.len())];
            let eq = item.equation_lexemes(lex);
            if arith_rng.random::<f64>() < 0.5 {
                (DocKind::ArithNumeral, render_numeric(lex, &eq)?)
            } else {
                let lang = if arith_rng.random::<f64>() < mix.dominant_ratio {
                    DataType::A
                } else {
                    DataType::B
                };
                let kind = match lang {
                    DataType::A => DocKind::ArithWordA,
                    DataType::B => DocKind::ArithWordB,
                };
                (kind, render(lex, &eq, lang)?)
            }
        } else {
            let lang = if list_rng.random::<f64>() < mix.dominant_ratio {
                DataType::A
            } else {
                DataType::B
            };
            let len = list_rng.random_range(2..=5usize);
            let item = ListItem {
                elements: (0..len).map(|_| pick(&mut list_rng, lex.nouns())).collect(),
            };
            let form: u8 = list_rng.random_range(0..3);
            let tokens = match form {
                0 => render_list_code(lex, &item, lang)?,
                1 => render_list_prose(lex, &item, lang)?,
                _ => render_list_combo(lex, &item, lang)?,
            };
            let kind = match lang {
                DataType::A => DocKind::ListA,
                DataType::B => DocKind::ListB,
            };
            (kind, tokens)
        };
        total += tokens.len();
        manifest.total_tokens += tokens.len();
        manifest.total_docs += 1;
        *manifest.docs.entry(kind.label()).or_insert(0) += 1;
        *manifest.tokens.entry(kind.label()).or_insert(0) += tokens.len();
        docs.push(tokens);
    }
    Ok(TrainingStream { docs, manifest })
}

// ── corpus directory io ─────────────────────────────────────────────────

/// Everything the trainer and the analyses need, as loaded from (or written
/// to) a corpus directory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub lexicon: Lexicon,
    pub mixture: MixtureConfig,
    pub train_docs: Vec<Vec<u32>>,
    pub eval: EvalSuite,
    pub manifest: StreamManifest,
}

pub const N_EVAL_PAIRS_DEFAULT: usize = 600;

/// Generate a complete corpus in memory: lexicon, held-out eval pairs, and
/// a training stream that excludes them.
pub fn generate_corpus(
    mix: &MixtureConfig,
    sizes: LexiconSizes,
    n_tokens: usize,
    n_eval_pairs: usize,
) -> Result<Corpus> {
    let lexicon = build_lexicon(mix.seed, sizes);
    let eval = gen_eval_suite(&lexicon, mix.seed, n_eval_pairs)?;
    let stream = build_training_stream(mix, &lexicon, n_tokens, &eval.holdout)?;
    Ok(Corpus {
        lexicon,
        mixture: mix.clone(),
        train_docs: stream.docs,
        eval,
        manifest: stream.manifest,
    })
}

fn doc_to_line(lex: &Lexicon, doc: &[u32]) -> String {
    doc.iter()
        .map(|&t| lex.token_str(t))
        .collect::<Vec<_>>()
        .join(" ")
}

fn line_to_doc(lex: &Lexicon, line: &str) -> Result<Vec<u32>> {
    line.split_whitespace().map(|s| lex.token_id(s)).collect()
}

/// Write `vocab.txt`, `train.txt`, `pairs_a.txt`, `pairs_b.txt`, and
/// `manifest.txt` under `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HubError::io(dir.display().to_string(), e))?;
    let write_lines = |name: &str, lines: &mut dyn Iterator<Item = String>| -> Result<()> {
        let path = dir.join(name);
        let f = std::fs::File::create(&path)
            .map_err(|e| HubError::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(f);
        for line in lines {
            writeln!(w, "{line}").map_err(|e| HubError::io(path.display().to_string(), e))?;
        }
        w.flush().map_err(|e| HubError::io(path.display().to_string(), e))
    };
    let lex = &corpus.lexicon;
    write_lines("vocab.txt", &mut lex.vocab().iter().cloned())?;
    write_lines(
        "train.txt",
        &mut corpus.train_docs.iter().map(|d| doc_to_line(lex, d)),
    )?;
    write_lines(
        "pairs_a.txt",
        &mut corpus.eval.pairs.iter().map(|p| doc_to_line(lex, &p.a_tokens)),
    )?;
    write_lines(
        "pairs_b.txt",
        &mut corpus.eval.pairs.iter().map(|p| doc_to_line(lex, &p.b_tokens)),
    )?;

    let mut kv: Vec<(String, String)> = vec![
        ("lexicon_seed".into(), lex.seed.to_string()),
        ("nouns".into(), lex.sizes.nouns.to_string()),
        ("verbs".into(), lex.sizes.verbs.to_string()),
        ("adj_pos".into(), lex.sizes.adj_pos.to_string()),
        ("adj_neg".into(), lex.sizes.adj_neg.to_string()),
        ("max_number".into(), lex.sizes.max_number.to_string()),
        (
            "dominant_ratio".into(),
            corpus.mixture.dominant_ratio.to_string(),
        ),
        (
            "sentence_weight".into(),
            corpus.mixture.sentence_weight.to_string(),
        ),
        (
            "arithmetic_weight".into(),
            corpus.mixture.arithmetic_weight.to_string(),
        ),
        ("list_weight".into(), corpus.mixture.list_weight.to_string()),
        ("seed".into(), corpus.mixture.seed.to_string()),
        (
            "total_tokens".into(),
            corpus.manifest.total_tokens.to_string(),
        ),
        ("total_docs".into(), corpus.manifest.total_docs.to_string()),
        ("vocab_size".into(), lex.vocab_size().to_string()),
    ];
    let mut kinds: Vec<&&str> = corpus.manifest.docs.keys().collect();
    kinds.sort();
    for k in kinds {
        kv.push((format!("docs_{k}"), corpus.manifest.docs[*k].to_string()));
        kv.push((format!("tokens_{k}"), corpus.manifest.tokens[*k].to_string()));
    }
    write_lines(
        "manifest.txt",
        &mut kv.iter().map(|(k, v)| format!("{k}={v}")),
    )
}

pub fn read_kv_file(path: &Path) -> Result<HashMap<String, String>> {
    let f = std::fs::File::open(path).map_err(|e| HubError::io(path.display().to_string(), e))?;
    let mut out = HashMap::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| HubError::io(path.display().to_string(), e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            HubError::format(format!("{}: bad key=value line `{line}`", path.display()))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn kv_parse<T: std::str::FromStr>(
    kv: &HashMap<String, String>,
    key: &str,
    origin: &Path,
) -> Result<T> {
    kv.get(key)
        .ok_or_else(|| HubError::format(format!("{}: missing key {key}", origin.display())))?
        .parse::<T>()
        .map_err(|_| HubError::format(format!("{}: bad value for {key}", origin.display())))
}

/// Load a corpus directory written by [`write_corpus`]. The lexicon is
/// rebuilt from the manifest seed and verified against `vocab.txt`.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join("manifest.txt");
    let kv = read_kv_file(&manifest_path)?;
    let sizes = LexiconSizes {
        nouns: kv_parse(&kv, "nouns", &manifest_path)?,
        verbs: kv_parse(&kv, "verbs", &manifest_path)?,
        adj_pos: kv_parse(&kv, "adj_pos", &manifest_path)?,
        adj_neg: kv_parse(&kv, "adj_neg", &manifest_path)?,
        max_number: kv_parse(&kv, "max_number", &manifest_path)?,
    };
    let lexicon_seed: u64 = kv_parse(&kv, "lexicon_seed", &manifest_path)?;
    let lexicon = build_lexicon(lexicon_seed, sizes);
    let mixture = MixtureConfig {
        dominant_ratio: kv_parse(&kv, "dominant_ratio", &manifest_path)?,
        sentence_weight: kv_parse(&kv, "sentence_weight", &manifest_path)?,
        arithmetic_weight: kv_parse(&kv, "arithmetic_weight", &manifest_path)?,
        list_weight: kv_parse(&kv, "list_weight", &manifest_path)?,
        seed: kv_parse(&kv, "seed", &manifest_path)?,
    };

    let vocab_path = dir.join("vocab.txt");
    let f = std::fs::File::open(&vocab_path)
        .map_err(|e| HubError::io(vocab_path.display().to_string(), e))?;
    let stored: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| HubError::io(vocab_path.display().to_string(), e))?;
    if stored != lexicon.vocab() {
        return Err(HubError::format(format!(
            "{}: vocabulary does not match the lexicon rebuilt from seed {lexicon_seed}",
            vocab_path.display()
        )));
    }

    let read_docs = |name: &str| -> Result<Vec<Vec<u32>>> {
        let path = dir.join(name);
        let f = std::fs::File::open(&path)
            .map_err(|e| HubError::io(path.display().to_string(), e))?;
        BufReader::new(f)
            .lines()
            .map(|line| {
                let line = line.map_err(|e| HubError::io(path.display().to_string(), e))?;
                line_to_doc(&lexicon, &line)
            })
            .collect()
    };
    let train_docs = read_docs("train.txt")?;
    let pairs_a = read_docs("pairs_a.txt")?;
    let pairs_b = read_docs("pairs_b.txt")?;
    if pairs_a.len() != pairs_b.len() {
        return Err(HubError::format(format!(
            "{}: pairs_a.txt and pairs_b.txt differ in length",
            dir.display()
        )));
    }
    let mut pairs = Vec::with_capacity(pairs_a.len());
    let mut holdout = HashSet::new();
    for (a, b) in pairs_a.into_iter().zip(pairs_b) {
        let lexemes = invert(&lexicon, &a)?;
        if invert(&lexicon, &b)? != lexemes {
            return Err(HubError::format(format!(
                "{}: pair renderings decode to different lexeme sequences",
                dir.display()
            )));
        }
        holdout.insert(hash_lexemes(&lexemes));
        pairs.push(ParallelPair {
            lexemes,
            a_tokens: a,
            b_tokens: b,
        });
    }
    let manifest = StreamManifest {
        total_tokens: kv_parse(&kv, "total_tokens", &manifest_path)?,
        total_docs: kv_parse(&kv, "total_docs", &manifest_path)?,
        ..StreamManifest::default()
    };
    Ok(Corpus {
        lexicon,
        mixture,
        train_docs,
        eval: EvalSuite { pairs, holdout },
        manifest,
    })
}
