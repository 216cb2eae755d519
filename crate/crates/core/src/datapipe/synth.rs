use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use super::{split_sentences, CorpusDoc, Source};
use crate::depinject::WordVectors;
use crate::error::{io_err, Error, Result};
use crate::tasks::{Span, TaskDataset, TaskExample, TaskKind};
use crate::tokenizer::{basic_tokenize, Vocab, SPECIAL_TOKENS};

const BUILTIN_GRAMMAR: &str = include_str!("../../data/grammar.toml");

#[derive(Clone, Debug, Deserialize)]
pub struct Category {
    pub name: String,
    pub brands: Vec<String>,
    pub products: Vec<String>,
    pub attributes: Vec<String>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct IntentRule {
    pub name: String,
    pub prior: f64,
    /// Intent suggested after this one.
    pub next: String,
    /// Utterances come from the sentiment templates instead.
    #[serde(default)]
    pub feedback: bool,
    #[serde(default)]
    pub templates: Vec<String>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct SentimentRule {
    pub name: String,
    pub prior: f64,
    pub templates: Vec<String>,
}

/// Template grammar behind the synthetic corpus and task datasets.
#[derive(Clone, Debug, Deserialize)]
pub struct Grammar {
    pub quantities: Vec<String>,
    pub adjectives: Vec<String>,
    pub uses: Vec<String>,
    pub fillers: Vec<String>,
    pub description_templates: Vec<String>,
    pub title_templates: Vec<String>,
    pub categories: Vec<Category>,
    pub intents: Vec<IntentRule>,
    pub sentiments: Vec<SentimentRule>,
}

const PLACEHOLDERS: [&str; 7] = ["brand", "product", "quantity", "attribute", "adjective", "use", "filler"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum Role {
    Brand,
    Product,
    Quantity,
    Attribute,
    Filler,
    Adjective,
    Use,
    Literal,
}

impl Role {
    fn entity(self) -> Option<&'static str> {
        match self {
            Role::Brand => Some("brand"),
            Role::Product => Some("product"),
            Role::Quantity => Some("quantity"),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
struct Tok {
    text: String,
    role: Role,
    /// First token of a placeholder expansion.
    first: bool,
}

fn text_of(toks: &[Tok]) -> String {
    toks.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ")
}

fn pick<'a, R: Rng>(items: &'a [String], rng: &mut R) -> &'a str {
    &items[rng.random_range(0..items.len())]
}

fn pick_weighted<R: Rng>(weights: impl Iterator<Item = f64> + Clone, rng: &mut R) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
    }
    last
}

struct Item<'g> {
    category: &'g Category,
    brand: &'g str,
    product: &'g str,
}

struct Utterance {
    toks: Vec<Tok>,
    intent: usize,
    sentiment: Option<usize>,
}

impl Grammar {
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_GRAMMAR).expect("shipped grammar is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let g: Grammar = toml::from_str(text).map_err(|e| Error::Config(format!("grammar: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<()> {
        let nonempty = [
            ("quantities", self.quantities.len()),
            ("adjectives", self.adjectives.len()),
            ("uses", self.uses.len()),
            ("fillers", self.fillers.len()),
            ("description_templates", self.description_templates.len()),
            ("title_templates", self.title_templates.len()),
            ("categories", self.categories.len()),
            ("intents", self.intents.len()),
            ("sentiments", self.sentiments.len()),
        ];
        for (name, n) in nonempty {
            if n == 0 {
                return Err(Error::Config(format!("grammar: {name} is empty")));
            }
        }
        for c in &self.categories {
            if c.brands.is_empty() || c.products.is_empty() || c.attributes.is_empty() {
                return Err(Error::Config(format!("grammar: category {} has an empty list", c.name)));
            }
        }
        let check_priors = |what: &str, priors: Vec<f64>| -> Result<()> {
            let sum: f64 = priors.iter().sum();
            if priors.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!("grammar: {what} priors must be non-negative and sum to 1")));
            }
            Ok(())
        };
        check_priors("intent", self.intents.iter().map(|i| i.prior).collect())?;
        check_priors("sentiment", self.sentiments.iter().map(|s| s.prior).collect())?;
        for i in &self.intents {
            if !self.intents.iter().any(|j| j.name == i.next) {
                return Err(Error::Config(format!("grammar: intent {} suggests unknown {}", i.name, i.next)));
            }
            if !i.feedback && i.templates.is_empty() {
                return Err(Error::Config(format!("grammar: intent {} has no templates", i.name)));
            }
        }
        let templates = self
            .intents
            .iter()
            .flat_map(|i| &i.templates)
            .chain(self.sentiments.iter().flat_map(|s| &s.templates))
            .chain(&self.description_templates)
            .chain(&self.title_templates);
        for t in templates {
            for (_, slot) in parse_template(t)? {
                if let Some(name) = slot {
                    if !PLACEHOLDERS.contains(&name) {
                        return Err(Error::Config(format!("grammar: unknown placeholder {{{name}}} in {t:?}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn intent_names(&self) -> Vec<String> {
        self.intents.iter().map(|i| i.name.clone()).collect()
    }

    pub fn sentiment_names(&self) -> Vec<String> {
        self.sentiments.iter().map(|s| s.name.clone()).collect()
    }

    fn intent_index(&self, name: &str) -> usize {
        self.intents.iter().position(|i| i.name == name).expect("validated")
    }

    fn item<R: Rng>(&self, rng: &mut R) -> Item<'_> {
        let category = &self.categories[rng.random_range(0..self.categories.len())];
        Item {
            category,
            brand: pick(&category.brands, rng),
            product: pick(&category.products, rng),
        }
    }

    fn render<R: Rng>(&self, template: &str, item: &Item, rng: &mut R) -> Vec<Tok> {
        let mut out = Vec::new();
        for (literal, slot) in parse_template(template).expect("validated") {
            let (value, role) = match slot {
                None => (literal, Role::Literal),
                Some("brand") => (item.brand, Role::Brand),
                Some("product") => (item.product, Role::Product),
                Some("quantity") => (pick(&self.quantities, rng), Role::Quantity),
                Some("attribute") => (pick(&item.category.attributes, rng), Role::Attribute),
                Some("adjective") => (pick(&self.adjectives, rng), Role::Adjective),
                Some("use") => (pick(&self.uses, rng), Role::Use),
                Some(_) => (pick(&self.fillers, rng), Role::Filler),
            };
            for (k, w) in basic_tokenize(value).into_iter().enumerate() {
                out.push(Tok {
                    text: w,
                    role,
                    first: k == 0 || role == Role::Literal,
                });
            }
        }
        out
    }

    fn sample_intent<R: Rng>(&self, rng: &mut R) -> usize {
        pick_weighted(self.intents.iter().map(|i| i.prior), rng)
    }

    fn utterance<R: Rng>(&self, intent: usize, rng: &mut R) -> Utterance {
        let item = self.item(rng);
        let rule = &self.intents[intent];
        if rule.feedback {
            let s = pick_weighted(self.sentiments.iter().map(|s| s.prior), rng);
            let template = pick(&self.sentiments[s].templates, rng);
            Utterance {
                toks: self.render(template, &item, rng),
                intent,
                sentiment: Some(s),
            }
        } else {
            let template = pick(&rule.templates, rng);
            Utterance {
                toks: self.render(template, &item, rng),
                intent,
                sentiment: None,
            }
        }
    }

    /// Intent sequence following the flow rules with probability `follow`.
    fn conversation<R: Rng>(&self, turns: usize, follow: f64, rng: &mut R) -> Vec<Utterance> {
        let mut out = Vec::with_capacity(turns);
        let mut intent = self.sample_intent(rng);
        for _ in 0..turns {
            out.push(self.utterance(intent, rng));
            intent = if rng.random_bool(follow) {
                self.intent_index(&self.intents[intent].next)
            } else {
                self.sample_intent(rng)
            };
        }
        out
    }

    fn title<R: Rng>(&self, item: &Item, rng: &mut R) -> Vec<Tok> {
        let template = pick(&self.title_templates, rng);
        self.render(template, item, rng)
    }

    fn catalog_doc<R: Rng>(&self, doc_id: String, rng: &mut R) -> CorpusDoc {
        let item = self.item(rng);
        let mut sentences = vec![text_of(&self.title(&item, rng))];
        let n = rng.random_range(2..=4).min(self.description_templates.len());
        let mut chosen: Vec<usize> = (0..self.description_templates.len()).collect();
        for i in 0..n {
            let j = rng.random_range(i..chosen.len());
            chosen.swap(i, j);
        }
        let paragraph = chosen[..n]
            .iter()
            .map(|&t| text_of(&self.render(&self.description_templates[t], &item, rng)))
            .collect::<Vec<_>>()
            .join(" ");
        sentences.extend(split_sentences(&paragraph));
        CorpusDoc {
            doc_id,
            source: Source::Catalog,
            sentences,
        }
    }

    fn chat_doc<R: Rng>(&self, doc_id: String, rng: &mut R) -> CorpusDoc {
        let turns = rng.random_range(3..=6);
        CorpusDoc {
            doc_id,
            source: Source::Chat,
            sentences: self.conversation(turns, 0.6, rng).iter().map(|u| text_of(&u.toks)).collect(),
        }
    }

    /// Every whole word the grammar can emit.
    pub fn words(&self) -> BTreeSet<String> {
        let mut texts: Vec<&String> = Vec::new();
        texts.extend(&self.quantities);
        texts.extend(&self.adjectives);
        texts.extend(&self.uses);
        texts.extend(&self.fillers);
        for c in &self.categories {
            texts.extend(&c.brands);
            texts.extend(&c.products);
            texts.extend(&c.attributes);
        }
        let templates: Vec<&String> = self
            .intents
            .iter()
            .flat_map(|i| &i.templates)
            .chain(self.sentiments.iter().flat_map(|s| &s.templates))
            .chain(&self.description_templates)
            .chain(&self.title_templates)
            .collect();
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(basic_tokenize(t));
        }
        for t in templates {
            for (literal, slot) in parse_template(t).expect("validated") {
                if slot.is_none() {
                    words.extend(basic_tokenize(literal));
                }
            }
        }
        words
    }

    /// Grammatical role of each emitted word; a word with several roles
    /// takes the first in `Role` order.
    fn roles(&self) -> BTreeMap<String, Role> {
        let mut roles: BTreeMap<String, Role> = BTreeMap::new();
        let mut assign = |texts: &[String], role: Role| {
            for t in texts {
                for w in basic_tokenize(t) {
                    let e = roles.entry(w).or_insert(role);
                    *e = (*e).min(role);
                }
            }
        };
        for c in &self.categories {
            assign(&c.brands, Role::Brand);
            assign(&c.products, Role::Product);
            assign(&c.attributes, Role::Attribute);
        }
        assign(&self.quantities, Role::Quantity);
        assign(&self.fillers, Role::Filler);
        assign(&self.adjectives, Role::Adjective);
        assign(&self.uses, Role::Use);
        for w in self.words() {
            roles.entry(w).or_insert(Role::Literal);
        }
        roles
    }
}

/// Splits a template into `(literal, None)` and `("", Some(slot))` parts.
fn parse_template(t: &str) -> Result<Vec<(&str, Option<&str>)>> {
    let mut parts = Vec::new();
    let mut rest = t;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            parts.push((&rest[..open], None));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("unclosed placeholder in template {t:?}")))?;
        parts.push(("", Some(&rest[open + 1..open + close])));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        parts.push((rest, None));
    }
    Ok(parts)
}

/// Vocabulary covering the grammar: specials, every grammar word, and
/// single characters (plain and `##`) so any lowercase ASCII word splits.
pub fn build_vocab(grammar: &Grammar) -> Vocab {
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut rest: BTreeSet<String> = grammar.words();
    for c in ('a'..='z').chain('0'..='9') {
        rest.insert(c.to_string());
        rest.insert(format!("##{c}"));
    }
    for c in ".,!?'-:;&/".chars() {
        rest.insert(c.to_string());
    }
    for s in ["##s", "##ing", "##ed", "##er", "##ly", "##es"] {
        rest.insert(s.to_string());
    }
    tokens.extend(rest);
    Vocab::from_tokens(tokens).expect("generated vocabulary is valid")
}

/// Stand-in for syntactic-context word embeddings: words sharing a
/// grammatical role (brand, product, quantity, ...) cluster around a common
/// centroid; template words get independent vectors.
pub fn dependency_vectors(grammar: &Grammar, dim: usize, seed: u64) -> WordVectors {
    const CENTROID_STD: f64 = 0.5;
    const NOISE_STD: f64 = 0.15;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroid = Normal::new(0.0, CENTROID_STD).expect("valid std");
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut centroids: BTreeMap<Role, Vec<f64>> = BTreeMap::new();
    let mut entries = Vec::new();
    for (word, role) in grammar.roles() {
        let v: Vec<f32> = if role == Role::Literal {
            (0..dim).map(|_| centroid.sample(&mut rng) as f32).collect()
        } else {
            let c = centroids
                .entry(role)
                .or_insert_with(|| (0..dim).map(|_| centroid.sample(&mut rng)).collect())
                .clone();
            c.iter().map(|x| (x + noise.sample(&mut rng)) as f32).collect()
        };
        entries.push((word, v));
    }
    WordVectors { dim, entries }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_docs: usize,
    pub chat_fraction: f64,
    pub examples_per_task: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_docs: 2000,
            chat_fraction: 0.2,
            examples_per_task: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub corpus: Vec<CorpusDoc>,
    pub tasks: Vec<TaskDataset>,
    pub vocab: Vocab,
}

/// Exactly `round(chat_fraction * num_docs)` chat documents, the rest
/// catalog documents, interleaved at seeded positions.
pub fn generate_corpus(grammar: &Grammar, num_docs: usize, chat_fraction: f64, seed: u64) -> Result<Vec<CorpusDoc>> {
    if !(0.0..=1.0).contains(&chat_fraction) {
        return Err(Error::Config(format!("chat_fraction {chat_fraction} outside [0, 1]")));
    }
    let n_chat = (chat_fraction * num_docs as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_chat = vec![false; num_docs];
    let mut order: Vec<usize> = (0..num_docs).collect();
    for i in 0..n_chat {
        let j = rng.random_range(i..num_docs);
        order.swap(i, j);
        is_chat[order[i]] = true;
    }
    Ok(is_chat
        .into_iter()
        .enumerate()
        .map(|(i, chat)| {
            let id = format!("doc-{i:06}");
            if chat {
                grammar.chat_doc(id, &mut rng)
            } else {
                grammar.catalog_doc(id, &mut rng)
            }
        })
        .collect())
}

fn bio_tags(toks: &[Tok]) -> (Vec<String>, Vec<Span>) {
    let mut tags = Vec::with_capacity(toks.len());
    let mut spans: Vec<Span> = Vec::new();
    for (i, t) in toks.iter().enumerate() {
        match t.role.entity() {
            Some(kind) if t.first => {
                tags.push(format!("B-{kind}"));
                spans.push(Span {
                    label: kind.to_string(),
                    start: i,
                    end: i + 1,
                    text: t.text.clone(),
                });
            }
            Some(kind) => {
                tags.push(format!("I-{kind}"));
                let s = spans.last_mut().expect("inside follows begin");
                s.end = i + 1;
                s.text.push(' ');
                s.text.push_str(&t.text);
            }
            None => tags.push("O".to_string()),
        }
    }
    (tags, spans)
}

pub const NER_LABELS: [&str; 7] = ["O", "B-brand", "I-brand", "B-product", "I-product", "B-quantity", "I-quantity"];

fn example(text: String) -> TaskExample {
    TaskExample {
        text,
        history: None,
        current_intent: None,
        label: None,
        words: None,
        tags: None,
        spans: Vec::new(),
    }
}

/// `n` labeled examples for one task.
pub fn generate_task(grammar: &Grammar, kind: TaskKind, n: usize, seed: u64) -> TaskDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut intents = Vec::new();
    let labels: Vec<String> = match kind {
        TaskKind::Intent => grammar.intent_names(),
        TaskKind::Sentiment => grammar.sentiment_names(),
        TaskKind::Ner => NER_LABELS.iter().map(|s| s.to_string()).collect(),
        TaskKind::TitleCompression => vec!["0".into(), "1".into()],
        TaskKind::Proactive => {
            intents = grammar.intent_names();
            grammar.intent_names()
        }
    };
    let feedback: Vec<usize> = (0..grammar.intents.len()).filter(|&i| grammar.intents[i].feedback).collect();
    let examples = (0..n)
        .map(|_| match kind {
            TaskKind::Intent => {
                let u = grammar.utterance(grammar.sample_intent(&mut rng), &mut rng);
                TaskExample {
                    label: Some(grammar.intents[u.intent].name.clone()),
                    ..example(text_of(&u.toks))
                }
            }
            TaskKind::Sentiment => {
                let u = match feedback.first() {
                    Some(&f) => grammar.utterance(f, &mut rng),
                    None => unreachable!("sentiment templates are reached through a feedback intent"),
                };
                let s = u.sentiment.expect("feedback utterance has a sentiment");
                TaskExample {
                    label: Some(grammar.sentiments[s].name.clone()),
                    ..example(text_of(&u.toks))
                }
            }
            TaskKind::Ner => loop {
                let u = grammar.utterance(grammar.sample_intent(&mut rng), &mut rng);
                if !u.toks.iter().any(|t| t.role.entity().is_some()) {
                    continue;
                }
                let (tags, spans) = bio_tags(&u.toks);
                break TaskExample {
                    words: Some(u.toks.iter().map(|t| t.text.clone()).collect()),
                    tags: Some(tags),
                    spans,
                    ..example(text_of(&u.toks))
                };
            },
            TaskKind::TitleCompression => {
                let item = grammar.item(&mut rng);
                let toks = grammar.title(&item, &mut rng);
                let keep = |t: &Tok| matches!(t.role, Role::Brand | Role::Product);
                TaskExample {
                    words: Some(toks.iter().map(|t| t.text.clone()).collect()),
                    tags: Some(toks.iter().map(|t| if keep(t) { "1" } else { "0" }.to_string()).collect()),
                    ..example(text_of(&toks))
                }
            }
            TaskKind::Proactive => {
                let turns = rng.random_range(1..=4);
                let conv = grammar.conversation(turns, 0.6, &mut rng);
                let (current, history) = conv.split_last().expect("at least one turn");
                let rule = &grammar.intents[current.intent];
                TaskExample {
                    history: (!history.is_empty())
                        .then(|| history.iter().map(|u| text_of(&u.toks)).collect::<Vec<_>>().join(" ")),
                    current_intent: Some(rule.name.clone()),
                    label: Some(rule.next.clone()),
                    ..example(text_of(&current.toks))
                }
            }
        })
        .collect();
    TaskDataset {
        kind,
        labels,
        intents,
        examples,
    }
}

/// Corpus, all five task datasets, and the vocabulary, as a pure function
/// of `(grammar, spec)`.
pub fn generate_synthetic(grammar: &Grammar, spec: &SyntheticSpec) -> Result<SyntheticData> {
    let corpus = generate_corpus(grammar, spec.num_docs, spec.chat_fraction, spec.seed)?;
    let tasks = TaskKind::ALL
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let seed = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1);
            generate_task(grammar, kind, spec.examples_per_task, seed)
        })
        .collect();
    Ok(SyntheticData {
        corpus,
        tasks,
        vocab: build_vocab(grammar),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_parts() {
        let parts = parse_template("add {quantity} {brand} to cart").unwrap();
        assert_eq!(
            parts,
            vec![
                ("add ", None),
                ("", Some("quantity")),
                (" ", None),
                ("", Some("brand")),
                (" to cart", None)
            ]
        );
        assert!(parse_template("add {brand").is_err());
    }

    #[test]
    fn bad_grammar_is_rejected() {
        let text = BUILTIN_GRAMMAR.replace("next = \"show_cart\"", "next = \"nowhere\"");
        assert!(matches!(Grammar::parse(&text), Err(Error::Config(_))));
        let text = BUILTIN_GRAMMAR.replace("{quantity} {brand}", "{colour} {brand}");
        assert!(matches!(Grammar::parse(&text), Err(Error::Config(_))));
    }

    #[test]
    fn multiword_brand_gets_inside_tags() {
        let g = Grammar::builtin();
        let item = Item {
            category: &g.categories[0],
            brand: "great value",
            product: "milk",
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let toks = g.render("add {brand} {product} to cart", &item, &mut rng);
        let (tags, spans) = bio_tags(&toks);
        assert_eq!(tags, ["O", "B-brand", "I-brand", "B-product", "O", "O"]);
        assert_eq!(spans[0].text, "great value");
    }
}
