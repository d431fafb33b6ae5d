//! Deterministic prompt-template corpus and the clinical tokenizer.
//!
//! Prompts mention EHR groups through reserved placeholders such as
//! `<clinical>`. Gold routing labels follow from the placeholders: named
//! groups get 1, the others 0, and a prompt naming no group gets 0.5
//! everywhere.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{IoContext, PrismError, Result};
use crate::io::atomic_write;
use crate::rng::rng;
use crate::synthgen::Group;

pub const MAX_PROMPT_LEN: usize = 64;
pub const UNK: usize = 0;

/// Template families, one per syntactic form. `{g1}`/`{g2}` are group
/// slots; other braces are filler slots from [`FILLERS`].
const CLASSES: &[(&str, &[&str])] = &[
    (
        "imperative_focus",
        &[
            "focus the risk model on {g1}",
            "focus the {model} on {g1} and {g2}",
            "focus the {model} on the available patient record",
        ],
    ),
    (
        "imperative_use",
        &[
            "use {g1} features to {goal}",
            "use {g1} and {g2} features to {goal}",
            "use every available feature to {goal}",
        ],
    ),
    (
        "imperative_prioritize",
        &[
            "prioritize {g1} variables when you {goal}",
            "prioritize {g1} together with {g2} variables when you {goal}",
            "prioritize no particular variables when you {goal}",
        ],
    ),
    (
        "interrogative_which",
        &[
            "which {g1} factors best {goal}",
            "which {g1} and {g2} factors best {goal}",
            "which factors best {goal}",
        ],
    ),
    (
        "declarative_should",
        &[
            "the {model} should rely on {g1} evidence",
            "the {model} should rely on {g1} and {g2} evidence",
            "the {model} should rely on all evidence equally",
        ],
    ),
    (
        "design",
        &[
            "design your {pipeline} pipeline around {g1}",
            "design your {pipeline} pipeline around {g1} and {g2}",
            "design your {pipeline} pipeline around the whole record",
        ],
    ),
    (
        "incorporate",
        &[
            "incorporate {adj} indicators from {g1} information to enhance the precision of the {learner}",
            "incorporate {adj} indicators from {g1} and {g2} information to enhance the precision of the {learner}",
            "incorporate {adj} indicators to enhance the precision of the {learner}",
        ],
    ),
    (
        "interrogative_can",
        &[
            "can {g1} data sharpen the {model}",
            "can {g1} and {g2} data sharpen the {model}",
            "can the full record sharpen the {model}",
        ],
    ),
];

const FILLERS: &[(&str, &[&str])] = &[
    ("model", &["risk model", "survival model", "prediction model", "outcome model"]),
    (
        "goal",
        &["predict cardiac events", "estimate survival", "stratify patient risk", "rank mace risk"],
    ),
    ("pipeline", &["metrics", "analysis", "modeling", "risk"]),
    ("adj", &["multimodal", "relevant", "key", "complementary"]),
    (
        "learner",
        &["machine learning model", "survival model", "risk model", "prediction model"],
    ),
];

/// Paraphrase classes reserved for held-out router evaluation.
pub const HELDOUT_CLASSES: &[&str] = &["design", "incorporate", "interrogative_can"];

/// Prompt named in the single-group example: clinical only.
pub const CLINICAL_PROMPT: &str = "Design your metrics pipeline around <clinical>";
/// Prompt naming the clinical and physiological groups.
pub const CLINICAL_PHYSIOLOGICAL_PROMPT: &str = "Incorporate multimodal indicators from <clinical> and <physiological> information to enhance the precision of the machine learning model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub text: String,
    /// Gold routing labels in [`Group::ALL`] order.
    pub group_labels: [f64; 4],
    pub paraphrase_class: String,
}

/// Gold labels implied by the placeholders in `text`.
pub fn gold_labels(text: &str) -> [f64; 4] {
    let lower = text.to_lowercase();
    let named: Vec<bool> = Group::ALL.iter().map(|g| lower.contains(g.placeholder())).collect();
    if named.iter().any(|&b| b) {
        std::array::from_fn(|i| if named[i] { 1.0 } else { 0.0 })
    } else {
        [0.5; 4]
    }
}

fn expand(template: &str) -> Vec<String> {
    let mut out = vec![template.to_string()];
    for (slot, words) in FILLERS {
        let key = format!("{{{slot}}}");
        if !template.contains(&key) {
            continue;
        }
        out = out
            .iter()
            .flat_map(|s| words.iter().map(|w| s.replace(&key, w)).collect::<Vec<_>>())
            .collect();
    }
    let mut with_groups = Vec::new();
    for s in out {
        match (s.contains("{g1}"), s.contains("{g2}")) {
            (false, _) => with_groups.push(s),
            (true, false) => {
                for g in Group::ALL {
                    with_groups.push(s.replace("{g1}", g.placeholder()));
                }
            }
            (true, true) => {
                for a in Group::ALL {
                    for b in Group::ALL {
                        if a != b {
                            with_groups.push(s.replace("{g1}", a.placeholder()).replace("{g2}", b.placeholder()));
                        }
                    }
                }
            }
        }
    }
    with_groups
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub train: Vec<PromptRecord>,
    pub heldout: Vec<PromptRecord>,
}

/// Slot-fills every template, splits by paraphrase class and shuffles each
/// split by `seed`. Fails when the training split holds fewer than
/// `n_per_sample` unique prompts.
pub fn generate_corpus(n_per_sample: usize, seed: u64) -> Result<Corpus> {
    if n_per_sample == 0 {
        return Err(PrismError::Invalid("need at least one prompt per sample".into()));
    }
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    let mut seen = BTreeSet::new();
    for (class, templates) in CLASSES {
        for t in *templates {
            for text in expand(t) {
                let text = capitalize(&text);
                if !seen.insert(text.clone()) {
                    continue;
                }
                let rec = PromptRecord {
                    group_labels: gold_labels(&text),
                    text,
                    paraphrase_class: class.to_string(),
                };
                if HELDOUT_CLASSES.contains(class) {
                    heldout.push(rec);
                } else {
                    train.push(rec);
                }
            }
        }
    }
    if train.len() < n_per_sample {
        return Err(PrismError::InsufficientPrompts {
            requested: n_per_sample,
            achievable: train.len(),
        });
    }
    let mut r = rng(seed);
    train.shuffle(&mut r);
    heldout.shuffle(&mut r);
    Ok(Corpus { train, heldout })
}

impl Corpus {
    /// `n` distinct training prompts for one image sample.
    pub fn sample_for(&self, n: usize, seed: u64) -> Result<Vec<&PromptRecord>> {
        if n > self.train.len() {
            return Err(PrismError::InsufficientPrompts {
                requested: n,
                achievable: self.train.len(),
            });
        }
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(&mut rng(seed));
        Ok(idx[..n].iter().map(|&i| &self.train[i]).collect())
    }

    /// JSON lines, training split first; each line carries its split.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            #[serde(flatten)]
            rec: &'a PromptRecord,
            split: &'a str,
        }
        let mut s = String::new();
        for (split, recs) in [("train", &self.train), ("heldout", &self.heldout)] {
            for rec in recs {
                s.push_str(&serde_json::to_string(&Line { rec, split })?);
                s.push('\n');
            }
        }
        atomic_write(path, s.as_bytes())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            #[serde(flatten)]
            rec: PromptRecord,
            split: String,
        }
        let text = std::fs::read_to_string(path).at(path)?;
        let mut c = Corpus {
            train: vec![],
            heldout: vec![],
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let l: Line = serde_json::from_str(line)?;
            match l.split.as_str() {
                "train" => c.train.push(l.rec),
                "heldout" => c.heldout.push(l.rec),
                other => return Err(PrismError::Invalid(format!("unknown corpus split `{other}`"))),
            }
        }
        Ok(c)
    }
}

/// Fixed clinical vocabulary. Id 0 is UNK, ids 1..=4 are the placeholders.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

const EXTRA_WORDS: &[&str] = &[
    "patient", "cardiac", "heart", "ventricle", "ejection", "fraction", "motion", "wall", "infarction", "mace", "risk",
    "survival", "event", "the", "a", "of", "and", "to", "on", "in", "for", "with", "data", "features",
];

impl Default for Vocab {
    fn default() -> Self {
        Self::clinical()
    }
}

impl Vocab {
    pub fn clinical() -> Self {
        let mut set = BTreeSet::new();
        let push_words = |s: &str, set: &mut BTreeSet<String>| {
            for w in split_words(s) {
                if !w.starts_with('<') && !w.starts_with('{') {
                    set.insert(w);
                }
            }
        };
        for (_, ts) in CLASSES {
            for t in *ts {
                push_words(t, &mut set);
            }
        }
        for (_, ws) in FILLERS {
            for w in *ws {
                push_words(w, &mut set);
            }
        }
        for w in EXTRA_WORDS {
            set.insert(w.to_string());
        }
        let mut words = vec!["<unk>".to_string()];
        words.extend(Group::ALL.iter().map(|g| g.placeholder().to_string()));
        words.extend(set);
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn placeholder_id(&self, g: Group) -> usize {
        1 + g.index()
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text)
            .into_iter()
            .map(|w| *self.index.get(&w).unwrap_or(&UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.words.get(i).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercases and splits on whitespace and punctuation; `<group>`
/// placeholders survive as single words.
fn split_words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut in_tag = false;
    for ch in lower.chars() {
        if ch == '<' {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            in_tag = true;
            cur.push(ch);
        } else if ch == '>' && in_tag {
            cur.push(ch);
            out.push(std::mem::take(&mut cur));
            in_tag = false;
        } else if ch.is_alphanumeric() || ch == '_' || (in_tag && !ch.is_whitespace()) || ch == '{' || ch == '}' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            in_tag = false;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Tokenizes with the default clinical vocabulary.
pub fn tokenize(text: &str) -> Vec<usize> {
    Vocab::clinical().tokenize(text)
}
