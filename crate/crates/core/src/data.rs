//! Tokenization, vocabularies, the answer space and the JSON-lines dataset
//! format.
//!
//! One example per line:
//!
//! ```json
//! {"id": "train-0", "features": [0.1, 0.0, ...], "question": "what color is the square?", "answers": ["red"]}
//! ```
//!
//! `id` is optional and defaults to the zero-based line number. `answers`
//! holds one entry for single-answer datasets or the full annotator list
//! (ten for VQA-style data).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 0;

/// Lower-cases, splits on whitespace and trims punctuation from both ends of
/// every token. Tokens that are pure punctuation vanish; inner punctuation
/// (`what's`) survives.
pub fn tokenize(question: &str) -> Vec<String> {
    question
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Answers compare after lower-casing and trimming.
pub fn normalize_answer(answer: &str) -> String {
    answer.trim().to_lowercase()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAExample {
    #[serde(default)]
    pub id: String,
    pub features: Vec<f64>,
    pub question: String,
    pub answers: Vec<String>,
}

impl QAExample {
    /// The answer used for single-truth scoring and training targets.
    pub fn primary_answer(&self) -> &str {
        &self.answers[0]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<QAExample>,
}

impl Dataset {
    pub fn new(examples: Vec<QAExample>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.features.len())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut examples = Vec::new();
        let mut dim = None;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut ex: QAExample = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            if ex.id.is_empty() {
                ex.id = idx.to_string();
            }
            if ex.answers.is_empty() {
                return Err(parse_err(lineno, "`answers` must not be empty".into()));
            }
            if ex.features.iter().any(|v| !v.is_finite()) {
                return Err(parse_err(lineno, "non-finite feature value".into()));
            }
            match dim {
                None => dim = Some(ex.features.len()),
                Some(d) if d != ex.features.len() => {
                    return Err(parse_err(
                        lineno,
                        format!("{} features, expected {d} as on earlier lines", ex.features.len()),
                    ))
                }
                _ => {}
            }
            examples.push(ex);
        }
        Ok(Self { examples })
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut out = BufWriter::new(file);
        for ex in &self.examples {
            serde_json::to_writer(&mut out, ex)?;
            out.write_all(b"\n")
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        out.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

fn write_list(path: &Path, items: &[String]) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(items)?)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Token ↔ id map with `<unk>` at id 0. Built from the training split and
/// frozen afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::Config(format!("vocabulary must start with {UNK}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Writes the tokens as a JSON array in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_list(path, &self.tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tokens(read_list(path)?)
    }

    /// Tokenizes and maps to ids; unknown words become `<unk>`.
    pub fn encode(&self, question: &str) -> Vec<usize> {
        tokenize(question).iter().map(|t| self.id(t)).collect()
    }
}

/// The closed set of answer classes. A whole (normalized) answer string is
/// one class, however many words it has.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerSpace {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerSpace {
    pub fn from_answers(answers: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate answer class `{a}`")));
            }
        }
        if answers.is_empty() {
            return Err(Error::Config("answer space is empty".into()));
        }
        Ok(Self { answers, index })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn class(&self, answer: &str) -> Option<usize> {
        self.index.get(&normalize_answer(answer)).copied()
    }

    pub fn answer(&self, class: usize) -> &str {
        &self.answers[class]
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_list(path, &self.answers)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_answers(read_list(path)?)
    }
}

/// Registers every training token and every distinct training answer.
/// Both lists are sorted so the ids do not depend on example order.
pub fn build_vocab(train: &Dataset) -> Result<(Vocabulary, AnswerSpace)> {
    if train.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty split".into()));
    }
    let mut tokens = BTreeSet::new();
    let mut answers = BTreeSet::new();
    for ex in &train.examples {
        tokens.extend(tokenize(&ex.question));
        answers.extend(ex.answers.iter().map(|a| normalize_answer(a)));
    }
    tokens.remove(UNK);
    let vocab = Vocabulary::from_tokens(std::iter::once(UNK.to_string()).chain(tokens).collect())?;
    let space = AnswerSpace::from_answers(answers.into_iter().collect())?;
    Ok((vocab, space))
}
