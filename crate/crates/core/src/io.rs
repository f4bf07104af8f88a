//! Corpus ingestion and the on-disk formats for models, merge tables and
//! token streams.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoding::{MergeKind, MergeRule, MergeTable};
use crate::error::{Error, Result};
use crate::markov::{TransitionModel, Vocabulary};

pub const MODEL_VERSION: u32 = 1;
const MERGES_MAGIC: &str = "#arplab-merges v1";
const ZETA_TOL: f64 = 1e-12;

/// Whitespace-tokenized sequences, one per non-empty input line.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<Vec<String>>,
    pub source_path: PathBuf,
    pub token_count: usize,
    pub line_count: usize,
    pub empty_lines: usize,
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes)
        .map_err(|e| Error::Encoding { path: path.to_owned(), offset: e.utf8_error().valid_up_to() })
}

/// Reads one sequence per line. Blank lines are skipped and counted; at most
/// `max_lines` lines are read when given.
pub fn ingest(path: impl AsRef<Path>, lowercase: bool, max_lines: Option<usize>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = read_utf8(path)?;
    let mut sequences = Vec::new();
    let mut line_count = 0;
    let mut empty_lines = 0;
    for line in text.lines().take(max_lines.unwrap_or(usize::MAX)) {
        line_count += 1;
        let line = if lowercase { line.to_lowercase() } else { line.to_owned() };
        let tokens: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
        if tokens.is_empty() {
            empty_lines += 1;
        } else {
            sequences.push(tokens);
        }
    }
    let token_count = sequences.iter().map(Vec::len).sum();
    Ok(Corpus { sequences, source_path: path.to_owned(), token_count, line_count, empty_lines })
}

/// Writes sequences one per line, tokens separated by single spaces.
pub fn write_sequences<S: AsRef<str>>(path: impl AsRef<Path>, sequences: &[Vec<S>]) -> Result<()> {
    let mut out = String::new();
    for seq in sequences {
        for (i, tok) in seq.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(tok.as_ref());
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    vocab: Vec<String>,
    zeta: f64,
    b: Vec<f64>,
    #[serde(rename = "B")]
    transitions: Vec<(usize, usize, f64)>,
    counts: Vec<(usize, usize, u64)>,
}

pub fn model_to_json(model: &TransitionModel) -> String {
    let file = ModelFile {
        version: MODEL_VERSION,
        vocab: model.vocab().tokens().to_vec(),
        zeta: model.zeta(),
        b: model.eos_probs().to_vec(),
        transitions: model
            .b_rows()
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, p)| (i, j, p)))
            .collect(),
        counts: model
            .counts()
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, c)| (i, j, c)))
            .collect(),
    };
    serde_json::to_string(&file).expect("model serializes")
}

pub fn model_from_json(text: &str) -> Result<TransitionModel> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    if file.version != MODEL_VERSION {
        return Err(Error::Schema(format!("model version {} (expected {MODEL_VERSION})", file.version)));
    }
    let n = file.vocab.len();
    if n == 0 {
        return Err(Error::Schema("empty vocabulary".into()));
    }
    if file.b.len() != n {
        return Err(Error::Schema(format!("{} EOS entries for {n} tokens", file.b.len())));
    }
    let vocab = Vocabulary::new(file.vocab).map_err(|e| Error::Schema(e.to_string()))?;
    let mut rows = vec![Vec::new(); n];
    for (i, j, p) in file.transitions {
        if i >= n || j >= n {
            return Err(Error::Schema(format!("transition ({i}, {j}) outside {n} tokens")));
        }
        rows[i].push((j, p));
    }
    for row in &mut rows {
        row.sort_by_key(|e| e.0);
    }
    let mut counts = if file.counts.is_empty() { Vec::new() } else { vec![Vec::new(); n] };
    for (i, j, c) in file.counts {
        if i >= n || j > n {
            return Err(Error::Schema(format!("count ({i}, {j}) outside {n} tokens")));
        }
        counts[i].push((j, c));
    }
    for row in &mut counts {
        row.sort_by_key(|e| e.0);
    }
    let model = TransitionModel::from_parts(vocab, rows, file.b, counts).map_err(|e| Error::Schema(e.to_string()))?;
    if (model.zeta() - file.zeta).abs() > ZETA_TOL {
        return Err(Error::Schema(format!("stored zeta {} but B gives {}", file.zeta, model.zeta())));
    }
    Ok(model)
}

pub fn save_model(model: &TransitionModel, path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &model_to_json(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TransitionModel> {
    model_from_json(&read_utf8(path.as_ref())?)
}

pub fn merges_to_string(table: &MergeTable) -> String {
    let mut out = format!("{MERGES_MAGIC} {}\n", table.kind());
    for r in table.rules() {
        writeln!(out, "{}\t{}\t{}", r.left, r.right, r.step).expect("write to string");
    }
    out
}

/// Parses a merge table; `expected` rejects a table of the other kind.
pub fn merges_from_str(text: &str, expected: Option<MergeKind>) -> Result<MergeTable> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Schema("missing merge table header".into()))?;
    let kind: MergeKind = header
        .strip_prefix(MERGES_MAGIC)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::Schema(format!("bad merge table header {header:?}")))?
        .parse()?;
    if let Some(want) = expected.filter(|&w| w != kind) {
        return Err(Error::TypeMismatch { expected: want.to_string(), found: kind.to_string() });
    }
    let mut rules = Vec::new();
    for (k, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let [left, right, step] = fields[..] else {
            return Err(Error::Schema(format!("merge line {} has {} fields", k + 2, fields.len())));
        };
        let step = step.parse().map_err(|_| Error::Schema(format!("bad step {step:?} on line {}", k + 2)))?;
        rules.push(MergeRule { left: left.to_owned(), right: right.to_owned(), step });
    }
    MergeTable::from_rules(kind, rules).map_err(|e| Error::Schema(e.to_string()))
}

pub fn save_merges(table: &MergeTable, path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &merges_to_string(table))
}

pub fn load_merges(path: impl AsRef<Path>, expected: Option<MergeKind>) -> Result<MergeTable> {
    merges_from_str(&read_utf8(path.as_ref())?, expected)
}
