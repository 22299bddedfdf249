//! Token export, prompt rendering, prefix-similarity tables and parameter
//! accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::StageOneConfig;
use crate::data::Modality;
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::par;
use crate::quantizer::{CodebookStack, TokenSequence};
use crate::scorer::MlpScorer;
use crate::stage1::Stage1Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    User,
    Item,
}

/// One line of a token file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub kind: EntityKind,
    pub id: u32,
    pub modality: Modality,
    pub tokens: Vec<u32>,
}

impl TokenRecord {
    pub fn sequence(&self, codes: usize) -> Result<TokenSequence> {
        TokenSequence::new(self.tokens.clone(), codes)
    }
}

/// Tokens of every user and item, visual first, users before items.
pub fn export_tokens(model: &Stage1Model) -> Result<Vec<TokenRecord>> {
    let mut out = Vec::with_capacity(2 * (model.user_count + model.item_count));
    for m in Modality::ALL {
        let (users, items) = model.quantize_all(m)?;
        for (kind, results) in [(EntityKind::User, users), (EntityKind::Item, items)] {
            out.extend(results.into_iter().enumerate().map(|(id, q)| TokenRecord {
                kind,
                id: id as u32,
                modality: m,
                tokens: q.tokens.as_slice().to_vec(),
            }));
        }
    }
    Ok(out)
}

pub fn tokens_to_jsonl(records: &[TokenRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("token records serialize"));
        s.push('\n');
    }
    s
}

pub fn write_tokens(path: &Path, records: &[TokenRecord]) -> Result<()> {
    fs::write(path, tokens_to_jsonl(records)).map_err(|e| Error::io(path, e))
}

/// Parses a token file, checking every index lies in `[1, codes]` and every
/// sequence has `levels` entries.
pub fn parse_tokens(text: &str, levels: usize, codes: usize) -> Result<Vec<TokenRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TokenRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if rec.tokens.len() != levels {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("{} tokens, expected {levels}", rec.tokens.len()),
            });
        }
        rec.sequence(codes).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_tokens(path: &Path, levels: usize, codes: usize) -> Result<Vec<TokenRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tokens(&text, levels, codes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    UserSlot,
    ItemSlot,
}

/// Prompt text with user and item code slots. `{U}` and `{I}` are single
/// slots; `{U_*}` and `{I_*}` expand to one slot per level.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    segments: Vec<Segment>,
}

pub const POSTER_TEMPLATE: &str = "Generate a personalized movie poster for {U_*} based on {I_*}";

impl PromptTemplate {
    pub fn parse(text: &str, levels: usize) -> Result<Self> {
        let mut segments = Vec::new();
        let mut rest = text;
        let mut literal = String::new();
        let flush = |literal: &mut String, segments: &mut Vec<Segment>| {
            let t = literal.trim();
            if !t.is_empty() {
                segments.push(Segment::Text(t.to_string()));
            }
            literal.clear();
        };
        while let Some(open) = rest.find('{') {
            literal.push_str(&rest[..open]);
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::Invalid("unterminated placeholder in template".into()))?;
            let slot = &rest[open + 1..open + close];
            let (kind, count) = match slot {
                "U" => (Segment::UserSlot, 1),
                "I" => (Segment::ItemSlot, 1),
                "U_*" => (Segment::UserSlot, levels),
                "I_*" => (Segment::ItemSlot, levels),
                other => return Err(Error::Invalid(format!("unknown placeholder {{{other}}}"))),
            };
            flush(&mut literal, &mut segments);
            segments.extend(std::iter::repeat_n(kind, count));
            rest = &rest[open + close + 1..];
        }
        literal.push_str(rest);
        flush(&mut literal, &mut segments);
        Ok(PromptTemplate { segments })
    }

    pub fn user_slots(&self) -> usize {
        self.segments.iter().filter(|s| **s == Segment::UserSlot).count()
    }

    pub fn item_slots(&self) -> usize {
        self.segments.iter().filter(|s| **s == Segment::ItemSlot).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptPiece {
    Text(String),
    Code(Vec<f64>),
}

/// Literal text interleaved with looked-up code vectors, in slot order.
/// The `k`-th user slot receives the user's level-`k` code, likewise items.
pub fn render_prompt(
    template: &PromptTemplate,
    stack: &CodebookStack,
    user: &TokenSequence,
    item: &TokenSequence,
) -> Result<Vec<PromptPiece>> {
    if template.user_slots() != user.len() || template.item_slots() != item.len() {
        return Err(Error::Invalid(format!(
            "template has {} user and {} item slots, got {} and {} tokens",
            template.user_slots(),
            template.item_slots(),
            user.len(),
            item.len()
        )));
    }
    let user_codes = stack.lookup(user)?;
    let item_codes = stack.lookup(item)?;
    let (mut nu, mut ni) = (0, 0);
    Ok(template
        .segments
        .iter()
        .map(|s| match s {
            Segment::Text(t) => PromptPiece::Text(t.clone()),
            Segment::UserSlot => {
                nu += 1;
                PromptPiece::Code(user_codes[nu - 1].to_vec())
            }
            Segment::ItemSlot => {
                ni += 1;
                PromptPiece::Code(item_codes[ni - 1].to_vec())
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefixRow {
    pub prefix_len: usize,
    /// Mean cosine over all within-group pairs (groups of size ≥ 2);
    /// `None` when no such group exists.
    pub avg_pairwise_cos: Option<f64>,
    pub min_group: usize,
    pub max_group: usize,
    pub n_groups: usize,
    /// Groups with a single member, excluded from the average.
    pub singletons: usize,
}

/// Groups items by their first `p` tokens for every `p` in `1..=L` and
/// reports within-group similarity of the given vectors.
pub fn prefix_similarity_table(tokens: &[TokenSequence], vectors: &[Vec<f64>]) -> Result<Vec<PrefixRow>> {
    if tokens.len() < 2 {
        return Err(Error::Invalid("prefix analysis needs at least two items".into()));
    }
    if tokens.len() != vectors.len() {
        return Err(Error::Shape(format!("{} token sequences but {} vectors", tokens.len(), vectors.len())));
    }
    let levels = tokens[0].len();
    if tokens.iter().any(|t| t.len() != levels) {
        return Err(Error::Shape("token sequences differ in length".into()));
    }
    let mut rows = Vec::with_capacity(levels);
    for p in 1..=levels {
        let mut groups: BTreeMap<&[u32], Vec<usize>> = BTreeMap::new();
        for (k, t) in tokens.iter().enumerate() {
            groups.entry(&t.as_slice()[..p]).or_default().push(k);
        }
        let members: Vec<&Vec<usize>> = groups.values().collect();
        let sums = par::map_range(members.len(), |g| {
            let m = members[g];
            let mut acc = 0.0;
            let mut pairs = 0usize;
            for a in 0..m.len() {
                for b in a + 1..m.len() {
                    acc += cosine(&vectors[m[a]], &vectors[m[b]]).unwrap_or(0.0);
                    pairs += 1;
                }
            }
            (acc, pairs)
        });
        let (acc, pairs) = sums.iter().fold((0.0, 0usize), |(a, n), &(s, c)| (a + s, n + c));
        rows.push(PrefixRow {
            prefix_len: p,
            avg_pairwise_cos: (pairs > 0).then(|| acc / pairs as f64),
            min_group: members.iter().map(|m| m.len()).min().unwrap_or(0),
            max_group: members.iter().map(|m| m.len()).max().unwrap_or(0),
            n_groups: members.len(),
            singletons: members.iter().filter(|m| m.len() == 1).count(),
        });
    }
    Ok(rows)
}

pub fn prefix_table_tsv(rows: &[PrefixRow]) -> String {
    let mut s = String::from("prefix_len\tavg_pairwise_cos\tmin_group\tmax_group\tn_groups\n");
    for r in rows {
        let avg = r.avg_pairwise_cos.map_or("NA".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "{}\t{avg}\t{}\t{}\t{}", r.prefix_len, r.min_group, r.max_group, r.n_groups);
    }
    s
}

/// Item tokens and quantized reconstructions for one modality of a model.
/// With `base_vectors`, the propagated (pre-quantization) vectors are
/// returned instead of reconstructions.
pub fn item_tokens_and_vectors(
    model: &Stage1Model,
    modality: Modality,
    base_vectors: bool,
) -> Result<(Vec<TokenSequence>, Vec<Vec<f64>>)> {
    let (_, items) = model.quantize_all(modality)?;
    Ok(items
        .into_iter()
        .map(|q| {
            let v = if base_vectors { q.input().to_vec() } else { q.reconstruction };
            (q.tokens, v)
        })
        .unzip())
}

/// Trainable parameter counts per component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub codebook_v: usize,
    pub codebook_t: usize,
    pub scorer: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_embeddings: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub item_embeddings: Option<usize>,
}

impl ParamReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("component\tparameters\n");
        let _ = writeln!(s, "codebook_v\t{}", self.codebook_v);
        let _ = writeln!(s, "codebook_t\t{}", self.codebook_t);
        let _ = writeln!(s, "scorer\t{}", self.scorer);
        if let Some(n) = self.user_embeddings {
            let _ = writeln!(s, "user_embeddings\t{n}");
        }
        if let Some(n) = self.item_embeddings {
            let _ = writeln!(s, "item_embeddings\t{n}");
        }
        s
    }
}

/// Codebook parameters `L·K·d` per modality, plus scorer and, when the
/// entity counts are known, embedding tables.
pub fn param_count_report(config: &StageOneConfig) -> ParamReport {
    let codebook = |d: usize| config.levels * config.codes * d;
    let width = config.dim_v + config.dim_t;
    ParamReport {
        codebook_v: codebook(config.dim_v),
        codebook_t: codebook(config.dim_t),
        scorer: MlpScorer::param_len(width, width),
        user_embeddings: config.users.map(|u| u * width),
        item_embeddings: config.items.map(|i| i * width),
    }
}
