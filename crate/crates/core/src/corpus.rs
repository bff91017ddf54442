//! Labeled HTML corpora: line-delimited JSON persistence, class counts and
//! seeded train/validation/test splitting.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use url::Url;

use crate::domain::DomainResolver;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Phishing,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Benign, Label::Phishing];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Phishing => "phishing",
        }
    }

    /// Class index used by the network outputs: benign 0, phishing 1.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Label::Phishing
        } else {
            Label::Benign
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Label::Benign => Label::Phishing,
            Label::Phishing => Label::Benign,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownLabel(pub String);

impl fmt::Display for UnknownLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unknown label {:?} (expected \"benign\" or \"phishing\")", self.0)
    }
}

impl std::error::Error for UnknownLabel {}

impl FromStr for Label {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "benign" => Ok(Label::Benign),
            "phishing" => Ok(Label::Phishing),
            other => Err(UnknownLabel(other.to_string())),
        }
    }
}

/// One raw HTML page with its class and the registrable domain it was
/// served from (empty when the URL is unknown).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDocument {
    pub id: String,
    pub url: Option<String>,
    pub base_domain: String,
    pub html: String,
    pub label: Label,
}

impl LabeledDocument {
    pub fn new(
        id: impl Into<String>,
        url: Option<String>,
        html: impl Into<String>,
        label: Label,
        resolver: &DomainResolver,
    ) -> Self {
        let base_domain = url
            .as_deref()
            .and_then(|u| Url::parse(u).ok())
            .and_then(|u| resolver.domain_of_url(&u))
            .unwrap_or_default();
        Self {
            id: id.into(),
            url,
            base_domain,
            html: html.into(),
            label,
        }
    }
}

#[derive(Serialize)]
struct CorpusLine<'a> {
    id: &'a str,
    url: Option<&'a str>,
    label: Label,
    html: &'a str,
}

const CORPUS_KEYS: [&str; 4] = ["id", "url", "label", "html"];

fn parse_corpus_line(line: &str, resolver: &DomainResolver) -> Result<LabeledDocument, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;
    let Value::Object(map) = value else {
        return Err("record is not a JSON object".into());
    };
    for key in map.keys() {
        if !CORPUS_KEYS.contains(&key.as_str()) {
            return Err(format!("unknown key {key:?}"));
        }
    }
    let field = |map: &Map<String, Value>, key: &str| -> Result<Value, String> {
        map.get(key).cloned().ok_or_else(|| format!("missing key {key:?}"))
    };
    let id = match field(&map, "id")? {
        Value::String(s) if !s.is_empty() => s,
        Value::String(_) => return Err("empty id".into()),
        _ => return Err("id must be a string".into()),
    };
    let url = match field(&map, "url")? {
        Value::Null => None,
        Value::String(s) => {
            Url::parse(&s).map_err(|e| format!("invalid url {s:?}: {e}"))?;
            Some(s)
        }
        _ => return Err("url must be a string or null".into()),
    };
    let label = match field(&map, "label")? {
        Value::String(s) => s.parse::<Label>().map_err(|e| e.to_string())?,
        _ => return Err("label must be a string".into()),
    };
    let html = match field(&map, "html")? {
        Value::String(s) => s,
        _ => return Err("html must be a string".into()),
    };
    Ok(LabeledDocument::new(id, url, html, label, resolver))
}

/// Reads a corpus file using the two-label domain heuristic.
pub fn load_corpus(path: &Path) -> Result<Vec<LabeledDocument>> {
    load_corpus_with(path, &DomainResolver::heuristic())
}

pub fn load_corpus_with(path: &Path, resolver: &DomainResolver) -> Result<Vec<LabeledDocument>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let doc = parse_corpus_line(&line, resolver).map_err(record_err)?;
        if !seen.insert(doc.id.clone()) {
            return Err(record_err(format!("duplicate id {:?}", doc.id)));
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn save_corpus(path: &Path, docs: &[LabeledDocument]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for doc in docs {
        write_corpus_line(&mut out, doc).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn write_corpus_line<W: Write>(out: &mut W, doc: &LabeledDocument) -> std::io::Result<()> {
    let line = CorpusLine {
        id: &doc.id,
        url: doc.url.as_deref(),
        label: doc.label,
        html: &doc.html,
    };
    serde_json::to_writer(&mut *out, &line)?;
    out.write_all(b"\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub benign: usize,
    pub phishing: usize,
    pub total: usize,
}

pub fn corpus_stats(docs: &[LabeledDocument]) -> CorpusStats {
    label_stats(docs.iter().map(|d| d.label))
}

pub fn label_stats(labels: impl IntoIterator<Item = Label>) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for label in labels {
        match label {
            Label::Benign => stats.benign += 1,
            Label::Phishing => stats.phishing += 1,
        }
        stats.total += 1;
    }
    stats
}

/// Disjoint id lists covering a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub stratified: bool,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Validation,
    Test,
}

impl CorpusSplit {
    pub fn part(&self, part: Part) -> &[String] {
        match part {
            Part::Train => &self.train,
            Part::Validation => &self.validation,
            Part::Test => &self.test,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("split serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

impl FromStr for Part {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Part::Train),
            "validation" | "val" => Ok(Part::Validation),
            "test" => Ok(Part::Test),
            other => Err(format!("unknown split part {other:?}")),
        }
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

fn validate_fractions(fractions: [f64; 3]) -> Result<()> {
    let ok = fractions.iter().all(|f| f.is_finite() && *f >= 0.0)
        && (fractions.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidFractions(fractions))
    }
}

/// Part sizes for `n` items: train and validation rounded half up, test
/// takes the remainder.
pub fn part_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    validate_fractions(fractions)?;
    let train = round_half_up(n as f64 * fractions[0]).min(n);
    let validation = round_half_up(n as f64 * fractions[1]).min(n - train);
    let sizes = [train, validation, n - train - validation];
    let starved = fractions
        .iter()
        .zip(sizes.iter())
        .any(|(&f, &s)| f > 0.0 && s == 0);
    if starved {
        return Err(Error::CorpusTooSmall { size: n, fractions });
    }
    Ok(sizes)
}

/// Largest-remainder allocation of `count` items over parts proportional
/// to `weights` (which sum to `total`). Ties go to the earlier part.
fn apportion(count: usize, weights: [usize; 3], total: usize) -> [usize; 3] {
    let mut alloc = [0usize; 3];
    let mut rems = [(0u128, 0usize); 3];
    let mut assigned = 0;
    for p in 0..3 {
        let num = count as u128 * weights[p] as u128;
        alloc[p] = (num / total as u128) as usize;
        rems[p] = (num % total as u128, p);
        assigned += alloc[p];
    }
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, p) in rems.iter().take(count - assigned) {
        alloc[p] += 1;
    }
    alloc
}

/// Splits `(id, label)` items into train/validation/test.
///
/// Deterministic in the item order, fractions, seed and `stratified`. With
/// stratification each class is apportioned over the parts by largest
/// remainder, so per-class part counts stay within one of the class's
/// share of each part.
pub fn split_items(
    items: &[(String, Label)],
    fractions: [f64; 3],
    seed: u64,
    stratified: bool,
) -> Result<CorpusSplit> {
    let n = items.len();
    let sizes = part_sizes(n, fractions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<String>; 3] = Default::default();

    if stratified && n > 0 {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); 2];
        for (i, (_, label)) in items.iter().enumerate() {
            by_class[label.index()].push(i);
        }
        let benign_alloc = apportion(by_class[0].len(), sizes, n);
        let phishing_alloc = [
            sizes[0] - benign_alloc[0],
            sizes[1] - benign_alloc[1],
            sizes[2] - benign_alloc[2],
        ];
        for (members, alloc) in by_class.iter_mut().zip([benign_alloc, phishing_alloc]) {
            members.shuffle(&mut rng);
            let mut rest = members.as_slice();
            for (part, take) in parts.iter_mut().zip(alloc) {
                let (head, tail) = rest.split_at(take);
                part.extend(head.iter().map(|&i| items[i].0.clone()));
                rest = tail;
            }
        }
        for part in parts.iter_mut() {
            part.shuffle(&mut rng);
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut rest = order.as_slice();
        for (part, take) in parts.iter_mut().zip(sizes) {
            let (head, tail) = rest.split_at(take);
            part.extend(head.iter().map(|&i| items[i].0.clone()));
            rest = tail;
        }
    }

    let [train, validation, test] = parts;
    Ok(CorpusSplit {
        seed,
        fractions,
        stratified,
        train,
        validation,
        test,
    })
}

pub fn split_corpus(
    docs: &[LabeledDocument],
    fractions: [f64; 3],
    seed: u64,
    stratified: bool,
) -> Result<CorpusSplit> {
    let items: Vec<(String, Label)> = docs.iter().map(|d| (d.id.clone(), d.label)).collect();
    split_items(&items, fractions, seed, stratified)
}
