//! HTML feature extraction.
//!
//! Every page yields two text fields (title and visible content) and eleven
//! numeric features, always in the order of [`NUMERIC_FEATURE_NAMES`]:
//!
//! | field                  | meaning                                                        |
//! |------------------------|----------------------------------------------------------------|
//! | `hyperlink_count`      | `<a>` elements with a non-empty `href`                         |
//! | `internal_count`       | web links that are relative or point at the page's own domain  |
//! | `external_count`       | web links pointing at another registrable domain               |
//! | `external_css_count`   | `<link rel="stylesheet">` with a non-empty `href`              |
//! | `external_js_count`    | `<script>` with a non-empty `src`                              |
//! | `foreign_external_css` | absolute stylesheet URLs on another registrable domain         |
//! | `obfuscated_js_count`  | inline scripts flagged by [`is_obfuscated_script`]             |
//! | `suspicious_form_link` | password form submitting somewhere suspicious, see [`form_feature`] |
//! | `common_page_ratio`    | share of links that target the most linked-to domain           |
//! | `common_page_footer`   | a footer links to that most common domain                      |
//! | `has_meta_description` | a non-empty `<meta name="description">`                        |
//!
//! Non-web links (`mailto:`, `javascript:`, `tel:`, ...) count towards
//! `hyperlink_count` only. These definitions are this crate's own; counts
//! are not guaranteed to agree with other phishing feature extractors.
//!
//! Parsing is error-recovering, so extraction is total: any input, however
//! malformed, produces a valid [`FeatureRow`].

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use url::{ParseError, Url};

use crate::corpus::{Label, LabeledDocument};
use crate::dom::{Document, Edge, NodeData, NodeId};
use crate::domain::DomainResolver;
use crate::error::{Error, Result};

pub const NUMERIC_FEATURES: usize = 11;

pub const NUMERIC_FEATURE_NAMES: [&str; NUMERIC_FEATURES] = [
    "hyperlink_count",
    "internal_count",
    "external_count",
    "external_css_count",
    "external_js_count",
    "foreign_external_css",
    "obfuscated_js_count",
    "suspicious_form_link",
    "common_page_ratio",
    "common_page_footer",
    "has_meta_description",
];

pub const DEFAULT_CONTENT_CAP: usize = 10_000;

/// Tokens whose presence marks an inline script as obfuscated.
pub const OBFUSCATION_TOKENS: [&str; 4] = ["eval(", "unescape(", "String.fromCharCode(", "atob("];
pub const OBFUSCATION_MAX_LINE: usize = 1000;
pub const OBFUSCATION_ENTROPY_BITS: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub page_title: String,
    pub page_content: String,
    pub hyperlink_count: u32,
    pub internal_count: u32,
    pub external_count: u32,
    pub external_css_count: u32,
    pub external_js_count: u32,
    pub foreign_external_css: u32,
    pub obfuscated_js_count: u32,
    pub suspicious_form_link: u8,
    pub common_page_ratio: f64,
    pub common_page_footer: u8,
    pub has_meta_description: u8,
    pub label: Label,
}

impl FeatureRow {
    pub fn empty(label: Label) -> Self {
        Self {
            page_title: String::new(),
            page_content: String::new(),
            hyperlink_count: 0,
            internal_count: 0,
            external_count: 0,
            external_css_count: 0,
            external_js_count: 0,
            foreign_external_css: 0,
            obfuscated_js_count: 0,
            suspicious_form_link: 0,
            common_page_ratio: 0.0,
            common_page_footer: 0,
            has_meta_description: 0,
            label,
        }
    }

    /// The numeric features in fixed order.
    pub fn numeric(&self) -> [f64; NUMERIC_FEATURES] {
        [
            self.hyperlink_count as f64,
            self.internal_count as f64,
            self.external_count as f64,
            self.external_css_count as f64,
            self.external_js_count as f64,
            self.foreign_external_css as f64,
            self.obfuscated_js_count as f64,
            self.suspicious_form_link as f64,
            self.common_page_ratio,
            self.common_page_footer as f64,
            self.has_meta_description as f64,
        ]
    }

    /// Checks the structural invariants every extracted row satisfies.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.internal_count + self.external_count > self.hyperlink_count {
            return Err("internal + external exceeds hyperlink count".into());
        }
        if self.foreign_external_css > self.external_css_count {
            return Err("foreign css exceeds external css".into());
        }
        if !(0.0..=1.0).contains(&self.common_page_ratio) {
            return Err(format!("ratio {} out of range", self.common_page_ratio));
        }
        if self.hyperlink_count == 0 && self.common_page_ratio != 0.0 {
            return Err("non-zero ratio without links".into());
        }
        for (name, flag) in [
            ("suspicious_form_link", self.suspicious_form_link),
            ("common_page_footer", self.common_page_footer),
            ("has_meta_description", self.has_meta_description),
        ] {
            if flag > 1 {
                return Err(format!("{name} = {flag} is not boolean"));
            }
        }
        Ok(())
    }
}

/// A feature row tagged with its document id, as stored in feature files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    #[serde(flatten)]
    pub row: FeatureRow,
}

pub fn save_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut out, rec)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: FeatureRecord =
            serde_json::from_str(&line).map_err(|e| record_err(e.to_string()))?;
        rec.row.check_invariants().map_err(record_err)?;
        if !seen.insert(rec.id.clone()) {
            return Err(record_err(format!("duplicate id {:?}", rec.id)));
        }
        records.push(rec);
    }
    Ok(records)
}

const HIDDEN_ELEMENTS: [&str; 4] = ["script", "style", "noscript", "template"];

const INLINE_ELEMENTS: [&str; 18] = [
    "a", "abbr", "b", "bdi", "bdo", "cite", "code", "em", "font", "i", "kbd", "label", "mark",
    "s", "small", "span", "strong", "u",
];

/// Where a link points, as far as internality is concerned.
#[derive(Debug, Clone, PartialEq, Eq)]
enum LinkTarget {
    /// Relative or fragment-only reference: same site by construction.
    Relative,
    /// Absolute http(s) or scheme-relative URL; `None` when it has no host.
    Absolute(Option<String>),
    /// mailto:, javascript:, tel:, data: and the like.
    NonWeb,
}

fn classify_href(href: &str, resolver: &DomainResolver) -> LinkTarget {
    match Url::parse(href) {
        Ok(url) => match url.scheme() {
            "http" | "https" => LinkTarget::Absolute(resolver.domain_of_url(&url)),
            _ => LinkTarget::NonWeb,
        },
        Err(ParseError::RelativeUrlWithoutBase) => {
            if href.starts_with("//") {
                let url = Url::parse(&format!("http:{href}")).ok();
                LinkTarget::Absolute(url.and_then(|u| resolver.domain_of_url(&u)))
            } else {
                LinkTarget::Relative
            }
        }
        Err(_) => {
            let lower = href.to_ascii_lowercase();
            if lower.starts_with("http:") || lower.starts_with("https:") || href.starts_with("//") {
                LinkTarget::Absolute(None)
            } else {
                LinkTarget::Relative
            }
        }
    }
}

impl LinkTarget {
    fn is_internal(&self, base_domain: &str) -> bool {
        match self {
            LinkTarget::Relative => true,
            LinkTarget::Absolute(Some(d)) => !base_domain.is_empty() && d == base_domain,
            _ => false,
        }
    }

    fn is_web(&self) -> bool {
        !matches!(self, LinkTarget::NonWeb)
    }

    /// Domain key used when looking for the most common link target.
    /// Relative links count as the page's own domain.
    fn domain_key<'a>(&'a self, base_domain: &'a str) -> Option<&'a str> {
        match self {
            LinkTarget::Relative => Some(base_domain),
            LinkTarget::Absolute(Some(d)) => Some(d.as_str()),
            _ => None,
        }
    }
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn truncate_chars(text: String, cap: usize) -> String {
    match text.char_indices().nth(cap) {
        Some((idx, _)) => text[..idx].to_string(),
        None => text,
    }
}

fn non_empty_attr<'a>(dom: &'a Document, el: NodeId, name: &str) -> Option<&'a str> {
    dom.attr(el, name).map(str::trim).filter(|v| !v.is_empty())
}

/// Shannon entropy of the character distribution, in bits per character.
pub fn shannon_entropy(text: &str) -> f64 {
    let mut counts: HashMap<char, usize> = HashMap::new();
    let mut total = 0usize;
    for c in text.chars() {
        *counts.entry(c).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Obfuscation heuristic for an inline script body: any of
/// [`OBFUSCATION_TOKENS`], a line longer than [`OBFUSCATION_MAX_LINE`]
/// characters, or character entropy above [`OBFUSCATION_ENTROPY_BITS`].
pub fn is_obfuscated_script(body: &str) -> bool {
    if body.trim().is_empty() {
        return false;
    }
    OBFUSCATION_TOKENS.iter().any(|t| body.contains(t))
        || body
            .lines()
            .any(|line| line.chars().count() > OBFUSCATION_MAX_LINE)
        || shannon_entropy(body) > OBFUSCATION_ENTROPY_BITS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HyperlinkCounts {
    pub hyperlink_count: u32,
    pub internal_count: u32,
    pub external_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ResourceCounts {
    pub external_css_count: u32,
    pub external_js_count: u32,
    pub foreign_external_css: u32,
    pub obfuscated_js_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StructureFeatures {
    pub common_page_ratio: f64,
    pub common_page_footer: u8,
    pub has_meta_description: u8,
}

/// A parsed page plus the context needed to classify its links.
pub struct Page<'r> {
    dom: Document,
    base_domain: String,
    resolver: &'r DomainResolver,
}

impl<'r> Page<'r> {
    pub fn parse(html: &str, base_domain: &str, resolver: &'r DomainResolver) -> Self {
        Self {
            dom: Document::parse(html),
            base_domain: base_domain.trim().to_ascii_lowercase(),
            resolver,
        }
    }

    /// First `<title>` inside `<head>`, whitespace-collapsed.
    pub fn title(&self) -> String {
        let dom = &self.dom;
        dom.elements(dom.root(), "title")
            .find(|&t| dom.has_ancestor(t, "head"))
            .map(|t| collapse_whitespace(&dom.text(t)))
            .unwrap_or_default()
    }

    /// Visible body text: scripts, styles, noscript and template contents
    /// are dropped, block boundaries become spaces, whitespace collapses,
    /// and the result is cut to `cap_chars` characters.
    pub fn content(&self, cap_chars: usize) -> String {
        let dom = &self.dom;
        let Some(body) = dom.first_element("body") else {
            return String::new();
        };
        let mut text = String::new();
        let mut hidden_depth = 0usize;
        for edge in dom.traverse(body) {
            match edge {
                Edge::Open(node) => match dom.data(node) {
                    NodeData::Element { name, .. } => {
                        let name: &str = &name.local;
                        if hidden_depth > 0 || HIDDEN_ELEMENTS.contains(&name) {
                            hidden_depth += 1;
                        } else if !INLINE_ELEMENTS.contains(&name) {
                            text.push(' ');
                        }
                    }
                    NodeData::Text(t) if hidden_depth == 0 => text.push_str(t),
                    _ => {}
                },
                Edge::Close(node) => {
                    if let Some(name) = dom.name(node) {
                        if hidden_depth > 0 {
                            hidden_depth -= 1;
                        } else if !INLINE_ELEMENTS.contains(&name) {
                            text.push(' ');
                        }
                    }
                }
            }
        }
        truncate_chars(collapse_whitespace(&text), cap_chars)
    }

    fn anchor_targets(&self, scope: NodeId) -> impl Iterator<Item = LinkTarget> + '_ {
        self.dom
            .elements(scope, "a")
            .filter_map(|a| non_empty_attr(&self.dom, a, "href"))
            .map(|href| classify_href(href, self.resolver))
    }

    pub fn hyperlinks(&self) -> HyperlinkCounts {
        let mut counts = HyperlinkCounts::default();
        for target in self.anchor_targets(self.dom.root()) {
            counts.hyperlink_count += 1;
            if target.is_internal(&self.base_domain) {
                counts.internal_count += 1;
            } else if target.is_web() {
                counts.external_count += 1;
            }
        }
        counts
    }

    pub fn resources(&self) -> ResourceCounts {
        let dom = &self.dom;
        let mut counts = ResourceCounts::default();
        for link in dom.elements(dom.root(), "link") {
            let is_stylesheet = dom
                .attr(link, "rel")
                .is_some_and(|rel| rel.split_ascii_whitespace().any(|t| t.eq_ignore_ascii_case("stylesheet")));
            let Some(href) = non_empty_attr(dom, link, "href") else {
                continue;
            };
            if !is_stylesheet {
                continue;
            }
            counts.external_css_count += 1;
            if let LinkTarget::Absolute(domain) = classify_href(href, self.resolver) {
                if domain.as_deref() != Some(self.base_domain.as_str()) || self.base_domain.is_empty() {
                    counts.foreign_external_css += 1;
                }
            }
        }
        for script in dom.elements(dom.root(), "script") {
            if non_empty_attr(dom, script, "src").is_some() {
                counts.external_js_count += 1;
            } else if is_obfuscated_script(&dom.text(script)) {
                counts.obfuscated_js_count += 1;
            }
        }
        counts
    }

    /// 1 when a form holding a password input submits to an empty action,
    /// `#`, a `javascript:` URL, or anything not on the page's own
    /// registrable domain.
    pub fn suspicious_form(&self) -> u8 {
        let dom = &self.dom;
        let suspicious = dom.elements(dom.root(), "form").any(|form| {
            let has_password = dom.elements(form, "input").any(|input| {
                dom.attr(input, "type")
                    .is_some_and(|t| t.trim().eq_ignore_ascii_case("password"))
            });
            if !has_password {
                return false;
            }
            let Some(action) = non_empty_attr(dom, form, "action") else {
                return true;
            };
            if action == "#" {
                return true;
            }
            !classify_href(action, self.resolver).is_internal(&self.base_domain)
        });
        suspicious as u8
    }

    pub fn structure(&self) -> StructureFeatures {
        let dom = &self.dom;
        let targets: Vec<LinkTarget> = self.anchor_targets(dom.root()).collect();
        let mut by_domain: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &targets {
            if let Some(key) = t.domain_key(&self.base_domain) {
                *by_domain.entry(key).or_default() += 1;
            }
        }
        // BTreeMap iterates keys in order, so keeping only strictly larger
        // counts picks the lexicographically smallest among ties.
        let mut most_common: Option<(&str, usize)> = None;
        for (&domain, &count) in &by_domain {
            if most_common.is_none_or(|(_, best)| count > best) {
                most_common = Some((domain, count));
            }
        }

        let mut features = StructureFeatures::default();
        if let Some((domain, count)) = most_common {
            features.common_page_ratio = count as f64 / targets.len() as f64;
            let in_footer = dom.descendants(dom.root()).any(|el| {
                is_footer(dom, el)
                    && self
                        .anchor_targets(el)
                        .any(|t| t.domain_key(&self.base_domain) == Some(domain))
            });
            features.common_page_footer = in_footer as u8;
        }
        features.has_meta_description = dom.elements(dom.root(), "meta").any(|m| {
            dom.attr(m, "name")
                .is_some_and(|n| n.trim().eq_ignore_ascii_case("description"))
                && non_empty_attr(dom, m, "content").is_some()
        }) as u8;
        features
    }

    pub fn features(&self, label: Label, cap_chars: usize) -> FeatureRow {
        let links = self.hyperlinks();
        let res = self.resources();
        let structure = self.structure();
        FeatureRow {
            page_title: self.title(),
            page_content: self.content(cap_chars),
            hyperlink_count: links.hyperlink_count,
            internal_count: links.internal_count,
            external_count: links.external_count,
            external_css_count: res.external_css_count,
            external_js_count: res.external_js_count,
            foreign_external_css: res.foreign_external_css,
            obfuscated_js_count: res.obfuscated_js_count,
            suspicious_form_link: self.suspicious_form(),
            common_page_ratio: structure.common_page_ratio,
            common_page_footer: structure.common_page_footer,
            has_meta_description: structure.has_meta_description,
            label,
        }
    }
}

fn is_footer(dom: &Document, el: NodeId) -> bool {
    match dom.name(el) {
        Some("footer") => true,
        Some(_) => ["id", "class"]
            .iter()
            .any(|attr| dom.attr(el, attr).is_some_and(|s| s.to_ascii_lowercase().contains("footer"))),
        None => false,
    }
}

static HEURISTIC: LazyLock<DomainResolver> = LazyLock::new(DomainResolver::heuristic);

pub fn extract_title(html: &str) -> String {
    Page::parse(html, "", &HEURISTIC).title()
}

pub fn extract_content(html: &str, cap_chars: usize) -> String {
    Page::parse(html, "", &HEURISTIC).content(cap_chars)
}

pub fn hyperlink_features(html: &str, base_domain: &str) -> HyperlinkCounts {
    Page::parse(html, base_domain, &HEURISTIC).hyperlinks()
}

pub fn css_js_features(html: &str, base_domain: &str) -> ResourceCounts {
    Page::parse(html, base_domain, &HEURISTIC).resources()
}

pub fn form_feature(html: &str, base_domain: &str) -> u8 {
    Page::parse(html, base_domain, &HEURISTIC).suspicious_form()
}

pub fn structure_features(html: &str, base_domain: &str) -> StructureFeatures {
    Page::parse(html, base_domain, &HEURISTIC).structure()
}

pub fn extract_all(doc: &LabeledDocument, cap_chars: usize) -> FeatureRow {
    Extractor::new(cap_chars).extract(doc)
}

/// Extraction settings shared across a corpus.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub cap_chars: usize,
    pub resolver: DomainResolver,
}

impl Default for Extractor {
    fn default() -> Self {
        Self::new(DEFAULT_CONTENT_CAP)
    }
}

impl Extractor {
    pub fn new(cap_chars: usize) -> Self {
        Self {
            cap_chars,
            resolver: DomainResolver::heuristic(),
        }
    }

    pub fn with_resolver(mut self, resolver: DomainResolver) -> Self {
        self.resolver = resolver;
        self
    }

    pub fn extract(&self, doc: &LabeledDocument) -> FeatureRow {
        Page::parse(&doc.html, &doc.base_domain, &self.resolver).features(doc.label, self.cap_chars)
    }

    pub fn extract_html(&self, html: &str, url: Option<&str>, label: Label) -> FeatureRow {
        let doc = LabeledDocument::new("", url.map(str::to_string), html, label, &self.resolver);
        self.extract(&doc)
    }

    /// Extracts a whole corpus on up to `jobs` threads. Output order
    /// follows the input order regardless of scheduling.
    pub fn extract_corpus(&self, docs: &[LabeledDocument], jobs: usize) -> Vec<FeatureRecord> {
        let jobs = jobs.max(1).min(docs.len().max(1));
        let chunk = docs.len().div_ceil(jobs).max(1);
        std::thread::scope(|scope| {
            let handles: Vec<_> = docs
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|d| FeatureRecord {
                                id: d.id.clone(),
                                row: self.extract(d),
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("extraction worker panicked"))
                .collect()
        })
    }
}
