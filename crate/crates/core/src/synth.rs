//! Synthetic corpora with planted class signals.
//!
//! Each document carries three channels: the numeric HTML structure, the
//! title, and the body text. Independently per channel, the generator
//! either plants the document's class signal or emits a neutral pattern
//! drawn from the same distribution for both classes (probability
//! `neutral[c]`). A channel is never misleading, so the Bayes-optimal
//! accuracy is `1 - n/2` for a single channel with neutral rate `n`, and
//! `1 - n_1·n_2·n_3/2` when all three are observed together.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Label, LabeledDocument};
use crate::domain::DomainResolver;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub documents: usize,
    pub seed: u64,
    /// Neutral probability for (numeric, title, content).
    pub neutral: [f64; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            documents: 400,
            seed: 2024,
            neutral: [0.25, 0.25, 0.25],
        }
    }
}

impl SynthConfig {
    /// Signal only in the numeric channel; both text channels are noise.
    pub fn numeric_only(documents: usize, seed: u64) -> Self {
        Self {
            documents,
            seed,
            neutral: [0.1, 1.0, 1.0],
        }
    }

    /// Best achievable accuracy from one channel alone.
    pub fn channel_bayes_accuracy(&self, channel: usize) -> f64 {
        1.0 - self.neutral[channel] / 2.0
    }

    /// Best achievable accuracy with all channels observed.
    pub fn fused_bayes_accuracy(&self) -> f64 {
        1.0 - self.neutral.iter().product::<f64>() / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDocument {
    pub doc: LabeledDocument,
    /// Whether each channel (numeric, title, content) carries the signal.
    pub informative: [bool; 3],
}

const BRANDS: [&str; 12] = [
    "Acme", "Globex", "Initech", "Umbrella", "Hooli", "Vandelay", "Stark", "Wayne", "Wonka", "Soylent",
    "Tyrell", "Cyberdyne",
];

const PHISH_TITLE: [&str; 14] = [
    "Verify", "Account", "Suspended", "Sign-in", "Secure", "Login", "Update", "Billing", "Confirm", "Identity",
    "Unlock", "Password", "Alert", "Required",
];

const BENIGN_TITLE: [&str; 14] = [
    "Recipes", "Garden", "Travel", "Blog", "History", "Photography", "Music", "Science", "Review", "Tutorial",
    "Library", "Museum", "Community", "Weather",
];

const NEUTRAL_TITLE: [&str; 10] = [
    "Home", "Page", "Welcome", "Online", "Official", "Site", "Portal", "Info", "Center", "Services",
];

const PHISH_WORDS: [&str; 20] = [
    "verify", "account", "suspended", "password", "confirm", "identity", "billing", "unauthorized",
    "immediately", "locked", "credentials", "payment", "expire", "restore", "access", "security", "urgent",
    "click", "update", "details",
];

const BENIGN_WORDS: [&str; 20] = [
    "recipe", "ingredients", "garden", "season", "travel", "museum", "history", "article", "photos",
    "community", "weekend", "chapter", "review", "lesson", "concert", "library", "hiking", "coffee",
    "festival", "science",
];

const FILLER: [&str; 40] = [
    "the", "and", "with", "from", "this", "that", "about", "more", "your", "our", "all", "new", "page", "here",
    "find", "information", "please", "today", "time", "people", "world", "year", "best", "make", "first",
    "good", "over", "just", "other", "some", "what", "there", "which", "their", "would", "these", "into",
    "only", "also", "well",
];

const FOREIGN_DOMAINS: [&str; 8] = [
    "cdn-static.net", "img-host.io", "track-click.biz", "collector-web.top", "free-hosting.xyz",
    "login-portal.info", "files-share.cc", "mail-verify.online",
];

fn words(rng: &mut ChaCha8Rng, vocab: &[&str], count: std::ops::Range<usize>) -> Vec<String> {
    let n = rng.random_range(count);
    (0..n).map(|_| vocab.choose(rng).expect("non-empty vocabulary").to_string()).collect()
}

fn title(rng: &mut ChaCha8Rng, signal: Option<Label>) -> String {
    let brand = BRANDS.choose(rng).expect("brands");
    let mut parts = vec![brand.to_string()];
    match signal {
        Some(Label::Phishing) => parts.extend(words(rng, &PHISH_TITLE, 2..3)),
        Some(Label::Benign) => parts.extend(words(rng, &BENIGN_TITLE, 2..3)),
        None => parts.extend(words(rng, &NEUTRAL_TITLE, 2..3)),
    }
    parts.extend(words(rng, &NEUTRAL_TITLE, 0..2));
    parts.shuffle(rng);
    parts.join(" ")
}

fn content(rng: &mut ChaCha8Rng, signal: Option<Label>) -> String {
    let n = rng.random_range(30..60);
    (0..n)
        .map(|_| {
            let vocab: &[&str] = match signal {
                Some(Label::Phishing) if rng.random_bool(0.3) => &PHISH_WORDS,
                Some(Label::Benign) if rng.random_bool(0.3) => &BENIGN_WORDS,
                _ => &FILLER,
            };
            vocab.choose(rng).expect("vocabulary").to_string()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

// Links carry no text so the structure channel cannot leak into the body
// text channel.
fn link(href: &str) -> String {
    format!("<a href=\"{href}\"><img src=\"/i.png\" alt=\"\"></a>")
}

/// Markup whose numeric features carry the signal (or not).
struct Structure {
    head: String,
    nav: String,
    form: String,
    scripts: String,
    footer: String,
}

fn structure(rng: &mut ChaCha8Rng, signal: Option<Label>, own: &str) -> Structure {
    let foreign = |rng: &mut ChaCha8Rng| FOREIGN_DOMAINS.choose(rng).expect("domains").to_string();
    let internal = |rng: &mut ChaCha8Rng, count: std::ops::Range<usize>| -> Vec<String> {
        let n = rng.random_range(count);
        (0..n).map(|i| link(&format!("/section/{}/{i}", rng.random_range(0..50)))).collect()
    };
    let external = |rng: &mut ChaCha8Rng, count: std::ops::Range<usize>| -> Vec<String> {
        let n = rng.random_range(count);
        (0..n).map(|_| link(&format!("https://{}/r/{}", foreign(rng), rng.random_range(0..500)))).collect()
    };
    let mut s = Structure {
        head: String::new(),
        nav: String::new(),
        form: String::new(),
        scripts: String::new(),
        footer: String::new(),
    };
    match signal {
        Some(Label::Phishing) => {
            let mut links = internal(rng, 0..3);
            links.extend(external(rng, 6..16));
            links.shuffle(rng);
            s.nav = links.concat();
            if rng.random_bool(0.6) {
                s.head += &format!("<link rel=\"stylesheet\" href=\"https://{}/style.css\">", foreign(rng));
            }
            if rng.random_bool(0.15) {
                s.head += "<meta name=\"description\" content=\"Account service\">";
            }
            let action = if rng.random_bool(0.7) {
                format!("https://{}/post.php", foreign(rng))
            } else {
                String::new()
            };
            s.form = format!(
                "<form method=\"post\" action=\"{action}\"><input type=\"text\" name=\"user\">\
                 <input type=\"password\" name=\"pass\"><button></button></form>"
            );
            if rng.random_bool(0.7) {
                s.scripts += "<script>var p='%76%61%72';eval(unescape(p));</script>";
            }
            if rng.random_bool(0.3) {
                s.footer = "<footer></footer>".into();
            }
        }
        Some(Label::Benign) => {
            let mut links = internal(rng, 12..30);
            links.extend(external(rng, 0..4));
            links.shuffle(rng);
            s.nav = links.concat();
            s.head += "<link rel=\"stylesheet\" href=\"/assets/site.css\">";
            if rng.random_bool(0.5) {
                s.head += &format!("<link rel=\"stylesheet\" href=\"https://www.{own}/print.css\">");
            }
            if rng.random_bool(0.9) {
                s.head += "<meta name=\"description\" content=\"Articles and guides\">";
            }
            if rng.random_bool(0.3) {
                s.form = "<form action=\"/account/login\"><input type=\"password\" name=\"pw\"></form>".into();
            }
            for _ in 0..rng.random_range(1..4) {
                s.scripts += &format!("<script src=\"/js/app{}.js\"></script>", rng.random_range(0..9));
            }
            s.footer = format!("<footer>{}{}</footer>", link("/about"), link("/contact"));
        }
        None => {
            let mut links = internal(rng, 3..10);
            links.extend(external(rng, 2..8));
            links.shuffle(rng);
            s.nav = links.concat();
            if rng.random_bool(0.5) {
                s.head += "<link rel=\"stylesheet\" href=\"/main.css\">";
            }
            if rng.random_bool(0.5) {
                s.head += "<meta name=\"description\" content=\"Welcome\">";
            }
            for _ in 0..rng.random_range(0..3) {
                s.scripts += &format!("<script src=\"https://{}/lib.js\"></script>", foreign(rng));
            }
            if rng.random_bool(0.5) {
                s.footer = format!("<footer>{}</footer>", link("/privacy"));
            }
        }
    }
    s
}

/// Generates a class-balanced corpus (odd sizes get one extra benign page).
pub fn generate(config: &SynthConfig) -> Vec<SynthDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let resolver = DomainResolver::heuristic();
    let mut labels: Vec<Label> = (0..config.documents)
        .map(|i| if i < config.documents.div_ceil(2) { Label::Benign } else { Label::Phishing })
        .collect();
    labels.shuffle(&mut rng);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let informative = config.neutral.map(|n| !rng.random_bool(n.clamp(0.0, 1.0)));
            let signal = |k: usize| informative[k].then_some(label);
            let own = format!("{}{}.org", BRANDS.choose(&mut rng).expect("brands").to_lowercase(), i);
            let s = structure(&mut rng, signal(0), &own);
            let html = format!(
                "<!DOCTYPE html>\n<html><head><title>{}</title>{}</head>\n<body><nav>{}</nav>\n\
                 <main><h1>{}</h1><p>{}</p></main>\n{}{}{}\n</body></html>\n",
                title(&mut rng, signal(1)),
                s.head,
                s.nav,
                BRANDS.choose(&mut rng).expect("brands"),
                content(&mut rng, signal(2)),
                s.form,
                s.scripts,
                s.footer
            );
            let url = format!("https://www.{own}/index.html");
            SynthDocument {
                doc: LabeledDocument::new(format!("synth-{i:04}"), Some(url), html, label, &resolver),
                informative,
            }
        })
        .collect()
}

pub fn generate_corpus(config: &SynthConfig) -> Vec<LabeledDocument> {
    generate(config).into_iter().map(|d| d.doc).collect()
}
