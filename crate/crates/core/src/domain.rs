//! Registrable-domain resolution.
//!
//! Without a suffix list the registrable domain is the last two
//! dot-separated labels of the host (`login.bank.com` -> `bank.com`).
//! Loading a public-suffix list switches to the proper algorithm, so
//! `shop.example.co.uk` resolves to `example.co.uk`.

use std::net::IpAddr;
use std::path::Path;
use std::sync::Arc;

use publicsuffix::{List, Psl};
use url::Url;

use crate::error::{Error, Result};

#[derive(Clone, Default)]
pub struct DomainResolver {
    suffixes: Option<Arc<List>>,
}

impl std::fmt::Debug for DomainResolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DomainResolver")
            .field("suffix_list", &self.suffixes.is_some())
            .finish()
    }
}

impl DomainResolver {
    /// The two-label heuristic.
    pub fn heuristic() -> Self {
        Self::default()
    }

    /// Accepts the official list format or a bare list of suffixes, one
    /// per line (the parser ignores rules outside a section marker).
    pub fn from_suffix_list_str(text: &str) -> Result<Self> {
        let text = if text.contains("BEGIN ICANN DOMAINS") || text.contains("BEGIN PRIVATE DOMAINS") {
            text.to_string()
        } else {
            format!("// ===BEGIN ICANN DOMAINS===\n{text}")
        };
        let list: List = text
            .parse()
            .map_err(|e| Error::Config(format!("public suffix list: {e}")))?;
        Ok(Self {
            suffixes: Some(Arc::new(list)),
        })
    }

    pub fn from_suffix_list(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_suffix_list_str(&text)
    }

    /// Registrable domain of a bare host name. Always lowercase; IP
    /// literals are returned unchanged.
    pub fn registrable_domain(&self, host: &str) -> String {
        let host = host.trim().trim_end_matches('.').to_ascii_lowercase();
        if host.is_empty() {
            return host;
        }
        let bare = host.trim_start_matches('[').trim_end_matches(']');
        if bare.parse::<IpAddr>().is_ok() {
            return host;
        }
        if let Some(list) = &self.suffixes {
            if let Some(domain) = list.domain(host.as_bytes()) {
                if let Ok(s) = std::str::from_utf8(domain.as_bytes()) {
                    return s.to_string();
                }
            }
        }
        let labels: Vec<&str> = host.split('.').filter(|l| !l.is_empty()).collect();
        if labels.len() <= 2 {
            labels.join(".")
        } else {
            labels[labels.len() - 2..].join(".")
        }
    }

    /// Registrable domain of an absolute URL's host, if it has one.
    pub fn domain_of_url(&self, url: &Url) -> Option<String> {
        url.host_str()
            .map(|h| self.registrable_domain(h))
            .filter(|d| !d.is_empty())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heuristic_takes_last_two_labels() {
        let r = DomainResolver::heuristic();
        assert_eq!(r.registrable_domain("Login.Bank.COM"), "bank.com");
        assert_eq!(r.registrable_domain("bank.com."), "bank.com");
        assert_eq!(r.registrable_domain("localhost"), "localhost");
        assert_eq!(r.registrable_domain("shop.example.co.uk"), "co.uk");
        assert_eq!(r.registrable_domain("192.168.0.1"), "192.168.0.1");
        assert_eq!(r.registrable_domain("[::1]"), "[::1]");
    }

    #[test]
    fn suffix_list_overrides_heuristic() {
        let list = "// test list\ncom\nuk\nco.uk\n";
        let r = DomainResolver::from_suffix_list_str(list).unwrap();
        assert_eq!(r.registrable_domain("shop.example.co.uk"), "example.co.uk");
        assert_eq!(r.registrable_domain("a.b.example.com"), "example.com");
    }

    #[test]
    fn url_host() {
        let r = DomainResolver::heuristic();
        let u = Url::parse("https://www.paypal.com/signin?x=1").unwrap();
        assert_eq!(r.domain_of_url(&u).as_deref(), Some("paypal.com"));
        let u = Url::parse("mailto:someone@example.com").unwrap();
        assert_eq!(r.domain_of_url(&u), None);
    }
}
