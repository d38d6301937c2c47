use ego_tree::NodeId;
use regex::Regex;
use scraper::{Html, Node, Selector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BannerError {
    #[error("invalid selector rule {pattern:?}: {reason}")]
    BadSelector { pattern: String, reason: String },
    #[error("invalid regex rule {pattern:?}: {reason}")]
    BadRegex { pattern: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    /// CSS selector matched against elements.
    Selector,
    /// Regex matched against the element's own (direct child) text.
    Regex,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BannerRule {
    pub kind: RuleKind,
    pub pattern: String,
}

impl BannerRule {
    pub fn selector(pattern: impl Into<String>) -> Self {
        Self {
            kind: RuleKind::Selector,
            pattern: pattern.into(),
        }
    }

    pub fn regex(pattern: impl Into<String>) -> Self {
        Self {
            kind: RuleKind::Regex,
            pattern: pattern.into(),
        }
    }
}

#[derive(Debug, Clone)]
enum Compiled {
    Selector(Selector),
    Regex(Regex),
}

/// Ordered banner-removal rules.
#[derive(Debug, Clone)]
pub struct BannerPatternSet {
    rules: Vec<BannerRule>,
    compiled: Vec<Compiled>,
}

impl BannerPatternSet {
    pub fn new(rules: Vec<BannerRule>) -> Result<Self, BannerError> {
        let compiled = rules
            .iter()
            .map(|r| match r.kind {
                RuleKind::Selector => Selector::parse(&r.pattern)
                    .map(Compiled::Selector)
                    .map_err(|e| BannerError::BadSelector {
                        pattern: r.pattern.clone(),
                        reason: e.to_string(),
                    }),
                RuleKind::Regex => Regex::new(&r.pattern).map(Compiled::Regex).map_err(|e| {
                    BannerError::BadRegex {
                        pattern: r.pattern.clone(),
                        reason: e.to_string(),
                    }
                }),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rules, compiled })
    }

    pub fn empty() -> Self {
        Self {
            rules: Vec::new(),
            compiled: Vec::new(),
        }
    }

    /// Gateway banners: id/class substrings plus leading all-caps warnings.
    pub fn default_rules() -> Vec<BannerRule> {
        let mut rules: Vec<BannerRule> = ["banner", "external-sender", "disclaimer"]
            .iter()
            .map(|s| BannerRule::selector(format!("[class*=\"{s}\" i], [id*=\"{s}\" i]")))
            .collect();
        rules.push(BannerRule::regex(r"^\s*(CAUTION|EXTERNAL|WARNING)[:!]"));
        rules
    }

    pub fn rules(&self) -> &[BannerRule] {
        &self.rules
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

impl Default for BannerPatternSet {
    fn default() -> Self {
        Self::new(Self::default_rules()).expect("default banner rules compile")
    }
}

fn is_protected(name: &str) -> bool {
    matches!(name, "html" | "head" | "body")
}

fn is_attached(doc: &Html, id: NodeId) -> bool {
    let root = doc.tree.root().id();
    match doc.tree.get(id) {
        Some(node) => node.id() == root || node.ancestors().last().is_some_and(|a| a.id() == root),
        None => false,
    }
}

fn own_text(doc: &Html, id: NodeId) -> String {
    let mut s = String::new();
    if let Some(node) = doc.tree.get(id) {
        for child in node.children() {
            if let Node::Text(t) = child.value() {
                s.push_str(t);
            }
        }
    }
    s
}

fn candidates(doc: &Html, rule: &Compiled) -> Vec<NodeId> {
    match rule {
        Compiled::Selector(sel) => doc.select(sel).map(|e| e.id()).collect(),
        Compiled::Regex(re) => doc
            .tree
            .root()
            .descendants()
            .filter(|n| n.value().is_element())
            .map(|n| n.id())
            .filter(|&id| re.is_match(&own_text(doc, id)))
            .collect(),
    }
}

/// Removes every element matched by a rule together with its subtree.
/// Returns the serialized document and the number of removed elements (an
/// element inside an already removed subtree is not counted). Rules are
/// reapplied until nothing else matches. When nothing matches, the input is
/// returned unchanged.
pub fn strip_banners(html: &str, patterns: &BannerPatternSet) -> (String, usize) {
    if patterns.is_empty() {
        return (html.to_string(), 0);
    }
    let mut doc = Html::parse_document(html);
    let mut removed = 0usize;
    loop {
        let mut pass = 0usize;
        for rule in &patterns.compiled {
            for id in candidates(&doc, rule) {
                if !is_attached(&doc, id) {
                    continue;
                }
                let protected = doc
                    .tree
                    .get(id)
                    .and_then(|n| n.value().as_element().map(|e| is_protected(e.name())))
                    .unwrap_or(true);
                if protected {
                    continue;
                }
                if let Some(mut node) = doc.tree.get_mut(id) {
                    node.detach();
                    pass += 1;
                }
            }
        }
        if pass == 0 {
            break;
        }
        removed += pass;
    }
    if removed == 0 {
        return (html.to_string(), 0);
    }
    (doc.html(), removed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text_of(html: &str) -> String {
        Html::parse_document(html)
            .root_element()
            .text()
            .collect::<String>()
    }

    #[test]
    fn removes_class_banner() {
        let html = r#"<html><body><div class="banner-external">CAUTION: external sender</div><p>Pay now</p></body></html>"#;
        let (out, n) = strip_banners(html, &BannerPatternSet::default());
        assert_eq!(n, 1);
        assert!(!out.contains("CAUTION"));
        assert!(out.contains("Pay now"));
    }

    #[test]
    fn single_selector_rule_counts_one() {
        let set = BannerPatternSet::new(vec![BannerRule::selector("[class*=banner]")]).unwrap();
        let html = r#"<div class="banner-external">CAUTION</div><p>x</p>"#;
        let (out, n) = strip_banners(html, &set);
        assert_eq!(n, 1);
        assert_eq!(text_of(&out), "x");
    }

    #[test]
    fn empty_set_is_identity() {
        let html = "<p class=banner>keep</p>";
        assert_eq!(strip_banners(html, &BannerPatternSet::empty()), (html.to_string(), 0));
    }

    #[test]
    fn nested_matches_count_outermost() {
        let set = BannerPatternSet::new(vec![BannerRule::selector("[class*=banner]")]).unwrap();
        let html = r#"<body><div class="banner"><div class="banner inner">x</div></div><p>y</p></body>"#;
        let (out, n) = strip_banners(html, &set);
        assert_eq!(n, 1);
        assert_eq!(text_of(&out), "y");
    }

    #[test]
    fn regex_rule_matches_own_text() {
        let set = BannerPatternSet::new(vec![BannerRule::regex(
            r"^\s*(CAUTION|EXTERNAL|WARNING)[:!]",
        )])
        .unwrap();
        let html = "<table><tr><td><p>  WARNING! This message is external</p><p>Real content</p></td></tr></table>";
        let (out, n) = strip_banners(html, &set);
        assert_eq!(n, 1);
        assert!(!out.contains("WARNING"));
        assert!(out.contains("Real content"));
        // the td's own text is empty, so only the <p> goes
        assert!(out.contains("<td>"));
    }

    #[test]
    fn body_is_never_removed() {
        let set = BannerPatternSet::new(vec![BannerRule::selector("body, html")]).unwrap();
        let (out, n) = strip_banners("<body class=x>text</body>", &set);
        assert_eq!(n, 0);
        assert_eq!(out, "<body class=x>text</body>");
    }

    #[test]
    fn case_insensitive_default_attrs() {
        let html = r#"<div id="ExternalSenderBanner">x</div><div id="Disclaimer-1">y</div><p>z</p>"#;
        let (out, n) = strip_banners(html, &BannerPatternSet::default());
        assert_eq!(n, 2);
        assert_eq!(text_of(&out), "z");
    }

    #[test]
    fn idempotent_on_samples() {
        let set = BannerPatternSet::default();
        for html in [
            "<div class=banner>a</div><p>b</p>",
            "<p>CAUTION: x<span class=disclaimer>y</span></p><p>z</p>",
            "<table><tr><td class=banner>x</td><td>y</td></tr></table>",
            "<p>EXTERNAL! <b>x</b></p>unclosed <div>",
        ] {
            let (once, _) = strip_banners(html, &set);
            let (twice, n) = strip_banners(&once, &set);
            assert_eq!(once, twice);
            assert_eq!(n, 0);
        }
    }

    #[test]
    fn invalid_rules_rejected() {
        assert!(matches!(
            BannerPatternSet::new(vec![BannerRule::selector("[[[")]),
            Err(BannerError::BadSelector { .. })
        ));
        assert!(matches!(
            BannerPatternSet::new(vec![BannerRule::regex("(")]),
            Err(BannerError::BadRegex { .. })
        ));
    }
}
