//! Minimal arena DOM built by the html5ever tree builder.
//!
//! Only what feature extraction needs: element names, attributes, text and
//! parent/child structure. Traversals are iterative so pathologically deep
//! documents cannot overflow the stack.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};

use html5ever::interface::{ElementFlags, NodeOrText, QuirksMode, TreeSink};
use html5ever::tendril::{StrTendril, TendrilSink};
use html5ever::{parse_document, Attribute, QualName};

pub type NodeId = usize;

const DOCUMENT: NodeId = 0;

#[derive(Debug, Clone)]
pub enum NodeData {
    Document,
    Element { name: QualName, attrs: Vec<(String, String)> },
    Text(String),
    Other,
}

#[derive(Debug, Clone)]
struct Node {
    parent: Option<NodeId>,
    children: Vec<NodeId>,
    data: NodeData,
}

#[derive(Debug, Clone)]
pub struct Document {
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Open(NodeId),
    Close(NodeId),
}

impl Document {
    /// Parses with the standard HTML5 error-recovery rules; never fails.
    pub fn parse(html: &str) -> Self {
        parse_document(Sink::default(), Default::default()).one(html)
    }

    pub fn root(&self) -> NodeId {
        DOCUMENT
    }

    pub fn data(&self, id: NodeId) -> &NodeData {
        &self.nodes[id].data
    }

    /// Lowercase local name for elements.
    pub fn name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes[id].data {
            NodeData::Element { name, .. } => Some(&name.local),
            _ => None,
        }
    }

    pub fn attr(&self, id: NodeId, attr: &str) -> Option<&str> {
        match &self.nodes[id].data {
            NodeData::Element { attrs, .. } => {
                attrs.iter().find(|(k, _)| k == attr).map(|(_, v)| v.as_str())
            }
            _ => None,
        }
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id].parent
    }

    /// `id` and everything below it, in document order.
    pub fn descendants(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.traverse(id).filter_map(|e| match e {
            Edge::Open(n) => Some(n),
            Edge::Close(_) => None,
        })
    }

    /// Elements named `name` at or below `id`, in document order.
    pub fn elements<'a>(&'a self, id: NodeId, name: &'a str) -> impl Iterator<Item = NodeId> + 'a {
        self.descendants(id).filter(move |&n| self.name(n) == Some(name))
    }

    pub fn first_element(&self, name: &str) -> Option<NodeId> {
        self.elements(DOCUMENT, name).next()
    }

    pub fn has_ancestor(&self, id: NodeId, name: &str) -> bool {
        let mut cur = self.parent(id);
        while let Some(p) = cur {
            if self.name(p) == Some(name) {
                return true;
            }
            cur = self.parent(p);
        }
        false
    }

    /// Concatenated text of all descendant text nodes.
    pub fn text(&self, id: NodeId) -> String {
        let mut out = String::new();
        for n in self.descendants(id) {
            if let NodeData::Text(t) = &self.nodes[n].data {
                out.push_str(t);
            }
        }
        out
    }

    /// Open/close events of a depth-first walk rooted at `id`.
    pub fn traverse(&self, id: NodeId) -> Traverse<'_> {
        Traverse {
            doc: self,
            stack: Vec::new(),
            start: Some(id),
        }
    }
}

pub struct Traverse<'a> {
    doc: &'a Document,
    /// (node, index of the next child to visit)
    stack: Vec<(NodeId, usize)>,
    start: Option<NodeId>,
}

impl Iterator for Traverse<'_> {
    type Item = Edge;

    fn next(&mut self) -> Option<Edge> {
        if let Some(id) = self.start.take() {
            self.stack.push((id, 0));
            return Some(Edge::Open(id));
        }
        let (id, next) = self.stack.last_mut()?;
        let children = &self.doc.nodes[*id].children;
        if let Some(&child) = children.get(*next) {
            *next += 1;
            self.stack.push((child, 0));
            Some(Edge::Open(child))
        } else {
            let id = *id;
            self.stack.pop();
            Some(Edge::Close(id))
        }
    }
}

struct Sink {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Sink {
    fn default() -> Self {
        Self {
            nodes: RefCell::new(vec![Node {
                parent: None,
                children: Vec::new(),
                data: NodeData::Document,
            }]),
        }
    }
}

impl Sink {
    fn push(&self, data: NodeData) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parent: None,
            children: Vec::new(),
            data,
        });
        nodes.len() - 1
    }

    fn detach(nodes: &mut [Node], id: NodeId) {
        if let Some(p) = nodes[id].parent.take() {
            nodes[p].children.retain(|&c| c != id);
        }
    }

    /// Inserts `child` under `parent` at `pos`, merging adjacent text.
    fn insert(&self, parent: NodeId, pos: usize, child: NodeOrText<NodeId>) {
        match child {
            NodeOrText::AppendText(text) => {
                let mut nodes = self.nodes.borrow_mut();
                if pos > 0 {
                    let prev = nodes[parent].children[pos - 1];
                    if let NodeData::Text(t) = &mut nodes[prev].data {
                        t.push_str(&text);
                        return;
                    }
                }
                drop(nodes);
                let id = self.push(NodeData::Text(text.to_string()));
                let mut nodes = self.nodes.borrow_mut();
                nodes[id].parent = Some(parent);
                nodes[parent].children.insert(pos, id);
            }
            NodeOrText::AppendNode(id) => {
                let mut nodes = self.nodes.borrow_mut();
                Self::detach(&mut nodes, id);
                let pos = pos.min(nodes[parent].children.len());
                nodes[id].parent = Some(parent);
                nodes[parent].children.insert(pos, id);
            }
        }
    }
}

fn convert_attrs(attrs: Vec<Attribute>) -> Vec<(String, String)> {
    attrs
        .into_iter()
        .map(|a| (a.name.local.to_string(), a.value.to_string()))
        .collect()
}

impl TreeSink for Sink {
    type Handle = NodeId;
    type Output = Document;
    type ElemName<'a> = Ref<'a, QualName>;

    fn finish(self) -> Document {
        Document {
            nodes: self.nodes.into_inner(),
        }
    }

    fn parse_error(&self, _msg: Cow<'static, str>) {}

    fn get_document(&self) -> NodeId {
        DOCUMENT
    }

    fn elem_name<'a>(&'a self, target: &'a NodeId) -> Ref<'a, QualName> {
        Ref::map(self.nodes.borrow(), |nodes| match &nodes[*target].data {
            NodeData::Element { name, .. } => name,
            _ => panic!("tree builder asked for the name of a non-element"),
        })
    }

    fn create_element(&self, name: QualName, attrs: Vec<Attribute>, _flags: ElementFlags) -> NodeId {
        self.push(NodeData::Element {
            name,
            attrs: convert_attrs(attrs),
        })
    }

    fn create_comment(&self, _text: StrTendril) -> NodeId {
        self.push(NodeData::Other)
    }

    fn create_pi(&self, _target: StrTendril, _data: StrTendril) -> NodeId {
        self.push(NodeData::Other)
    }

    fn append(&self, parent: &NodeId, child: NodeOrText<NodeId>) {
        let pos = self.nodes.borrow()[*parent].children.len();
        self.insert(*parent, pos, child);
    }

    fn append_based_on_parent_node(&self, element: &NodeId, prev_element: &NodeId, child: NodeOrText<NodeId>) {
        if self.nodes.borrow()[*element].parent.is_some() {
            self.append_before_sibling(element, child);
        } else {
            self.append(prev_element, child);
        }
    }

    fn append_doctype_to_document(&self, _name: StrTendril, _public_id: StrTendril, _system_id: StrTendril) {}

    // Template contents stay in the tree as ordinary children.
    fn get_template_contents(&self, target: &NodeId) -> NodeId {
        *target
    }

    fn same_node(&self, x: &NodeId, y: &NodeId) -> bool {
        x == y
    }

    fn set_quirks_mode(&self, _mode: QuirksMode) {}

    fn append_before_sibling(&self, sibling: &NodeId, new_node: NodeOrText<NodeId>) {
        let (parent, pos) = {
            let nodes = self.nodes.borrow();
            let Some(parent) = nodes[*sibling].parent else {
                return;
            };
            let pos = nodes[parent].children.iter().position(|c| c == sibling).unwrap_or(0);
            (parent, pos)
        };
        if let NodeOrText::AppendNode(id) = &new_node {
            // detaching first may shift the sibling's index
            let mut nodes = self.nodes.borrow_mut();
            Self::detach(&mut nodes, *id);
            let pos = nodes[parent].children.iter().position(|c| c == sibling).unwrap_or(0);
            drop(nodes);
            self.insert(parent, pos, new_node);
        } else {
            self.insert(parent, pos, new_node);
        }
    }

    fn add_attrs_if_missing(&self, target: &NodeId, attrs: Vec<Attribute>) {
        let mut nodes = self.nodes.borrow_mut();
        if let NodeData::Element { attrs: existing, .. } = &mut nodes[*target].data {
            for (k, v) in convert_attrs(attrs) {
                if !existing.iter().any(|(e, _)| *e == k) {
                    existing.push((k, v));
                }
            }
        }
    }

    fn remove_from_parent(&self, target: &NodeId) {
        Self::detach(&mut self.nodes.borrow_mut(), *target);
    }

    fn reparent_children(&self, node: &NodeId, new_parent: &NodeId) {
        let mut nodes = self.nodes.borrow_mut();
        let children = std::mem::take(&mut nodes[*node].children);
        for &c in &children {
            nodes[c].parent = Some(*new_parent);
        }
        nodes[*new_parent].children.extend(children);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_implied_structure() {
        let doc = Document::parse("<title>x</title><p>a<b>b</b>c");
        let title = doc.first_element("title").unwrap();
        assert!(doc.has_ancestor(title, "head"));
        let body = doc.first_element("body").unwrap();
        assert_eq!(doc.text(body), "abc");
        assert_eq!(doc.elements(doc.root(), "html").count(), 1);
    }

    #[test]
    fn attributes_are_lowercased_and_first_wins() {
        let doc = Document::parse(r#"<a HREF="/x" href="/y">t</a>"#);
        let a = doc.first_element("a").unwrap();
        assert_eq!(doc.attr(a, "href"), Some("/x"));
    }

    #[test]
    fn foster_parenting_keeps_text() {
        let doc = Document::parse("<table>oops<tr><td>cell</td></tr></table>");
        let body = doc.first_element("body").unwrap();
        let text = doc.text(body);
        assert!(text.contains("oops") && text.contains("cell"));
    }

    #[test]
    fn traversal_is_balanced_and_deep_safe() {
        let html = "<div>".repeat(20_000);
        let doc = Document::parse(&html);
        let mut depth = 0i64;
        for e in doc.traverse(doc.root()) {
            depth += match e {
                Edge::Open(_) => 1,
                Edge::Close(_) => -1,
            };
            assert!(depth >= 0);
        }
        assert_eq!(depth, 0);
    }
}
