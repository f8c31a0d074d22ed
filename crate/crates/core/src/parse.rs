//! Line-oriented diagram files.
//!
//! ```text
//! # comment
//! node X Y Z
//! edge Z -> X
//! bidir X <-> Y
//! sel S -> Z
//! query effect Y do X [strata Z]
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{DiagramSpec, NodeId, SelectionDiagram};
use crate::transport::Query;

#[derive(Debug, Clone)]
pub struct DiagramFile {
    pub diagram: SelectionDiagram,
    pub query: Option<Query>,
}

struct Tok<'a> {
    text: &'a str,
    column: usize,
}

fn tokens(line: &str) -> Vec<Tok<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push(Tok {
                    text: &line[s..i],
                    column: line[..s].chars().count() + 1,
                });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Tok {
            text: &line[s..],
            column: line[..s].chars().count() + 1,
        });
    }
    out
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '\'')
}

struct LineParser<'a> {
    line: usize,
    toks: Vec<Tok<'a>>,
    pos: usize,
    end_column: usize,
}

impl<'a> LineParser<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        let (token, column) = match self.toks.get(self.pos) {
            Some(t) => (t.text.to_string(), t.column),
            None => ("end of line".to_string(), self.end_column),
        };
        Err(Error::Parse {
            line: self.line,
            column,
            token,
            message: message.into(),
        })
    }

    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.pos).map(|t| t.text)
    }

    fn name(&mut self) -> Result<&'a str> {
        match self.peek() {
            Some(t) if valid_name(t) && !matches!(t, "->" | "<->") => {
                self.pos += 1;
                Ok(t)
            }
            _ => self.err("expected a node name"),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<()> {
        if self.peek() == Some(kw) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected `{kw}`"))
        }
    }

    fn finish(&self) -> Result<()> {
        if self.pos < self.toks.len() {
            self.err("unexpected trailing token")
        } else {
            Ok(())
        }
    }

    fn names_until(&mut self, stops: &[&str]) -> Result<Vec<&'a str>> {
        let mut out = Vec::new();
        while let Some(t) = self.peek() {
            if stops.contains(&t) {
                break;
            }
            out.push(self.name()?);
        }
        if out.is_empty() {
            return self.err("expected at least one node name");
        }
        Ok(out)
    }
}

fn ids(names: &[&str]) -> BTreeSet<NodeId> {
    names.iter().map(|&n| NodeId::from(n)).collect()
}

/// Parses a diagram file and its optional query line. Syntax errors and
/// undeclared endpoints carry the line, column and offending token; other
/// structural errors (cycles, bad selection nodes) come from validation.
pub fn parse_diagram(text: &str) -> Result<DiagramFile> {
    let mut spec = DiagramSpec::new();
    let mut query: Option<(usize, Query)> = None;
    // (line, column, name) of every endpoint that must be a declared node
    let mut endpoints: Vec<(usize, usize, String)> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("");
        let toks = tokens(content);
        if toks.is_empty() {
            continue;
        }
        let mut p = LineParser {
            line: k + 1,
            toks,
            pos: 1,
            end_column: content.trim_end().chars().count() + 1,
        };
        match p.toks[0].text {
            "node" => {
                p.pos = 1;
                for n in p.names_until(&[])? {
                    spec.nodes.push(n.to_string());
                }
            }
            "edge" | "bidir" | "sel" => {
                let kind = p.toks[0].text;
                let a = p.name()?;
                if kind != "sel" {
                    endpoints.push((k + 1, p.toks[1].column, a.to_string()));
                }
                p.keyword(if kind == "bidir" { "<->" } else { "->" })?;
                let b = p.name()?;
                endpoints.push((k + 1, p.toks[3].column, b.to_string()));
                p.finish()?;
                let pair = (a.to_string(), b.to_string());
                match kind {
                    "edge" => spec.edges.push(pair),
                    "bidir" => spec.bidirected.push(pair),
                    _ => spec.selection_edges.push(pair),
                }
            }
            "query" => {
                if query.is_some() {
                    p.pos = 0;
                    return p.err("duplicate query line");
                }
                p.keyword("effect")?;
                let effect = p.names_until(&["do"])?;
                p.keyword("do")?;
                let dos = p.names_until(&["strata"])?;
                let strata = if p.peek() == Some("strata") {
                    p.pos += 1;
                    p.names_until(&[])?
                } else {
                    Vec::new()
                };
                p.finish()?;
                query = Some((
                    k + 1,
                    Query {
                        effect: ids(&effect),
                        interventions: ids(&dos),
                        strata: ids(&strata),
                    },
                ));
            }
            _ => {
                p.pos = 0;
                return p.err("expected `node`, `edge`, `bidir`, `sel` or `query`");
            }
        }
    }
    let declared: BTreeSet<&str> = spec.nodes.iter().map(String::as_str).collect();
    if let Some((line, column, name)) = endpoints.iter().find(|(_, _, n)| !declared.contains(n.as_str())) {
        return Err(Error::Parse {
            line: *line,
            column: *column,
            token: name.clone(),
            message: "undeclared node".into(),
        });
    }
    let diagram = spec.build()?;
    let query = match query {
        Some((line, q)) => {
            q.resolve(&diagram).map_err(|e| Error::Parse {
                line,
                column: 1,
                token: "query".into(),
                message: e.to_string(),
            })?;
            Some(q)
        }
        None => None,
    };
    Ok(DiagramFile { diagram, query })
}

/// Renders a diagram (and query) in the file syntax; `parse_diagram` reads
/// it back to an equal diagram.
pub fn write_diagram(d: &SelectionDiagram, query: Option<&Query>) -> String {
    let spec = d.to_spec();
    let mut out = String::new();
    if !spec.nodes.is_empty() {
        let _ = writeln!(out, "node {}", spec.nodes.join(" "));
    }
    for (a, b) in &spec.edges {
        let _ = writeln!(out, "edge {a} -> {b}");
    }
    for (a, b) in &spec.bidirected {
        let _ = writeln!(out, "bidir {a} <-> {b}");
    }
    for (a, b) in &spec.selection_edges {
        let _ = writeln!(out, "sel {a} -> {b}");
    }
    if let Some(q) = query {
        let list = |s: &BTreeSet<NodeId>| s.iter().map(NodeId::as_str).collect::<Vec<_>>().join(" ");
        let _ = write!(out, "query effect {} do {}", list(&q.effect), list(&q.interventions));
        if !q.strata.is_empty() {
            let _ = write!(out, " strata {}", list(&q.strata));
        }
        out.push('\n');
    }
    out
}
