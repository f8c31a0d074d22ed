//! Probability expressions: conditional terms tagged by population, products,
//! and sums over single variables.
//!
//! Bound variables are node names, so there is no alpha-renaming; the normal
//! form only reorders products, pushes sums inward as far as their variable
//! allows, and orders directly nested sums of identical scope by name.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeId;

/// Which population a term is measured in. `Target` terms are the starred
/// ones: implicitly conditioned on the selection variables taking their
/// target values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProbTerm {
    pub targets: BTreeSet<NodeId>,
    #[serde(default, rename = "do")]
    pub do_set: BTreeSet<NodeId>,
    #[serde(default)]
    pub conds: BTreeSet<NodeId>,
    pub population: Population,
}

impl ProbTerm {
    pub fn new<I, J, K>(population: Population, targets: I, do_set: J, conds: K) -> Self
    where
        I: IntoIterator<Item = NodeId>,
        J: IntoIterator<Item = NodeId>,
        K: IntoIterator<Item = NodeId>,
    {
        ProbTerm {
            targets: targets.into_iter().collect(),
            do_set: do_set.into_iter().collect(),
            conds: conds.into_iter().collect(),
            population,
        }
    }

    pub fn source(targets: &[&str], do_set: &[&str], conds: &[&str]) -> Self {
        Self::from_strs(Population::Source, targets, do_set, conds)
    }

    pub fn target(targets: &[&str], do_set: &[&str], conds: &[&str]) -> Self {
        Self::from_strs(Population::Target, targets, do_set, conds)
    }

    fn from_strs(p: Population, t: &[&str], d: &[&str], c: &[&str]) -> Self {
        let ids = |s: &[&str]| s.iter().map(|&n| NodeId::from(n)).collect::<Vec<_>>();
        Self::new(p, ids(t), ids(d), ids(c))
    }

    pub fn vars(&self) -> BTreeSet<NodeId> {
        self.targets.iter().chain(&self.do_set).chain(&self.conds).cloned().collect()
    }

    pub fn is_do_free(&self) -> bool {
        self.do_set.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::InvalidExpr("term with no target variables".into()));
        }
        let pairs = [
            (&self.targets, &self.do_set),
            (&self.targets, &self.conds),
            (&self.do_set, &self.conds),
        ];
        for (a, b) in pairs {
            if let Some(v) = a.intersection(b).next() {
                return Err(Error::InvalidExpr(format!("{v} appears twice in {self}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProbExpr {
    Term(ProbTerm),
    Product { factors: Vec<ProbExpr> },
    Sum { var: NodeId, body: Box<ProbExpr> },
}

impl From<ProbTerm> for ProbExpr {
    fn from(t: ProbTerm) -> Self {
        ProbExpr::Term(t)
    }
}

impl ProbExpr {
    pub fn product(factors: Vec<ProbExpr>) -> Self {
        ProbExpr::Product { factors }
    }

    pub fn sum(var: impl Into<NodeId>, body: ProbExpr) -> Self {
        ProbExpr::Sum {
            var: var.into(),
            body: Box::new(body),
        }
    }

    /// Nested sums over `vars` (outermost first, in set order).
    pub fn sum_over<'a>(vars: impl IntoIterator<Item = &'a NodeId>, body: ProbExpr) -> Self {
        let vars: Vec<&NodeId> = vars.into_iter().collect();
        vars.into_iter().rev().fold(body, |acc, v| ProbExpr::sum(v.clone(), acc))
    }

    pub fn free_vars(&self) -> BTreeSet<NodeId> {
        match self {
            ProbExpr::Term(t) => t.vars(),
            ProbExpr::Product { factors } => factors.iter().flat_map(|f| f.free_vars()).collect(),
            ProbExpr::Sum { var, body } => {
                let mut vs = body.free_vars();
                vs.remove(var);
                vs
            }
        }
    }

    fn mentions(&self, v: &NodeId) -> bool {
        self.free_vars().contains(v)
    }

    pub fn terms(&self) -> Vec<&ProbTerm> {
        let mut out = Vec::new();
        self.collect_terms(&mut out);
        out
    }

    fn collect_terms<'a>(&'a self, out: &mut Vec<&'a ProbTerm>) {
        match self {
            ProbExpr::Term(t) => out.push(t),
            ProbExpr::Product { factors } => factors.iter().for_each(|f| f.collect_terms(out)),
            ProbExpr::Sum { body, .. } => body.collect_terms(out),
        }
    }

    /// Number of source-population terms carrying an intervention.
    pub fn interventional_factor_count(&self) -> usize {
        self.terms()
            .iter()
            .filter(|t| t.population == Population::Source && !t.do_set.is_empty())
            .count()
    }

    /// Structural well-formedness: valid terms, every summed variable free in
    /// its body, no summed variable also free in the enclosing expression,
    /// and no rebinding.
    pub fn validate(&self) -> Result<()> {
        self.validate_scoped(&mut Vec::new())?;
        let free = self.free_vars();
        let mut bound = BTreeSet::new();
        self.bound_vars(&mut bound);
        if let Some(v) = free.intersection(&bound).next() {
            return Err(Error::InvalidExpr(format!("{v} is both summed and free")));
        }
        Ok(())
    }

    fn bound_vars(&self, out: &mut BTreeSet<NodeId>) {
        match self {
            ProbExpr::Term(_) => {}
            ProbExpr::Product { factors } => factors.iter().for_each(|f| f.bound_vars(out)),
            ProbExpr::Sum { var, body } => {
                out.insert(var.clone());
                body.bound_vars(out);
            }
        }
    }

    fn validate_scoped(&self, scope: &mut Vec<NodeId>) -> Result<()> {
        match self {
            ProbExpr::Term(t) => t.validate(),
            ProbExpr::Product { factors } => {
                if factors.is_empty() {
                    return Err(Error::InvalidExpr("empty product".into()));
                }
                factors.iter().try_for_each(|f| f.validate_scoped(scope))
            }
            ProbExpr::Sum { var, body } => {
                if scope.contains(var) {
                    return Err(Error::InvalidExpr(format!("{var} summed twice in nested scopes")));
                }
                if !body.mentions(var) {
                    return Err(Error::InvalidExpr(format!("summed variable {var} does not occur in its body")));
                }
                scope.push(var.clone());
                let r = body.validate_scoped(scope);
                scope.pop();
                r
            }
        }
    }

    /// Sub-expression at `site`: child indices from the root (product
    /// factor index, or 0 for a sum body).
    pub fn at(&self, site: &[usize]) -> Option<&ProbExpr> {
        match site.split_first() {
            None => Some(self),
            Some((&k, rest)) => match self {
                ProbExpr::Product { factors } => factors.get(k)?.at(rest),
                ProbExpr::Sum { body, .. } if k == 0 => body.at(rest),
                _ => None,
            },
        }
    }

    /// Copy of `self` with the sub-expression at `site` replaced.
    pub fn replace_at(&self, site: &[usize], with: ProbExpr) -> Option<ProbExpr> {
        match site.split_first() {
            None => Some(with),
            Some((&k, rest)) => match self {
                ProbExpr::Product { factors } => {
                    let mut factors = factors.clone();
                    let child = factors.get(k)?.replace_at(rest, with)?;
                    factors[k] = child;
                    Some(ProbExpr::Product { factors })
                }
                ProbExpr::Sum { var, body } if k == 0 => Some(ProbExpr::Sum {
                    var: var.clone(),
                    body: Box::new(body.replace_at(rest, with)?),
                }),
                _ => None,
            },
        }
    }

    /// Sites of all terms, in depth-first order.
    pub fn term_sites(&self) -> Vec<Vec<usize>> {
        fn go(e: &ProbExpr, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            match e {
                ProbExpr::Term(_) => out.push(prefix.clone()),
                ProbExpr::Product { factors } => {
                    for (k, f) in factors.iter().enumerate() {
                        prefix.push(k);
                        go(f, prefix, out);
                        prefix.pop();
                    }
                }
                ProbExpr::Sum { body, .. } => {
                    prefix.push(0);
                    go(body, prefix, out);
                    prefix.pop();
                }
            }
        }
        let mut out = Vec::new();
        go(self, &mut Vec::new(), &mut out);
        out
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn to_latex(&self) -> String {
        let mut s = String::new();
        render(self, &mut s, &LATEX);
        s
    }
}

fn factors_of(e: ProbExpr) -> Vec<ProbExpr> {
    match e {
        ProbExpr::Product { factors } => factors,
        other => vec![other],
    }
}

fn make_product(mut factors: Vec<ProbExpr>) -> ProbExpr {
    if factors.len() == 1 {
        factors.pop().unwrap()
    } else {
        ProbExpr::Product { factors }
    }
}

fn canon_step(e: &ProbExpr) -> ProbExpr {
    match e {
        ProbExpr::Term(t) => ProbExpr::Term(t.clone()),
        ProbExpr::Product { factors } => {
            let mut flat: Vec<ProbExpr> = factors.iter().map(canon_step).flat_map(factors_of).collect();
            flat.sort();
            make_product(flat)
        }
        ProbExpr::Sum { var, body } => {
            let body = canon_step(body);
            let (inner, outer): (Vec<ProbExpr>, Vec<ProbExpr>) = factors_of(body).into_iter().partition(|f| f.mentions(var));
            if inner.is_empty() {
                // ill-formed; leave the sum in place
                return ProbExpr::sum(var.clone(), make_product(outer));
            }
            let mut sum = ProbExpr::sum(var.clone(), make_product(inner));
            if let ProbExpr::Sum { body: ref b, .. } = sum {
                if let ProbExpr::Sum { var: inner_var, body: inner_body } = b.as_ref() {
                    let parts = factors_of((**inner_body).clone());
                    if parts.iter().any(|f| !f.mentions(var)) {
                        // push this sum below the inner one
                        sum = ProbExpr::sum(inner_var.clone(), ProbExpr::sum(var.clone(), make_product(parts)));
                    } else if inner_var < var {
                        sum = ProbExpr::sum(inner_var.clone(), ProbExpr::sum(var.clone(), make_product(parts)));
                    }
                }
            }
            if outer.is_empty() {
                sum
            } else {
                let mut all = outer;
                all.push(sum);
                all.sort();
                make_product(all)
            }
        }
    }
}

/// Deterministic normal form; idempotent.
pub fn canonicalize(expr: &ProbExpr) -> ProbExpr {
    let mut cur = canon_step(expr);
    for _ in 0..64 {
        let next = canon_step(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

struct Style {
    star: &'static str,
    bar: &'static str,
    sep: &'static str,
    do_open: &'static str,
    sum_open: &'static str,
    sum_close: &'static str,
    lower: bool,
}

const TEXT: Style = Style {
    star: "*",
    bar: "|",
    sep: ",",
    do_open: "do(",
    sum_open: "sum_",
    sum_close: " ",
    lower: true,
};

const LATEX: Style = Style {
    star: "^*",
    bar: " \\mid ",
    sep: ", ",
    do_open: "\\mathrm{do}(",
    sum_open: "\\sum_{",
    sum_close: "} ",
    lower: true,
};

fn var_name(v: &NodeId, style: &Style) -> String {
    if style.lower {
        v.as_str().to_lowercase()
    } else {
        v.as_str().to_string()
    }
}

fn render_term(t: &ProbTerm, out: &mut String, style: &Style) {
    let list = |s: &BTreeSet<NodeId>| s.iter().map(|v| var_name(v, style)).collect::<Vec<_>>().join(style.sep);
    out.push('P');
    if t.population == Population::Target {
        out.push_str(style.star);
    }
    out.push('(');
    out.push_str(&list(&t.targets));
    let mut rhs = Vec::new();
    if !t.do_set.is_empty() {
        rhs.push(format!("{}{})", style.do_open, list(&t.do_set)));
    }
    rhs.extend(t.conds.iter().map(|v| var_name(v, style)));
    if !rhs.is_empty() {
        out.push_str(style.bar);
        out.push_str(&rhs.join(style.sep));
    }
    out.push(')');
}

fn render(e: &ProbExpr, out: &mut String, style: &Style) {
    match e {
        ProbExpr::Term(t) => render_term(t, out, style),
        ProbExpr::Sum { var, body } => {
            out.push_str(style.sum_open);
            out.push_str(&var_name(var, style));
            out.push_str(style.sum_close);
            render(body, out, style);
        }
        ProbExpr::Product { factors } => {
            for (k, f) in factors.iter().enumerate() {
                if k > 0 {
                    out.push(' ');
                }
                let wrap = match f {
                    ProbExpr::Term(_) => false,
                    ProbExpr::Sum { .. } => k + 1 < factors.len(),
                    ProbExpr::Product { .. } => true,
                };
                if wrap {
                    out.push('(');
                }
                render(f, out, style);
                if wrap {
                    out.push(')');
                }
            }
        }
    }
}

impl fmt::Display for ProbTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        render_term(self, &mut s, &TEXT);
        f.write_str(&s)
    }
}

impl fmt::Display for ProbExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        render(self, &mut s, &TEXT);
        f.write_str(&s)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Sum(String),
    P { star: bool },
    Ident(String),
    Do,
    LParen,
    RParen,
    Bar,
    Comma,
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let ident_char = |c: char| c.is_alphanumeric() || c == '_' || c == '\'';
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                out.push((Tok::LParen, col));
                i += 1;
            }
            ')' => {
                out.push((Tok::RParen, col));
                i += 1;
            }
            '|' => {
                out.push((Tok::Bar, col));
                i += 1;
            }
            ',' => {
                out.push((Tok::Comma, col));
                i += 1;
            }
            c if ident_char(c) => {
                let start = i;
                while i < chars.len() && ident_char(chars[i]) {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                let tok = if let Some(v) = word.strip_prefix("sum_") {
                    Tok::Sum(v.to_string())
                } else if word == "P" && chars.get(i) == Some(&'*') {
                    i += 1;
                    Tok::P { star: true }
                } else if word == "P" {
                    Tok::P { star: false }
                } else if word == "do" {
                    Tok::Do
                } else {
                    Tok::Ident(word)
                };
                out.push((tok, col));
            }
            other => {
                return Err(Error::Parse {
                    line: 1,
                    column: col,
                    token: other.to_string(),
                    message: "unexpected character".into(),
                })
            }
        }
    }
    Ok(out)
}

struct ExprParser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    resolve: &'a dyn Fn(&str) -> Option<NodeId>,
}

impl ExprParser<'_> {
    fn err<T>(&self, message: &str) -> Result<T> {
        let (token, column) = match self.toks.get(self.pos) {
            Some((t, c)) => (format!("{t:?}"), *c),
            None => ("end of input".to_string(), 0),
        };
        Err(Error::Parse {
            line: 1,
            column,
            token,
            message: message.to_string(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn expect(&mut self, want: Tok) -> Result<()> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(&format!("expected {want:?}"))
        }
    }

    fn var(&mut self, name: &str) -> Result<NodeId> {
        match (self.resolve)(name) {
            Some(v) => Ok(v),
            None => self.err(&format!("unknown variable {name}")),
        }
    }

    fn product(&mut self) -> Result<ProbExpr> {
        let mut factors = Vec::new();
        while let Some(t) = self.peek() {
            if *t == Tok::RParen {
                break;
            }
            factors.push(self.factor()?);
        }
        if factors.is_empty() {
            return self.err("expected a factor");
        }
        Ok(make_product(factors))
    }

    fn factor(&mut self) -> Result<ProbExpr> {
        match self.peek().cloned() {
            Some(Tok::Sum(v)) => {
                self.pos += 1;
                let var = self.var(&v)?;
                let body = self.product()?;
                Ok(ProbExpr::sum(var, body))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.product()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Some(Tok::P { star }) => {
                self.pos += 1;
                self.term(star)
            }
            _ => self.err("expected `P`, `P*`, `sum_<var>` or `(`"),
        }
    }

    fn ident_list(&mut self) -> Result<Vec<NodeId>> {
        let mut out = Vec::new();
        loop {
            match self.peek().cloned() {
                Some(Tok::Ident(name)) => {
                    self.pos += 1;
                    out.push(self.var(&name)?);
                }
                _ => return self.err("expected a variable"),
            }
            if self.peek() == Some(&Tok::Comma) && matches!(self.toks.get(self.pos + 1), Some((Tok::Ident(_), _))) {
                self.pos += 1;
            } else {
                return Ok(out);
            }
        }
    }

    fn term(&mut self, star: bool) -> Result<ProbExpr> {
        self.expect(Tok::LParen)?;
        let targets = self.ident_list()?;
        let mut do_set = Vec::new();
        let mut conds = Vec::new();
        if self.peek() == Some(&Tok::Bar) {
            self.pos += 1;
            loop {
                match self.peek().cloned() {
                    Some(Tok::Do) => {
                        self.pos += 1;
                        self.expect(Tok::LParen)?;
                        do_set.extend(self.ident_list()?);
                        self.expect(Tok::RParen)?;
                    }
                    Some(Tok::Ident(name)) => {
                        self.pos += 1;
                        conds.push(self.var(&name)?);
                    }
                    _ => return self.err("expected `do(...)` or a variable"),
                }
                if self.peek() == Some(&Tok::Comma) {
                    self.pos += 1;
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen)?;
        let population = if star { Population::Target } else { Population::Source };
        let term = ProbTerm::new(population, targets, do_set, conds);
        term.validate()?;
        Ok(ProbExpr::Term(term))
    }
}

/// Parses the text rendering (`sum_z P(y|do(x),z) P*(z|x)`). A sum extends to
/// the end of the enclosing product or parenthesis. `resolve` maps written
/// variable names to node names.
pub fn parse_expr(text: &str, resolve: &dyn Fn(&str) -> Option<NodeId>) -> Result<ProbExpr> {
    let mut p = ExprParser {
        toks: lex(text)?,
        pos: 0,
        resolve,
    };
    let e = p.product()?;
    if p.pos != p.toks.len() {
        return p.err("trailing input");
    }
    e.validate()?;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upper(s: &str) -> Option<NodeId> {
        Some(NodeId::new(s.to_uppercase()))
    }

    fn t(e: &str) -> ProbExpr {
        parse_expr(e, &upper).unwrap()
    }

    #[test]
    fn render_examples() {
        let e = ProbExpr::sum(
            "Z",
            ProbExpr::product(vec![
                ProbTerm::source(&["Y"], &["X"], &["Z"]).into(),
                ProbTerm::target(&["Z"], &[], &["X"]).into(),
            ]),
        );
        assert_eq!(e.to_string(), "sum_z P(y|do(x),z) P*(z|x)");
        assert_eq!(e.to_latex(), "\\sum_{z} P(y \\mid \\mathrm{do}(x), z) P^*(z \\mid x)");
        assert_eq!(ProbExpr::from(ProbTerm::target(&["T"], &[], &[])).to_string(), "P*(t)");
    }

    #[test]
    fn parse_round_trip() {
        for s in [
            "sum_z P(y|do(x),z) P*(z|x)",
            "P(y|do(x))",
            "sum_z P(y|do(x),z) sum_w P*(z|w) sum_t P*(t) P(w|do(x),t)",
            "P*(y,z|do(w,x),t)",
        ] {
            assert_eq!(t(s).to_string(), s);
        }
    }

    #[test]
    fn parse_errors_report_column() {
        let err = parse_expr("P(y|do(x)) Q", &upper).unwrap_err();
        assert!(matches!(err, Error::Parse { column: 12, .. }), "{err:?}");
        assert!(parse_expr("sum_q P(y)", &upper).is_err());
    }

    #[test]
    fn product_sorts() {
        let a: ProbExpr = ProbTerm::source(&["A"], &[], &[]).into();
        let b: ProbExpr = ProbTerm::source(&["B"], &[], &[]).into();
        let c = canonicalize(&ProbExpr::product(vec![b.clone(), a.clone()]));
        assert_eq!(c, ProbExpr::product(vec![a, b]));
    }

    #[test]
    fn nested_sums_ordered() {
        let body = t("P(y|z,w)");
        let zw = canonicalize(&ProbExpr::sum("Z", ProbExpr::sum("W", body.clone())));
        let wz = canonicalize(&ProbExpr::sum("W", ProbExpr::sum("Z", body)));
        assert_eq!(zw, wz);
        assert_eq!(zw.to_string(), "sum_w sum_z P(y|w,z)");
    }

    #[test]
    fn sums_pushed_to_minimal_scope() {
        let flat = t("sum_z sum_w P(y|do(x),z) P(w|do(x)) P*(z|w)");
        let nested = t("sum_z P(y|do(x),z) sum_w P(w|do(x)) P*(z|w)");
        assert_eq!(canonicalize(&flat), canonicalize(&nested));
        let c = canonicalize(&nested);
        assert_eq!(canonicalize(&c), c);
    }

    #[test]
    fn validation_rules() {
        assert!(ProbExpr::sum("Q", t("P(y)")).validate().is_err());
        assert!(ProbExpr::product(vec![t("P(z)"), ProbExpr::sum("Z", t("P(y|z)"))]).validate().is_err());
        assert!(ProbTerm::source(&["Y"], &["Y"], &[]).validate().is_err());
        assert!(ProbTerm::source(&[], &[], &[]).validate().is_err());
    }

    #[test]
    fn sites_address_terms() {
        let e = t("sum_z P(y|do(x),z) P*(z|x)");
        let sites = e.term_sites();
        assert_eq!(sites, vec![vec![0, 0], vec![0, 1]]);
        let replaced = e.replace_at(&sites[1], t("P*(z)")).unwrap();
        assert_eq!(replaced.to_string(), "sum_z P(y|do(x),z) P*(z)");
        assert!(e.at(&[1]).is_none());
    }

    #[test]
    fn json_tree_shape() {
        let e = t("sum_z P(y|do(x),z) P*(z|x)");
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["kind"], "sum");
        assert_eq!(v["var"], "Z");
        assert_eq!(v["body"]["factors"][0]["do"][0], "X");
        let back: ProbExpr = serde_json::from_value(v).unwrap();
        assert_eq!(back, e);
    }
}
