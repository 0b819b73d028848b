//! Logical concept labels: an atom, or a left formula joined to one more atom.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_ARITY: usize = 3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormulaError {
    #[error("formula arity {arity} already at the limit {max}")]
    ArityExceeded { arity: usize, max: usize },
    #[error("unknown concept label `{0}`")]
    UnknownLabel(String),
    #[error("cannot parse formula `{text}`: {reason}")]
    Parse { text: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    Or,
    And,
    AndNot,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Or, Op::And, Op::AndNot];

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Or => "OR",
            Op::And => "AND",
            Op::AndNot => "AND NOT",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Concept indices refer to the label order of a [`ConceptStore`](crate::store::ConceptStore).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Formula {
    Atom(usize),
    Compound { left: Box<Formula>, op: Op, right: usize },
}

impl Formula {
    pub fn atom(label: usize) -> Self {
        Formula::Atom(label)
    }

    pub fn compound(left: Formula, op: Op, right: usize) -> Self {
        Formula::Compound { left: Box::new(left), op, right }
    }

    /// Builder-style helpers: `Formula::atom(0).or(1).and_not(2)`.
    pub fn or(self, right: usize) -> Self {
        Self::compound(self, Op::Or, right)
    }

    pub fn and(self, right: usize) -> Self {
        Self::compound(self, Op::And, right)
    }

    pub fn and_not(self, right: usize) -> Self {
        Self::compound(self, Op::AndNot, right)
    }

    pub fn arity(&self) -> usize {
        match self {
            Formula::Atom(_) => 1,
            Formula::Compound { left, .. } => left.arity() + 1,
        }
    }

    pub fn is_atom(&self) -> bool {
        matches!(self, Formula::Atom(_))
    }

    /// Atoms in left-to-right order.
    pub fn atoms(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.arity());
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms(&self, out: &mut Vec<usize>) {
        match self {
            Formula::Atom(a) => out.push(*a),
            Formula::Compound { left, right, .. } => {
                left.collect_atoms(out);
                out.push(*right);
            }
        }
    }

    pub fn contains_atom(&self, atom: usize) -> bool {
        match self {
            Formula::Atom(a) => *a == atom,
            Formula::Compound { left, right, .. } => *right == atom || left.contains_atom(atom),
        }
    }

    /// All one-atom extensions of `self`, ops in `OR, AND, AND NOT` order and
    /// atoms ascending. Atoms already in the formula are skipped.
    pub fn expand(&self, atoms: &[usize], max_arity: usize) -> Result<Vec<Formula>, FormulaError> {
        let arity = self.arity();
        if arity >= max_arity {
            return Err(FormulaError::ArityExceeded { arity, max: max_arity });
        }
        let mut sorted: Vec<usize> = atoms.iter().copied().filter(|&a| !self.contains_atom(a)).collect();
        sorted.sort_unstable();
        sorted.dedup();
        let mut out = Vec::with_capacity(sorted.len() * Op::ALL.len());
        for op in Op::ALL {
            for &a in &sorted {
                out.push(Formula::compound(self.clone(), op, a));
            }
        }
        Ok(out)
    }

    /// Left-parenthesised rendering, e.g. `((sky OR blue) AND NOT tree)`.
    pub fn canonical_string<S: AsRef<str>>(&self, labels: &[S]) -> String {
        match self {
            Formula::Atom(a) => labels[*a].as_ref().to_string(),
            Formula::Compound { left, op, right } => {
                format!("({} {} {})", left.canonical_string(labels), op, labels[*right].as_ref())
            }
        }
    }

    /// Parse a canonical string back, resolving names against `labels`.
    ///
    /// Label names are matched longest-first, so names containing spaces
    /// work as long as they do not contain parentheses.
    pub fn parse<S: AsRef<str>>(text: &str, labels: &[S]) -> Result<Formula, FormulaError> {
        let err = |reason: &str| FormulaError::Parse { text: text.to_string(), reason: reason.to_string() };
        let depth = text.bytes().take_while(|&b| b == b'(').count();
        let mut rest = &text[depth..];

        let (first, tail) = take_label(rest, labels).ok_or_else(|| unknown_prefix(rest))?;
        rest = tail;
        let mut formula = Formula::Atom(first);
        for _ in 0..depth {
            let (op, tail) = if let Some(t) = rest.strip_prefix(" AND NOT ") {
                (Op::AndNot, t)
            } else if let Some(t) = rest.strip_prefix(" AND ") {
                (Op::And, t)
            } else if let Some(t) = rest.strip_prefix(" OR ") {
                (Op::Or, t)
            } else {
                return Err(err("expected ` OR `, ` AND ` or ` AND NOT `"));
            };
            let (atom, tail) = take_label(tail, labels).ok_or_else(|| unknown_prefix(tail))?;
            rest = tail.strip_prefix(')').ok_or_else(|| err("expected `)`"))?;
            formula = Formula::compound(formula, op, atom);
        }
        if !rest.is_empty() {
            return Err(err("trailing characters"));
        }
        Ok(formula)
    }
}

fn unknown_prefix(rest: &str) -> FormulaError {
    let name = rest.split([')', ' ']).next().unwrap_or(rest);
    FormulaError::UnknownLabel(name.to_string())
}

/// Longest label that prefixes `s` and is followed by a separator or the end.
fn take_label<'a, S: AsRef<str>>(s: &'a str, labels: &[S]) -> Option<(usize, &'a str)> {
    labels
        .iter()
        .enumerate()
        .filter(|(_, l)| {
            let l = l.as_ref();
            !l.is_empty() && s.starts_with(l) && matches!(s.as_bytes().get(l.len()), None | Some(b')') | Some(b' '))
        })
        .max_by_key(|(_, l)| l.as_ref().len())
        .map(|(i, l)| (i, &s[l.as_ref().len()..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LABELS: [&str; 4] = ["sky", "blue", "tree", "wall tile"];

    #[test]
    fn expand_counts_and_order() {
        let base = Formula::atom(0);
        let out = base.expand(&[0, 1, 2], 3).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out[0], Formula::atom(0).or(1));
        assert_eq!(out[1], Formula::atom(0).or(2));
        assert_eq!(out[2], Formula::atom(0).and(1));
        assert_eq!(out[5], Formula::atom(0).and_not(2));

        let deep = Formula::atom(0).or(1).and(2);
        assert_eq!(deep.expand(&[3], 3), Err(FormulaError::ArityExceeded { arity: 3, max: 3 }));
        assert!(base.expand(&[], 3).unwrap().is_empty());
    }

    #[test]
    fn canonical_strings() {
        assert_eq!(Formula::atom(0).canonical_string(&LABELS), "sky");
        assert_eq!(Formula::atom(0).or(1).canonical_string(&LABELS), "(sky OR blue)");
        let nested = Formula::atom(0).or(1).and_not(2);
        assert_eq!(nested.canonical_string(&LABELS), "((sky OR blue) AND NOT tree)");
    }

    #[test]
    fn parse_roundtrip_with_spaced_names() {
        let f = Formula::atom(3).and_not(0).or(2);
        let s = f.canonical_string(&LABELS);
        assert_eq!(s, "((wall tile AND NOT sky) OR tree)");
        assert_eq!(Formula::parse(&s, &LABELS).unwrap(), f);
        assert_eq!(Formula::parse("sky", &LABELS).unwrap(), Formula::atom(0));
        assert_eq!(Formula::parse("(sky OR cloud)", &LABELS), Err(FormulaError::UnknownLabel("cloud".into())));
        assert!(matches!(Formula::parse("(sky XOR blue)", &LABELS), Err(FormulaError::Parse { .. })));
        assert!(matches!(Formula::parse("(sky OR blue", &LABELS), Err(FormulaError::Parse { .. })));
    }

    #[test]
    fn expansions_unique_and_strings_injective() {
        use std::collections::HashSet;
        let labels: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
        let atoms: Vec<usize> = (0..5).collect();
        let mut all = vec![];
        for a in 0..5 {
            let lvl2 = Formula::atom(a).expand(&atoms, 3).unwrap();
            let uniq: HashSet<_> = lvl2.iter().collect();
            assert_eq!(uniq.len(), lvl2.len());
            for f in &lvl2 {
                all.extend(f.expand(&atoms, 3).unwrap());
            }
            all.extend(lvl2);
            all.push(Formula::atom(a));
        }
        let strings: HashSet<_> = all.iter().map(|f| f.canonical_string(&labels)).collect();
        let formulas: HashSet<_> = all.iter().collect();
        assert_eq!(strings.len(), formulas.len());
        for f in &all {
            assert_eq!(&Formula::parse(&f.canonical_string(&labels), &labels).unwrap(), f);
        }
    }
}
