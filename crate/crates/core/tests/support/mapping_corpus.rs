//! Promise-string round trips and seeded invalid mapping tables.

use threadbox_core::error::MappingErrorKind;
use threadbox_core::{parse_promises, promises_to_string, MappingTable, PromiseSet};

pub fn check_promise_round_trip() -> Result<usize, String> {
    let mut seen = 0;
    for set in PromiseSet::all_subsets() {
        let text = promises_to_string(set);
        for variant in [text.clone(), format!("  {}  ", text.replace(' ', "\t"))] {
            match parse_promises(&variant) {
                Ok(back) if back == set => {}
                other => return Err(format!("{variant:?} parsed to {other:?}, expected {set:?}")),
            }
        }
        seen += 1;
    }
    if seen != 128 {
        return Err(format!("{seen} subsets"));
    }
    Ok(seen)
}

pub fn render(table: &MappingTable) -> Vec<String> {
    table.rules().iter().map(ToString::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    Duplicate,
    Overlap,
    Incomplete,
}

/// One invalid document per syscall and defect, derived from the bundled
/// table: a repeated rule, a rule that overlaps the existing ones, and a
/// conditional rule set with one branch removed.
pub fn corpus() -> Vec<(String, String, Expected)> {
    let table = MappingTable::bundled();
    let rules = table.rules();
    let text = render(&table);
    let mut out = Vec::new();
    for (i, rule) in text.iter().enumerate() {
        let mut doc = text.clone();
        doc.push(rule.clone());
        out.push((
            rules[i].syscall.to_owned(),
            doc.join("\n"),
            Expected::Duplicate,
        ));
    }
    for syscall in table.syscalls() {
        let extra = match table.required_key(syscall) {
            Some(_) => format!("syscall {syscall} -> none"),
            None => format!("syscall {syscall} when sock_domain=inet -> net"),
        };
        let mut doc = text.clone();
        doc.push(extra);
        out.push((syscall.to_owned(), doc.join("\n"), Expected::Overlap));
    }
    for (i, rule) in rules.iter().enumerate() {
        if rule.condition.is_none() {
            continue;
        }
        let doc: Vec<&str> = text
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, r)| r.as_str())
            .collect();
        out.push((
            rule.syscall.to_owned(),
            doc.join("\n"),
            Expected::Incomplete,
        ));
    }
    out
}

/// Every corpus document is rejected with the seeded defect on the right
/// syscall. Returns the corpus size.
pub fn check_rejections() -> Result<usize, String> {
    let corpus = corpus();
    for (syscall, doc, expected) in &corpus {
        let err = match MappingTable::parse(doc) {
            Ok(_) => return Err(format!("{expected:?} on {syscall} was accepted")),
            Err(e) => e.kind,
        };
        let ok = match (&err, expected) {
            (MappingErrorKind::Duplicate { syscall: s, .. }, Expected::Duplicate)
            | (MappingErrorKind::Overlap { syscall: s, .. }, Expected::Overlap)
            | (MappingErrorKind::Incomplete { syscall: s, .. }, Expected::Incomplete) => {
                s == syscall
            }
            _ => false,
        };
        if !ok {
            return Err(format!("{expected:?} on {syscall} reported as {err:?}"));
        }
    }
    Ok(corpus.len())
}
