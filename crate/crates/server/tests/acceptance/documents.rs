use std::collections::BTreeMap;

use entropy_core::fusion::{JsonLdDocument, TermKind, Vocabulary};
use serde_json::Value;

use crate::Verdict;

/// Every `@type` and property key is a CURIE whose prefix the document's own
/// context binds to the vocabulary's IRI, naming a term of the right kind.
fn closure_violations(v: &Value, ctx: &BTreeMap<String, String>, vocab: &Vocabulary, out: &mut Vec<String>) {
    let Some(obj) = v.as_object() else {
        out.push("node is not an object".into());
        return;
    };
    let resolves = |term: &str| {
        term.split_once(':').is_some_and(|(prefix, local)| !local.is_empty() && ctx.get(prefix).is_some_and(|iri| vocab.prefixes.get(prefix) == Some(iri)))
    };
    let types: Vec<&str> = match obj.get("@type") {
        Some(Value::String(s)) => vec![s.as_str()],
        Some(Value::Array(a)) => a.iter().filter_map(Value::as_str).collect(),
        _ => Vec::new(),
    };
    if types.is_empty() {
        out.push("node without @type".into());
    }
    for t in types {
        if !resolves(t) || vocab.terms.get(t) != Some(&TermKind::Class) {
            out.push(format!("type {t}"));
        }
    }
    for (k, val) in obj {
        match k.as_str() {
            "@context" | "@id" | "@type" => {}
            "@graph" => {
                for g in val.as_array().into_iter().flatten() {
                    closure_violations(g, ctx, vocab, out);
                }
            }
            term => {
                if !resolves(term) || !matches!(vocab.terms.get(term), Some(TermKind::Property { .. })) {
                    out.push(format!("property {term}"));
                }
            }
        }
    }
}

pub fn criterion(docs: &[JsonLdDocument], sources: &[String]) -> Verdict {
    let vocab = Vocabulary::default();
    let mut round_trip = 0;
    let mut open_terms = Vec::new();
    let mut invalid = 0;
    for doc in docs {
        let text = doc.serialize();
        match JsonLdDocument::parse(&text) {
            Ok(back) if back == *doc && back.serialize() == text => {}
            _ => round_trip += 1,
        }
        let value: Value = serde_json::from_str(&text).expect("serialized document is JSON");
        let ctx: BTreeMap<String, String> = value
            .get("@context")
            .and_then(Value::as_object)
            .map(|c| c.iter().filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_owned()))).collect())
            .unwrap_or_default();
        let mut v = Vec::new();
        closure_violations(&value, &ctx, &vocab, &mut v);
        if let Some(first) = v.first() {
            open_terms.push(format!("{}: {first}", doc.id));
        }
        if !entropy_core::fusion::validate(&vocab, doc).is_empty() {
            invalid += 1;
        }
    }
    Verdict::check(
        !docs.is_empty() && round_trip == 0 && open_terms.is_empty() && invalid == 0,
        format!(
            "{} documents ({}), {round_trip} round-trip failures, {} outside the vocabulary, {invalid} rejected by the validator{}",
            docs.len(),
            sources.join(", "),
            open_terms.len(),
            open_terms.first().map(|t| format!("; first: {t}")).unwrap_or_default()
        ),
    )
}
