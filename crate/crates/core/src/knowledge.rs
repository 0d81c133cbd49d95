//! File-backed store of pre-generated commonsense inferences. Inference text
//! is data here, not computation: records arrive as JSON lines keyed by
//! example id with one list of strings per relation.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueExample, Vocabulary};
use crate::error::{contract_err, Error, Result};

/// The five person-X commonsense relations, in the fixed order used for
/// sequencing and tie-breaking throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    XIntent,
    XNeed,
    XWant,
    XEffect,
    XReact,
}

impl Relation {
    pub const ALL: [Relation; 5] = [
        Relation::XIntent,
        Relation::XNeed,
        Relation::XWant,
        Relation::XEffect,
        Relation::XReact,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::XIntent => "xIntent",
            Relation::XNeed => "xNeed",
            Relation::XWant => "xWant",
            Relation::XEffect => "xEffect",
            Relation::XReact => "xReact",
        }
    }

    pub fn from_name(name: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.name() == name)
    }

    /// Position in the canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    /// The special token string marking this relation in encoder input.
    pub fn special_token(self) -> &'static str {
        match self {
            Relation::XIntent => "[xIntent]",
            Relation::XNeed => "[xNeed]",
            Relation::XWant => "[xWant]",
            Relation::XEffect => "[xEffect]",
            Relation::XReact => "[xReact]",
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-relation lists of commonsense inference strings for one example.
/// All five relations are always present; lists may be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBundle {
    #[serde(rename = "xIntent")]
    pub x_intent: Vec<String>,
    #[serde(rename = "xNeed")]
    pub x_need: Vec<String>,
    #[serde(rename = "xWant")]
    pub x_want: Vec<String>,
    #[serde(rename = "xEffect")]
    pub x_effect: Vec<String>,
    #[serde(rename = "xReact")]
    pub x_react: Vec<String>,
}

impl KnowledgeBundle {
    pub fn get(&self, relation: Relation) -> &[String] {
        match relation {
            Relation::XIntent => &self.x_intent,
            Relation::XNeed => &self.x_need,
            Relation::XWant => &self.x_want,
            Relation::XEffect => &self.x_effect,
            Relation::XReact => &self.x_react,
        }
    }

    pub fn set(&mut self, relation: Relation, inferences: Vec<String>) {
        match relation {
            Relation::XIntent => self.x_intent = inferences,
            Relation::XNeed => self.x_need = inferences,
            Relation::XWant => self.x_want = inferences,
            Relation::XEffect => self.x_effect = inferences,
            Relation::XReact => self.x_react = inferences,
        }
    }

    /// Parse from a JSON object that must contain exactly the five relation
    /// keys, each a list of strings. `where_` names the record in errors.
    pub fn from_json(value: &serde_json::Value, where_: &str) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Schema(format!("{where_}: knowledge must be an object")))?;
        let mut bundle = KnowledgeBundle::default();
        for relation in Relation::ALL {
            let list = obj.get(relation.name()).ok_or_else(|| {
                Error::Schema(format!("{where_}: missing relation key {}", relation.name()))
            })?;
            let arr = list.as_array().ok_or_else(|| {
                Error::Schema(format!("{where_}: relation {} must be a list", relation.name()))
            })?;
            let mut strings = Vec::with_capacity(arr.len());
            for item in arr {
                match item.as_str() {
                    Some(s) => strings.push(s.to_string()),
                    None => {
                        return Err(Error::Schema(format!(
                            "{where_}: relation {} holds a non-string entry",
                            relation.name()
                        )))
                    }
                }
            }
            bundle.set(relation, strings);
        }
        for key in obj.keys() {
            if Relation::from_name(key).is_none() {
                return Err(Error::Schema(format!("{where_}: unknown relation key {key}")));
            }
        }
        Ok(bundle)
    }
}

#[derive(Debug, Serialize)]
struct StoreRecord<'a> {
    id: &'a str,
    #[serde(flatten)]
    bundle: &'a KnowledgeBundle,
}

/// Map from example id to its knowledge bundle, insertion-ordered.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeStore {
    entries: Vec<(String, KnowledgeBundle)>,
    index: HashMap<String, usize>,
}

impl KnowledgeStore {
    pub fn new() -> Self {
        KnowledgeStore::default()
    }

    pub fn insert(&mut self, id: String, bundle: KnowledgeBundle) -> Result<()> {
        if self.index.contains_key(&id) {
            return Err(Error::Schema(format!("duplicate knowledge id {id}")));
        }
        self.index.insert(id.clone(), self.entries.len());
        self.entries.push((id, bundle));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeBundle> {
        self.index.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &KnowledgeBundle)> {
        self.entries.iter().map(|(id, b)| (id.as_str(), b))
    }
}

/// Load a JSON-lines knowledge file. Each line is one object:
/// `{"id": ..., "xIntent": [...], "xNeed": [...], "xWant": [...],
///   "xEffect": [...], "xReact": [...]}`.
pub fn load_store(path: &Path) -> Result<KnowledgeStore> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("cannot read knowledge file {}: {e}", path.display())))?;
    let mut store = KnowledgeStore::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: Some(lineno),
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            line: Some(lineno),
            message: "expected a JSON object".to_string(),
        })?;
        let id = obj
            .get("id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Schema(format!("line {lineno}: missing string id")))?
            .to_string();
        let mut rest = serde_json::Map::new();
        for (k, v) in obj {
            if k != "id" {
                rest.insert(k.clone(), v.clone());
            }
        }
        let bundle =
            KnowledgeBundle::from_json(&serde_json::Value::Object(rest), &format!("id {id}"))?;
        store.insert(id, bundle)?;
    }
    Ok(store)
}

/// Serialize with canonical key order, one record per line.
pub fn save_store(store: &KnowledgeStore, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (id, bundle) in store.iter() {
        let record = StoreRecord { id, bundle };
        out.push_str(&serde_json::to_string(&record).map_err(|e| Error::Io(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// What to do when a corpus example has no knowledge record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttachPolicy {
    Strict,
    EmptyFallback,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AttachReport {
    pub attached: usize,
    pub fallback: usize,
}

/// Copy each example's bundle out of the store into the example itself.
pub fn attach(
    store: &KnowledgeStore,
    corpus: &mut [DialogueExample],
    policy: AttachPolicy,
) -> Result<AttachReport> {
    let missing: Vec<&str> = corpus
        .iter()
        .filter(|ex| ex.knowledge.is_none() && store.get(&ex.id).is_none())
        .map(|ex| ex.id.as_str())
        .collect();
    if policy == AttachPolicy::Strict && !missing.is_empty() {
        return Err(contract_err(format!(
            "knowledge records missing for ids: {}",
            missing.join(", ")
        )));
    }
    let mut report = AttachReport::default();
    for example in corpus.iter_mut() {
        if example.knowledge.is_some() {
            report.attached += 1;
            continue;
        }
        match store.get(&example.id) {
            Some(bundle) => {
                example.knowledge = Some(bundle.clone());
                report.attached += 1;
            }
            None => {
                example.knowledge = Some(KnowledgeBundle::default());
                report.fallback += 1;
            }
        }
    }
    Ok(report)
}

/// Encoder input for one relation:
/// `[CLS] [REL_r] tok(cs_1) [SEP] tok(cs_2) ... [SEP] tok(cs_k)`,
/// truncated to `max_len` from the tail.
pub fn build_relation_sequence(
    bundle: &KnowledgeBundle,
    relation: Relation,
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<usize> {
    let mut ids = vec![Vocabulary::CLS, vocab.relation_token_id(relation)];
    for (i, inference) in bundle.get(relation).iter().enumerate() {
        if i > 0 {
            ids.push(Vocabulary::SEP);
        }
        for token in crate::corpus::tokenize(inference) {
            ids.push(vocab.encode_token(&token));
        }
    }
    ids.truncate(max_len.max(2));
    ids
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f
    }

    const FULL_RECORD: &str = r#"{"id":"a","xIntent":["to relax"],"xNeed":["to plan"],"xWant":["to rest"],"xEffect":["gets tired"],"xReact":["happy"]}"#;

    #[test]
    fn empty_file_is_empty_store() {
        let f = write_lines(&[]);
        let store = load_store(f.path()).unwrap();
        assert!(store.is_empty());
    }

    #[test]
    fn missing_relation_key_names_the_id() {
        let f = write_lines(&[r#"{"id":"ex7","xIntent":[],"xNeed":[],"xWant":[],"xEffect":[]}"#]);
        let err = load_store(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ex7") && msg.contains("xReact"), "{msg}");
    }

    #[test]
    fn unknown_relation_key_is_schema_error() {
        let f = write_lines(&[
            r#"{"id":"a","xIntent":[],"xNeed":[],"xWant":[],"xEffect":[],"xReact":[],"xAttr":["zealous"]}"#,
        ]);
        let err = load_store(f.path()).unwrap_err();
        assert!(err.to_string().contains("xAttr"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[FULL_RECORD, "{not json"]);
        match load_store(f.path()) {
            Err(Error::Parse { line: Some(2), .. }) => {}
            other => panic!("expected parse error at line 2, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let f = write_lines(&[FULL_RECORD, FULL_RECORD]);
        assert!(load_store(f.path()).is_err());
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let f = write_lines(&[FULL_RECORD]);
        let store = load_store(f.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        save_store(&store, out.path()).unwrap();
        let first = std::fs::read(out.path()).unwrap();
        let reloaded = load_store(out.path()).unwrap();
        let out2 = tempfile::NamedTempFile::new().unwrap();
        save_store(&reloaded, out2.path()).unwrap();
        let second = std::fs::read(out2.path()).unwrap();
        assert_eq!(first, second);
    }

    fn tiny_vocab(extra: &[&str]) -> Vocabulary {
        let examples = vec![DialogueExample {
            id: "v".into(),
            context: vec![extra.join(" ")],
            emotion: "calm".into(),
            response: "ok".into(),
            knowledge: None,
        }];
        corpus::build_vocab(&examples, 1).unwrap()
    }

    #[test]
    fn empty_inference_list_yields_cls_plus_relation() {
        let vocab = tiny_vocab(&[]);
        let bundle = KnowledgeBundle::default();
        let ids = build_relation_sequence(&bundle, Relation::XIntent, &vocab, 64);
        assert_eq!(ids, vec![Vocabulary::CLS, vocab.relation_token_id(Relation::XIntent)]);
    }

    #[test]
    fn single_word_inference() {
        let vocab = tiny_vocab(&["relax"]);
        let mut bundle = KnowledgeBundle::default();
        bundle.set(Relation::XIntent, vec!["relax".into()]);
        let ids = build_relation_sequence(&bundle, Relation::XIntent, &vocab, 64);
        assert_eq!(
            ids,
            vec![
                Vocabulary::CLS,
                vocab.relation_token_id(Relation::XIntent),
                vocab.encode_token("relax"),
            ]
        );
    }

    #[test]
    fn four_inferences_use_three_separators() {
        let vocab = tiny_vocab(&["to", "be", "alone", "home", "relax", "rest"]);
        let mut bundle = KnowledgeBundle::default();
        bundle.set(
            Relation::XIntent,
            vec![
                "To be alone".into(),
                "To be home".into(),
                "To relax".into(),
                "To rest".into(),
            ],
        );
        let ids = build_relation_sequence(&bundle, Relation::XIntent, &vocab, 64);
        let seps = ids.iter().filter(|&&id| id == Vocabulary::SEP).count();
        assert_eq!(seps, 3);
    }

    #[test]
    fn attach_strict_vs_fallback() {
        let store = KnowledgeStore::new();
        let make_corpus = || {
            vec![DialogueExample {
                id: "lonely-1".into(),
                context: vec!["hi".into()],
                emotion: "lonely".into(),
                response: "hello".into(),
                knowledge: None,
            }]
        };
        let mut corpus = make_corpus();
        let err = attach(&store, &mut corpus, AttachPolicy::Strict).unwrap_err();
        assert!(err.to_string().contains("lonely-1"));

        let mut corpus = make_corpus();
        let report = attach(&store, &mut corpus, AttachPolicy::EmptyFallback).unwrap();
        assert_eq!(report.fallback, 1);
        assert_eq!(corpus[0].knowledge, Some(KnowledgeBundle::default()));
    }

    #[test]
    fn attach_preserves_matching_bundles() {
        let mut store = KnowledgeStore::new();
        let mut bundle = KnowledgeBundle::default();
        bundle.set(Relation::XReact, vec!["happy".into()]);
        store.insert("a".into(), bundle.clone()).unwrap();
        let mut corpus = vec![DialogueExample {
            id: "a".into(),
            context: vec!["hi".into()],
            emotion: "joyful".into(),
            response: "hello".into(),
            knowledge: None,
        }];
        let report = attach(&store, &mut corpus, AttachPolicy::Strict).unwrap();
        assert_eq!(report.attached, 1);
        assert_eq!(corpus[0].knowledge.as_ref().unwrap(), &bundle);
    }
}
