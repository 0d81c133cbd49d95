//! Dataset ingestion, word-level tokenization, vocabulary, deterministic
//! splits and batching, plus a seeded synthetic-corpus generator used by the
//! overfit and selection-consistency experiments.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Error, Result};
use crate::knowledge::{KnowledgeBundle, KnowledgeStore, Relation};

/// One conversation turn: the dialogue history, the speaker's emotion label,
/// and the gold listener response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub id: String,
    pub context: Vec<String>,
    pub emotion: String,
    pub response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knowledge: Option<KnowledgeBundle>,
}

/// Token and emotion-label maps. Special tokens occupy the fixed ids 0–10.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    emotions: Vec<String>,
    emotion_to_index: HashMap<String, usize>,
}

/// Serialization mirror for checkpoints.
#[derive(Debug, Serialize, Deserialize)]
pub struct VocabularyData {
    pub tokens: Vec<String>,
    pub emotions: Vec<String>,
}

pub const SPECIALS: [&str; 11] = [
    "[PAD]", "[UNK]", "[BOS]", "[EOS]", "[CLS]", "[SEP]",
    "[xIntent]", "[xNeed]", "[xWant]", "[xEffect]", "[xReact]",
];

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const BOS: usize = 2;
    pub const EOS: usize = 3;
    pub const CLS: usize = 4;
    pub const SEP: usize = 5;

    pub fn relation_token_id(&self, relation: Relation) -> usize {
        6 + relation.index()
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn encode_token(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub fn num_emotions(&self) -> usize {
        self.emotions.len()
    }

    pub fn emotion_index(&self, label: &str) -> Option<usize> {
        self.emotion_to_index.get(label).copied()
    }

    pub fn emotion_label(&self, index: usize) -> &str {
        &self.emotions[index]
    }

    pub fn emotions(&self) -> &[String] {
        &self.emotions
    }

    pub fn to_data(&self) -> VocabularyData {
        VocabularyData {
            tokens: self.id_to_token.clone(),
            emotions: self.emotions.clone(),
        }
    }

    pub fn from_data(data: VocabularyData) -> Result<Self> {
        for (i, special) in SPECIALS.iter().enumerate() {
            if data.tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(Error::Schema(format!(
                    "vocabulary data lacks special token {special} at id {i}"
                )));
            }
        }
        let token_to_id = data
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let emotion_to_index = data
            .emotions
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        Ok(Vocabulary {
            id_to_token: data.tokens,
            token_to_id,
            emotions: data.emotions,
            emotion_to_index,
        })
    }
}

/// Lowercase word-level tokenization; punctuation becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in text.to_lowercase().chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            word.push(ch);
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Load a JSON-lines corpus:
/// `{"id": ..., "context": [...], "emotion": ..., "response": ...,
///   "knowledge": {...}?}`.
pub fn load_corpus(path: &Path) -> Result<Vec<DialogueExample>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("cannot read corpus file {}: {e}", path.display())))?;
    let mut examples = Vec::new();
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
        let context: Vec<String> = obj
            .get("context")
            .and_then(|v| v.as_array())
            .ok_or_else(|| Error::Schema(format!("line {lineno}: missing context list")))?
            .iter()
            .map(|v| {
                v.as_str().map(str::to_string).ok_or_else(|| {
                    Error::Schema(format!("line {lineno}: context entries must be strings"))
                })
            })
            .collect::<Result<_>>()?;
        if context.is_empty() {
            return Err(Error::Schema(format!("line {lineno}: empty context for id {id}")));
        }
        let emotion = obj
            .get("emotion")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Schema(format!("line {lineno}: missing emotion label")))?
            .to_string();
        let response = obj
            .get("response")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Schema(format!("line {lineno}: missing response")))?
            .to_string();
        if response.is_empty() {
            return Err(Error::Schema(format!("line {lineno}: empty response for id {id}")));
        }
        let knowledge = match obj.get("knowledge") {
            Some(v) => Some(KnowledgeBundle::from_json(v, &format!("line {lineno}, id {id}"))?),
            None => None,
        };
        examples.push(DialogueExample { id, context, emotion, response, knowledge });
    }
    Ok(examples)
}

pub fn save_corpus(examples: &[DialogueExample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for example in examples {
        out.push_str(&serde_json::to_string(example).map_err(|e| Error::Io(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Count tokens across contexts, responses, and attached knowledge; tokens
/// below `min_freq` fall back to UNK. Emotion labels are collected and
/// indexed in lexicographic order.
pub fn build_vocab(corpus: &[DialogueExample], min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(contract_err("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut bump = |text: &str| {
        for token in tokenize(text) {
            *counts.entry(token).or_insert(0) += 1;
        }
    };
    for example in corpus {
        for utterance in &example.context {
            bump(utterance);
        }
        bump(&example.response);
        if let Some(bundle) = &example.knowledge {
            for relation in Relation::ALL {
                for inference in bundle.get(relation) {
                    bump(inference);
                }
            }
        }
    }
    let mut kept: Vec<String> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_freq.max(1))
        .map(|(t, _)| t)
        .collect();
    kept.sort();

    let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    id_to_token.extend(kept);
    let token_to_id = id_to_token
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();

    let mut emotions: Vec<String> = corpus.iter().map(|e| e.emotion.clone()).collect();
    emotions.sort();
    emotions.dedup();
    let emotion_to_index = emotions
        .iter()
        .enumerate()
        .map(|(i, e)| (e.clone(), i))
        .collect();

    Ok(Vocabulary { id_to_token, token_to_id, emotions, emotion_to_index })
}

/// Token-id view of one example, ready for the encoders and decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub id: String,
    pub context_ids: Vec<usize>,
    pub relation_ids: [Vec<usize>; 5],
    pub target_ids: Vec<usize>,
    pub emotion: usize,
}

/// Context becomes `[CLS] u_1 [SEP] u_2 [SEP] ...` with tail truncation
/// (the most recent tokens survive); the target becomes `[BOS] ... [EOS]`
/// capped at `max_tgt`.
pub fn encode_example(
    example: &DialogueExample,
    vocab: &Vocabulary,
    max_src: usize,
    max_tgt: usize,
) -> Result<EncodedExample> {
    let emotion = vocab
        .emotion_index(&example.emotion)
        .ok_or_else(|| contract_err(format!("unknown emotion label {}", example.emotion)))?;

    let mut body: Vec<usize> = Vec::new();
    for (i, utterance) in example.context.iter().enumerate() {
        if i > 0 {
            body.push(Vocabulary::SEP);
        }
        for token in tokenize(utterance) {
            body.push(vocab.encode_token(&token));
        }
    }
    let keep = max_src.saturating_sub(1).max(1);
    if body.len() > keep {
        body.drain(..body.len() - keep);
    }
    let mut context_ids = vec![Vocabulary::CLS];
    context_ids.extend(body);

    let empty = KnowledgeBundle::default();
    let bundle = example.knowledge.as_ref().unwrap_or(&empty);
    let relation_ids: [Vec<usize>; 5] = Relation::ALL
        .map(|r| crate::knowledge::build_relation_sequence(bundle, r, vocab, max_src));

    let mut target_ids = vec![Vocabulary::BOS];
    let mut resp: Vec<usize> = tokenize(&example.response)
        .iter()
        .map(|t| vocab.encode_token(t))
        .collect();
    resp.truncate(max_tgt.saturating_sub(2).max(1));
    target_ids.extend(resp);
    target_ids.push(Vocabulary::EOS);

    Ok(EncodedExample {
        id: example.id.clone(),
        context_ids,
        relation_ids,
        target_ids,
        emotion,
    })
}

/// Seeded shuffle, then contiguous train/valid/test shares (train and valid
/// floor-sized, test takes the remainder).
pub fn split(
    corpus: &[DialogueExample],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<DialogueExample>, Vec<DialogueExample>, Vec<DialogueExample>)> {
    let (r_train, r_valid, r_test) = ratios;
    if (r_train + r_valid + r_test - 1.0).abs() > 1e-9 {
        return Err(contract_err(format!("split ratios sum to {}", r_train + r_valid + r_test)));
    }
    if r_train < 0.0 || r_valid < 0.0 || r_test < 0.0 {
        return Err(contract_err("split ratios must be non-negative"));
    }
    let n = corpus.len();
    if n < 3 {
        return Err(contract_err(format!("corpus of {n} examples cannot be split three ways")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (r_train * n as f64).floor() as usize;
    let n_valid = (r_valid * n as f64).floor() as usize;
    let train = order[..n_train].iter().map(|&i| corpus[i].clone()).collect();
    let valid = order[n_train..n_train + n_valid]
        .iter()
        .map(|&i| corpus[i].clone())
        .collect();
    let test = order[n_train + n_valid..]
        .iter()
        .map(|&i| corpus[i].clone())
        .collect();
    Ok((train, valid, test))
}

const EMOTION_POOL: [&str; 32] = [
    "afraid", "angry", "annoyed", "anticipating", "anxious", "apprehensive", "ashamed",
    "caring", "confident", "content", "devastated", "disappointed", "disgusted",
    "embarrassed", "excited", "faithful", "furious", "grateful", "guilty", "hopeful",
    "impressed", "jealous", "joyful", "lonely", "nostalgic", "prepared", "proud", "sad",
    "sentimental", "surprised", "terrified", "trusting",
];

const NEUTRAL_PHRASES: [&str; 8] = [
    "to go home early",
    "to call a friend",
    "to take a walk",
    "to finish the chores",
    "to cook a meal",
    "to read a book",
    "to catch the bus",
    "to clean the house",
];

const PAIR_CUES: [&str; 16] = [
    "rainy", "sunny", "hectic", "quiet", "crowded", "silent", "windy", "golden",
    "foggy", "bright", "narrow", "steep", "dusty", "frozen", "humid", "mellow",
];

/// Deterministic synthetic corpus built so that knowledge is genuinely
/// load-bearing. Emotions rotate round-robin and come in pairs that share a
/// context cue word: the context alone narrows the label to two candidates
/// and only the designated relation (which carries the emotion word, as
/// does the response) disambiguates. Every other relation carries a
/// misleading emotion word from outside the pair, so an unselective reader
/// sees conflicting signals.
pub fn synth_corpus(
    seed: u64,
    size: usize,
    num_emotions: usize,
) -> Result<(Vec<DialogueExample>, KnowledgeStore)> {
    if num_emotions == 0 || num_emotions > EMOTION_POOL.len() {
        return Err(contract_err(format!(
            "num_emotions {num_emotions} outside 1..={}",
            EMOTION_POOL.len()
        )));
    }
    if size < num_emotions {
        return Err(contract_err("size must be at least num_emotions"));
    }
    synth_corpus_with(seed, size, num_emotions, Relation::XReact)
}

/// Same fixture with an explicit designated relation.
pub fn synth_corpus_with(
    seed: u64,
    size: usize,
    num_emotions: usize,
    designated: Relation,
) -> Result<(Vec<DialogueExample>, KnowledgeStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(size);
    let mut store = KnowledgeStore::new();
    let pair_partner = |idx: usize| -> usize {
        if num_emotions % 2 == 0 {
            idx ^ 1
        } else {
            (idx + 1) % num_emotions
        }
    };
    for i in 0..size {
        let emotion_idx = i % num_emotions;
        let emotion = EMOTION_POOL[emotion_idx];
        let partner = pair_partner(emotion_idx);
        let cue = PAIR_CUES[(emotion_idx.min(partner)) % PAIR_CUES.len()];
        let unique = format!("w{emotion_idx}v{}", i / num_emotions);
        let opener = NEUTRAL_PHRASES[rng.gen_range(0..NEUTRAL_PHRASES.len())]
            .trim_start_matches("to ")
            .to_string();
        let context = vec![
            format!("i was about to {opener} on that {cue} day"),
            format!("then the {unique} thing happened to me"),
        ];
        let response = format!("sounds like you are feeling {emotion}");

        let mut bundle = KnowledgeBundle::default();
        for relation in Relation::ALL {
            if relation == designated {
                bundle.set(
                    relation,
                    vec![
                        format!("feels {emotion}"),
                        format!("is {emotion} about it"),
                        format!("stays {emotion}"),
                    ],
                );
            } else {
                // Misleading word from outside the context pair, so the
                // context cue never corroborates it.
                let other = loop {
                    let cand = rng.gen_range(0..num_emotions);
                    if cand != emotion_idx && (cand != partner || num_emotions <= 2) {
                        break EMOTION_POOL[cand];
                    }
                };
                bundle.set(
                    relation,
                    vec![
                        format!("seems to feel {other}"),
                        NEUTRAL_PHRASES[rng.gen_range(0..NEUTRAL_PHRASES.len())].to_string(),
                    ],
                );
            }
        }
        let id = format!("synth-{i:04}");
        store.insert(id.clone(), bundle)?;
        examples.push(DialogueExample {
            id,
            context,
            emotion: emotion.to_string(),
            response,
            knowledge: None,
        });
    }
    Ok((examples, store))
}

/// One padded batch: rectangular id arrays with masks marking real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedIds {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl PaddedIds {
    fn from_sequences(seqs: Vec<Vec<usize>>) -> Self {
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let len = seq.len();
            let mut row = seq;
            row.resize(width, Vocabulary::PAD);
            let mut mrow = vec![true; len];
            mrow.resize(width, false);
            ids.push(row);
            mask.push(mrow);
        }
        PaddedIds { ids, mask }
    }

    /// Recover the unpadded sequence for row `i`.
    pub fn unpadded(&self, i: usize) -> Vec<usize> {
        self.ids[i]
            .iter()
            .zip(&self.mask[i])
            .filter(|(_, &m)| m)
            .map(|(&id, _)| id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub context: PaddedIds,
    pub relations: [PaddedIds; 5],
    pub target: PaddedIds,
    pub emotions: Vec<usize>,
}

/// PAD-padded batches in corpus order; the last partial batch is kept.
pub fn batch(split: &[EncodedExample], batch_size: usize) -> Result<Vec<Batch>> {
    if split.is_empty() {
        return Err(contract_err("cannot batch an empty split"));
    }
    if batch_size == 0 {
        return Err(contract_err("batch size must be positive"));
    }
    let mut batches = Vec::new();
    for chunk in split.chunks(batch_size) {
        let context = PaddedIds::from_sequences(chunk.iter().map(|e| e.context_ids.clone()).collect());
        let relations: [PaddedIds; 5] = std::array::from_fn(|r| {
            PaddedIds::from_sequences(chunk.iter().map(|e| e.relation_ids[r].clone()).collect())
        });
        let target = PaddedIds::from_sequences(chunk.iter().map(|e| e.target_ids.clone()).collect());
        batches.push(Batch {
            ids: chunk.iter().map(|e| e.id.clone()).collect(),
            context,
            relations,
            target,
            emotions: chunk.iter().map(|e| e.emotion).collect(),
        });
    }
    Ok(batches)
}
