//! Gender accuracy, the tag-inversion protocol and corpus BLEU.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{tag_for, Model, ModelError, ModelMode, Vocabulary};
use crate::perturb::SpeakerGender;
use crate::train::{extract_features, TrainError, Utterance};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no hypothesis for entry {0}")]
    MissingHypothesis(String),
    #[error("no eval entry for utterance {0}")]
    MissingEntry(String),
    #[error("tag inversion needs a multi_gender model, got {0}")]
    WrongMode(ModelMode),
    #[error("{hyps} hypotheses for {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty reference")]
    EmptyReference,
    #[error("invalid eval entry {id}: {msg}")]
    InvalidEntry { id: String, msg: String },
    #[error("eval line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenderEvalEntry {
    pub id: String,
    pub reference: Vec<String>,
    pub wrong_reference: Vec<String>,
    /// (correct form, wrong form) for every gender-marked slot.
    pub term_pairs: Vec<(String, String)>,
}

impl GenderEvalEntry {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(EvalError::InvalidEntry { id: self.id.clone(), msg: msg.to_string() });
        if self.term_pairs.is_empty() {
            return bad("no term pairs");
        }
        if self.term_pairs.iter().any(|(c, w)| c.eq_ignore_ascii_case(w)) {
            return bad("correct and wrong forms coincide");
        }
        Ok(())
    }

    /// The entry as seen under the opposite tag: references and forms swapped.
    pub fn inverted(&self) -> Self {
        Self {
            id: self.id.clone(),
            reference: self.wrong_reference.clone(),
            wrong_reference: self.reference.clone(),
            term_pairs: self.term_pairs.iter().map(|(c, w)| (w.clone(), c.clone())).collect(),
        }
    }
}

pub fn write_eval_tsv(entries: &[GenderEvalEntry], mut out: impl Write) -> io::Result<()> {
    for e in entries {
        let pairs: Vec<String> = e.term_pairs.iter().map(|(c, w)| format!("{c}|{w}")).collect();
        writeln!(out, "{}\t{}\t{}\t{}", e.id, e.reference.join(" "), e.wrong_reference.join(" "), pairs.join(";"))?;
    }
    Ok(())
}

pub fn read_eval_tsv(input: impl BufRead) -> Result<Vec<GenderEvalEntry>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| EvalError::Malformed { line: i + 1, msg };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, found {}", cols.len())));
        }
        let term_pairs = cols[3]
            .split(';')
            .filter(|p| !p.is_empty())
            .map(|p| p.split_once('|').map(|(c, w)| (c.to_string(), w.to_string())))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| err(format!("bad term pairs {:?}", cols[3])))?;
        let words = |s: &str| s.split_whitespace().map(String::from).collect();
        let entry = GenderEvalEntry {
            id: cols[0].to_string(),
            reference: words(cols[1]),
            wrong_reference: words(cols[2]),
            term_pairs,
        };
        entry.validate()?;
        out.push(entry);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenderAccuracyReport {
    pub found: usize,
    pub correct: usize,
    pub total_terms: usize,
    /// `correct / found`; absent when nothing was found.
    pub accuracy: Option<f64>,
    pub coverage: f64,
}

impl GenderAccuracyReport {
    fn from_counts(found: usize, correct: usize, total_terms: usize) -> Self {
        Self {
            found,
            correct,
            total_terms,
            accuracy: (found > 0).then(|| correct as f64 / found as f64),
            coverage: if total_terms == 0 { 0.0 } else { found as f64 / total_terms as f64 },
        }
    }
}

/// Whole-token, case-insensitive term scoring: a pair counts as found when either form
/// occurs in the hypothesis, and as correct when the correct form does.
pub fn gender_accuracy(
    hypotheses: &HashMap<String, Vec<String>>,
    entries: &[GenderEvalEntry],
) -> Result<GenderAccuracyReport> {
    let (mut found, mut correct, mut total) = (0, 0, 0);
    for e in entries {
        let hyp = hypotheses.get(&e.id).ok_or_else(|| EvalError::MissingHypothesis(e.id.clone()))?;
        let has = |form: &str| hyp.iter().any(|t| t.eq_ignore_ascii_case(form));
        for (c, w) in &e.term_pairs {
            total += 1;
            if has(c) {
                found += 1;
                correct += 1;
            } else if has(w) {
                found += 1;
            }
        }
    }
    Ok(GenderAccuracyReport::from_counts(found, correct, total))
}

pub const BUCKETS: [&str; 4] = ["1F", "1M", "1F-TagM", "1M-TagF"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagInversionReport {
    /// Keyed by bucket name: 1F, 1M, 1F-TagM, 1M-TagF.
    pub buckets: BTreeMap<String, GenderAccuracyReport>,
    /// Hypotheses under the matching tag, by utterance id.
    pub matched: BTreeMap<String, Vec<String>>,
    /// Hypotheses under the inverted tag, by utterance id.
    pub inverted: BTreeMap<String, Vec<String>>,
}

impl TagInversionReport {
    pub fn accuracy(&self, bucket: &str) -> Option<f64> {
        self.buckets.get(bucket).and_then(|r| r.accuracy)
    }
}

/// Runs the four-way protocol with an arbitrary translator `(utterance, tag) → tokens`.
/// Inverted-tag outputs are scored against the swapped references, since the tag
/// defines correctness.
pub fn tag_inversion_with<F>(corpus: &[Utterance], entries: &[GenderEvalEntry], mut translate: F) -> Result<TagInversionReport>
where
    F: FnMut(usize, &Utterance, SpeakerGender) -> Result<Vec<String>>,
{
    let by_id: HashMap<&str, &GenderEvalEntry> = entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut matched = BTreeMap::new();
    let mut inverted = BTreeMap::new();
    let mut groups: BTreeMap<&str, (HashMap<String, Vec<String>>, Vec<GenderEvalEntry>)> = BTreeMap::new();
    for (i, u) in corpus.iter().enumerate() {
        let e = *by_id.get(u.id.as_str()).ok_or_else(|| EvalError::MissingEntry(u.id.clone()))?;
        let same = translate(i, u, u.gender)?;
        let flip = translate(i, u, u.gender.opposite())?;
        let (mb, ib) = match u.gender {
            SpeakerGender::F => ("1F", "1F-TagM"),
            SpeakerGender::M => ("1M", "1M-TagF"),
        };
        let g = groups.entry(mb).or_default();
        g.0.insert(u.id.clone(), same.clone());
        g.1.push(e.clone());
        let g = groups.entry(ib).or_default();
        g.0.insert(u.id.clone(), flip.clone());
        g.1.push(e.inverted());
        matched.insert(u.id.clone(), same);
        inverted.insert(u.id.clone(), flip);
    }
    let mut buckets = BTreeMap::new();
    for b in BUCKETS {
        let report = match groups.get(b) {
            Some((hyps, ents)) => gender_accuracy(hyps, ents)?,
            None => GenderAccuracyReport::from_counts(0, 0, 0),
        };
        buckets.insert(b.to_string(), report);
    }
    Ok(TagInversionReport { buckets, matched, inverted })
}

/// Greedy-decodes every utterance under its own and the opposite tag.
pub fn tag_inversion_eval(
    model: &Model,
    vocab: &Vocabulary,
    corpus: &[Utterance],
    entries: &[GenderEvalEntry],
    cmvn: bool,
) -> Result<TagInversionReport> {
    if model.config().mode != ModelMode::MultiGender {
        return Err(EvalError::WrongMode(model.config().mode));
    }
    let feats = extract_features(corpus, None, cmvn)?;
    let max_len = model.config().max_target_len;
    tag_inversion_with(corpus, entries, |i, _, tag| {
        let ids = model.greedy_decode(&feats[i], tag_for(tag), max_len)?;
        Ok(vocab.decode(&ids))
    })
}

/// Greedy translations of `corpus` under the model's own start token.
pub fn translate_corpus(
    model: &Model,
    vocab: &Vocabulary,
    corpus: &[Utterance],
    cmvn: bool,
) -> Result<Vec<Vec<String>>> {
    let feats = extract_features(corpus, None, cmvn)?;
    let max_len = model.config().max_target_len;
    corpus
        .iter()
        .zip(&feats)
        .map(|(u, f)| Ok(vocab.decode(&model.greedy_decode(f, model.start_token(u.gender), max_len)?)))
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU over whitespace tokens: clipped 1..4-gram precisions with exponential
/// smoothing of zero counts, times the brevity penalty, on a 0..100 scale. An n-gram
/// order with no hypothesis n-grams at all yields 0.
pub fn corpus_bleu(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch { hyps: hypotheses.len(), refs: references.len() });
    }
    if references.is_empty() || references.iter().any(Vec::is_empty) {
        return Err(EvalError::EmptyReference);
    }
    let mut correct = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut sys_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        sys_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                correct[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if sys_len == 0 {
        return Ok(0.0);
    }
    let mut smooth = 1.0;
    let mut log_sum = 0.0;
    for n in 0..4 {
        if total[n] == 0 {
            return Ok(0.0);
        }
        let p = if correct[n] == 0 {
            smooth *= 2.0;
            1.0 / (smooth * total[n] as f64)
        } else {
            correct[n] as f64 / total[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if sys_len < ref_len { (1.0 - ref_len as f64 / sys_len as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

/// Report written by the evaluate command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub buckets: BTreeMap<String, GenderAccuracyReport>,
    pub bleu: f64,
    pub utterances: usize,
    pub total_terms: usize,
}

impl EvalReport {
    pub fn new(inv: &TagInversionReport, corpus: &[Utterance], entries: &[GenderEvalEntry]) -> Result<Self> {
        let by_id: HashMap<&str, &GenderEvalEntry> = entries.iter().map(|e| (e.id.as_str(), e)).collect();
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for u in corpus {
            let e = by_id.get(u.id.as_str()).ok_or_else(|| EvalError::MissingEntry(u.id.clone()))?;
            hyps.push(inv.matched.get(&u.id).cloned().unwrap_or_default());
            refs.push(e.reference.clone());
        }
        Ok(Self {
            buckets: inv.buckets.clone(),
            bleu: corpus_bleu(&hyps, &refs)?,
            utterances: corpus.len(),
            total_terms: entries.iter().map(|e| e.term_pairs.len()).sum(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn entry(id: &str, pairs: &[(&str, &str)]) -> GenderEvalEntry {
        GenderEvalEntry {
            id: id.into(),
            reference: pairs.iter().map(|p| p.0.to_string()).collect(),
            wrong_reference: pairs.iter().map(|p| p.1.to_string()).collect(),
            term_pairs: pairs.iter().map(|(c, w)| (c.to_string(), w.to_string())).collect(),
        }
    }

    #[test]
    fn accuracy_counts() {
        let e = entry("a", &[("stanca", "stanco"), ("nata", "nato"), ("pronta", "pronto"), ("sola", "solo")]);
        let hyps = HashMap::from([("a".to_string(), toks("sono stanca e nata ma pronto"))]);
        let r = gender_accuracy(&hyps, std::slice::from_ref(&e)).unwrap();
        assert_eq!((r.found, r.correct, r.total_terms), (3, 2, 4));
        assert!((r.accuracy.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.coverage, 0.75);
        let none = HashMap::from([("a".to_string(), toks("il di che"))]);
        let r = gender_accuracy(&none, std::slice::from_ref(&e)).unwrap();
        assert_eq!((r.accuracy, r.coverage), (None, 0.0));
        assert!(matches!(gender_accuracy(&HashMap::new(), &[e]), Err(EvalError::MissingHypothesis(_))));
    }

    #[test]
    fn bleu_identity_and_floor() {
        let h = vec![toks("il gatto mangia il pesce"), toks("la casa di mio padre")];
        assert!((corpus_bleu(&h, &h).unwrap() - 100.0).abs() < 1e-9);
        let words = |p: &str| (0..15).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
        let refs = vec![words("r"), words("s")];
        let s = corpus_bleu(&[words("x"), words("y")], &refs).unwrap();
        assert!(s > 0.0 && s < 1.0, "{s}");
        assert!(corpus_bleu(&h[..1], &h).is_err());
    }

    #[test]
    fn eval_tsv_round_trip() {
        let e = vec![entry("u1", &[("stanca", "stanco")]), entry("u2", &[("nato", "nata"), ("solo", "sola")])];
        let mut buf = Vec::new();
        write_eval_tsv(&e, &mut buf).unwrap();
        assert_eq!(read_eval_tsv(&buf[..]).unwrap(), e);
        assert!(read_eval_tsv(&b"x\ta\tb\t\n"[..]).is_err());
        assert!(read_eval_tsv(&b"x\ta\tb\tsame|same\n"[..]).is_err());
    }
}
