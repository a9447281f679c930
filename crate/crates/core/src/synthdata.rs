//! Synthetic speech-translation corpus whose voices carry the speaker's gender and whose
//! targets contain gender-marked words.
//!
//! Every source word is an 80 ms harmonic segment. The low formants depend on the
//! speaker's gender; two extra peaks taken from eight high bands identify the word.
//! Targets translate word by word, so gendered source words surface as the form that
//! agrees with the speaker.

use std::fs;
use std::io;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{self, AudioError, FormantPeak, SynthSegment};
use crate::eval::{write_eval_tsv, GenderEvalEntry};
use crate::perturb::{utterance_rng, PitchTarget, SpeakerGender};
use crate::train::{write_manifest, ManifestRow, Utterance};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

type Result<T, E = SynthError> = std::result::Result<T, E>;

/// A source word and its translation; gendered words carry (feminine, masculine) forms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lexeme {
    Neutral { source: String, target: String },
    Gendered { source: String, feminine: String, masculine: String },
}

impl Lexeme {
    pub fn source(&self) -> &str {
        match self {
            Lexeme::Neutral { source, .. } | Lexeme::Gendered { source, .. } => source,
        }
    }

    pub fn realize(&self, gender: SpeakerGender) -> &str {
        match (self, gender) {
            (Lexeme::Neutral { target, .. }, _) => target,
            (Lexeme::Gendered { feminine, .. }, SpeakerGender::F) => feminine,
            (Lexeme::Gendered { masculine, .. }, SpeakerGender::M) => masculine,
        }
    }

    pub fn is_gendered(&self) -> bool {
        matches!(self, Lexeme::Gendered { .. })
    }
}

const NEUTRAL: [(&str, &str); 20] = [
    ("the", "il"),
    ("of", "di"),
    ("that", "che"),
    ("and", "e"),
    ("a", "un"),
    ("for", "per"),
    ("with", "con"),
    ("not", "non"),
    ("am", "sono"),
    ("me", "mi"),
    ("this", "questo"),
    ("very", "molto"),
    ("here", "qui"),
    ("today", "oggi"),
    ("always", "sempre"),
    ("also", "anche"),
    ("but", "ma"),
    ("then", "poi"),
    ("now", "ora"),
    ("home", "casa"),
];

const GENDERED: [(&str, &str, &str); 8] = [
    ("loved", "amata", "amato"),
    ("tired", "stanca", "stanco"),
    ("born", "nata", "nato"),
    ("sure", "sicura", "sicuro"),
    ("ready", "pronta", "pronto"),
    ("alone", "sola", "solo"),
    ("arrived", "arrivata", "arrivato"),
    ("glad", "contenta", "contento"),
];

/// High bands whose pairs identify the source words.
pub const CODE_BANDS_HZ: [f64; 8] = [1800.0, 2400.0, 3000.0, 3700.0, 4400.0, 5200.0, 6000.0, 7000.0];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grammar {
    pub lexicon: Vec<Lexeme>,
    pub min_len: usize,
    pub max_len: usize,
    pub min_gendered: usize,
    pub max_gendered: usize,
}

impl Default for Grammar {
    fn default() -> Self {
        let mut lexicon: Vec<Lexeme> = NEUTRAL
            .iter()
            .map(|(s, t)| Lexeme::Neutral { source: s.to_string(), target: t.to_string() })
            .collect();
        lexicon.extend(GENDERED.iter().map(|(s, f, m)| Lexeme::Gendered {
            source: s.to_string(),
            feminine: f.to_string(),
            masculine: m.to_string(),
        }));
        Self { lexicon, min_len: 5, max_len: 12, min_gendered: 1, max_gendered: 3 }
    }
}

impl Grammar {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        let n_codes = CODE_BANDS_HZ.len() * (CODE_BANDS_HZ.len() - 1) / 2;
        if self.lexicon.len() > n_codes {
            return bad("more source words than acoustic codes");
        }
        if !self.lexicon.iter().any(Lexeme::is_gendered) || !self.lexicon.iter().any(|l| !l.is_gendered()) {
            return bad("lexicon needs gendered and neutral words");
        }
        for l in &self.lexicon {
            if let Lexeme::Gendered { feminine, masculine, .. } = l {
                if feminine == masculine {
                    return bad("gendered forms must differ");
                }
            }
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("sentence length range is empty");
        }
        if self.min_gendered == 0 || self.min_gendered > self.max_gendered || self.min_gendered > self.min_len {
            return bad("gendered slot range must be non-empty, at least 1 and fit the sentence");
        }
        Ok(())
    }

    /// Acoustic identity of lexicon entry `i`: two of the code bands.
    pub fn code_peaks(i: usize) -> [f64; 2] {
        let mut k = 0;
        for a in 0..CODE_BANDS_HZ.len() {
            for b in a + 1..CODE_BANDS_HZ.len() {
                if k == i {
                    return [CODE_BANDS_HZ[a], CODE_BANDS_HZ[b]];
                }
                k += 1;
            }
        }
        panic!("lexicon index {i} has no code");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_utterances: usize,
    /// Probability that a speaker is F.
    pub gender_split: f64,
    pub f0_feminine: PitchTarget,
    pub f0_masculine: PitchTarget,
    pub formants_feminine: [f64; 2],
    pub formants_masculine: [f64; 2],
    pub word_duration: f64,
    /// Log-scale spread of per-word f0 around the speaker's median.
    pub intonation: f64,
    pub sample_rate: u32,
    pub grammar: Grammar,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_utterances: 200,
            gender_split: 0.3,
            f0_feminine: PitchTarget { mean: 250.0, std: 17.0 },
            f0_masculine: PitchTarget { mean: 140.0, std: 20.0 },
            formants_feminine: [800.0, 1150.0],
            formants_masculine: [650.0, 950.0],
            word_duration: 0.08,
            intonation: 0.04,
            sample_rate: audio::DEFAULT_SAMPLE_RATE,
            grammar: Grammar::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.n_utterances == 0 {
            return bad("n_utterances must be positive");
        }
        if !(self.gender_split > 0.0 && self.gender_split < 1.0) {
            return bad("gender_split must be in (0, 1)");
        }
        for t in [self.f0_feminine, self.f0_masculine] {
            let (lo, hi) = t.range();
            if !(t.std > 0.0 && lo >= audio::MIN_SYNTH_F0 && hi * (2.0 * self.intonation).exp() <= audio::MAX_SYNTH_F0) {
                return bad("f0 distributions must stay inside the synthesizable range");
            }
        }
        if !(self.word_duration >= 0.02 && self.intonation >= 0.0 && self.intonation <= 0.2) {
            return bad("word_duration must be at least 20 ms and intonation within [0, 0.2]");
        }
        if self.sample_rate < 16_000 {
            return bad("sample_rate must be at least 16 kHz to carry the word codes");
        }
        self.grammar.validate()
    }

    fn pitch(&self, g: SpeakerGender) -> PitchTarget {
        match g {
            SpeakerGender::F => self.f0_feminine,
            SpeakerGender::M => self.f0_masculine,
        }
    }

    fn formants(&self, g: SpeakerGender) -> [f64; 2] {
        match g {
            SpeakerGender::F => self.formants_feminine,
            SpeakerGender::M => self.formants_masculine,
        }
    }
}

/// Draws from `N(mean, std)` until the value lies within ±3σ.
fn truncated<R: Rng + ?Sized>(t: PitchTarget, rng: &mut R) -> f64 {
    let normal = Normal::new(t.mean, t.std).expect("validated std");
    let (lo, hi) = t.range();
    loop {
        let x = normal.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
}

/// A generated utterance before audio rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub gender: SpeakerGender,
    pub speaker_f0: f64,
    pub words: Vec<usize>,
    /// Per-word f0 multipliers, with median exactly 1.
    pub contour: Vec<f64>,
}

fn sample_sentence<R: Rng + ?Sized>(spec: &SynthSpec, rng: &mut R) -> Sentence {
    let gr = &spec.grammar;
    let gender = if rng.random::<f64>() < spec.gender_split { SpeakerGender::F } else { SpeakerGender::M };
    let speaker_f0 = truncated(spec.pitch(gender), rng);
    let len = rng.random_range(gr.min_len..=gr.max_len);
    let k = rng.random_range(gr.min_gendered..=gr.max_gendered.min(len));
    let gendered: Vec<usize> = (0..gr.lexicon.len()).filter(|&i| gr.lexicon[i].is_gendered()).collect();
    let neutral: Vec<usize> = (0..gr.lexicon.len()).filter(|&i| !gr.lexicon[i].is_gendered()).collect();
    let mut slots: Vec<bool> = (0..len).map(|i| i < k).collect();
    slots.shuffle(rng);
    let words = slots
        .iter()
        .map(|&g| *if g { gendered.choose(rng) } else { neutral.choose(rng) }.expect("non-empty"))
        .collect();
    let mut contour: Vec<f64> =
        (0..len).map(|_| (spec.intonation * rng.random_range(-1.0..1.0f64)).exp()).collect();
    let mut sorted = contour.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = if len % 2 == 1 { sorted[len / 2] } else { 0.5 * (sorted[len / 2 - 1] + sorted[len / 2]) };
    contour.iter_mut().for_each(|c| *c /= mid);
    Sentence { gender, speaker_f0, words, contour }
}

fn render(spec: &SynthSpec, s: &Sentence) -> Result<audio::Waveform<f64>> {
    let [f1, f2] = spec.formants(s.gender);
    let segments: Vec<SynthSegment> = s
        .words
        .iter()
        .zip(&s.contour)
        .map(|(&w, c)| {
            let [c1, c2] = Grammar::code_peaks(w);
            SynthSegment {
                f0: Some(s.speaker_f0 * c),
                formants: vec![
                    FormantPeak::new(f1, 1.0),
                    FormantPeak::new(f2, 0.7),
                    FormantPeak::new(c1, 0.5),
                    FormantPeak::new(c2, 0.5),
                ],
                duration: spec.word_duration,
            }
        })
        .collect();
    Ok(audio::synth_segments(&segments, spec.sample_rate)?)
}

/// The sentences, speakers and intonation of a corpus, without audio.
pub fn plan_corpus(spec: &SynthSpec) -> Result<Vec<Sentence>> {
    spec.validate()?;
    Ok((0..spec.n_utterances)
        .map(|i| sample_sentence(spec, &mut utterance_rng(spec.seed, i as u64, u64::MAX)))
        .collect())
}

/// Utterances with rendered audio plus their gender-evaluation entries.
pub fn generate_corpus(spec: &SynthSpec) -> Result<(Vec<Utterance>, Vec<GenderEvalEntry>)> {
    let plan = plan_corpus(spec)?;
    let lex = &spec.grammar.lexicon;
    let width = spec.n_utterances.to_string().len();
    let items: Vec<(Utterance, GenderEvalEntry)> = plan
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let id = format!("utt{i:0width$}");
            let source = s.words.iter().map(|&w| lex[w].source().to_string()).collect();
            let target: Vec<String> = s.words.iter().map(|&w| lex[w].realize(s.gender).to_string()).collect();
            let wrong: Vec<String> = s.words.iter().map(|&w| lex[w].realize(s.gender.opposite()).to_string()).collect();
            let term_pairs = s
                .words
                .iter()
                .filter(|&&w| lex[w].is_gendered())
                .map(|&w| (lex[w].realize(s.gender).to_string(), lex[w].realize(s.gender.opposite()).to_string()))
                .collect();
            let entry = GenderEvalEntry { id: id.clone(), reference: target.clone(), wrong_reference: wrong, term_pairs };
            let audio = render(spec, s)?;
            Ok((Utterance { id, audio, gender: s.gender, source, target }, entry))
        })
        .collect::<Result<_>>()?;
    Ok(items.into_iter().unzip())
}

/// Writes `wav/<id>.wav`, `manifest.tsv` and `eval.tsv` under `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &[Utterance], entries: &[GenderEvalEntry]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("wav"))?;
    let mut rows = Vec::with_capacity(corpus.len());
    for u in corpus {
        let rel = format!("wav/{}.wav", u.id);
        audio::write_wav(&u.audio, dir.join(&rel))?;
        rows.push(ManifestRow {
            id: u.id.clone(),
            wav_path: rel,
            gender: u.gender,
            source_text: u.source.join(" "),
            target_text: u.target.join(" "),
        });
    }
    write_manifest(&rows, io::BufWriter::new(fs::File::create(dir.join("manifest.tsv"))?))?;
    write_eval_tsv(entries, io::BufWriter::new(fs::File::create(dir.join("eval.tsv"))?))?;
    Ok(())
}
