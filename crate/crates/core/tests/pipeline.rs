//! Corpus generation, training and evaluation working together.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxtag::autodiff::{ParamSet, Tensor};
use voxtag::dsp::{logmel_features, median_f0};
use voxtag::eval::{tag_inversion_eval, tag_inversion_with, EvalError, GenderEvalEntry};
use voxtag::model::{Model, ModelConfig, ModelMode, BOS, TAG_F, TAG_M};
use voxtag::perturb::{apply_opposite, utterance_rng, PerturbConfig, SpeakerGender};
use voxtag::synthdata::{generate_corpus, plan_corpus, write_corpus, SynthSpec};
use voxtag::train::{
    average_checkpoints, build_vocabulary, fine_tune_init, load_corpus, noam_lr, probe_discriminator, probe_split,
    train_loop, ProbeConfig, Strategy, TrainConfig, TrainError, Utterance,
};

fn small_model(mode: ModelMode) -> ModelConfig {
    ModelConfig { hidden_dim: 16, disc_hidden: 16, mode, ..Default::default() }
}

fn short_run(total: u64, seed: u64) -> TrainConfig {
    TrainConfig { total_updates: total, warmup_updates: total / 10, seed, ..Default::default() }
}

#[test]
fn speaker_split_is_binomial() {
    let plan = plan_corpus(&SynthSpec { n_utterances: 2000, seed: 4, ..Default::default() }).unwrap();
    let f = plan.iter().filter(|s| s.gender == SpeakerGender::F).count();
    // Mean 600, standard deviation about 20.5; four sigma either side.
    assert!((518..=682).contains(&f), "{f}");
    assert!(plan.iter().all(|s| {
        let mut c = s.contour.clone();
        c.sort_by(f64::total_cmp);
        let n = c.len();
        let mid = if n % 2 == 1 { c[n / 2] } else { 0.5 * (c[n / 2 - 1] + c[n / 2]) };
        (mid - 1.0).abs() < 1e-12
    }));
}

#[test]
fn rendered_voices_follow_their_speakers() {
    let spec = SynthSpec { n_utterances: 150, seed: 11, ..Default::default() };
    let plan = plan_corpus(&spec).unwrap();
    let (corpus, entries) = generate_corpus(&spec).unwrap();
    assert_eq!(corpus.len(), 150);
    assert_eq!(entries.len(), 150);
    for (s, u) in plan.iter().zip(&corpus) {
        assert_eq!(s.gender, u.gender);
        let m = median_f0(&u.audio).unwrap();
        // Per-word intonation moves the median by at most its full swing; 2% for the tracker.
        let swing = (2.0 * spec.intonation).exp() * 1.02;
        assert!(m < s.speaker_f0 * swing && m > s.speaker_f0 / swing, "{}: tracked {m} vs {}", u.id, s.speaker_f0);
        match u.gender {
            SpeakerGender::F => assert!((199.0..=301.0).contains(&m), "{}: {m}", u.id),
            // The masculine range reaches 200 Hz, so the 170 Hz threshold only holds away from it.
            SpeakerGender::M if s.speaker_f0 < 170.0 / swing => assert!(m < 170.0, "{}: {m}", u.id),
            SpeakerGender::M if s.speaker_f0 > 170.0 * swing => assert!(m > 170.0, "{}: {m}", u.id),
            SpeakerGender::M => {}
        }
    }
}

#[test]
fn generation_is_seeded() {
    let spec = SynthSpec { n_utterances: 12, seed: 3, ..Default::default() };
    let (a, ea) = generate_corpus(&spec).unwrap();
    let (b, eb) = generate_corpus(&spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(ea, eb);
    let (c, _) = generate_corpus(&SynthSpec { seed: 4, ..spec }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn written_corpus_loads_back() {
    let (corpus, entries) = generate_corpus(&SynthSpec { n_utterances: 6, seed: 8, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &corpus, &entries).unwrap();
    let back = load_corpus(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(back.len(), corpus.len());
    for (a, b) in corpus.iter().zip(&back) {
        assert_eq!((&a.id, a.gender, &a.source, &a.target), (&b.id, b.gender, &b.source, &b.target));
        let err = a.audio.samples().iter().zip(b.audio.samples()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err <= 1.0 / 32768.0 + 1e-12);
    }
    let tsv = std::fs::read(dir.path().join("eval.tsv")).unwrap();
    assert_eq!(voxtag::eval::read_eval_tsv(tsv.as_slice()).unwrap(), entries);
}

#[test]
fn noam_schedule_examples() {
    assert_eq!(noam_lr(200, 200, 2e-3), 2e-3);
    assert_eq!(noam_lr(100, 200, 2e-3), 1e-3);
    assert_eq!(noam_lr(800, 200, 2e-3), 1e-3);
    let ramp: Vec<f64> = (1..=200).map(|s| noam_lr(s, 200, 1.0)).collect();
    assert!(ramp.windows(2).all(|w| w[0] < w[1]));
    let decay: Vec<f64> = (200..=2000).map(|s| noam_lr(s, 200, 1.0)).collect();
    assert!(decay.windows(2).all(|w| w[0] > w[1]));
}

fn random_params(rng: &mut ChaCha8Rng) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.insert("a", Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap());
    p.insert("b", Tensor::vector((0..5).map(|_| rng.random_range(-5.0..5.0)).collect()));
    p
}

#[test]
fn checkpoint_averaging_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let one = random_params(&mut rng);
    let seven: Vec<&ParamSet<f64>> = std::iter::repeat_n(&one, 7).collect();
    let avg = average_checkpoints(&seven).unwrap();
    for (name, t) in one.iter() {
        for (x, y) in t.values().iter().zip(avg.get(name).unwrap().values()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    let mut zero = ParamSet::new();
    zero.insert("w", Tensor::vector(vec![0.0]));
    let mut two = ParamSet::new();
    two.insert("w", Tensor::vector(vec![2.0]));
    assert_eq!(average_checkpoints(&[&zero, &two]).unwrap().get("w").unwrap().values(), &[1.0]);

    let k = 9;
    let sets: Vec<ParamSet<f64>> = (0..k).map(|_| random_params(&mut rng)).collect();
    let refs: Vec<&ParamSet<f64>> = sets.iter().collect();
    let avg = average_checkpoints(&refs).unwrap();
    for (name, t) in avg.iter() {
        for (j, v) in t.values().iter().enumerate() {
            // Summed in reverse order as an independent check.
            let sum: f64 = sets.iter().rev().map(|s| s.get(name).unwrap().values()[j]).sum();
            assert!((v - sum / k as f64).abs() <= 1e-12);
        }
    }

    assert!(matches!(average_checkpoints(&[]), Err(TrainError::EmptyList)));
    assert!(matches!(average_checkpoints(&[&zero, &one]), Err(TrainError::ShapeMismatch)));
}

fn corpus(n: usize, seed: u64) -> (Vec<Utterance>, Vec<GenderEvalEntry>) {
    generate_corpus(&SynthSpec { n_utterances: n, seed, ..Default::default() }).unwrap()
}

#[test]
fn fine_tuning_requires_an_unaware_init() {
    let (data, _) = corpus(20, 2);
    let vocab = build_vocabulary(&data);
    let cfg = TrainConfig { strategy: Strategy::FineTune, ..short_run(20, 0) };
    let multi = small_model(ModelMode::MultiGender);
    assert!(matches!(train_loop(&data, &vocab, &multi, &cfg, None), Err(TrainError::MissingInit)));
    let wrong = Model::new(small_model(ModelMode::MultiGender), vocab.len(), 0).unwrap();
    assert!(train_loop(&data, &vocab, &multi, &cfg, Some(&wrong)).is_err());
    let only_f = small_model(ModelMode::SpecializedF);
    assert!(matches!(train_loop(&data, &vocab, &only_f, &short_run(20, 0), None), Err(TrainError::GenderFilter { .. })));
}

#[test]
fn fine_tune_init_predicts_like_its_source() {
    let (data, _) = corpus(4, 5);
    let vocab = build_vocabulary(&data);
    let unaware = Model::new(small_model(ModelMode::GenderUnaware), vocab.len(), 9).unwrap();
    let tuned = fine_tune_init(&unaware, &small_model(ModelMode::MultiGender)).unwrap();
    for u in &data {
        let feats = logmel_features(&u.audio, true).unwrap();
        let (a, b) = (unaware.encode(&feats).unwrap(), tuned.encode(&feats).unwrap());
        assert_eq!(a, b);
        let ids = vocab.encode(&u.target[..2]).unwrap();
        let before = unaware.decode_step(&a, &[&[BOS][..], &ids].concat()).unwrap();
        for tag in [TAG_F, TAG_M] {
            assert_eq!(tuned.decode_step(&b, &[&[tag][..], &ids].concat()).unwrap(), before);
        }
    }
}

#[test]
fn training_is_reproducible() {
    let (data, _) = corpus(30, 6);
    let vocab = build_vocabulary(&data);
    let cfg = TrainConfig { use_grl: true, perturb: Some(PerturbConfig::with_p(0.5)), ..short_run(60, 13) };
    let model = small_model(ModelMode::MultiGender);
    let a = train_loop(&data, &vocab, &model, &cfg, None).unwrap();
    let b = train_loop(&data, &vocab, &model, &cfg, None).unwrap();
    assert_eq!(a.checkpoints.len(), 10);
    assert!(a.checkpoints.iter().zip(&b.checkpoints).all(|(x, y)| x.step == y.step && x.params == y.params));
    assert_eq!(a.metrics, b.metrics);
    let c = train_loop(&data, &vocab, &model, &TrainConfig { seed: 14, ..cfg }, None).unwrap();
    assert_ne!(a.checkpoints.last().unwrap().params, c.checkpoints.last().unwrap().params);
}

#[test]
fn runaway_learning_rate_is_reported() {
    let (data, _) = corpus(30, 6);
    let vocab = build_vocabulary(&data);
    let cfg = TrainConfig { lr_peak: 50.0, ..short_run(100, 1) };
    let r = train_loop(&data, &vocab, &small_model(ModelMode::MultiGender), &cfg, None);
    assert!(matches!(r, Err(TrainError::DivergedLoss { .. })), "{r:?}");
}

#[test]
fn scratch_training_halves_held_out_loss() {
    let (data, _) = corpus(200, 21);
    let vocab = build_vocabulary(&data);
    let model = ModelConfig { mode: ModelMode::MultiGender, ..Default::default() };
    let out = train_loop(&data, &vocab, &model, &short_run(2000, 21), None).unwrap();
    let (first, last) = (out.validation[0].1, out.validation.last().unwrap().1);
    assert!(out.validation.iter().all(|(_, l)| l.is_finite()));
    assert!(last < 0.5 * first, "held-out loss {first} -> {last}");
    let quarter = out.validation.iter().find(|(s, _)| *s >= 500).unwrap().1;
    assert!(quarter < first, "{first} -> {quarter} at a quarter of training");
}

#[test]
fn perturbation_draws_fresh_each_epoch() {
    let (data, _) = corpus(200, 17);
    let cfg = PerturbConfig::with_p(0.5);
    let manipulated = |epoch: u64| -> BTreeSet<usize> {
        data.iter()
            .enumerate()
            .filter(|(i, u)| apply_opposite(&u.audio, u.gender, &cfg, &mut utterance_rng(7, *i as u64, epoch)).unwrap().1)
            .map(|(i, _)| i)
            .collect()
    };
    let (e0, e1) = (manipulated(0), manipulated(1));
    assert_ne!(e0, e1);
    for set in [&e0, &e1] {
        // Binomial(200, 0.5): five sigma is about 35.
        assert!((65..=135).contains(&set.len()), "{}", set.len());
    }
    assert_eq!(e0, manipulated(0));
}

#[test]
fn constant_encoder_probe_scores_the_majority_rate() {
    let (data, _) = corpus(60, 30);
    let vocab = build_vocabulary(&data);
    let model = Model::zeroed(small_model(ModelMode::GenderUnaware), vocab.len()).unwrap();
    let cfg = ProbeConfig { epochs: 100, ..Default::default() };
    let (fit, score) = probe_split(data.len(), &cfg);
    let f_fit = fit.iter().filter(|&&i| data[i].gender == SpeakerGender::F).count();
    let majority = if 2 * f_fit > fit.len() { SpeakerGender::F } else { SpeakerGender::M };
    let rate = score.iter().filter(|&&i| data[i].gender == majority).count() as f64 / score.len() as f64;
    assert_eq!(probe_discriminator(&model, &data, &cfg).unwrap(), rate);

    let only_m: Vec<Utterance> = data.iter().filter(|u| u.gender == SpeakerGender::M).cloned().collect();
    assert!(matches!(probe_discriminator(&model, &only_m, &cfg), Err(TrainError::SingleClassData)));
}

fn realize(entry: &GenderEvalEntry, speaker: SpeakerGender, tag: SpeakerGender) -> Vec<String> {
    if tag == speaker { entry.reference.clone() } else { entry.wrong_reference.clone() }
}

#[test]
fn tag_following_translator_scores_perfectly() {
    let (data, entries) = corpus(40, 12);
    let by_id: HashMap<&str, &GenderEvalEntry> = entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let r = tag_inversion_with(&data, &entries, |_, u, tag| Ok(realize(by_id[u.id.as_str()], u.gender, tag))).unwrap();
    for b in voxtag::eval::BUCKETS {
        assert_eq!(r.accuracy(b), Some(1.0), "{b}");
        assert_eq!(r.buckets[b].coverage, 1.0);
    }
}

#[test]
fn voice_following_translator_ignores_the_tag() {
    let (data, entries) = corpus(40, 12);
    let by_id: HashMap<&str, &GenderEvalEntry> = entries.iter().map(|e| (e.id.as_str(), e)).collect();
    let r = tag_inversion_with(&data, &entries, |_, u, _| {
        let heard = if median_f0(&u.audio).unwrap() > 170.0 { SpeakerGender::F } else { SpeakerGender::M };
        Ok(realize(by_id[u.id.as_str()], u.gender, heard))
    })
    .unwrap();
    assert_eq!(r.accuracy("1F"), Some(1.0));
    assert_eq!(r.accuracy("1F-TagM"), Some(0.0));
    assert!(r.accuracy("1M").unwrap() > 0.8);
    assert!(r.accuracy("1M-TagF").unwrap() < 0.2);
}

#[test]
fn tag_inversion_needs_a_tagged_model() {
    let (data, entries) = corpus(4, 1);
    let vocab = build_vocabulary(&data);
    let m = Model::new(small_model(ModelMode::GenderUnaware), vocab.len(), 0).unwrap();
    assert!(matches!(tag_inversion_eval(&m, &vocab, &data, &entries, true), Err(EvalError::WrongMode(_))));
}
