mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use voxtag::autodiff::{LambdaSchedule, ParamSet};
use voxtag::dsp;
use voxtag::eval::{self, EvalReport, GenderEvalEntry};
use voxtag::model::{compute_class_weights, Model, ModelMode, Vocabulary};
use voxtag::perturb::{self, SpeakerGender};
use voxtag::synthdata;
use voxtag::train::{self, Strategy, Utterance};
use voxtag::{audio, Error};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "voxtag", version, about = "Gender-tagged toy speech translation pipeline")]
struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus: wav/, manifest.tsv and eval.tsv under --out.
    SynthData(SynthArgs),
    /// Shift one recording toward the opposite gender's voice.
    Perturb(PerturbArgs),
    /// Extract log-mel features from a recording.
    Features(FeatureArgs),
    /// Train a model; writes checkpoints, the averaged model and metrics under --out.
    Train(TrainArgs),
    /// Average parameter checkpoints.
    AverageCkpt(AverageArgs),
    /// Tag-inversion gender accuracy and BLEU of a model; writes a JSON report.
    Evaluate(EvaluateArgs),
    /// Accuracy of a fresh gender probe on a model's frozen encoder.
    Probe(ProbeArgs),
    /// Print the gradient-reversal strength over training.
    Schedule(ScheduleArgs),
    /// Discriminator class weights for given gender frequencies.
    ClassWeights(ClassWeightArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    n_utterances: Option<usize>,
    #[arg(long)]
    gender_split: Option<f64>,
    #[arg(long)]
    intonation: Option<f64>,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[arg(long)]
    input: PathBuf,
    /// Speaker gender of the input (F or M).
    #[arg(long)]
    gender: SpeakerGender,
    /// Manipulation probability.
    #[arg(long)]
    p: Option<f64>,
}

#[derive(Debug, Args)]
struct FeatureArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    no_cmvn: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// gender_unaware, multi_gender, specialized_F or specialized_M.
    #[arg(long)]
    mode: Option<ModelMode>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Checkpoint to fine-tune from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    use_grl: bool,
    #[arg(long)]
    fixed_lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Enables voice perturbation with this probability.
    #[arg(long)]
    perturb_p: Option<f64>,
    #[arg(long)]
    total_updates: Option<u64>,
    #[arg(long)]
    warmup_updates: Option<u64>,
    #[arg(long)]
    lr_peak: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    average_last: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
}

#[derive(Debug, Args)]
struct AverageArgs {
    /// Checkpoints to average.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    eval_tsv: PathBuf,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    total: Option<u64>,
    /// Single update count to evaluate instead of the checkpoint steps.
    #[arg(long)]
    at: Option<u64>,
    #[arg(long)]
    fixed_lambda: Option<f64>,
}

#[derive(Debug, Args)]
struct ClassWeightArgs {
    /// Share of F utterances.
    #[arg(long = "f")]
    f_f: f64,
    /// Share of M utterances.
    #[arg(long = "m")]
    f_m: f64,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s {
        "scratch" => Ok(Strategy::Scratch),
        "fine_tune" => Ok(Strategy::FineTune),
        _ => Err(format!("unknown strategy {s:?} (scratch or fine_tune)")),
    }
}

enum Failure {
    /// Bad input detected before any work: exit 1.
    Invalid(String),
    /// Failure while running: exit 2.
    Runtime(String),
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into().to_string())
    }
}

fn io_fail(path: &Path, e: io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = std::env::var("VOXTAG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Failure::Invalid)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    let out = cli.out;
    match cli.command {
        Command::SynthData(a) => synth_data(cfg, a, out),
        Command::Perturb(a) => perturb_cmd(cfg, a, out),
        Command::Features(a) => features(a, out),
        Command::Train(a) => train_cmd(cfg, a, out),
        Command::AverageCkpt(a) => average(a, out),
        Command::Evaluate(a) => evaluate(cfg, a, out),
        Command::Probe(a) => probe(cfg, a, out),
        Command::Schedule(a) => schedule(cfg, a),
        Command::ClassWeights(a) => class_weights(a),
    }
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf, Failure> {
    out.ok_or_else(|| invalid("--out is required for this command"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_fail(path, e))
}

fn synth_data(mut cfg: RunConfig, a: SynthArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = require_out(out)?;
    if let Some(n) = a.n_utterances {
        cfg.synth.n_utterances = n;
    }
    if let Some(s) = a.gender_split {
        cfg.synth.gender_split = s;
    }
    if let Some(i) = a.intonation {
        cfg.synth.intonation = i;
    }
    cfg.synth.validate().map_err(|e| invalid(e.to_string()))?;
    let (corpus, entries) = synthdata::generate_corpus(&cfg.synth)?;
    synthdata::write_corpus(&out, &corpus, &entries)?;
    let f = corpus.iter().filter(|u| u.gender == SpeakerGender::F).count();
    println!("wrote {} utterances ({f} F, {} M) to {}", corpus.len(), corpus.len() - f, out.display());
    Ok(())
}

fn perturb_cmd(mut cfg: RunConfig, a: PerturbArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = require_out(out)?;
    if let Some(p) = a.p {
        cfg.perturb.p = p;
    }
    cfg.perturb.validate().map_err(|e| invalid(e.to_string()))?;
    let w: audio::Waveform<f64> = audio::read_wav(&a.input)?;
    let mut rng = perturb::utterance_rng(cfg.perturb.seed, 0, 0);
    let (shifted, manipulated) = perturb::apply_opposite(&w, a.gender, &cfg.perturb, &mut rng)?;
    audio::write_wav(&shifted, &out)?;
    println!("manipulated={manipulated}");
    Ok(())
}

fn features(a: FeatureArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = require_out(out)?;
    let w: audio::Waveform<f64> = audio::read_wav(&a.input)?;
    let f = dsp::logmel_features(&w, !a.no_cmvn)?;
    let file = fs::File::create(&out).map_err(|e| io_fail(&out, e))?;
    f.write_to(BufWriter::new(file))?;
    println!("{} frames x {} mel bands", f.num_frames(), dsp::NUM_MEL);
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, Vocabulary), Failure> {
    Ok(Model::load(path)?)
}

fn load_corpus(path: &Path) -> Result<Vec<Utterance>, Failure> {
    Ok(train::load_corpus(path)?)
}

fn train_cmd(mut cfg: RunConfig, a: TrainArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = require_out(out)?;
    let t = &mut cfg.train;
    if let Some(m) = a.mode {
        cfg.model.mode = m;
    }
    if let Some(s) = a.strategy {
        t.strategy = s;
    }
    t.use_grl |= a.use_grl;
    if a.fixed_lambda.is_some() || a.gamma.is_some() {
        let mut s = t.grl_schedule.unwrap_or_default();
        if let Some(g) = a.gamma {
            s.gamma = g;
            s.fixed_lambda = None;
        }
        if let Some(l) = a.fixed_lambda {
            s.fixed_lambda = Some(l);
        }
        t.grl_schedule = Some(s);
    }
    if let Some(p) = a.perturb_p {
        t.perturb = Some(perturb::PerturbConfig { p, ..cfg.perturb.clone() });
    }
    if let Some(v) = a.total_updates {
        t.total_updates = v;
    }
    if let Some(v) = a.warmup_updates {
        t.warmup_updates = v;
    }
    if let Some(v) = a.lr_peak {
        t.lr_peak = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.average_last {
        t.average_last = v;
    }
    if let Some(v) = a.hidden_dim {
        cfg.model.hidden_dim = v;
    }
    cfg.validate().map_err(invalid)?;
    if cfg.train.strategy == Strategy::FineTune && a.init.is_none() {
        return Err(invalid("fine_tune needs --init"));
    }

    let corpus = load_corpus(&a.manifest)?;
    let init = a.init.as_deref().map(load_model).transpose()?;
    let vocab = match &init {
        Some((_, v)) => v.clone(),
        None => train::build_vocabulary(&corpus),
    };
    let outcome = train::train_loop(&corpus, &vocab, &cfg.model, &cfg.train, init.as_ref().map(|(m, _)| m))?;

    fs::create_dir_all(&out).map_err(|e| io_fail(&out, e))?;
    for c in &outcome.checkpoints {
        let m = Model::from_params(outcome.model.config().clone(), vocab.len(), c.params.clone())?;
        m.save(out.join(format!("ckpt_{:06}.vxck", c.step)), &vocab)?;
    }
    let avg = outcome.averaged(cfg.train.average_last)?;
    avg.save(out.join("model.vxck"), &vocab)?;
    let metrics = out.join("metrics.jsonl");
    let file = fs::File::create(&metrics).map_err(|e| io_fail(&metrics, e))?;
    train::write_metrics(&outcome.metrics, BufWriter::new(file))?;
    write_json(&out.join("config.json"), &cfg)?;
    let (_, last) = outcome.validation.last().copied().unwrap_or((0, f64::NAN));
    println!(
        "trained {} updates; held-out loss {:.4} -> {:.4}; model at {}",
        cfg.train.total_updates,
        outcome.validation[0].1,
        last,
        out.join("model.vxck").display()
    );
    Ok(())
}

fn average(a: AverageArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let out = require_out(out)?;
    let loaded: Vec<(Model, Vocabulary)> = a.inputs.iter().map(|p| load_model(p)).collect::<Result<_, _>>()?;
    let (first, vocab) = &loaded[0];
    if loaded.iter().any(|(m, v)| m.config() != first.config() || v != vocab) {
        return Err(invalid("checkpoints come from different model configurations"));
    }
    let params: Vec<&ParamSet<f64>> = loaded.iter().map(|(m, _)| m.params()).collect();
    let avg = train::average_checkpoints(&params)?;
    Model::from_params(first.config().clone(), vocab.len(), avg)?.save(&out, vocab)?;
    println!("averaged {} checkpoints into {}", loaded.len(), out.display());
    Ok(())
}

fn evaluate(cfg: RunConfig, a: EvaluateArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let (model, vocab) = load_model(&a.model)?;
    let corpus = load_corpus(&a.manifest)?;
    let file = fs::File::open(&a.eval_tsv).map_err(|e| io_fail(&a.eval_tsv, e))?;
    let entries: Vec<GenderEvalEntry> = eval::read_eval_tsv(io::BufReader::new(file))?;
    let cmvn = cfg.train.cmvn;
    let inv = if model.config().mode == ModelMode::MultiGender {
        eval::tag_inversion_eval(&model, &vocab, &corpus, &entries, cmvn)?
    } else {
        // Tag-free models answer the same way under either tag; only matched buckets apply.
        let hyps = eval::translate_corpus(&model, &vocab, &corpus, cmvn)?;
        let mut r = eval::tag_inversion_with(&corpus, &entries, |i, _, _| Ok(hyps[i].clone()))?;
        r.buckets.retain(|k, _| k == "1F" || k == "1M");
        r
    };
    let report = EvalReport::new(&inv, &corpus, &entries)?;
    match out {
        Some(p) => write_json(&p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?),
    }
    for (k, b) in &report.buckets {
        let acc = b.accuracy.map_or("n/a".to_string(), |a| format!("{:.4}", a));
        eprintln!("{k}: accuracy {acc} coverage {:.4}", b.coverage);
    }
    eprintln!("BLEU {:.2}", report.bleu);
    Ok(())
}

fn probe(cfg: RunConfig, a: ProbeArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let (model, _) = load_model(&a.model)?;
    let corpus = load_corpus(&a.manifest)?;
    let acc = train::probe_discriminator(&model, &corpus, &cfg.probe)?;
    println!("probe_accuracy={acc:.4}");
    if let Some(p) = out {
        write_json(&p, &BTreeMap::from([("probe_accuracy", acc)]))?;
    }
    Ok(())
}

fn schedule(cfg: RunConfig, a: ScheduleArgs) -> Result<(), Failure> {
    let mut s = cfg.train.grl_schedule.unwrap_or_else(|| LambdaSchedule {
        total_updates: cfg.train.total_updates,
        ..LambdaSchedule::default()
    });
    if let Some(g) = a.gamma {
        s.gamma = g;
    }
    if let Some(t) = a.total {
        s.total_updates = t;
    }
    if a.fixed_lambda.is_some() {
        s.fixed_lambda = a.fixed_lambda;
    }
    if s.total_updates == 0 || !s.gamma.is_finite() {
        return Err(invalid("schedule needs a positive total and finite gamma"));
    }
    let steps: Vec<u64> = match a.at {
        Some(at) if at > s.total_updates => {
            return Err(invalid(format!("--at {at} exceeds total {}", s.total_updates)))
        }
        Some(at) => vec![at],
        None => {
            let every = (s.total_updates / 10).max(1);
            (0..=s.total_updates).step_by(every as usize).collect()
        }
    };
    let stdout = io::stdout();
    let mut w = stdout.lock();
    for step in steps {
        let l = s.lambda_at(step)?;
        writeln!(w, "step={step} lambda={l:.6}").map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn class_weights(a: ClassWeightArgs) -> Result<(), Failure> {
    let w = compute_class_weights(a.f_f, a.f_m).map_err(|e| invalid(e.to_string()))?;
    println!("w_f={:.4} w_m={:.4}", w.w_f, w.w_m);
    Ok(())
}
