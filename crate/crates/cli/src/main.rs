use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use phonodiff::cascade::{run_cascade, CascadeRecord, Dictionary, ErrorTally, TargetVoice, SUMMARY_HEADER};
use phonodiff::corpus::{
    decode_detailed, generate_utterances, load_mel, read_manifest, save_mel, tokenize, transliterate, write_manifest,
    write_utterances, CorpusConfig, Language, ManifestEntry, SyntheticSpec,
};
use phonodiff::diagnostics::{self, ForwardCheck, MOMENT_HEADER};
use phonodiff::factorization::{self, Regime, SWEEP_HEADER};
use phonodiff::sde::{NoiseSchedule, SamplerMode};
use phonodiff::synthesis::{durations_within, segment_mel_mse, synthesize, SynthConfig, Sidecar};
use phonodiff::training::{self, Dataset, TrainConfig, TrainItem, LOG_HEADER};
use phonodiff::{par, rng};

#[derive(Parser)]
#[command(name = "phonodiff", version, about = "Phoneme-conditional diffusion TTS on synthetic mel grids")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the numerical self-checks; exits nonzero if any fails.
    VerifyMath(VerifyArgs),
    /// Generate a synthetic corpus.
    GenCorpus(GenArgs),
    /// Train a model on a manifest.
    Train(TrainArgs),
    /// Synthesize a token string or every entry of a manifest.
    Synth(SynthArgs),
    /// Run ASR -> dictionary MT -> TTS on a manifest.
    Cascade(CascadeArgs),
    /// Score synthesized outputs against a manifest.
    Eval(EvalArgs),
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    seed: u64,
    /// Directory for CSV reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Forward-SDE moments, terminal law and reverse recovery.
    #[arg(long)]
    sde: bool,
    /// Conditional-independence factorization sweep.
    #[arg(long)]
    factorization: bool,
    /// MAS against brute force.
    #[arg(long)]
    mas: bool,
    /// Finite-difference gradient checks.
    #[arg(long)]
    grad: bool,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// CorpusConfig JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TrainConfig JSON; its `seed` is replaced by --seed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus spec.json; defaults to the one next to the manifest.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Train on one language only.
    #[arg(long)]
    language: Option<Language>,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = SamplerMode::Ode)]
    mode: SamplerMode,
    #[arg(long, default_value_t = 1.5)]
    temperature: f64,
}

impl SamplerArgs {
    fn config(&self) -> SynthConfig {
        SynthConfig {
            n_steps: self.steps,
            mode: self.mode,
            temperature: self.temperature,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Whitespace-separated symbols.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    tokens: Option<String>,
    /// Synthesize every entry of this manifest instead.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Speaker for --tokens; manifest entries use their own.
    #[arg(long, default_value_t = 0)]
    speaker: usize,
    #[arg(long, default_value = "utt")]
    id: String,
    /// Transliterate to language A and speak with a language-A speaker.
    #[arg(long)]
    cross: bool,
    /// TrainConfig JSON supplying the noise schedule.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args)]
struct CascadeArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Dictionary JSON; defaults to dictionary.json next to the manifest.
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Target speaker; defaults to the first language-B speaker.
    #[arg(long)]
    target_speaker: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<id>.mel` and `<id>.json` from `synth`.
    #[arg(long)]
    synth: PathBuf,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// `Ok(false)` means the command ran but a check failed.
fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        ensure!(n >= 1, "--threads must be >= 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::VerifyMath(a) => verify_math(a),
        Command::GenCorpus(a) => gen_corpus(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Cascade(a) => cascade(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_lines(path: &Path, header: &str, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = format!("{header}\n");
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sibling(manifest: &Path, name: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(name)
}

fn load_spec(explicit: Option<&Path>, manifest: &Path) -> Result<SyntheticSpec> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| sibling(manifest, "spec.json"));
    read_json(&path)
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(TrainConfig::default()),
    }
}

fn verify_math(a: VerifyArgs) -> Result<bool> {
    let all = !(a.sde || a.factorization || a.mas || a.grad);
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
    }
    let report = |name: &str| a.out.as_ref().map(|d| d.join(name));
    let mut ok = true;
    let mut verdict = |name: &str, pass: bool, detail: String| {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    };
    let sched = NoiseSchedule::default();

    if all || a.sde {
        let rows = diagnostics::forward_moments(&ForwardCheck::default(), &sched, a.seed)?;
        let within = rows.iter().filter(|r| r.within(3.0)).count();
        if let Some(p) = report("sde_moments.csv") {
            write_lines(&p, MOMENT_HEADER, rows.iter().map(|r| r.csv()))?;
        }
        verdict("forward-moments", within == rows.len(), format!("{within}/{} times within 3 SE", rows.len()));

        let law = diagnostics::terminal_law(2.0, -1.0, 1.0, &sched)?;
        println!(
            "INFO terminal-law: B(T)={:.4}, relative mean gap {:.3e}, relative variance gap {:.3e}",
            law.cum_noise, law.mean_rel, law.var_rel
        );
        for mode in [SamplerMode::Ode, SamplerMode::Sde] {
            let r = diagnostics::reverse_recovery(3.0, 0.25, 10_000, 100, mode, &sched, a.seed)?;
            verdict(
                &format!("reverse-recovery-{mode}"),
                r.passes(0.05, 0.10),
                format!("mean {:.4}, var {:.4}", r.sample_mean, r.sample_var),
            );
        }
    }
    if all || a.factorization {
        let base = a.seed;
        let mut rows = Vec::new();
        for regime in [Regime::Strict, Regime::General] {
            rows.extend(factorization::sweep(base..base + 100, 0.0, regime)?);
            rows.extend(factorization::sweep(base..base + 100, 0.5, regime)?);
        }
        if let Some(p) = report("factorization.csv") {
            write_lines(&p, SWEEP_HEADER, rows.iter().map(|r| r.csv()))?;
        }
        let ci_max = rows.iter().filter(|r| r.strength == 0.0).map(|r| r.max_abs_diff).fold(0.0, f64::max);
        verdict("factorization-ci", ci_max < 1e-12, format!("max deviation {ci_max:.3e}"));
        let detected = rows
            .iter()
            .filter(|r| r.strength > 0.0 && r.regime == Regime::General && r.max_abs_diff > 1e-6)
            .count();
        verdict("factorization-non-ci", detected >= 95, format!("{detected}/100 detected at strength 0.5"));
    }
    if all || a.mas {
        let s = diagnostics::mas_sweep(20, 1000, a.seed)?;
        if let Some(p) = report("mas.csv") {
            write_lines(
                &p,
                "exhaustive_instances,random_instances,mismatches",
                [format!("{},{},{}", s.exhaustive_instances, s.random_instances, s.mismatches)],
            )?;
        }
        verdict(
            "mas-optimality",
            s.mismatches == 0,
            format!("{} mismatches over {} instances", s.mismatches, s.exhaustive_instances + s.random_instances),
        );
    }
    if all || a.grad {
        let checks = diagnostics::loss_grad_checks(a.seed, 1e-4)?;
        if let Some(p) = report("grad_check.csv") {
            write_lines(
                &p,
                "loss,checked,max_rel_error,passed",
                checks.iter().map(|(n, r)| format!("{n},{},{:e},{}", r.checked, r.max_rel_error, r.passed)),
            )?;
        }
        for (name, r) in checks {
            verdict(
                &format!("grad-{name}"),
                r.passed && r.checked >= 100,
                format!("{} weights, max rel error {:.2e}", r.checked, r.max_rel_error),
            );
        }
    }
    Ok(ok)
}

fn gen_corpus(a: GenArgs) -> Result<()> {
    let cfg: CorpusConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => CorpusConfig::default(),
    };
    ensure!(cfg.n_utts >= 1, "n_utts must be >= 1");
    ensure!(cfg.held_out < cfg.n_utts, "held_out must leave at least one training utterance");
    let mut rng = rng::seeded(a.seed);
    let spec = SyntheticSpec::generate(&cfg, &mut rng)?;
    let dict = Dictionary::random(&spec.vocab, &mut rng)?;
    let utts = generate_utterances(&spec, cfg.n_utts, (cfg.min_len, cfg.max_len), rng::fork_seed(&mut rng))?;
    fs::create_dir_all(&a.out)?;
    let entries = write_utterances(&spec, &utts, &a.out)?;
    let split = cfg.n_utts - cfg.held_out;
    write_manifest(&a.out.join("train.txt"), &entries[..split])?;
    write_manifest(&a.out.join("test.txt"), &entries[split..])?;
    write_json(&a.out.join("spec.json"), &spec)?;
    write_json(&a.out.join("dictionary.json"), &dict)?;
    write_json(&a.out.join("corpus_config.json"), &cfg)?;
    println!("wrote {} training and {} held-out utterances to {}", split, cfg.held_out, a.out.display());
    Ok(())
}

fn ids_of(entry: &ManifestEntry, spec: &SyntheticSpec) -> Result<Vec<usize>> {
    tokenize(&entry.tokens.join(" "), &spec.vocab).with_context(|| format!("utterance {}", entry.id))
}

fn load_entries(manifest: &Path) -> Result<Vec<ManifestEntry>> {
    read_manifest(manifest).with_context(|| format!("reading manifest {}", manifest.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let spec = load_spec(a.spec.as_deref(), &a.manifest)?;
    let mut cfg = load_train_config(a.config.as_deref())?;
    cfg.seed = a.seed;
    let dir = a.manifest.parent().unwrap_or(Path::new("."));
    let entries = load_entries(&a.manifest)?;
    let items = entries
        .iter()
        .filter(|e| a.language.is_none_or(|l| e.language == l))
        .map(|e| {
            Ok(TrainItem {
                phonemes: ids_of(e, &spec)?,
                speaker: Some(e.speaker),
                language: Some(e.language.id()),
                mel: load_mel(&e.resolve_mel(dir))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ensure!(!items.is_empty(), "no training utterances selected");
    let dataset = Dataset {
        items,
        vocab: spec.vocab.len(),
        speakers: spec.speakers.len(),
        bins: spec.bins,
    };
    fs::create_dir_all(&a.out)?;
    let mut log = vec![];
    let state = training::train_with(&dataset, &cfg, |s| {
        let line = training::log_line(s);
        println!("{line}");
        log.push(line);
    })?;
    training::save_checkpoint(&state, &a.out.join("checkpoint.gdsp"))?;
    write_lines(&a.out.join("train_log.csv"), LOG_HEADER, log)?;
    write_json(&a.out.join("train_config.json"), &cfg)?;
    Ok(())
}

struct SynthJob {
    id: String,
    tokens: Vec<usize>,
    speaker: usize,
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec: SyntheticSpec = read_json(&a.spec)?;
    let cfg = load_train_config(a.config.as_deref())?;
    let params = training::load_checkpoint(&a.checkpoint)?.params;
    let sc = a.sampler.config();
    let jobs: Vec<SynthJob> = match (&a.tokens, &a.manifest) {
        (Some(text), _) => vec![SynthJob {
            id: a.id.clone(),
            tokens: tokenize(text, &spec.vocab)?,
            speaker: a.speaker,
        }],
        (None, Some(m)) => load_entries(m)?
            .iter()
            .map(|e| {
                Ok(SynthJob {
                    id: e.id.clone(),
                    tokens: ids_of(e, &spec)?,
                    speaker: e.speaker,
                })
            })
            .collect::<Result<_>>()?,
        (None, None) => bail!("either --tokens or --manifest is required"),
    };
    fs::create_dir_all(&a.out)?;
    let results = par::map_range(jobs.len(), |index| -> Result<(Sidecar, phonodiff::MelGrid)> {
        let job = &jobs[index];
        let mut rng = rng::stream(a.seed, index as u64);
        let (tokens, speaker) = if a.cross {
            let speaker = if spec.speaker(job.speaker)?.language == Language::A {
                job.speaker
            } else {
                *spec
                    .speakers_of(Language::A)
                    .first()
                    .context("cross-lingual synthesis needs a language-A speaker")?
            };
            (transliterate(&job.tokens, &spec.vocab)?, speaker)
        } else {
            (job.tokens.clone(), job.speaker)
        };
        let language = spec.speaker(speaker)?.language;
        let out = synthesize(&params, &tokens, Some(speaker), Some(language.id()), &cfg.schedule, &sc, &mut rng)
            .with_context(|| format!("synthesizing {}", job.id))?;
        let sidecar = Sidecar {
            id: job.id.clone(),
            tokens: tokens.iter().map(|&t| spec.vocab.name_of(t).unwrap_or("?").to_owned()).collect(),
            speaker: Some(speaker),
            language: Some(language),
            n_steps: sc.n_steps,
            mode: sc.mode,
            temperature: sc.temperature,
            seed: a.seed,
            durations: out.durations,
        };
        Ok((sidecar, out.mel))
    });
    for r in results {
        let (sidecar, mel) = r?;
        save_mel(&mel, &a.out.join(format!("{}.mel", sidecar.id)))?;
        write_json(&a.out.join(format!("{}.json", sidecar.id)), &sidecar)?;
    }
    println!("synthesized {} utterance(s) into {}", jobs.len(), a.out.display());
    Ok(())
}

fn cascade(a: CascadeArgs) -> Result<()> {
    let spec = load_spec(a.spec.as_deref(), &a.manifest)?;
    let dict: Dictionary = read_json(&a.dict.clone().unwrap_or_else(|| sibling(&a.manifest, "dictionary.json")))?;
    let dict = Dictionary::new(dict.a_to_b, &spec.vocab)?;
    let cfg = load_train_config(a.config.as_deref())?;
    let params = training::load_checkpoint(&a.checkpoint)?.params;
    let target_speaker = match a.target_speaker {
        Some(s) => s,
        None => *spec.speakers_of(Language::B).first().context("spec has no language-B speaker")?,
    };
    ensure!(
        spec.speaker(target_speaker)?.language == Language::B,
        "target speaker {target_speaker} does not speak language B"
    );
    let target = TargetVoice {
        speaker: target_speaker,
        language: Language::B,
    };
    let dir = a.manifest.parent().unwrap_or(Path::new("."));
    let entries: Vec<ManifestEntry> = load_entries(&a.manifest)?
        .into_iter()
        .filter(|e| e.language == Language::A)
        .collect();
    ensure!(!entries.is_empty(), "manifest has no language-A utterances to translate");
    let sc = a.sampler.config();
    fs::create_dir_all(&a.out)?;
    let results = par::map_range(entries.len(), |i| -> Result<_> {
        let e = &entries[i];
        let reference = ids_of(e, &spec)?;
        let mel = load_mel(&e.resolve_mel(dir))?;
        let mut rng = rng::stream(a.seed, i as u64);
        let result = run_cascade(&mel, &spec, &dict, &params, target, &cfg.schedule, &sc, &mut rng)
            .with_context(|| format!("cascade on {}", e.id))?;
        let (record, output_tokens) = CascadeRecord::score(&e.id, &reference, &mel, &result, &spec, &dict, Language::B)?;
        Ok((reference, record, output_tokens, result))
    });
    let (mut asr, mut e2e) = (ErrorTally::default(), ErrorTally::default());
    let mut summary = Vec::new();
    let mut timings = Vec::new();
    for r in results {
        let (reference, record, output_tokens, result) = r?;
        asr.add(&reference, &result.source_tokens);
        e2e.add(&dict.translate(&reference)?, &output_tokens);
        save_mel(&result.output.mel, &a.out.join(format!("{}.mel", record.id)))?;
        write_json(&a.out.join(format!("{}.json", record.id)), &record)?;
        summary.push(record.csv());
        let t = result.timings;
        timings.push(format!("{},{:.3},{:.3},{:.3}", record.id, t.asr_ms, t.mt_ms, t.tts_ms));
    }
    write_lines(&a.out.join("summary.csv"), SUMMARY_HEADER, summary)?;
    write_lines(&a.out.join("timings.csv"), "utt_id,asr_ms,mt_ms,tts_ms", timings)?;
    println!(
        "cascade over {} utterances: ASR error {:.4}, end-to-end error {:.4}, end-to-end accuracy {:.4}",
        entries.len(),
        asr.rate(),
        e2e.rate(),
        e2e.accuracy()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    utterances: usize,
    reference_tokens: usize,
    token_error_rate: f64,
    token_accuracy: f64,
    exact_utterances: usize,
    durations_within_one: f64,
    mean_segment_mel_mse: Option<f64>,
}

fn eval(a: EvalArgs) -> Result<()> {
    let spec = load_spec(a.spec.as_deref(), &a.manifest)?;
    let dir = a.manifest.parent().unwrap_or(Path::new("."));
    let entries = load_entries(&a.manifest)?;
    ensure!(!entries.is_empty(), "manifest is empty");
    let mut tally = ErrorTally::default();
    let (mut exact, mut dur_ok, mut dur_total) = (0, 0, 0);
    let mut mse = Vec::new();
    let mut rows = Vec::new();
    for e in &entries {
        let sidecar: Sidecar = read_json(&a.synth.join(format!("{}.json", e.id)))?;
        let mel = load_mel(&a.synth.join(format!("{}.mel", e.id)))?;
        let mut reference = ids_of(e, &spec)?;
        if sidecar.language == Some(Language::A) && e.language == Language::B {
            reference = transliterate(&reference, &spec.vocab)?;
        }
        let decoded = decode_detailed(&mel, &spec)?.tokens;
        let edits_before = tally.edits;
        tally.add(&reference, &decoded);
        let edits = tally.edits - edits_before;
        exact += usize::from(edits == 0);
        let same_tokens = sidecar.durations.len() == e.durations.len() && reference.len() == e.tokens.len();
        let (within, seg_mse) = if same_tokens {
            let w = durations_within(&sidecar.durations, &e.durations, 1)?;
            dur_ok += w;
            dur_total += e.durations.len();
            let reference_mel = load_mel(&e.resolve_mel(dir))?;
            let m = segment_mel_mse(&reference_mel, &e.durations, &mel, &sidecar.durations)?;
            mse.push(m);
            (w.to_string(), m.to_string())
        } else {
            (String::new(), String::new())
        };
        rows.push(format!("{},{},{},{},{}", e.id, reference.len(), edits, within, seg_mse));
    }
    fs::create_dir_all(&a.out)?;
    write_lines(&a.out.join("eval.csv"), "utt_id,reference_tokens,edits,durations_within_one,segment_mel_mse", rows)?;
    let report = EvalReport {
        utterances: entries.len(),
        reference_tokens: tally.reference_tokens,
        token_error_rate: tally.rate(),
        token_accuracy: tally.accuracy(),
        exact_utterances: exact,
        durations_within_one: if dur_total > 0 { dur_ok as f64 / dur_total as f64 } else { 0.0 },
        mean_segment_mel_mse: (!mse.is_empty()).then(|| mse.iter().sum::<f64>() / mse.len() as f64),
    };
    write_json(&a.out.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
