//! Speech-to-speech translation as a cascade: template ASR, dictionary MT,
//! diffusion TTS.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{decode_in, Language, PhonemeVocab, SyntheticSpec};
use crate::error::{Error, Result};
use crate::mel::MelGrid;
use crate::model::ModelParams;
use crate::sde::NoiseSchedule;
use crate::synthesis::{synthesize, SynthConfig, Synthesis};

/// Bijective token map from language A to language B.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dictionary {
    pub a_to_b: BTreeMap<usize, usize>,
}

impl Dictionary {
    pub fn new(a_to_b: BTreeMap<usize, usize>, vocab: &PhonemeVocab) -> Result<Self> {
        let a = vocab.ids_of(Language::A);
        let b = vocab.ids_of(Language::B);
        if a_to_b.keys().copied().collect::<Vec<_>>() != a {
            return Err(Error::Invalid("dictionary must cover every language-A symbol exactly once".into()));
        }
        let mut images: Vec<usize> = a_to_b.values().copied().collect();
        images.sort_unstable();
        if images != b {
            return Err(Error::Invalid("dictionary must be a bijection onto language B".into()));
        }
        Ok(Self { a_to_b })
    }

    /// Uniformly random bijection.
    pub fn random<R: Rng + ?Sized>(vocab: &PhonemeVocab, rng: &mut R) -> Result<Self> {
        let a = vocab.ids_of(Language::A);
        let mut b = vocab.ids_of(Language::B);
        if a.len() != b.len() {
            return Err(Error::Invalid("languages differ in size; no bijection exists".into()));
        }
        b.shuffle(rng);
        Self::new(a.into_iter().zip(b).collect(), vocab)
    }

    pub fn translate(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.a_to_b.get(t).copied().ok_or_else(|| {
                    Error::Invalid(format!("token {t} has no dictionary entry"))
                })
            })
            .collect()
    }
}

/// Wall-clock milliseconds per stage. Informational only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub asr_ms: f64,
    pub mt_ms: f64,
    pub tts_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeResult {
    pub source_tokens: Vec<usize>,
    pub translated_tokens: Vec<usize>,
    pub output: Synthesis,
    pub timings: StageTimings,
}

/// Target side of the cascade.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetVoice {
    pub speaker: usize,
    pub language: Language,
}

/// ASR on `source_mel` (language A), dictionary translation, then synthesis
/// in the target voice.
#[allow(clippy::too_many_arguments)]
pub fn run_cascade<R: Rng + ?Sized>(
    source_mel: &MelGrid,
    spec: &SyntheticSpec,
    dict: &Dictionary,
    params: &ModelParams,
    target: TargetVoice,
    sched: &NoiseSchedule,
    synth_cfg: &SynthConfig,
    rng: &mut R,
) -> Result<CascadeResult> {
    let clock = Instant::now();
    let source_tokens = decode_in(source_mel, spec, Some(Language::A))?.tokens;
    let asr_ms = clock.elapsed().as_secs_f64() * 1e3;

    let clock = Instant::now();
    let translated_tokens = dict.translate(&source_tokens)?;
    let mt_ms = clock.elapsed().as_secs_f64() * 1e3;

    let clock = Instant::now();
    let output = synthesize(
        params,
        &translated_tokens,
        Some(target.speaker),
        Some(target.language.id()),
        sched,
        synth_cfg,
        rng,
    )?;
    let tts_ms = clock.elapsed().as_secs_f64() * 1e3;
    Ok(CascadeResult {
        source_tokens,
        translated_tokens,
        output,
        timings: StageTimings { asr_ms, mt_ms, tts_ms },
    })
}

/// Unit-cost edit distance, two rolling rows.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j + 1] + 1).min(cur[j] + 1).min(prev[j] + usize::from(x != y));
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over reference length.
pub fn token_error_rate(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("reference sequence is empty".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus-level error: total edits over total reference tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorTally {
    pub edits: usize,
    pub reference_tokens: usize,
}

impl ErrorTally {
    pub fn add(&mut self, reference: &[usize], hypothesis: &[usize]) {
        self.edits += edit_distance(reference, hypothesis);
        self.reference_tokens += reference.len();
    }

    pub fn rate(&self) -> f64 {
        if self.reference_tokens == 0 {
            return 0.0;
        }
        self.edits as f64 / self.reference_tokens as f64
    }

    /// `1 - rate`, floored at 0.
    pub fn accuracy(&self) -> f64 {
        (1.0 - self.rate()).max(0.0)
    }
}

/// Deterministic per-utterance cascade record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeRecord {
    pub id: String,
    pub reference_tokens: Vec<String>,
    pub source_tokens: Vec<String>,
    pub translated_tokens: Vec<String>,
    pub output_tokens: Vec<String>,
    pub durations: Vec<usize>,
    pub asr_ter: f64,
    pub e2e_ter: f64,
    pub frames_in: usize,
    pub frames_out: usize,
}

pub const SUMMARY_HEADER: &str = "utt_id,asr_ter,e2e_ter,frames_in,frames_out";

impl CascadeRecord {
    /// Scores a cascade run: ASR against the source truth, and the decoded
    /// output against the translated truth.
    pub fn score(
        id: &str,
        reference: &[usize],
        source_mel: &MelGrid,
        result: &CascadeResult,
        spec: &SyntheticSpec,
        dict: &Dictionary,
        target_language: Language,
    ) -> Result<(Self, Vec<usize>)> {
        let expected = dict.translate(reference)?;
        let output_tokens = decode_in(&result.output.mel, spec, Some(target_language))?.tokens;
        let names = |ids: &[usize]| ids.iter().map(|&i| spec.vocab.name_of(i).unwrap_or("?").to_owned()).collect();
        Ok((
            Self {
                id: id.to_owned(),
                reference_tokens: names(reference),
                source_tokens: names(&result.source_tokens),
                translated_tokens: names(&result.translated_tokens),
                output_tokens: names(&output_tokens),
                durations: result.output.durations.clone(),
                asr_ter: token_error_rate(reference, &result.source_tokens)?,
                e2e_ter: token_error_rate(&expected, &output_tokens)?,
                frames_in: source_mel.frames(),
                frames_out: result.output.mel.frames(),
            },
            output_tokens,
        ))
    }

    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.id, self.asr_ter, self.e2e_ter, self.frames_in, self.frames_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusConfig;
    use crate::model::ModelConfig;
    use crate::rng::seeded;
    use crate::sde::SamplerMode;

    /// Full-matrix Levenshtein, written independently of [`edit_distance`].
    fn levenshtein_matrix(a: &[usize], b: &[usize]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in d[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = if a[i - 1] == b[j - 1] { d[i - 1][j - 1] } else { d[i - 1][j - 1] + 1 };
                d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn ter_examples() {
        assert_eq!(token_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(token_error_rate(&[0, 1, 2], &[0, 2]).unwrap(), 1.0 / 3.0);
        assert_eq!(token_error_rate(&[0], &[1, 2, 3]).unwrap(), 3.0);
        assert!(token_error_rate(&[], &[1]).is_err());
    }

    #[test]
    fn ter_matches_matrix_oracle() {
        let mut rng = seeded(12);
        for _ in 0..1000 {
            let a: Vec<usize> = (0..rng.random_range(1..12)).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<usize> = (0..rng.random_range(0..12)).map(|_| rng.random_range(0..4)).collect();
            let expect = levenshtein_matrix(&a, &b) as f64 / a.len() as f64;
            assert_eq!(token_error_rate(&a, &b).unwrap(), expect);
        }
    }

    #[test]
    fn dictionary_is_bijective() {
        let vocab = PhonemeVocab::two_language(12).unwrap();
        let d = Dictionary::random(&vocab, &mut seeded(3)).unwrap();
        let a = vocab.ids_of(Language::A);
        let t = d.translate(&a).unwrap();
        let mut sorted = t.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vocab.ids_of(Language::B));
        assert!(d.translate(&[12]).is_err());
        let mut broken = d.a_to_b.clone();
        broken.insert(0, *broken.get(&1).unwrap());
        assert!(Dictionary::new(broken, &vocab).is_err());
    }

    #[test]
    fn cascade_stages_and_determinism() {
        let cc = CorpusConfig {
            symbols_per_language: 4,
            sigma_data: 0.0,
            ..CorpusConfig::default()
        };
        let spec = SyntheticSpec::generate(&cc, &mut seeded(1)).unwrap();
        let dict = Dictionary::random(&spec.vocab, &mut seeded(2)).unwrap();
        let mut mcfg = ModelConfig::new(spec.vocab.len(), 2, cc.bins);
        mcfg.embed_dim = 8;
        mcfg.hidden = 8;
        mcfg.time_dim = 4;
        let params = ModelParams::init(&mcfg, 0).unwrap();
        let tokens = spec.sample_tokens(Language::A, 5, &mut seeded(4));
        let (mel, _) = spec.render(&tokens, 0, &mut seeded(5)).unwrap();
        let target = TargetVoice { speaker: 1, language: Language::B };
        let sc = SynthConfig {
            n_steps: 3,
            mode: SamplerMode::Sde,
            temperature: 1.0,
        };
        let sched = NoiseSchedule::default();
        let r1 = run_cascade(&mel, &spec, &dict, &params, target, &sched, &sc, &mut seeded(6)).unwrap();
        let r2 = run_cascade(&mel, &spec, &dict, &params, target, &sched, &sc, &mut seeded(6)).unwrap();
        assert_eq!(r1.source_tokens, tokens);
        assert_eq!(r1.translated_tokens, dict.translate(&tokens).unwrap());
        assert_eq!(r1.translated_tokens.len(), r1.source_tokens.len());
        assert_eq!(r1.output, r2.output);
        let (rec, _) = CascadeRecord::score("u", &tokens, &mel, &r1, &spec, &dict, Language::B).unwrap();
        assert_eq!(rec.asr_ter, 0.0);
        assert_eq!(rec.frames_out, r1.output.mel.frames());
    }

    #[test]
    fn tally_aggregates() {
        let mut t = ErrorTally::default();
        t.add(&[1, 2, 3], &[1, 2]);
        t.add(&[4], &[4]);
        assert_eq!(t.rate(), 0.25);
        assert_eq!(t.accuracy(), 0.75);
        t.add(&[1], &[2, 3, 4, 5, 6]);
        assert_eq!(t.accuracy(), 0.0);
    }
}
