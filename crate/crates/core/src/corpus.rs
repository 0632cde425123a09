//! Synthetic two-language, multi-speaker mel corpus.
//!
//! Every symbol owns a spectral template and a base duration. A speaker's
//! accent is a per-bin gain plus an additive contour applied to every frame
//! it renders. The same templates drive [`decode_tokens`], the toy ASR used
//! by evaluation and the cascade.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mel::MelGrid;
use crate::par;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    A,
    B,
}

impl Language {
    /// Row of the language embedding table.
    pub fn id(self) -> usize {
        match self {
            Language::A => 0,
            Language::B => 1,
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::A => "A",
            Language::B => "B",
        })
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(Language::A),
            "B" => Ok(Language::B),
            other => Err(Error::Invalid(format!("unknown language tag {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Symbol {
    pub name: String,
    pub language: Language,
}

/// Symbol table plus the B -> A-string transliteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhonemeVocab {
    pub symbols: Vec<Symbol>,
    /// Language-B id -> language-A id string.
    pub transliteration: BTreeMap<usize, Vec<usize>>,
}

impl PhonemeVocab {
    /// `per_language` symbols `a0..` and `b0..`. Even-indexed `b` symbols map
    /// to the single `a` of the same index; odd-indexed ones map to the pair
    /// `[a_k, a_{k+1}]`. The two shapes start with disjoint symbols, so every
    /// transliterated string parses back uniquely.
    pub fn two_language(per_language: usize) -> Result<Self> {
        if per_language < 2 {
            return Err(Error::Invalid("need at least two symbols per language".into()));
        }
        let mut symbols = Vec::with_capacity(2 * per_language);
        for (lang, prefix) in [(Language::A, 'a'), (Language::B, 'b')] {
            for k in 0..per_language {
                symbols.push(Symbol {
                    name: format!("{prefix}{k}"),
                    language: lang,
                });
            }
        }
        let transliteration = (0..per_language)
            .map(|k| {
                let target = if k % 2 == 0 || k + 1 == per_language {
                    vec![k]
                } else {
                    vec![k, k + 1]
                };
                (per_language + k, target)
            })
            .collect();
        let vocab = Self {
            symbols,
            transliteration,
        };
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (i, s) in self.symbols.iter().enumerate() {
            if seen.insert(s.name.as_str(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate symbol {:?}", s.name)));
            }
        }
        let mut images = HashMap::new();
        for (b, a) in &self.transliteration {
            if self.symbols.get(*b).map(|s| s.language) != Some(Language::B) {
                return Err(Error::Invalid(format!("transliteration source {b} is not a language-B symbol")));
            }
            if a.is_empty() || a.iter().any(|id| self.symbols.get(*id).map(|s| s.language) != Some(Language::A)) {
                return Err(Error::Invalid(format!("transliteration of {b} is not a language-A string")));
            }
            if images.insert(a.clone(), *b).is_some() {
                return Err(Error::Invalid(format!("transliteration is not injective at {a:?}")));
            }
        }
        Ok(())
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s.name == name)
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(|s| s.name.as_str())
    }

    pub fn language_of(&self, id: usize) -> Option<Language> {
        self.symbols.get(id).map(|s| s.language)
    }

    pub fn ids_of(&self, lang: Language) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.symbols[i].language == lang).collect()
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.name_of(i).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Whitespace-separated symbol names to ids.
pub fn tokenize(text: &str, vocab: &PhonemeVocab) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|tok| vocab.id_of(tok).ok_or_else(|| Error::UnknownSymbol(tok.to_owned())))
        .collect()
}

/// Replaces every language-B id by its language-A string.
pub fn transliterate(ids: &[usize], vocab: &PhonemeVocab) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match vocab.language_of(id) {
            Some(Language::A) => out.push(id),
            Some(Language::B) => {
                let mapped = vocab
                    .transliteration
                    .get(&id)
                    .ok_or_else(|| Error::UnknownSymbol(vocab.name_of(id).unwrap_or("?").to_owned()))?;
                out.extend_from_slice(mapped);
            }
            None => return Err(Error::UnknownId { kind: "symbol", id, size: vocab.len() }),
        }
    }
    Ok(out)
}

/// Parses a transliterated language-A sequence back into language-B ids.
pub fn untransliterate(ids: &[usize], vocab: &PhonemeVocab) -> Result<Vec<usize>> {
    let inverse: HashMap<&[usize], usize> = vocab.transliteration.iter().map(|(b, a)| (a.as_slice(), *b)).collect();
    let longest = vocab.transliteration.values().map(Vec::len).max().unwrap_or(1);
    let mut out = Vec::new();
    let mut pos = 0;
    'outer: while pos < ids.len() {
        for len in (1..=longest.min(ids.len() - pos)).rev() {
            if let Some(b) = inverse.get(&ids[pos..pos + len]) {
                out.push(*b);
                pos += len;
                continue 'outer;
            }
        }
        return Err(Error::Invalid(format!("no language-B symbol transliterates to the string at position {pos}")));
    }
    Ok(out)
}

/// A speaker's accent: `frame = gain ⊙ template + contour`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerProfile {
    pub language: Language,
    pub gain: Vec<f64>,
    pub contour: Vec<f64>,
}

impl SpeakerProfile {
    pub fn apply(&self, template: &[f64]) -> Vec<f64> {
        template
            .iter()
            .zip(&self.gain)
            .zip(&self.contour)
            .map(|((t, g), c)| g * t + c)
            .collect()
    }
}

/// Knobs for building a [`SyntheticSpec`] and a corpus from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub bins: usize,
    pub symbols_per_language: usize,
    pub speakers: usize,
    pub sigma_data: f64,
    pub jitter: bool,
    /// Mean log-mel level of every template.
    pub level: f64,
    /// Amplitude of the per-symbol spectral pattern around the level.
    pub template_scale: f64,
    pub n_utts: usize,
    pub held_out: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            bins: 16,
            symbols_per_language: 12,
            speakers: 2,
            sigma_data: 0.05,
            jitter: true,
            level: -6.0,
            template_scale: 1.5,
            n_utts: 500,
            held_out: 50,
            min_len: 3,
            max_len: 8,
        }
    }
}

/// Fully realized corpus generator: templates, durations and accents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub bins: usize,
    pub sigma_data: f64,
    pub jitter: bool,
    pub vocab: PhonemeVocab,
    pub templates: Vec<Vec<f64>>,
    pub base_durations: Vec<usize>,
    pub speakers: Vec<SpeakerProfile>,
}

/// Shortest segment the renderer emits and the decoder accepts.
pub const MIN_SEGMENT: usize = 2;

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Smooth random curve over `bins` points: a few low-order cosines.
fn smooth_curve<R: Rng + ?Sized>(bins: usize, amplitude: f64, rng: &mut R) -> Vec<f64> {
    let coeffs: Vec<f64> = (1..=3).map(|_| rng.random_range(-1.0..1.0)).collect();
    (0..bins)
        .map(|b| {
            let x = (b as f64 + 0.5) / bins as f64;
            let v: f64 = coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c * (std::f64::consts::PI * (k + 1) as f64 * x).cos())
                .sum();
            amplitude * v / 3.0
        })
        .collect()
}

impl SyntheticSpec {
    /// Draws templates from a ±1 pattern basis (rejecting pairs closer than
    /// `4 σ_data √bins`, raw or under any accent), base durations in `2..=6`,
    /// and alternating-language speaker accents.
    pub fn generate<R: Rng + ?Sized>(cfg: &CorpusConfig, rng: &mut R) -> Result<Self> {
        if cfg.bins == 0 || cfg.speakers == 0 || cfg.sigma_data < 0.0 {
            return Err(Error::Invalid("bins and speakers must be >= 1, sigma_data >= 0".into()));
        }
        let vocab = PhonemeVocab::two_language(cfg.symbols_per_language)?;
        let n = vocab.len();
        let speakers: Vec<SpeakerProfile> = (0..cfg.speakers)
            .map(|s| SpeakerProfile {
                language: if s % 2 == 0 { Language::A } else { Language::B },
                gain: smooth_curve(cfg.bins, 0.6, rng).into_iter().map(|g| 1.0 + g).collect(),
                contour: smooth_curve(cfg.bins, 0.9, rng),
            })
            .collect();
        let min_sep = 4.0 * cfg.sigma_data * (cfg.bins as f64).sqrt();
        let mut templates: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut rejections = 0;
        while templates.len() < n {
            let candidate: Vec<f64> = (0..cfg.bins)
                .map(|_| {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    cfg.level + cfg.template_scale * sign * rng.random_range(0.6..1.0)
                })
                .collect();
            let separated = templates.iter().all(|t| {
                dist2(t, &candidate).sqrt() > min_sep
                    && speakers.iter().all(|s| {
                        speakers
                            .iter()
                            .all(|s2| dist2(&s.apply(t), &s2.apply(&candidate)).sqrt() > min_sep)
                    })
            });
            if separated {
                templates.push(candidate);
            } else {
                rejections += 1;
                if rejections > 10_000 {
                    return Err(Error::Invalid(
                        "could not draw separated templates; increase template_scale or bins".into(),
                    ));
                }
            }
        }
        let base_durations = (0..n).map(|_| rng.random_range(2..=6)).collect();
        Ok(Self {
            bins: cfg.bins,
            sigma_data: cfg.sigma_data,
            jitter: cfg.jitter,
            vocab,
            templates,
            base_durations,
            speakers,
        })
    }

    pub fn speaker(&self, id: usize) -> Result<&SpeakerProfile> {
        self.speakers.get(id).ok_or(Error::UnknownId {
            kind: "speaker",
            id,
            size: self.speakers.len(),
        })
    }

    pub fn speakers_of(&self, lang: Language) -> Vec<usize> {
        (0..self.speakers.len()).filter(|&s| self.speakers[s].language == lang).collect()
    }

    /// Renders `tokens` for `speaker` with the given per-token frame counts.
    pub fn render_with_durations<R: Rng + ?Sized>(
        &self,
        tokens: &[usize],
        durations: &[usize],
        speaker: usize,
        rng: &mut R,
    ) -> Result<MelGrid> {
        let profile = self.speaker(speaker)?;
        if tokens.len() != durations.len() || tokens.is_empty() {
            return Err(Error::shape(tokens.len(), durations.len()));
        }
        let frames: usize = durations.iter().sum();
        let mut values = Array2::zeros((frames, self.bins));
        let mut j = 0;
        for (&tok, &d) in tokens.iter().zip(durations) {
            let template = self.templates.get(tok).ok_or(Error::UnknownId {
                kind: "symbol",
                id: tok,
                size: self.templates.len(),
            })?;
            let accented = profile.apply(template);
            for _ in 0..d {
                for (b, v) in accented.iter().enumerate() {
                    let noise: f64 = if self.sigma_data > 0.0 {
                        self.sigma_data * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    values[[j, b]] = v + noise;
                }
                j += 1;
            }
        }
        MelGrid::new(values)
    }

    /// Draws per-token durations (base ± 1 when jitter is on, never below
    /// [`MIN_SEGMENT`]) and renders.
    pub fn render<R: Rng + ?Sized>(&self, tokens: &[usize], speaker: usize, rng: &mut R) -> Result<(MelGrid, Vec<usize>)> {
        let durations: Vec<usize> = tokens
            .iter()
            .map(|&t| {
                let base = self.base_durations.get(t).copied().unwrap_or(MIN_SEGMENT) as i64;
                let d = if self.jitter { base + rng.random_range(-1..=1) } else { base };
                d.max(MIN_SEGMENT as i64) as usize
            })
            .collect();
        let mel = self.render_with_durations(tokens, &durations, speaker, rng)?;
        Ok((mel, durations))
    }

    /// Random token sequence in `lang` with no symbol repeated back to back.
    pub fn sample_tokens<R: Rng + ?Sized>(&self, lang: Language, len: usize, rng: &mut R) -> Vec<usize> {
        let pool = self.vocab.ids_of(lang);
        let mut out: Vec<usize> = Vec::with_capacity(len);
        while out.len() < len {
            let next = *pool.choose(rng).expect("non-empty language");
            if out.last() != Some(&next) {
                out.push(next);
            }
        }
        out
    }
}

/// One rendered utterance with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<usize>,
    pub speaker: usize,
    pub language: Language,
    pub durations: Vec<usize>,
    pub mel: MelGrid,
}

/// Renders `n_utts` utterances in memory. Speakers rotate, each utterance
/// uses its speaker's language, and utterance `u` draws from its own stream
/// of `seed`.
pub fn generate_utterances(
    spec: &SyntheticSpec,
    n_utts: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<Vec<Utterance>> {
    if n_utts == 0 {
        return Err(Error::Invalid("n_utts must be >= 1".into()));
    }
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::Invalid(format!("bad length range {lo}..={hi}")));
    }
    if spec.speakers.is_empty() {
        return Err(Error::Invalid("spec has no speakers".into()));
    }
    par::map_range(n_utts, |u| {
        let mut rng = rng::stream(seed, u as u64);
        let speaker = u % spec.speakers.len();
        let language = spec.speakers[speaker].language;
        let len = rng.random_range(lo..=hi);
        let tokens = spec.sample_tokens(language, len, &mut rng);
        let (mel, durations) = spec.render(&tokens, speaker, &mut rng)?;
        Ok(Utterance {
            id: format!("utt{u:05}"),
            tokens,
            speaker,
            language,
            durations,
            mel,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub tokens: Vec<String>,
    pub speaker: usize,
    pub language: Language,
    /// Relative paths resolve against the manifest's directory.
    pub mel_path: PathBuf,
    pub durations: Vec<usize>,
}

impl ManifestEntry {
    pub fn line(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}",
            self.id,
            self.tokens.join(" "),
            self.speaker,
            self.language,
            self.mel_path.display(),
            self.durations.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        )
    }

    pub fn parse(line: &str, offset: u64) -> Result<Self> {
        let bad = |message: String| Error::Parse { offset, message };
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 pipe-separated fields, got {}", fields.len())));
        }
        let durations = if fields[5].trim().is_empty() {
            Vec::new()
        } else {
            fields[5]
                .split(',')
                .map(|d| d.trim().parse::<usize>().map_err(|e| bad(format!("duration {d:?}: {e}"))))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            id: fields[0].to_owned(),
            tokens: fields[1].split_whitespace().map(str::to_owned).collect(),
            speaker: fields[2].trim().parse().map_err(|e| bad(format!("speaker: {e}")))?,
            language: fields[3].trim().parse().map_err(|e: Error| bad(e.to_string()))?,
            mel_path: PathBuf::from(fields[4]),
            durations,
        })
    }

    pub fn resolve_mel(&self, manifest_dir: &Path) -> PathBuf {
        if self.mel_path.is_absolute() {
            self.mel_path.clone()
        } else {
            manifest_dir.join(&self.mel_path)
        }
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for e in entries {
        writeln!(f, "{}", e.line())?;
    }
    Ok(())
}

/// Reads a manifest and checks that every referenced mel file exists.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if !trimmed.trim().is_empty() {
            let entry = ManifestEntry::parse(trimmed, offset)?;
            let mel = entry.resolve_mel(dir);
            if !mel.is_file() {
                return Err(Error::Invalid(format!("mel file {} for {} does not exist", mel.display(), entry.id)));
            }
            entries.push(entry);
        }
        offset += line.len() as u64;
    }
    Ok(entries)
}

/// Writes mel files under `out_dir/mels/` and returns manifest entries
/// (not yet written) for the given utterances.
pub fn write_utterances(spec: &SyntheticSpec, utts: &[Utterance], out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let mel_dir = out_dir.join("mels");
    fs::create_dir_all(&mel_dir)?;
    utts.iter()
        .map(|u| {
            let rel = PathBuf::from("mels").join(format!("{}.mel", u.id));
            save_mel(&u.mel, &out_dir.join(&rel))?;
            Ok(ManifestEntry {
                id: u.id.clone(),
                tokens: u.tokens.iter().map(|&t| spec.vocab.name_of(t).unwrap_or("?").to_owned()).collect(),
                speaker: u.speaker,
                language: u.language,
                mel_path: rel,
                durations: u.durations.clone(),
            })
        })
        .collect()
}

/// Renders a corpus to `out_dir`: mel files plus `manifest.txt`.
pub fn generate_corpus<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    n_utts: usize,
    len_range: (usize, usize),
    rng: &mut R,
    out_dir: &Path,
) -> Result<Vec<ManifestEntry>> {
    let utts = generate_utterances(spec, n_utts, len_range, rng::fork_seed(rng))?;
    fs::create_dir_all(out_dir)?;
    let entries = write_utterances(spec, &utts, out_dir)?;
    write_manifest(&out_dir.join("manifest.txt"), &entries)?;
    Ok(entries)
}

pub const MEL_MAGIC: &[u8; 4] = b"MEL1";

/// `MEL1`, `u32` frames, `u32` bins, row-major little-endian `f32`.
pub fn encode_mel(grid: &MelGrid) -> Vec<u8> {
    let (frames, bins) = grid.shape();
    let mut out = Vec::with_capacity(12 + frames * bins * 4);
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    out.extend_from_slice(&(bins as u32).to_le_bytes());
    for v in grid.values().iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_mel(bytes: &[u8]) -> Result<MelGrid> {
    let parse = |offset: u64, message: &str| Error::Parse {
        offset,
        message: message.to_owned(),
    };
    if bytes.len() < 12 {
        return Err(parse(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != MEL_MAGIC {
        return Err(parse(0, "bad magic, expected MEL1"));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let bins = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if frames == 0 || bins == 0 {
        return Err(parse(4, "empty grid"));
    }
    let need = frames.checked_mul(bins).and_then(|n| n.checked_mul(4)).ok_or_else(|| parse(4, "dimensions overflow"))?;
    if bytes.len() - 12 != need {
        return Err(parse(
            bytes.len().min(12 + need) as u64,
            &format!("expected {need} payload bytes, found {}", bytes.len() - 12),
        ));
    }
    let values: Vec<f64> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    MelGrid::new(Array2::from_shape_vec((frames, bins), values).expect("size checked"))
}

pub fn save_mel(grid: &MelGrid, path: &Path) -> Result<()> {
    if grid.frames() == 0 {
        return Err(Error::Invalid("refusing to save an empty grid".into()));
    }
    fs::write(path, encode_mel(grid))?;
    Ok(())
}

pub fn load_mel(path: &Path) -> Result<MelGrid> {
    decode_mel(&fs::read(path)?)
}

/// Result of template decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub durations: Vec<usize>,
    /// Speaker whose accent explained the frames best.
    pub speaker: usize,
    pub cost: f64,
}

/// Template ASR: minimum-cost segmentation of `mel` into segments of at
/// least [`MIN_SEGMENT`] frames, each labelled with one symbol, adjacent
/// labels distinct. The per-frame cost is the squared distance to the
/// template under a speaker's accent; the best speaker wins.
pub fn decode_tokens(mel: &MelGrid, spec: &SyntheticSpec) -> Vec<usize> {
    decode_detailed(mel, spec).map(|d| d.tokens).unwrap_or_default()
}

pub fn decode_detailed(mel: &MelGrid, spec: &SyntheticSpec) -> Result<Decoded> {
    decode_in(mel, spec, None)
}

/// [`decode_detailed`] restricted to one language's symbols and speakers.
pub fn decode_in(mel: &MelGrid, spec: &SyntheticSpec, language: Option<Language>) -> Result<Decoded> {
    if mel.bins() != spec.bins {
        return Err(Error::shape(format!("{} bins", spec.bins), mel.bins()));
    }
    let symbols: Vec<usize> = match language {
        Some(lang) => spec.vocab.ids_of(lang),
        None => (0..spec.templates.len()).collect(),
    };
    let mut best: Option<Decoded> = None;
    for (s, profile) in spec.speakers.iter().enumerate() {
        if language.is_some_and(|l| profile.language != l) {
            continue;
        }
        let accented: Vec<Vec<f64>> = symbols.iter().map(|&k| profile.apply(&spec.templates[k])).collect();
        let mut decoded = segment(mel, &accented, s);
        decoded.tokens.iter_mut().for_each(|t| *t = symbols[*t]);
        if best.as_ref().is_none_or(|b| decoded.cost < b.cost) {
            best = Some(decoded);
        }
    }
    best.ok_or_else(|| Error::Invalid("spec has no speaker for the requested language".into()))
}

fn segment(mel: &MelGrid, templates: &[Vec<f64>], speaker: usize) -> Decoded {
    let frames = mel.frames();
    let k = templates.len();
    let cost: Vec<Vec<f64>> = (0..frames)
        .map(|j| {
            let row = mel.row(j);
            let row = row.as_slice().expect("standard layout");
            templates.iter().map(|t| dist2(row, t)).collect()
        })
        .collect();
    if frames < MIN_SEGMENT {
        // too short to segment: nearest template for the lone frame
        let (sym, c) = cost[0]
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &c)| if c < acc.1 { (i, c) } else { acc });
        return Decoded {
            tokens: vec![sym],
            durations: vec![frames],
            speaker,
            cost: c,
        };
    }
    // fresh[j][s]: best cost with frame j opening a segment of s
    // grown[j][s]: best cost with frame j inside a segment of s at length >= 2
    let inf = f64::INFINITY;
    let mut fresh = vec![vec![inf; k]; frames];
    let mut grown = vec![vec![inf; k]; frames];
    let mut grown_from_fresh = vec![vec![false; k]; frames];
    let mut fresh_prev = vec![vec![usize::MAX; k]; frames];
    fresh[0].clone_from(&cost[0]);
    for j in 1..frames {
        // best and runner-up closed segments at j-1, for the distinct-label rule
        let mut first = (inf, usize::MAX);
        let mut second = (inf, usize::MAX);
        for (s, &c) in grown[j - 1].iter().enumerate() {
            if c < first.0 {
                second = first;
                first = (c, s);
            } else if c < second.0 {
                second = (c, s);
            }
        }
        for s in 0..k {
            let (prev_cost, prev_sym) = if first.1 != s { first } else { second };
            if prev_sym != usize::MAX {
                fresh[j][s] = cost[j][s] + prev_cost;
                fresh_prev[j][s] = prev_sym;
            }
            let from_fresh = fresh[j - 1][s];
            let from_grown = grown[j - 1][s];
            if from_fresh < from_grown {
                grown[j][s] = cost[j][s] + from_fresh;
                grown_from_fresh[j][s] = true;
            } else {
                grown[j][s] = cost[j][s] + from_grown;
            }
        }
    }
    let (mut sym, total) = grown[frames - 1]
        .iter()
        .enumerate()
        .fold((0, inf), |acc, (i, &c)| if c < acc.1 { (i, c) } else { acc });
    let mut tokens = Vec::new();
    let mut durations = Vec::new();
    let mut j = frames - 1;
    let mut in_grown = true;
    let mut run = 0;
    loop {
        run += 1;
        if in_grown {
            in_grown = !grown_from_fresh[j][sym];
            j -= 1;
            continue;
        }
        tokens.push(sym);
        durations.push(run);
        run = 0;
        if j == 0 {
            break;
        }
        sym = fresh_prev[j][sym];
        j -= 1;
        in_grown = true;
    }
    tokens.reverse();
    durations.reverse();
    Decoded {
        tokens,
        durations,
        speaker,
        cost: total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small_spec(sigma: f64, jitter: bool) -> SyntheticSpec {
        let cfg = CorpusConfig {
            bins: 6,
            symbols_per_language: 4,
            speakers: 2,
            sigma_data: sigma,
            jitter,
            ..CorpusConfig::default()
        };
        SyntheticSpec::generate(&cfg, &mut seeded(1)).unwrap()
    }

    #[test]
    fn vocab_and_transliteration() {
        let v = PhonemeVocab::two_language(12).unwrap();
        assert_eq!(v.len(), 24);
        let a = tokenize("a0 a3 a11", &v).unwrap();
        assert_eq!(transliterate(&a, &v).unwrap(), a);
        let b = tokenize("b1 b2 b3 b0 b11", &v).unwrap();
        let t = transliterate(&b, &v).unwrap();
        assert!(t.iter().all(|&i| v.language_of(i) == Some(Language::A)));
        assert_eq!(transliterate(&t, &v).unwrap(), t);
        assert_eq!(untransliterate(&t, &v).unwrap(), b);
        assert!(matches!(tokenize("a0 zz", &v), Err(Error::UnknownSymbol(s)) if s == "zz"));
        assert!(PhonemeVocab::two_language(1).is_err());
    }

    #[test]
    fn transliteration_roundtrips_on_random_strings() {
        let v = PhonemeVocab::two_language(12).unwrap();
        let mut rng = seeded(3);
        let b_ids = v.ids_of(Language::B);
        for _ in 0..200 {
            let len = rng.random_range(1..10);
            let seq: Vec<usize> = (0..len).map(|_| *b_ids.choose(&mut rng).unwrap()).collect();
            let t = transliterate(&seq, &v).unwrap();
            assert_eq!(untransliterate(&t, &v).unwrap(), seq);
        }
    }

    #[test]
    fn templates_are_separated() {
        let spec = small_spec(0.05, true);
        let min_sep = 4.0 * 0.05 * (6f64).sqrt();
        for i in 0..spec.templates.len() {
            for j in i + 1..spec.templates.len() {
                assert!(dist2(&spec.templates[i], &spec.templates[j]).sqrt() > min_sep);
            }
        }
        // nearest-template classification of noiseless frames is exact
        for (s, prof) in spec.speakers.iter().enumerate() {
            for (i, t) in spec.templates.iter().enumerate() {
                let frame = prof.apply(t);
                let nearest = (0..spec.templates.len())
                    .min_by(|&a, &b| {
                        dist2(&frame, &prof.apply(&spec.templates[a]))
                            .total_cmp(&dist2(&frame, &prof.apply(&spec.templates[b])))
                    })
                    .unwrap();
                assert_eq!(nearest, i, "speaker {s}");
            }
        }
    }

    #[test]
    fn noiseless_render_is_concatenated_templates() {
        let spec = small_spec(0.0, false);
        let tokens = vec![0, 2, 1];
        let (mel, durations) = spec.render(&tokens, 0, &mut seeded(2)).unwrap();
        assert_eq!(durations, tokens.iter().map(|&t| spec.base_durations[t]).collect::<Vec<_>>());
        assert_eq!(mel.frames(), durations.iter().sum::<usize>());
        let mut j = 0;
        for (&t, &d) in tokens.iter().zip(&durations) {
            let expect = spec.speakers[0].apply(&spec.templates[t]);
            for _ in 0..d {
                assert_eq!(mel.row(j).to_vec(), expect);
                j += 1;
            }
        }
    }

    #[test]
    fn decode_noiseless_renders() {
        let spec = small_spec(0.0, true);
        let mut rng = seeded(4);
        for speaker in 0..2 {
            let lang = spec.speakers[speaker].language;
            let single = spec.sample_tokens(lang, 1, &mut rng);
            let (mel, _) = spec.render(&single, speaker, &mut rng).unwrap();
            assert_eq!(decode_tokens(&mel, &spec), single);
            for len in 2..7 {
                let tokens = spec.sample_tokens(lang, len, &mut rng);
                let (mel, durations) = spec.render(&tokens, speaker, &mut rng).unwrap();
                let d = decode_detailed(&mel, &spec).unwrap();
                assert_eq!(d.tokens, tokens);
                assert_eq!(d.durations, durations);
                assert_eq!(d.speaker, speaker);
                assert_eq!(d.cost, 0.0);
            }
        }
    }

    #[test]
    fn restricted_decoding_stays_in_language() {
        let spec = small_spec(0.05, true);
        let mut rng = seeded(6);
        let tokens = spec.sample_tokens(Language::B, 4, &mut rng);
        let (mel, _) = spec.render(&tokens, 1, &mut rng).unwrap();
        assert_eq!(decode_in(&mel, &spec, Some(Language::B)).unwrap().tokens, tokens);
        let forced = decode_in(&mel, &spec, Some(Language::A)).unwrap();
        assert!(forced.tokens.iter().all(|&t| spec.vocab.language_of(t) == Some(Language::A)));
        assert_eq!(forced.speaker, 0);
    }

    /// Exhaustive oracle: every composition of the frames into segments of
    /// length >= 2 and every labelling with distinct neighbours.
    fn brute_force_cost(mel: &MelGrid, templates: &[Vec<f64>]) -> f64 {
        fn rec(mel: &MelGrid, templates: &[Vec<f64>], start: usize, prev: Option<usize>) -> f64 {
            let frames = mel.frames();
            if start == frames {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for end in start + MIN_SEGMENT..=frames {
                for (s, t) in templates.iter().enumerate() {
                    if Some(s) == prev {
                        continue;
                    }
                    let c: f64 = (start..end).map(|j| dist2(mel.row(j).as_slice().unwrap(), t)).sum();
                    best = best.min(c + rec(mel, templates, end, Some(s)));
                }
            }
            best
        }
        rec(mel, templates, 0, None)
    }

    #[test]
    fn segmentation_matches_exhaustive_search() {
        let mut rng = seeded(5);
        let templates: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        for frames in 2..=9 {
            for _ in 0..5 {
                let mel = MelGrid::new(Array2::from_shape_simple_fn((frames, 2), || rng.random_range(-1.5..1.5))).unwrap();
                let d = segment(&mel, &templates, 0);
                let oracle = brute_force_cost(&mel, &templates);
                assert!((d.cost - oracle).abs() < 1e-9, "{} vs {oracle}", d.cost);
                assert!(d.durations.iter().all(|&l| l >= MIN_SEGMENT));
                assert_eq!(d.durations.iter().sum::<usize>(), frames);
                assert!(d.tokens.windows(2).all(|w| w[0] != w[1]));
                let recomputed: f64 = {
                    let mut j = 0;
                    let mut acc = 0.0;
                    for (&s, &l) in d.tokens.iter().zip(&d.durations) {
                        for _ in 0..l {
                            acc += dist2(mel.row(j).as_slice().unwrap(), &templates[s]);
                            j += 1;
                        }
                    }
                    acc
                };
                assert!((recomputed - d.cost).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mel_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mel");
        let grid = MelGrid::from_rows(&[vec![1.5, -2.25, 0.1], vec![3.0, 4.0, 5.0]]).unwrap();
        save_mel(&grid, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 2 * 3 * 4 + 12);
        let back = load_mel(&path).unwrap();
        for (a, b) in back.values().iter().zip(grid.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let bytes = fs::read(&path).unwrap();
        assert!(matches!(decode_mel(&bytes[..bytes.len() - 1]), Err(Error::Parse { .. })));
        assert!(matches!(decode_mel(&bytes[..5]), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_mel(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut empty = bytes[..12].to_vec();
        empty[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(decode_mel(&empty).is_err());
        assert!(MelGrid::zeros(0, 3).is_err());
    }

    #[test]
    fn corpus_generation_and_manifest_roundtrip() {
        let spec = small_spec(0.05, true);
        let dir = tempfile::tempdir().unwrap();
        let entries = generate_corpus(&spec, 6, (2, 4), &mut seeded(7), dir.path()).unwrap();
        assert_eq!(entries.len(), 6);
        let back = read_manifest(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(back, entries);
        for e in &back {
            let mel = load_mel(&e.resolve_mel(dir.path())).unwrap();
            assert_eq!(mel.frames(), e.durations.iter().sum::<usize>());
        }
        // deterministic given the seed
        let dir2 = tempfile::tempdir().unwrap();
        generate_corpus(&spec, 6, (2, 4), &mut seeded(7), dir2.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join("manifest.txt")).unwrap(),
            fs::read(dir2.path().join("manifest.txt")).unwrap()
        );
        assert_eq!(
            fs::read(dir.path().join("mels/utt00003.mel")).unwrap(),
            fs::read(dir2.path().join("mels/utt00003.mel")).unwrap()
        );
        fs::remove_file(dir.path().join("mels/utt00002.mel")).unwrap();
        assert!(read_manifest(&dir.path().join("manifest.txt")).is_err());
    }

    #[test]
    fn manifest_parse_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        fs::write(&path, "x|a0|0|A|nope.mel|2\n").unwrap();
        assert!(read_manifest(&path).is_err());
        let err = ManifestEntry::parse("a|b|c", 17).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 17, .. }));
        assert!(ManifestEntry::parse("a|a0|x|A|m|2", 0).is_err());
        assert!(ManifestEntry::parse("a|a0|0|Q|m|2", 0).is_err());
    }

    #[test]
    fn generated_sequences_have_no_adjacent_repeats() {
        let spec = small_spec(0.05, true);
        let utts = generate_utterances(&spec, 40, (1, 8), 11).unwrap();
        for u in &utts {
            assert!(u.tokens.windows(2).all(|w| w[0] != w[1]));
            assert!(u.durations.iter().all(|&d| (MIN_SEGMENT..=7).contains(&d)));
            assert_eq!(spec.speakers[u.speaker].language, u.language);
        }
        assert!(generate_utterances(&spec, 0, (1, 2), 0).is_err());
    }
}
