use phonodiff::cascade::ErrorTally;
use phonodiff::corpus::{
    decode_tokens, generate_corpus, generate_utterances, load_mel, read_manifest, tokenize, CorpusConfig, SyntheticSpec,
};
use phonodiff::rng::seeded;
use phonodiff::sde::{NoiseSchedule, SamplerMode};
use phonodiff::synthesis::{synthesize, SynthConfig};
use phonodiff::training::{load_checkpoint, save_checkpoint, train, Dataset, TrainConfig, TrainItem};

#[test]
fn clean_corpus_decodes_almost_perfectly() {
    let spec = SyntheticSpec::generate(&CorpusConfig::default(), &mut seeded(3)).unwrap();
    let utts = generate_utterances(&spec, 200, (3, 8), 17).unwrap();
    let mut tally = ErrorTally::default();
    for u in &utts {
        tally.add(&u.tokens, &decode_tokens(&u.mel, &spec));
    }
    assert!(tally.rate() < 0.01, "token error rate {}", tally.rate());
}

#[test]
fn corpus_train_checkpoint_synthesize_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = CorpusConfig {
        n_utts: 12,
        ..CorpusConfig::default()
    };
    let spec = SyntheticSpec::generate(&cfg, &mut seeded(1)).unwrap();
    generate_corpus(&spec, cfg.n_utts, (cfg.min_len, cfg.max_len), &mut seeded(2), dir.path()).unwrap();
    let entries = read_manifest(&dir.path().join("manifest.txt")).unwrap();
    assert_eq!(entries.len(), 12);

    let items = entries
        .iter()
        .map(|e| TrainItem {
            phonemes: tokenize(&e.tokens.join(" "), &spec.vocab).unwrap(),
            speaker: Some(e.speaker),
            language: Some(e.language.id()),
            mel: load_mel(&e.resolve_mel(dir.path())).unwrap(),
        })
        .collect();
    let dataset = Dataset {
        items,
        vocab: spec.vocab.len(),
        speakers: spec.speakers.len(),
        bins: spec.bins,
    };
    let tcfg = TrainConfig {
        epochs: 2,
        embed_dim: 8,
        hidden: 16,
        time_dim: 4,
        ..TrainConfig::default()
    };
    let state = train(&dataset, &tcfg).unwrap();
    let ckpt = dir.path().join("model.gdsp");
    save_checkpoint(&state, &ckpt).unwrap();
    let loaded = load_checkpoint(&ckpt).unwrap();
    assert!(loaded.params.bit_eq(&state.params));

    let synth = SynthConfig {
        n_steps: 5,
        mode: SamplerMode::Ode,
        temperature: 1.5,
    };
    let run = |seed| {
        synthesize(&loaded.params, &dataset.items[0].phonemes, Some(0), Some(0), &NoiseSchedule::default(), &synth, &mut seeded(seed))
            .unwrap()
    };
    let (a, b) = (run(4), run(4));
    assert_eq!(a, b);
    assert_eq!(a.mel.frames(), a.durations.iter().sum::<usize>());
    assert!(a.mel.is_finite());
}
