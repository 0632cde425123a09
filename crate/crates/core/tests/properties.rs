use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

use phonodiff::align::{
    alignment_log_likelihood, durations_from_alignment, expand, mas_search, Alignment, EncodedMeans,
};
use phonodiff::checkpoint::{decode_records, encode_records, Record};
use phonodiff::corpus::{decode_mel, encode_mel, transliterate, untransliterate, PhonemeVocab};
use phonodiff::mel::MelGrid;
use phonodiff::model::{ModelConfig, ModelParams};
use phonodiff::rng::seeded;
use phonodiff::sde::{forward_marginal, sample_forward, true_conditional_score, AnchoredGaussian, NoiseSchedule};

fn grid(frames: usize, bins: usize, seed: u64) -> MelGrid {
    MelGrid::standard_normal(frames, bins, &mut seeded(seed))
}

fn means(rows: usize, bins: usize, seed: u64) -> EncodedMeans {
    EncodedMeans::new(grid(rows, bins, seed).into_inner()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // The conditional score at a forward sample equals -ξ / sqrt(var).
    #[test]
    fn score_matches_noise(seed in any::<u64>(), t in 1e-3f64..1.0, sigma in 0.2f64..3.0) {
        let sched = NoiseSchedule::default();
        let mu = grid(5, 3, seed ^ 1);
        let anchor = AnchoredGaussian::new(mu, vec![sigma; 3]).unwrap();
        let x0 = grid(5, 3, seed);
        let (xt, xi) = sample_forward(&anchor, &x0, &sched, t, &mut seeded(seed ^ 2)).unwrap();
        let (mean, var) = forward_marginal(&anchor, &x0, &sched, t).unwrap();
        let score = true_conditional_score(&xt, &mean, &var).unwrap();
        for ((s, z), b) in score.values().iter().zip(xi.values()).zip((0..15).map(|i| i % 3)) {
            let expect = -z / var[b].sqrt();
            prop_assert!((s - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn counts_round_trip(counts in prop::collection::vec(1usize..6, 1..8)) {
        let a = Alignment::from_counts(&counts).unwrap();
        prop_assert_eq!(a.counts(), counts.clone());
        prop_assert_eq!(a.frames(), counts.iter().sum::<usize>());
        let logd = durations_from_alignment(&a, counts.len()).unwrap();
        let back: Vec<usize> = logd.iter().map(|d| d.exp().round() as usize).collect();
        prop_assert_eq!(back, counts.clone());
        let mu = means(counts.len(), 2, 3);
        let y = expand(&mu, &counts).unwrap();
        prop_assert_eq!(y.frames(), a.frames());
        for (f, &i) in a.as_slice().iter().enumerate() {
            prop_assert_eq!(y.row(f), mu.values().row(i));
        }
    }

    // MAS is never beaten by a random monotone alignment and is a pure function.
    #[test]
    fn mas_dominates_random_alignments(seed in any::<u64>(), phonemes in 1usize..6, extra in 0usize..8) {
        let frames = phonemes + extra;
        let y = grid(frames, 3, seed);
        let mu = means(phonemes, 3, seed ^ 7);
        let best = mas_search(&y, &mu).unwrap();
        prop_assert_eq!(&best, &mas_search(&y, &mu).unwrap());
        let best_ll = alignment_log_likelihood(&y, &mu, &best).unwrap();
        let mut rng = seeded(seed ^ 11);
        for _ in 0..20 {
            let mut counts = vec![1usize; phonemes];
            for _ in 0..extra {
                counts[rng.random_range(0..phonemes)] += 1;
            }
            let a = Alignment::from_counts(&counts).unwrap();
            prop_assert!(alignment_log_likelihood(&y, &mu, &a).unwrap() <= best_ll + 1e-9);
        }
    }

    #[test]
    fn mel_bytes_round_trip(frames in 1usize..20, bins in 1usize..10, seed in any::<u64>()) {
        let g = grid(frames, bins, seed);
        let back = decode_mel(&encode_mel(&g)).unwrap();
        prop_assert_eq!(back.shape(), g.shape());
        for (a, b) in back.values().iter().zip(g.values()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn transliteration_round_trip(ids in prop::collection::vec(12usize..24, 1..10)) {
        let vocab = PhonemeVocab::two_language(12).unwrap();
        let a = transliterate(&ids, &vocab).unwrap();
        prop_assert!(a.iter().all(|&i| i < 12));
        prop_assert_eq!(untransliterate(&a, &vocab).unwrap(), ids);
    }

    #[test]
    fn checkpoint_records_round_trip(values in prop::collection::vec(any::<f64>(), 0..30)) {
        let recs = vec![
            Record::new("w", vec![values.len()], values.clone()),
            Record::scalar("step", 3.0),
        ];
        let back = decode_records(&encode_records(&recs)).unwrap();
        prop_assert_eq!(back.len(), 2);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back[0].values), bits(&values));
        prop_assert_eq!(&back[0].dims, &recs[0].dims);
    }
}

#[test]
fn model_shape_contracts() {
    let mut cfg = ModelConfig::new(24, 2, 6);
    cfg.embed_dim = 8;
    cfg.hidden = 16;
    cfg.time_dim = 4;
    let params = ModelParams::init(&cfg, 5).unwrap();
    let mu_tilde = params.encode(&[0, 3, 5, 7], Some(1), Some(0)).unwrap();
    assert_eq!((mu_tilde.len(), mu_tilde.width()), (4, 6));
    assert_eq!(params.predict_log_durations(&mu_tilde).unwrap().len(), 4);
    let mu = expand(&mu_tilde, &[2, 1, 3, 2]).unwrap();
    let x = grid(8, 6, 9);
    let s = params.score(&x, &mu, 0.4).unwrap();
    assert_eq!(s.shape(), (8, 6));
    assert!(s.is_finite());

    assert!(params.encode(&[], None, None).is_err());
    assert!(params.encode(&[24], None, None).is_err());
    assert!(params.encode(&[0], Some(2), None).is_err());
    assert!(params.score(&grid(7, 6, 1), &mu, 0.4).is_err());
}

#[test]
fn expand_rejects_mismatched_counts() {
    let mu = EncodedMeans::new(Array2::zeros((3, 2))).unwrap();
    assert!(expand(&mu, &[1, 2]).is_err());
    assert!(expand(&mu, &[1, 0, 2]).is_err());
}
