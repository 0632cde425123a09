//! Monotonic alignment search between mel frames and phoneme-level means,
//! duration targets, and length expansion.
//!
//! Phoneme indices are zero-based here: an alignment maps each frame to
//! `0..L`, starting at 0, ending at `L - 1`, advancing by at most one.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::mel::MelGrid;

/// Enumeration cap for [`brute_force_alignment`].
pub const BRUTE_FORCE_LIMIT: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Alignment(Vec<usize>);

impl Alignment {
    pub fn new(frame_to_phoneme: Vec<usize>) -> Result<Self> {
        let first = frame_to_phoneme.first().copied();
        if first != Some(0) {
            return Err(Error::Invalid(format!(
                "alignment must start at phoneme 0, got {first:?}"
            )));
        }
        if let Some(w) = frame_to_phoneme.windows(2).find(|w| w[1] != w[0] && w[1] != w[0] + 1) {
            return Err(Error::Invalid(format!(
                "alignment step {} -> {} is not monotonic by 0 or 1",
                w[0], w[1]
            )));
        }
        Ok(Self(frame_to_phoneme))
    }

    /// Alignment that gives phoneme `i` exactly `counts[i]` frames.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::Invalid("every phoneme needs at least one frame".into()));
        }
        Ok(Self(
            counts
                .iter()
                .enumerate()
                .flat_map(|(i, &c)| std::iter::repeat_n(i, c))
                .collect(),
        ))
    }

    pub fn frames(&self) -> usize {
        self.0.len()
    }

    /// Number of phonemes covered (`L`).
    pub fn phonemes(&self) -> usize {
        self.0.last().map_or(0, |l| l + 1)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Frames assigned to each phoneme.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.phonemes()];
        for &i in &self.0 {
            counts[i] += 1;
        }
        counts
    }
}

/// Phoneme-level means `μ̃`, one row per phoneme.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMeans(Array2<f64>);

impl EncodedMeans {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::Invalid("encoded means must be non-empty".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoded means".into()));
        }
        Ok(Self(rows))
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// `log N(y; m, I)` for one frame.
fn frame_log_density(y: ArrayView1<'_, f64>, m: ArrayView1<'_, f64>) -> f64 {
    let half_log_two_pi = 0.5 * (2.0 * PI).ln();
    y.iter()
        .zip(m.iter())
        .map(|(a, b)| -half_log_two_pi - 0.5 * (a - b) * (a - b))
        .sum()
}

fn check_widths(y: &MelGrid, mu_tilde: &EncodedMeans) -> Result<()> {
    if y.bins() != mu_tilde.width() {
        return Err(Error::shape(
            format!("{} bins", mu_tilde.width()),
            format!("{} bins", y.bins()),
        ));
    }
    Ok(())
}

/// `Σ_j log φ(y_j; μ̃_{A(j)}, I)`.
pub fn alignment_log_likelihood(y: &MelGrid, mu_tilde: &EncodedMeans, a: &Alignment) -> Result<f64> {
    check_widths(y, mu_tilde)?;
    if a.frames() != y.frames() || a.phonemes() > mu_tilde.len() {
        return Err(Error::shape(
            format!("{} frames over <= {} phonemes", y.frames(), mu_tilde.len()),
            format!("{} frames over {} phonemes", a.frames(), a.phonemes()),
        ));
    }
    let mut acc = 0.0;
    for (j, &i) in a.as_slice().iter().enumerate() {
        acc += frame_log_density(y.row(j), mu_tilde.values().row(i));
    }
    Ok(acc)
}

/// Likelihood-optimal monotonic alignment by dynamic programming.
///
/// `Q(j, i) = log φ(y_j; μ̃_i) + max(Q(j-1, i), Q(j-1, i-1))`; on ties the
/// path stays on the current phoneme.
pub fn mas_search(y: &MelGrid, mu_tilde: &EncodedMeans) -> Result<Alignment> {
    check_widths(y, mu_tilde)?;
    let frames = y.frames();
    let phonemes = mu_tilde.len();
    if frames < phonemes {
        return Err(Error::Infeasible { frames, phonemes });
    }
    let mut q = Array2::from_elem((frames, phonemes), f64::NEG_INFINITY);
    // advanced[(j, i)]: best predecessor of (j, i) is (j-1, i-1)
    let mut advanced = Array2::from_elem((frames, phonemes), false);
    for j in 0..frames {
        // phoneme i is reachable at frame j only if i <= j and the remaining
        // frames can still cover the remaining phonemes
        let lo = (phonemes + j).saturating_sub(frames);
        let hi = j.min(phonemes - 1);
        for i in lo..=hi {
            let ll = frame_log_density(y.row(j), mu_tilde.values().row(i));
            if j == 0 {
                q[(0, 0)] = ll;
                continue;
            }
            let stay = q[(j - 1, i)];
            let step = if i > 0 { q[(j - 1, i - 1)] } else { f64::NEG_INFINITY };
            if step > stay {
                q[(j, i)] = ll + step;
                advanced[(j, i)] = true;
            } else {
                q[(j, i)] = ll + stay;
            }
        }
    }
    let mut path = vec![0; frames];
    let mut i = phonemes - 1;
    for j in (0..frames).rev() {
        path[j] = i;
        if j > 0 && advanced[(j, i)] {
            i -= 1;
        }
    }
    Alignment::new(path)
}

/// Number of monotonic surjective alignments of `frames` onto `phonemes`:
/// `C(frames - 1, phonemes - 1)`.
pub fn alignment_count(frames: usize, phonemes: usize) -> u128 {
    if phonemes == 0 || frames < phonemes {
        return 0;
    }
    let n = (frames - 1) as u128;
    let k = (phonemes - 1) as u128;
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c * (n - i) / (i + 1);
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceResult {
    pub alignment: Alignment,
    pub log_likelihood: f64,
    /// Number of candidate alignments scored.
    pub considered: u64,
}

/// Exhaustive search over every monotonic surjective alignment. Reference
/// oracle for [`mas_search`]; first maximum in lexicographic order wins.
pub fn brute_force_alignment(y: &MelGrid, mu_tilde: &EncodedMeans) -> Result<BruteForceResult> {
    check_widths(y, mu_tilde)?;
    let frames = y.frames();
    let phonemes = mu_tilde.len();
    if frames < phonemes {
        return Err(Error::Infeasible { frames, phonemes });
    }
    let count = alignment_count(frames, phonemes);
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            count,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    // Positions in 1..frames where the phoneme index advances; choose L-1 of them.
    let k = phonemes - 1;
    let mut cuts: Vec<usize> = (1..=k).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut considered = 0u64;
    loop {
        let mut path = Vec::with_capacity(frames);
        let mut phoneme = 0;
        let mut next_cut = 0;
        for j in 0..frames {
            if next_cut < k && cuts[next_cut] == j {
                phoneme += 1;
                next_cut += 1;
            }
            path.push(phoneme);
        }
        let a = Alignment(path);
        let ll = alignment_log_likelihood(y, mu_tilde, &a)?;
        considered += 1;
        if best.as_ref().is_none_or(|(b, _)| ll > *b) {
            best = Some((ll, a.0));
        }
        // next k-combination of 1..frames-1 in lexicographic order
        let mut pos = k;
        loop {
            if pos == 0 {
                let (log_likelihood, path) = best.expect("at least one alignment");
                return Ok(BruteForceResult {
                    alignment: Alignment(path),
                    log_likelihood,
                    considered,
                });
            }
            pos -= 1;
            if cuts[pos] < frames - k + pos {
                cuts[pos] += 1;
                for r in pos + 1..k {
                    cuts[r] = cuts[r - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Log-duration targets `d_i = ln(frames assigned to phoneme i)`.
pub fn durations_from_alignment(a: &Alignment, phonemes: usize) -> Result<Vec<f64>> {
    if a.phonemes() != phonemes {
        return Err(Error::Invalid(format!(
            "alignment covers {} phonemes, expected {phonemes} (not surjective)",
            a.phonemes()
        )));
    }
    Ok(a.counts().into_iter().map(|c| (c as f64).ln()).collect())
}

/// Repeats row `i` of `μ̃` `counts[i]` times.
pub fn expand(mu_tilde: &EncodedMeans, counts: &[usize]) -> Result<MelGrid> {
    if counts.len() != mu_tilde.len() {
        return Err(Error::shape(
            format!("{} counts", mu_tilde.len()),
            counts.len(),
        ));
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Invalid(format!("phoneme {i} has a zero frame count")));
    }
    let frames: usize = counts.iter().sum();
    let mut out = Array2::zeros((frames, mu_tilde.width()));
    let mut j = 0;
    for (i, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            out.row_mut(j).assign(&mu_tilde.values().row(i));
            j += 1;
        }
    }
    Ok(MelGrid::from_array_unchecked(out))
}

/// Sums frame rows back onto their phonemes; the adjoint of [`expand`].
pub(crate) fn collapse(grad: &Array2<f64>, a: &Alignment, phonemes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((phonemes, grad.ncols()));
    for (j, &i) in a.as_slice().iter().enumerate() {
        let mut row = out.row_mut(i);
        row += &grad.row(j);
    }
    out
}
