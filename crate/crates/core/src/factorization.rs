//! Exact check that target speech depends on source speech only through the
//! source phonemes when `(p_t, a_t)` is independent of `a_s` given `p_s`.
//!
//! Everything here is finite enumeration over small discrete spaces.

use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_CARD: usize = 6;

/// Cardinalities of source phoneme, source acoustic, target phoneme, target acoustic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Cards {
    pub ps: usize,
    pub as_: usize,
    pub pt: usize,
    pub at: usize,
}

impl Cards {
    pub fn new(ps: usize, as_: usize, pt: usize, at: usize) -> Result<Self> {
        let c = Self { ps, as_, pt, at };
        for (name, v) in [("|P_s|", ps), ("|A_s|", as_), ("|P_t|", pt), ("|A_t|", at)] {
            if !(1..=MAX_CARD).contains(&v) {
                return Err(Error::Invalid(format!("{name} = {v} outside 1..={MAX_CARD}")));
            }
        }
        Ok(c)
    }

    pub fn size(&self) -> usize {
        self.ps * self.as_ * self.pt * self.at
    }

    /// Random cardinalities in `lo..=hi`.
    pub fn random<R: Rng + ?Sized>(lo: usize, hi: usize, rng: &mut R) -> Result<Self> {
        Self::new(
            rng.random_range(lo..=hi),
            rng.random_range(lo..=hi),
            rng.random_range(lo..=hi),
            rng.random_range(lo..=hi),
        )
    }
}

/// Probability table over `P_s × A_s × P_t × A_t`, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    cards: Cards,
    table: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(cards: Cards, table: Vec<f64>) -> Result<Self> {
        if table.len() != cards.size() {
            return Err(Error::shape(cards.size(), table.len()));
        }
        if table.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Domain("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!("table sums to {total}, not 1")));
        }
        Ok(Self { cards, table })
    }

    /// Product of four independent marginals.
    pub fn independent(ps: &[f64], as_: &[f64], pt: &[f64], at: &[f64]) -> Result<Self> {
        let cards = Cards::new(ps.len(), as_.len(), pt.len(), at.len())?;
        let mut table = Vec::with_capacity(cards.size());
        for a in ps {
            for b in as_ {
                for c in pt {
                    for d in at {
                        table.push(a * b * c * d);
                    }
                }
            }
        }
        Self::new(cards, table)
    }

    pub fn cards(&self) -> Cards {
        self.cards
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    fn index(&self, ps: usize, as_: usize, pt: usize, at: usize) -> usize {
        let c = &self.cards;
        ((ps * c.as_ + as_) * c.pt + pt) * c.at + at
    }

    pub fn get(&self, ps: usize, as_: usize, pt: usize, at: usize) -> f64 {
        self.table[self.index(ps, as_, pt, at)]
    }
}

fn simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    // normalized exponentials are uniform on the simplex
    let draws: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1) + f64::MIN_POSITIVE).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

struct CiParts {
    p_ps: Vec<f64>,
    p_as: Vec<Vec<f64>>,
    p_target: Vec<Vec<f64>>,
}

fn draw_ci_parts<R: Rng + ?Sized>(cards: Cards, rng: &mut R) -> CiParts {
    CiParts {
        p_ps: simplex(cards.ps, rng),
        p_as: (0..cards.ps).map(|_| simplex(cards.as_, rng)).collect(),
        p_target: (0..cards.ps).map(|_| simplex(cards.pt * cards.at, rng)).collect(),
    }
}

fn assemble(cards: Cards, parts: &CiParts, target: impl Fn(usize, usize, usize) -> f64) -> Result<DiscreteJoint> {
    let mut table = Vec::with_capacity(cards.size());
    for ps in 0..cards.ps {
        for as_ in 0..cards.as_ {
            let w = parts.p_ps[ps] * parts.p_as[ps][as_];
            for k in 0..cards.pt * cards.at {
                table.push(w * target(ps, as_, k));
            }
        }
    }
    let total: f64 = table.iter().sum();
    table.iter_mut().for_each(|p| *p /= total);
    DiscreteJoint::new(cards, table)
}

/// `P(p_s) P(a_s | p_s) P(p_t, a_t | p_s)` with every factor uniform on its
/// simplex: conditional independence holds by construction.
pub fn make_ci_joint<R: Rng + ?Sized>(cards: Cards, rng: &mut R) -> Result<DiscreteJoint> {
    let parts = draw_ci_parts(cards, rng);
    assemble(cards, &parts, |ps, _, k| parts.p_target[ps][k])
}

/// Same draws as [`make_ci_joint`], then `P(p_t, a_t | p_s, a_s)` becomes
/// `(1 - strength) P_ci(· | p_s) + strength Q(· | p_s, a_s)` with a fresh
/// random `Q` per `(p_s, a_s)`.
pub fn make_non_ci_joint<R: Rng + ?Sized>(cards: Cards, rng: &mut R, strength: f64) -> Result<DiscreteJoint> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::Domain(format!("strength {strength} outside (0, 1]")));
    }
    if cards.as_ < 2 || cards.pt * cards.at < 2 {
        return Err(Error::Invalid(
            "need |A_s| >= 2 and |P_t||A_t| >= 2 to express dependence on a_s".into(),
        ));
    }
    let parts = draw_ci_parts(cards, rng);
    let q: Vec<Vec<Vec<f64>>> = (0..cards.ps)
        .map(|_| (0..cards.as_).map(|_| simplex(cards.pt * cards.at, rng)).collect())
        .collect();
    assemble(cards, &parts, |ps, as_, k| {
        (1.0 - strength) * parts.p_target[ps][k] + strength * q[ps][as_][k]
    })
}

/// Deterministic speech maps `f_s(p_s, a_s)` and `f_t(p_t, a_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechMaps {
    cards: Cards,
    source: Vec<usize>,
    target: Vec<usize>,
    n_source: usize,
    n_target: usize,
}

/// How the source-speech map treats the acoustic variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// `f_s` depends on `p_s` alone.
    Strict,
    /// `f_s` also varies with `a_s`, still injective in `p_s` per `a_s`.
    General,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Strict => "strict",
            Regime::General => "general",
        })
    }
}

impl SpeechMaps {
    /// `source[ps * |A_s| + as]`, `target[pt * |A_t| + at]`.
    pub fn new(cards: Cards, source: Vec<usize>, target: Vec<usize>) -> Result<Self> {
        if source.len() != cards.ps * cards.as_ {
            return Err(Error::shape(cards.ps * cards.as_, source.len()));
        }
        if target.len() != cards.pt * cards.at {
            return Err(Error::shape(cards.pt * cards.at, target.len()));
        }
        for as_ in 0..cards.as_ {
            let mut seen = std::collections::HashSet::new();
            for ps in 0..cards.ps {
                if !seen.insert(source[ps * cards.as_ + as_]) {
                    return Err(Error::Invalid(format!(
                        "f_s is not injective in p_s on the slice a_s = {as_}"
                    )));
                }
            }
        }
        let n_source = source.iter().max().map_or(0, |m| m + 1);
        let n_target = target.iter().max().map_or(0, |m| m + 1);
        Ok(Self {
            cards,
            source,
            target,
            n_source,
            n_target,
        })
    }

    /// `f_s = p_s`, `f_t` the identity on `(p_t, a_t)`.
    pub fn strict(cards: Cards) -> Self {
        let source = (0..cards.ps * cards.as_).map(|i| i / cards.as_).collect();
        Self::new(cards, source, (0..cards.pt * cards.at).collect()).expect("valid by construction")
    }

    /// `f_s` the identity on `(p_s, a_s)`, `f_t` the identity on `(p_t, a_t)`.
    pub fn general(cards: Cards) -> Self {
        Self::new(cards, (0..cards.ps * cards.as_).collect(), (0..cards.pt * cards.at).collect())
            .expect("valid by construction")
    }

    /// `f_s = (p_s + a_s) mod |P_s|`: symbols are shared across accents.
    pub fn shifted(cards: Cards) -> Self {
        let source = (0..cards.ps * cards.as_)
            .map(|i| (i / cards.as_ + i % cards.as_) % cards.ps)
            .collect();
        Self::new(cards, source, (0..cards.pt * cards.at).collect()).expect("valid by construction")
    }

    pub fn for_regime(regime: Regime, cards: Cards) -> Self {
        match regime {
            Regime::Strict => Self::strict(cards),
            Regime::General => Self::general(cards),
        }
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    pub fn n_target(&self) -> usize {
        self.n_target
    }
}

/// Conditional tables indexed `[target_symbol][source_symbol]`; `None` where
/// the source symbol has zero probability.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationReport {
    pub lhs: Vec<Vec<Option<f64>>>,
    pub rhs: Vec<Vec<Option<f64>>>,
    pub max_abs_diff: f64,
}

/// `LHS = P(f_t | f_s)` straight from the joint and
/// `RHS = Σ_{p_s} P(f_t | p_s) P(p_s | f_s)`, by exact summation.
pub fn check_factorization(joint: &DiscreteJoint, maps: &SpeechMaps) -> Result<FactorizationReport> {
    let c = joint.cards();
    if c != maps.cards {
        return Err(Error::Invalid("maps were built for different cardinalities".into()));
    }
    let (nx, ny) = (maps.n_source, maps.n_target);
    let mut p_x = vec![0.0; nx];
    let mut p_xy = vec![vec![0.0; nx]; ny];
    let mut p_ps = vec![0.0; c.ps];
    let mut p_ps_y = vec![vec![0.0; c.ps]; ny];
    let mut p_ps_x = vec![vec![0.0; nx]; c.ps];
    for ps in 0..c.ps {
        for as_ in 0..c.as_ {
            let x = maps.source[ps * c.as_ + as_];
            for pt in 0..c.pt {
                for at in 0..c.at {
                    let y = maps.target[pt * c.at + at];
                    let p = joint.get(ps, as_, pt, at);
                    p_x[x] += p;
                    p_xy[y][x] += p;
                    p_ps[ps] += p;
                    p_ps_y[y][ps] += p;
                    p_ps_x[ps][x] += p;
                }
            }
        }
    }
    let mut lhs = vec![vec![None; nx]; ny];
    let mut rhs = vec![vec![None; nx]; ny];
    let mut max_abs_diff: f64 = 0.0;
    for x in 0..nx {
        if p_x[x] <= 0.0 {
            continue;
        }
        for y in 0..ny {
            let l = p_xy[y][x] / p_x[x];
            let r: f64 = (0..c.ps)
                .filter(|&ps| p_ps[ps] > 0.0)
                .map(|ps| (p_ps_y[y][ps] / p_ps[ps]) * (p_ps_x[ps][x] / p_x[x]))
                .sum();
            max_abs_diff = max_abs_diff.max((l - r).abs());
            lhs[y][x] = Some(l);
            rhs[y][x] = Some(r);
        }
    }
    Ok(FactorizationReport { lhs, rhs, max_abs_diff })
}

/// One row of the verification sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub regime: Regime,
    /// 0 for conditionally independent joints.
    pub strength: f64,
    pub max_abs_diff: f64,
}

pub const SWEEP_HEADER: &str = "seed,regime,strength,max_abs_diff";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{:e}", self.seed, self.regime, self.strength, self.max_abs_diff)
    }
}

/// For each seed draws cardinalities in `2..=6` and one joint (CI when
/// `strength == 0`), then checks it under `regime`.
pub fn sweep(seeds: std::ops::Range<u64>, strength: f64, regime: Regime) -> Result<Vec<SweepRow>> {
    let seeds: Vec<u64> = seeds.collect();
    crate::par::map_slice(&seeds, |&seed| {
        let mut rng = crate::rng::seeded(seed);
        let cards = Cards::random(2, MAX_CARD, &mut rng)?;
        let joint = if strength == 0.0 {
            make_ci_joint(cards, &mut rng)?
        } else {
            make_non_ci_joint(cards, &mut rng, strength)?
        };
        let report = check_factorization(&joint, &SpeechMaps::for_regime(regime, cards))?;
        Ok(SweepRow {
            seed,
            regime,
            strength,
            max_abs_diff: report.max_abs_diff,
        })
    })
    .into_iter()
    .collect()
}
