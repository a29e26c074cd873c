//! Number-resolved photon counting: divisibility-test probabilities and
//! confidences, measurement-record simulation and estimation, the
//! prime-power test planner, the entangled-pair QND block, and loss flags.
//!
//! A chain of `N+1` conditional units with phases `φ_i = 2^{i-1}·π/n₀`
//! between them answers "is the photon number a multiple of `n₀`?": the
//! first atom-pair result is random, each later one repeats the previous
//! with probability `cos²(φ_i n)`, so all-same occurs with probability
//! `p(n) = Π_i cos²(2^{i-1}πn/n₀)`, which is exactly 1 on multiples of
//! `n₀`. Any flip is a definitive "not a multiple" (one-sided error).
//!
//! Counting conventions: a schedule with `N` *factors* (comparison steps)
//! corresponds to `N+1` physical units in the destructive chain and `N`
//! entangled-pair blocks in the QND chain (each block carries its phase
//! internally). Consecutive tests of a plan can share one boundary unit, so
//! a chained plan costs `Σ N_i + 1` units.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

use crate::fock::{AtomOutcome, JointState, Parity};
use crate::{Error, Result};

/// Divisibility-test schedule for divisor `n₀`: angles `φ_i = 2^{i-1}·π/n₀`
/// for `i = 1..=N` where `N` is the number of probability factors
/// (`N+1` physical units).
#[derive(Clone, Debug)]
pub struct CountSchedule {
    n0: u64,
    factors: usize,
    angles: Vec<f64>,
}

impl CountSchedule {
    pub fn new(n0: u64, factors: usize) -> Result<Self> {
        if n0 < 2 {
            return Err(Error::BadDivisor(n0));
        }
        let angles = (0..factors)
            .map(|i| {
                // Reduce 2^i mod 2n₀ so the angle stays representable; cos²
                // has period π = n₀ steps and sign is irrelevant.
                let mut k = 1u64;
                for _ in 0..i {
                    k = (k * 2) % (2 * n0);
                }
                std::f64::consts::PI * k as f64 / n0 as f64
            })
            .collect();
        Ok(Self {
            n0,
            factors,
            angles,
        })
    }

    pub fn n0(&self) -> u64 {
        self.n0
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    /// Physical units in the destructive chain: one more than the factors.
    pub fn units(&self) -> usize {
        self.factors + 1
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }
}

/// Exact residue of `2^i · n` modulo `n₀` (square-and-multiply doubling, no
/// floating-point angle blowup for large `i` or `n`).
fn pow2_mod(i: usize, n: u64, n0: u64) -> u64 {
    let mut r = n % n0;
    for _ in 0..i {
        r = (r * 2) % n0;
    }
    r
}

/// Probability that all `N` comparisons of the `n₀` divisibility test agree:
/// `p(n) = Π_{i=0}^{N-1} cos²(2^i π n / n₀)`. Equals 1 iff every factor is a
/// multiple of π, i.e. on multiples of `n₀` (and trivially for N = 0).
pub fn p_same(n: u64, sched: &CountSchedule) -> f64 {
    let n0 = sched.n0;
    let mut p = 1.0;
    for i in 0..sched.factors {
        let r = pow2_mod(i, n, n0);
        let c = (std::f64::consts::PI * r as f64 / n0 as f64).cos();
        p *= c * c;
    }
    p
}

/// Detection confidence `q = 1 − max_{n ≢ 0 (mod n₀)} p(n)`. The maximum
/// over all non-multiples reduces to the residues `1..n₀−1` because `p` is
/// exactly periodic with period `n₀`.
pub fn q_confidence(sched: &CountSchedule) -> f64 {
    let worst = (1..sched.n0)
        .map(|r| p_same(r, sched))
        .fold(0.0f64, f64::max);
    1.0 - worst
}

/// A chain measurement record: one `±` outcome per physical unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeasurementRecord {
    /// `true` is `+`.
    pub outcomes: Vec<bool>,
}

impl MeasurementRecord {
    pub fn n_same(&self) -> usize {
        self.outcomes.windows(2).filter(|w| w[0] == w[1]).count()
    }

    pub fn n_different(&self) -> usize {
        self.outcomes.windows(2).filter(|w| w[0] != w[1]).count()
    }

    /// Relative same-frequency `f = N_same / (N_same + N_different)`.
    pub fn f(&self) -> f64 {
        let s = self.n_same();
        let d = self.n_different();
        if s + d == 0 {
            return 1.0;
        }
        s as f64 / (s + d) as f64
    }

    /// `true` when every comparison agreed (the "is a multiple" verdict).
    pub fn all_same(&self) -> bool {
        self.n_different() == 0
    }

    /// Whether the comparison at 1-based step `i` (outcome `i` vs `i−1`)
    /// flipped.
    pub fn flipped_at(&self, i: usize) -> Option<bool> {
        if i == 0 || i >= self.outcomes.len() {
            return None;
        }
        Some(self.outcomes[i] != self.outcomes[i - 1])
    }
}

impl fmt::Display for MeasurementRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &o in &self.outcomes {
            f.write_str(if o { "+" } else { "-" })?;
        }
        Ok(())
    }
}

impl FromStr for MeasurementRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let outcomes = s
            .chars()
            .enumerate()
            .map(|(i, c)| match c {
                '+' => Ok(true),
                '-' | '−' => Ok(false),
                other => Err(Error::Parse {
                    line: 1,
                    msg: format!("bad record character {other:?} at {i}"),
                }),
            })
            .collect::<Result<_>>()?;
        Ok(Self { outcomes })
    }
}

/// Deterministic per-record RNG: record `index` of a batch seeded with
/// `base` uses `ChaCha12` keyed by `base ^ (index · 0x9E3779B97F4A7C15)`.
pub fn record_rng(base_seed: u64, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(base_seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Simulates a Markov measurement record for photon number `n`: the first
/// outcome is uniformly random, outcome `i+1` flips relative to outcome `i`
/// with probability `sin²(φ_i n)`.
pub fn simulate_record(n: u64, angles: &[f64], rng: &mut impl Rng) -> MeasurementRecord {
    let mut outcomes = Vec::with_capacity(angles.len() + 1);
    let mut current = rng.random::<bool>();
    outcomes.push(current);
    for &phi in angles {
        let flip = (phi * n as f64).sin().powi(2);
        if rng.random::<f64>() < flip {
            current = !current;
        }
        outcomes.push(current);
    }
    MeasurementRecord { outcomes }
}

/// Photon-number estimate from a fixed-phase record:
/// `n ≈ arccos(√f)/φ`, valid (alias-free) for `n < π/φ`. Values at or above
/// `π/φ` alias back into the principal `arccos` branch.
pub fn estimate_n(record: &MeasurementRecord, phi: f64) -> f64 {
    record.f().sqrt().acos() / phi
}

/// One planned divisibility test.
#[derive(Clone, Debug, Serialize)]
pub struct PlannedTest {
    pub n0: u64,
    #[serde(rename = "N")]
    pub factors: usize,
    pub q: f64,
}

/// A full prime-power test plan.
#[derive(Clone, Debug, Serialize)]
pub struct TestPlan {
    pub tests: Vec<PlannedTest>,
    /// Product of the per-test confidences (a lower bound on the worst-case
    /// probability that every verdict comes out consistent with the true
    /// photon number).
    pub aggregate: f64,
    /// Total units when consecutive tests share a boundary unit:
    /// `Σ N_i + 1`.
    pub units: usize,
    /// Smallest per-test confidence.
    pub min_confidence: f64,
    /// Total units when every test runs standalone: `Σ (N_i + 1)`.
    pub units_unchained: usize,
    pub target: f64,
}

impl TestPlan {
    fn from_tests(tests: Vec<PlannedTest>, target: f64) -> Self {
        let aggregate = tests.iter().map(|t| t.q).product();
        let min_confidence = tests.iter().map(|t| t.q).fold(1.0, f64::min);
        let sum_factors: usize = tests.iter().map(|t| t.factors).sum();
        let units = sum_factors + 1;
        let units_unchained = sum_factors + tests.len();
        Self {
            tests,
            aggregate,
            units,
            min_confidence,
            units_unchained,
            target,
        }
    }
}

/// All prime powers `p^k <= n_max` that must be tested to pin a photon
/// number in `0..=n_max`. The bare prime 2 is dropped whenever 4 is in
/// range: 2-divisibility is read off the `n₀ = 4` record pattern (the flip
/// at its `φ = π/2` step is deterministic in the photon parity).
pub fn prime_power_factors(n_max: u64) -> Vec<u64> {
    let mut sieve = vec![true; (n_max + 1) as usize];
    let mut out = Vec::new();
    for p in 2..=n_max {
        if !sieve[p as usize] {
            continue;
        }
        let mut m = p * p;
        while m <= n_max {
            sieve[m as usize] = false;
            m += p;
        }
        let mut power = p;
        while power <= n_max {
            if !(power == 2 && n_max >= 4) {
                out.push(power);
            }
            match power.checked_mul(p) {
                Some(next) => power = next,
                None => break,
            }
        }
    }
    out.sort_unstable();
    out
}

fn minimal_factors_for(n0: u64, bound: f64) -> Result<usize> {
    for factors in 1..=512usize {
        let sched = CountSchedule::new(n0, factors)?;
        if q_confidence(&sched) >= bound {
            return Ok(factors);
        }
    }
    Err(Error::Config(format!(
        "no schedule for n0={n0} reaches confidence {bound}"
    )))
}

/// Plans the prime-power tests so that **each factor** is tested with
/// confidence at least `target` (minimal per-test factor counts). Total
/// units are reported for the chained layout `Σ N_i + 1`.
pub fn plan_tests(n_max: u64, target: f64) -> Result<TestPlan> {
    plan_with_bound(n_max, target, target)
}

/// Plans with a union-bound budget split: each of the `T` tests gets
/// per-test confidence at least `1 − (1 − target)/T`, so the product of
/// confidences — and hence the worst-case probability that every verdict is
/// consistent with the true photon number — is at least `target`.
pub fn plan_tests_aggregate(n_max: u64, target: f64) -> Result<TestPlan> {
    let t = prime_power_factors(n_max).len() as f64;
    let per_test = 1.0 - (1.0 - target) / t;
    plan_with_bound(n_max, target, per_test)
}

fn plan_with_bound(n_max: u64, target: f64, per_test: f64) -> Result<TestPlan> {
    if n_max < 2 {
        return Err(Error::Config(format!("n_max must be >= 2, got {n_max}")));
    }
    if !(0.0..1.0).contains(&target) || target <= 0.0 {
        return Err(Error::Config(format!(
            "target confidence must lie in (0, 1), got {target}"
        )));
    }
    let mut tests = Vec::new();
    for n0 in prime_power_factors(n_max) {
        let factors = minimal_factors_for(n0, per_test)?;
        let q = q_confidence(&CountSchedule::new(n0, factors)?);
        tests.push(PlannedTest { n0, factors, q });
    }
    Ok(TestPlan::from_tests(tests, target))
}

/// Exact worst-case probability, over true photon numbers `n` in
/// `0..=n_max`, that every test of the plan returns the verdict consistent
/// with `n` (tests on divisors of `n` never err; the others err with
/// `p(n)`).
pub fn exact_worst_case_confidence(plan: &TestPlan, n_max: u64) -> Result<f64> {
    let mut worst = 1.0f64;
    for n in 0..=n_max {
        let mut p_all = 1.0;
        for t in &plan.tests {
            if n % t.n0 != 0 {
                let sched = CountSchedule::new(t.n0, t.factors)?;
                p_all *= 1.0 - p_same(n, &sched);
            }
        }
        worst = worst.min(p_all);
    }
    Ok(worst)
}

/// Smallest uniform factor count `N` such that every test of the `n_max`
/// plan reaches confidence `1 − 1/n_max` with `N` factors.
pub fn uniform_factor_requirement(n_max: u64) -> Result<usize> {
    let bound = 1.0 - 1.0 / n_max as f64;
    let mut worst = 1;
    for n0 in prime_power_factors(n_max) {
        worst = worst.max(minimal_factors_for(n0, bound)?);
    }
    Ok(worst)
}

/// All photon numbers in `0..=n_max` whose divisibility pattern matches the
/// verdicts. Errors when no photon number is consistent (photon loss or a
/// failed test).
pub fn infer_n(verdicts: &BTreeMap<u64, bool>, n_max: u64) -> Result<BTreeSet<u64>> {
    let set: BTreeSet<u64> = (0..=n_max)
        .filter(|&n| verdicts.iter().all(|(&n0, &v)| (n % n0 == 0) == v))
        .collect();
    if set.is_empty() {
        return Err(Error::InconsistentVerdicts(n_max));
    }
    Ok(set)
}

/// Narrows a consistent set with a parity verdict (`true` = even), e.g. the
/// 2-divisibility read off the `n₀ = 4` record.
pub fn refine_with_parity(set: &BTreeSet<u64>, even: bool) -> BTreeSet<u64> {
    set.iter()
        .copied()
        .filter(|n| (n % 2 == 0) == even)
        .collect()
}

/// Extracts the deterministic 2-divisibility verdict from a power-of-two
/// divisibility record: at the step whose angle is `π/2` (step `log₂ n₀`)
/// the flip probability is `sin²(πn/2)`, i.e. 1 for odd `n` and 0 for even
/// `n`. Returns `Some(is_even)`, or `None` when the schedule has no such
/// step.
pub fn two_divisibility_verdict(
    record: &MeasurementRecord,
    sched: &CountSchedule,
) -> Option<bool> {
    if !sched.n0.is_power_of_two() || sched.n0 < 4 {
        return None;
    }
    let step = sched.n0.trailing_zeros() as usize; // 2^step = n₀, φ_step = π/2
    record.flipped_at(step).map(|flipped| !flipped)
}

/// Joint atomic outcome of one entangled-pair block, classified by the two
/// pair states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum PairClass {
    /// `|φ₊⟩|φ₊⟩` — valid, "same".
    PlusPlus,
    /// `|φ₋⟩|φ₋⟩` — valid, "different".
    MinusMinus,
    /// `|φ₊⟩|φ₋⟩` — invalid: a photon was lost inside the block.
    PlusMinus,
    /// `|φ₋⟩|φ₊⟩` — invalid: a photon was lost inside the block.
    MinusPlus,
}

impl PairClass {
    pub fn is_valid(self) -> bool {
        matches!(self, PairClass::PlusPlus | PairClass::MinusMinus)
    }

    fn from_pair_states(first_plus: bool, second_plus: bool) -> Self {
        match (first_plus, second_plus) {
            (true, true) => PairClass::PlusPlus,
            (false, false) => PairClass::MinusMinus,
            (true, false) => PairClass::PlusMinus,
            (false, true) => PairClass::MinusPlus,
        }
    }
}

/// Analytic outcome distribution of one QND block on `|n⟩|q⟩` with internal
/// phase `φ`: `|φ₊⟩|φ₊⟩` with probability `cos²(φ(n−q))`, `|φ₋⟩|φ₋⟩` with
/// `sin²(φ(n−q))`, invalid outcomes never; the photonic state leaves the
/// block unchanged.
#[derive(Clone, Copy, Debug)]
pub struct QndBlockDistribution {
    pub p_plus_plus: f64,
    pub p_minus_minus: f64,
    pub p_invalid: f64,
}

pub fn qnd_block(n: u64, q: u64, phi: f64) -> QndBlockDistribution {
    let delta = n as f64 - q as f64;
    let c = (phi * delta).cos().powi(2);
    QndBlockDistribution {
        p_plus_plus: c,
        p_minus_minus: 1.0 - c,
        p_invalid: 0.0,
    }
}

/// Where the gray box at the end of each QND block is a mirror or an extra
/// parity-check cavity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GrayBox {
    #[default]
    Mirror,
    Cavity,
}

/// A deliberate single-photon loss inserted into a chain.
#[derive(Clone, Copy, Debug)]
pub struct LossEvent {
    /// Destructive chain: the loss happens just before this unit (after the
    /// preceding phase shifter). QND chain: just before this block, or at
    /// its midpoint when `mid_block` is set.
    pub before: usize,
    pub mode: usize,
    /// QND chains only: lose the photon between the two cavity pairs of
    /// block `before` (right after the internal phase shifter).
    pub mid_block: bool,
}

/// Run of a destructive counting chain.
#[derive(Clone, Debug)]
pub struct DestructiveChainRun {
    /// b-arm atom outcome per unit (`true` = `+`): the counting record.
    pub record: MeasurementRecord,
    /// Total-photon parity revealed by each atom pair (same signs = even).
    pub parities: Vec<Parity>,
    /// Units whose revealed parity differs from the previous unit's: a
    /// photon was lost in between.
    pub parity_flags: Vec<usize>,
    /// Normalized photonic post-state.
    pub state: JointState,
    /// Probability of this outcome string (conditioned on the loss events).
    pub probability: f64,
}

fn apply_losses(
    state: &mut JointState,
    losses: &[LossEvent],
    position: usize,
    mid: bool,
) -> Result<()> {
    for l in losses {
        if l.before == position && l.mid_block == mid {
            state.apply_annihilation(l.mode)?;
            if state.normalize().is_err() {
                return Err(Error::ZeroProbability);
            }
        }
    }
    Ok(())
}

/// One destructive unit: beam splitter, a cavity gate per arm, inverse beam
/// splitter; returns the four joint atomic outcome branches with their
/// probabilities and normalized post-states.
fn destructive_unit_branches(
    state: &JointState,
) -> Result<Vec<((AtomOutcome, AtomOutcome), f64, JointState)>> {
    let mut s = state.clone();
    let atom_a = s.add_atom_plus();
    let atom_b = s.add_atom_plus();
    s.apply_beam_splitter((0, 1))?;
    s.apply_cavity_gate(0, atom_a)?;
    s.apply_cavity_gate(1, atom_b)?;
    s.apply_beam_splitter_dagger((0, 1))?;
    let mut branches = Vec::new();
    for ob in [AtomOutcome::Plus, AtomOutcome::Minus] {
        let mb = s.measure_atom(atom_b, ob)?;
        if mb.impossible {
            continue;
        }
        for oa in [AtomOutcome::Plus, AtomOutcome::Minus] {
            let ma = mb.state.measure_atom(atom_a, oa)?;
            if ma.impossible {
                continue;
            }
            let p = mb.probability * ma.probability;
            let mut post = ma.state;
            post.normalize()?;
            branches.push(((oa, ob), p, post));
        }
    }
    Ok(branches)
}

fn pair_parity(oa: AtomOutcome, ob: AtomOutcome) -> Parity {
    if oa == ob {
        Parity::Even
    } else {
        Parity::Odd
    }
}

/// Samples one run of the destructive counting chain on `|n⟩|0⟩` with
/// `angles.len() + 1` units. Loss events are applied deterministically at
/// their sites.
pub fn simulate_destructive_chain(
    n: usize,
    angles: &[f64],
    losses: &[LossEvent],
    rng: &mut impl Rng,
) -> Result<DestructiveChainRun> {
    let mut state = JointState::fock(&[n, 0], n)?;
    let mut record = Vec::new();
    let mut parities = Vec::new();
    let mut flags = Vec::new();
    let mut probability = 1.0;
    for unit in 0..=angles.len() {
        if unit > 0 {
            state.apply_phase_pair((0, 1), angles[unit - 1])?;
        }
        apply_losses(&mut state, losses, unit, false)?;
        let branches = destructive_unit_branches(&state)?;
        let total: f64 = branches.iter().map(|(_, p, _)| p).sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = branches.len() - 1;
        for (idx, (_, p, _)) in branches.iter().enumerate() {
            if u < *p {
                chosen = idx;
                break;
            }
            u -= p;
        }
        let ((oa, ob), p, post) = branches.into_iter().nth(chosen).unwrap();
        probability *= p;
        record.push(ob == AtomOutcome::Plus);
        let parity = pair_parity(oa, ob);
        if let Some(&prev) = parities.last() {
            if prev != parity {
                flags.push(unit);
            }
        }
        parities.push(parity);
        state = post;
    }
    Ok(DestructiveChainRun {
        record: MeasurementRecord { outcomes: record },
        parities,
        parity_flags: flags,
        state,
        probability,
    })
}

/// Exhaustively enumerates every outcome branch of the destructive chain.
pub fn enumerate_destructive_chain(
    n: usize,
    angles: &[f64],
    losses: &[LossEvent],
) -> Result<Vec<DestructiveChainRun>> {
    let state = JointState::fock(&[n, 0], n)?;
    let mut runs = Vec::new();
    let mut stack = vec![(state, 0usize, 1.0f64, Vec::new(), Vec::new(), Vec::new())];
    while let Some((mut state, unit, prob, record, parities, flags)) = stack.pop() {
        if unit > angles.len() {
            runs.push(DestructiveChainRun {
                record: MeasurementRecord { outcomes: record },
                parities,
                parity_flags: flags,
                state,
                probability: prob,
            });
            continue;
        }
        if unit > 0 {
            state.apply_phase_pair((0, 1), angles[unit - 1])?;
        }
        apply_losses(&mut state, losses, unit, false)?;
        for ((oa, ob), p, post) in destructive_unit_branches(&state)? {
            let mut record = record.clone();
            record.push(ob == AtomOutcome::Plus);
            let parity = pair_parity(oa, ob);
            let mut parities = parities.clone();
            let mut flags = flags.clone();
            if let Some(&prev) = parities.last() {
                if prev != parity {
                    flags.push(unit);
                }
            }
            parities.push(parity);
            stack.push((post, unit + 1, prob * p, record, parities, flags));
        }
    }
    Ok(runs)
}

/// Run of a QND chain.
#[derive(Clone, Debug)]
pub struct QndChainRun {
    /// Pair-class outcome per block.
    pub blocks: Vec<PairClass>,
    /// Blocks with invalid mixed outcomes (photon lost inside the block).
    pub invalid_flags: Vec<usize>,
    /// Parity revealed by the optional gray-box cavity after each block
    /// (empty with [`GrayBox::Mirror`]).
    pub parity_checks: Vec<Parity>,
    /// Blocks whose gray-box parity differs from the previous block's.
    pub parity_flags: Vec<usize>,
    /// Normalized photonic post-state.
    pub state: JointState,
    pub probability: f64,
}

struct QndBlockBranch {
    class: PairClass,
    parity: Option<Parity>,
    probability: f64,
    state: JointState,
}

/// One QND block on modes (0, 1): four entangled atoms (pairs C1↔C3 and
/// C2↔C4), the BS / cavity-pair / BS / phase / BS / cavity-pair / BS
/// sequence, the optional gray-box parity cavity, and the `|±⟩` readout of
/// every atom grouped into pair classes.
fn qnd_block_branches(
    state: &JointState,
    phi: f64,
    gray_box: GrayBox,
    losses: &[LossEvent],
    block: usize,
) -> Result<Vec<QndBlockBranch>> {
    let mut s = state.clone();
    let (c1, c3) = s.add_atom_pair_phi_plus();
    let (c2, c4) = s.add_atom_pair_phi_plus();
    s.apply_beam_splitter((0, 1))?;
    s.apply_cavity_gate(0, c1)?;
    s.apply_cavity_gate(1, c2)?;
    s.apply_beam_splitter_dagger((0, 1))?;
    s.apply_phase_pair((0, 1), phi)?;
    apply_losses(&mut s, losses, block, true)?;
    s.apply_beam_splitter((0, 1))?;
    s.apply_cavity_gate(0, c3)?;
    s.apply_cavity_gate(1, c4)?;
    s.apply_beam_splitter_dagger((0, 1))?;
    let extra = match gray_box {
        GrayBox::Mirror => None,
        GrayBox::Cavity => {
            let atom = s.add_atom_plus();
            s.apply_cavity_gate(0, atom)?;
            Some(atom)
        }
    };
    // Measure from the highest atom index down so indices stay valid:
    // [gray?, c4, c2, c3, c1] by construction of the pair indices.
    let mut branches = Vec::new();
    let mut frontier: Vec<(Vec<AtomOutcome>, f64, JointState)> = vec![(Vec::new(), 1.0, s)];
    let mut order: Vec<usize> = Vec::new();
    if let Some(a) = extra {
        order.push(a);
    }
    order.extend([c4, c2, c3, c1]);
    debug_assert!(order.windows(2).all(|w| w[0] > w[1]));
    for &atom in &order {
        let mut next = Vec::new();
        for (outs, p, st) in frontier {
            for o in [AtomOutcome::Plus, AtomOutcome::Minus] {
                let m = st.measure_atom(atom, o)?;
                if m.impossible {
                    continue;
                }
                let mut outs = outs.clone();
                outs.push(o);
                next.push((outs, p * m.probability, m.state));
            }
        }
        frontier = next;
    }
    for (outs, p, mut st) in frontier {
        // `outs` follows `order`: [gray?, c4, c2, c3, c1].
        let off = if extra.is_some() { 1 } else { 0 };
        let (o4, o2, o3, o1) = (outs[off], outs[off + 1], outs[off + 2], outs[off + 3]);
        // φ₊ = (|++⟩+|−−⟩)/√2: same signs within a pair.
        let first_plus = o1 == o3;
        let second_plus = o2 == o4;
        let parity = extra.map(|_| {
            if outs[0] == AtomOutcome::Plus {
                Parity::Even
            } else {
                Parity::Odd
            }
        });
        st.normalize()?;
        branches.push(QndBlockBranch {
            class: PairClass::from_pair_states(first_plus, second_plus),
            parity,
            probability: p,
            state: st,
        });
    }
    // Merge branches with the same observable signature (several atomic
    // sign patterns map to one pair class; their posts coincide).
    branches.sort_by(|a, b| (a.class, a.parity == Some(Parity::Odd))
        .cmp(&(b.class, b.parity == Some(Parity::Odd))));
    let mut merged: Vec<QndBlockBranch> = Vec::new();
    for b in branches {
        match merged.last_mut() {
            Some(last) if last.class == b.class && last.parity == b.parity => {
                last.probability += b.probability;
            }
            _ => merged.push(b),
        }
    }
    Ok(merged)
}

/// Samples a QND counting chain on `|n⟩|q⟩`: `angles.len()` blocks, block
/// `i` carrying phase `φ_i` internally.
pub fn simulate_qnd_chain(
    n: usize,
    q: usize,
    angles: &[f64],
    losses: &[LossEvent],
    gray_box: GrayBox,
    rng: &mut impl Rng,
) -> Result<QndChainRun> {
    let mut state = JointState::fock(&[n, q], n + q)?;
    let mut run = QndChainRun {
        blocks: Vec::new(),
        invalid_flags: Vec::new(),
        parity_checks: Vec::new(),
        parity_flags: Vec::new(),
        state: state.clone(),
        probability: 1.0,
    };
    for (block, &phi) in angles.iter().enumerate() {
        apply_losses(&mut state, losses, block, false)?;
        let branches = qnd_block_branches(&state, phi, gray_box, losses, block)?;
        let total: f64 = branches.iter().map(|b| b.probability).sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = branches.len() - 1;
        for (idx, b) in branches.iter().enumerate() {
            if u < b.probability {
                chosen = idx;
                break;
            }
            u -= b.probability;
        }
        let b = branches.into_iter().nth(chosen).unwrap();
        run.probability *= b.probability;
        if !b.class.is_valid() {
            run.invalid_flags.push(block);
        }
        run.blocks.push(b.class);
        if let Some(par) = b.parity {
            if let Some(&prev) = run.parity_checks.last() {
                if prev != par {
                    run.parity_flags.push(block);
                }
            }
            run.parity_checks.push(par);
        }
        state = b.state;
    }
    run.state = state;
    Ok(run)
}

/// Exhaustively enumerates all branch outcomes of the QND chain.
pub fn enumerate_qnd_chain(
    n: usize,
    q: usize,
    angles: &[f64],
    losses: &[LossEvent],
    gray_box: GrayBox,
) -> Result<Vec<QndChainRun>> {
    let state = JointState::fock(&[n, q], n + q)?;
    let seed = QndChainRun {
        blocks: Vec::new(),
        invalid_flags: Vec::new(),
        parity_checks: Vec::new(),
        parity_flags: Vec::new(),
        state,
        probability: 1.0,
    };
    let mut frontier = vec![seed];
    for (block, &phi) in angles.iter().enumerate() {
        let mut next = Vec::new();
        for run in frontier {
            let mut state = run.state.clone();
            apply_losses(&mut state, losses, block, false)?;
            for b in qnd_block_branches(&state, phi, gray_box, losses, block)? {
                let mut r = run.clone();
                r.probability *= b.probability;
                if !b.class.is_valid() {
                    r.invalid_flags.push(block);
                }
                r.blocks.push(b.class);
                if let Some(par) = b.parity {
                    if let Some(&prev) = r.parity_checks.last() {
                        if prev != par {
                            r.parity_flags.push(block);
                        }
                    }
                    r.parity_checks.push(par);
                }
                r.state = b.state;
                next.push(r);
            }
        }
        frontier = next;
    }
    Ok(frontier)
}
