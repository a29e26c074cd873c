//! Truncated Fock-space engine: multimode photonic states joint with atom
//! qubits, passive linear optics, the atom-controlled parity gate, and atomic
//! measurement.
//!
//! States are truncated by **total** photon number. Beam splitters and phase
//! shifters conserve total photon number, so every ideal-regime operation is
//! exact on the truncated space: truncation error enters only through the
//! initial coherent-state expansion, and that deficit is tracked rather than
//! renormalized away so conditional probabilities stay comparable to the
//! analytic formulas.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::{Error, Result};

/// Default bound on the coherent-state probability mass lost to truncation.
pub const DEFAULT_TAIL_EPS: f64 = 1e-12;

/// Below this probability a measurement outcome is reported as impossible:
/// it separates analytic zeros from accumulated rounding.
pub const IMPOSSIBLE_OUTCOME_EPS: f64 = 1e-15;

/// Photon-number parity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn of(n: usize) -> Self {
        if n % 2 == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    pub fn matches(self, n: usize) -> bool {
        Parity::of(n) == self
    }

    pub fn flipped(self) -> Self {
        match self {
            Parity::Even => Parity::Odd,
            Parity::Odd => Parity::Even,
        }
    }
}

/// Measurement basis outcome `|±⟩ = (|↑⟩ ± |↓⟩)/√2` for a single atom.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AtomOutcome {
    Plus,
    Minus,
}

impl AtomOutcome {
    fn down_sign(self) -> f64 {
        match self {
            AtomOutcome::Plus => 1.0,
            AtomOutcome::Minus => -1.0,
        }
    }
}

/// One basis ket: a photon occupation tuple together with an atom bitstring
/// (bit `k` set means atom `k` is in `|↑⟩`).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BasisKet {
    pub occ: Vec<u8>,
    pub atoms: u32,
}

impl BasisKet {
    pub fn total_photons(&self) -> usize {
        self.occ.iter().map(|&n| n as usize).sum()
    }
}

/// Coherent-state input specification: amplitude plus the tolerated
/// truncation tail mass.
#[derive(Clone, Copy, Debug)]
pub struct CoherentSpec {
    pub alpha: Complex64,
    pub tail_eps: f64,
}

impl CoherentSpec {
    pub fn new(alpha: Complex64) -> Self {
        Self {
            alpha,
            tail_eps: DEFAULT_TAIL_EPS,
        }
    }

    pub fn real(alpha: f64) -> Self {
        Self::new(Complex64::new(alpha, 0.0))
    }
}

/// Upper Poisson tail mass `P[X > cutoff]` for mean `lambda`.
pub fn poisson_tail(lambda: f64, cutoff: usize) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    // Walk the pmf upward from cutoff+1 until terms stop mattering.
    let mut log_p = -lambda + (cutoff as f64 + 1.0) * lambda.ln()
        - ln_factorial(cutoff + 1);
    let mut term = log_p.exp();
    let mut sum = 0.0;
    let mut n = cutoff + 1;
    loop {
        sum += term;
        n += 1;
        log_p += lambda.ln() - (n as f64).ln();
        term = log_p.exp();
        if term < sum * 1e-18 + 1e-310 || n > cutoff + 20_000 {
            break;
        }
    }
    sum
}

fn ln_factorial(n: usize) -> f64 {
    (1..=n).map(|k| (k as f64).ln()).sum()
}

/// Smallest total-photon cutoff whose Poisson tail mass is below `eps`.
pub fn required_cutoff(mean_photons: f64, eps: f64) -> usize {
    let mut n = mean_photons.ceil() as usize;
    while poisson_tail(mean_photons, n) >= eps {
        n += 1;
        if n > 100_000 {
            break;
        }
    }
    n
}

/// Truncated coherent-state amplitudes `e^{-|α|²/2} αⁿ/√(n!)` for
/// `n = 0..=cutoff`, unrenormalized.
///
/// Errors with the required cutoff when the Poisson tail mass at `cutoff` is
/// not below `spec.tail_eps`.
pub fn coherent_amplitudes(spec: &CoherentSpec, cutoff: usize) -> Result<Vec<Complex64>> {
    if spec.tail_eps <= 0.0 {
        return Err(Error::Config("tail tolerance must be positive".into()));
    }
    let mean = spec.alpha.norm_sqr();
    let tail = poisson_tail(mean, cutoff);
    if tail >= spec.tail_eps {
        return Err(Error::CutoffTooSmall {
            requested: cutoff,
            required: required_cutoff(mean, spec.tail_eps),
            tail,
            eps: spec.tail_eps,
        });
    }
    let mut amps = Vec::with_capacity(cutoff + 1);
    let mut a = Complex64::new((-mean / 2.0).exp(), 0.0);
    for n in 0..=cutoff {
        amps.push(a);
        a *= spec.alpha / ((n as f64 + 1.0).sqrt());
    }
    Ok(amps)
}

/// Outcome of a single-atom measurement: the unnormalized post-state (with
/// the measured atom removed from the register) and the outcome probability
/// relative to the pre-measurement norm².
#[derive(Clone, Debug)]
pub struct Measurement {
    pub probability: f64,
    pub state: JointState,
    /// Set when the outcome probability fell below
    /// [`IMPOSSIBLE_OUTCOME_EPS`]; the state is then the zero state.
    pub impossible: bool,
}

/// Sparse joint state of `num_modes` photonic modes (total photon number
/// `<= cutoff`) and `num_atoms` atom qubits.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    num_modes: usize,
    num_atoms: usize,
    cutoff: usize,
    amps: BTreeMap<BasisKet, Complex64>,
}

impl JointState {
    pub fn vacuum(num_modes: usize, cutoff: usize) -> Self {
        let mut amps = BTreeMap::new();
        amps.insert(
            BasisKet {
                occ: vec![0; num_modes],
                atoms: 0,
            },
            Complex64::new(1.0, 0.0),
        );
        Self {
            num_modes,
            num_atoms: 0,
            cutoff,
            amps,
        }
    }

    /// Fock product state `|n₁,…,n_M⟩`.
    pub fn fock(occ: &[usize], cutoff: usize) -> Result<Self> {
        let total: usize = occ.iter().sum();
        if total > cutoff {
            return Err(Error::Config(format!(
                "occupation total {total} exceeds cutoff {cutoff}"
            )));
        }
        let mut s = Self::vacuum(occ.len(), cutoff);
        s.amps.clear();
        s.amps.insert(
            BasisKet {
                occ: occ.iter().map(|&n| n as u8).collect(),
                atoms: 0,
            },
            Complex64::new(1.0, 0.0),
        );
        Ok(s)
    }

    /// Product of truncated coherent states, truncated further by total
    /// photon number. The combined Poisson tail must fit below the smallest
    /// per-mode tolerance.
    pub fn coherent_product(specs: &[CoherentSpec], cutoff: usize) -> Result<Self> {
        let total_mean: f64 = specs.iter().map(|s| s.alpha.norm_sqr()).sum();
        let eps = specs
            .iter()
            .map(|s| s.tail_eps)
            .fold(f64::INFINITY, f64::min);
        let tail = poisson_tail(total_mean, cutoff);
        if tail >= eps {
            return Err(Error::CutoffTooSmall {
                requested: cutoff,
                required: required_cutoff(total_mean, eps),
                tail,
                eps,
            });
        }
        let mode_amps: Vec<Vec<Complex64>> = specs
            .iter()
            .map(|s| {
                // Per-mode lists up to the full budget; the total-photon
                // restriction below is what actually truncates.
                let relaxed = CoherentSpec {
                    alpha: s.alpha,
                    tail_eps: 1.0,
                };
                coherent_amplitudes(&relaxed, cutoff)
            })
            .collect::<Result<_>>()?;
        Ok(Self::product_state(&mode_amps, cutoff))
    }

    /// Product state from explicit per-mode amplitude lists, keeping tuples
    /// with total photon number `<= cutoff`.
    pub fn product_state(mode_amps: &[Vec<Complex64>], cutoff: usize) -> Self {
        let num_modes = mode_amps.len();
        let mut amps: BTreeMap<BasisKet, Complex64> = BTreeMap::new();
        let mut stack: Vec<(Vec<u8>, usize, Complex64)> =
            vec![(Vec::new(), 0, Complex64::new(1.0, 0.0))];
        while let Some((occ, used, amp)) = stack.pop() {
            let mode = occ.len();
            if mode == num_modes {
                if amp != Complex64::new(0.0, 0.0) {
                    amps.insert(BasisKet { occ, atoms: 0 }, amp);
                }
                continue;
            }
            let budget = cutoff - used;
            for (n, &a) in mode_amps[mode].iter().enumerate().take(budget + 1) {
                if a == Complex64::new(0.0, 0.0) {
                    continue;
                }
                let mut next = occ.clone();
                next.push(n as u8);
                stack.push((next, used + n, amp * a));
            }
        }
        Self {
            num_modes,
            num_atoms: 0,
            cutoff,
            amps,
        }
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    pub fn num_atoms(&self) -> usize {
        self.num_atoms
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn len(&self) -> usize {
        self.amps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&BasisKet, &Complex64)> {
        self.amps.iter()
    }

    pub fn amplitude(&self, occ: &[usize], atoms: u32) -> Complex64 {
        let ket = BasisKet {
            occ: occ.iter().map(|&n| n as u8).collect(),
            atoms,
        };
        self.amps
            .get(&ket)
            .copied()
            .unwrap_or(Complex64::new(0.0, 0.0))
    }

    pub fn set_amplitude(&mut self, occ: &[usize], atoms: u32, amp: Complex64) {
        let ket = BasisKet {
            occ: occ.iter().map(|&n| n as u8).collect(),
            atoms,
        };
        if amp == Complex64::new(0.0, 0.0) {
            self.amps.remove(&ket);
        } else {
            self.amps.insert(ket, amp);
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.values().map(|a| a.norm_sqr()).sum()
    }

    pub fn scale(&mut self, c: Complex64) {
        for a in self.amps.values_mut() {
            *a *= c;
        }
    }

    /// Rescales to unit norm, returning the norm² before normalization.
    pub fn normalize(&mut self) -> Result<f64> {
        let n2 = self.norm_sqr();
        if n2 <= 0.0 {
            return Err(Error::ZeroProbability);
        }
        self.scale(Complex64::new(1.0 / n2.sqrt(), 0.0));
        Ok(n2)
    }

    /// Appends one atom in `up·|↑⟩ + down·|↓⟩`, returning its index.
    pub fn add_atom(&mut self, up: Complex64, down: Complex64) -> usize {
        let k = self.num_atoms;
        let bit = 1u32 << k;
        let mut amps = BTreeMap::new();
        for (ket, &a) in &self.amps {
            if down != Complex64::new(0.0, 0.0) {
                amps.insert(ket.clone(), a * down);
            }
            if up != Complex64::new(0.0, 0.0) {
                let mut up_ket = ket.clone();
                up_ket.atoms |= bit;
                amps.insert(up_ket, a * up);
            }
        }
        self.amps = amps;
        self.num_atoms += 1;
        k
    }

    /// Appends one atom prepared in `|+⟩ = (|↑⟩+|↓⟩)/√2`.
    pub fn add_atom_plus(&mut self) -> usize {
        let r = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        self.add_atom(r, r)
    }

    /// Appends two atoms prepared in the entangled pair
    /// `|φ₊⟩ = (|↑↑⟩+|↓↓⟩)/√2`, returning their indices.
    pub fn add_atom_pair_phi_plus(&mut self) -> (usize, usize) {
        let k = self.num_atoms;
        let bits = (1u32 << k) | (1u32 << (k + 1));
        let r = Complex64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
        let mut amps = BTreeMap::new();
        for (ket, &a) in &self.amps {
            amps.insert(ket.clone(), a * r);
            let mut up_ket = ket.clone();
            up_ket.atoms |= bits;
            amps.insert(up_ket, a * r);
        }
        self.amps = amps;
        self.num_atoms += 2;
        (k, k + 1)
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.num_modes {
            return Err(Error::ModeOutOfRange {
                index: mode,
                num_modes: self.num_modes,
            });
        }
        Ok(())
    }

    fn check_atom(&self, atom: usize) -> Result<()> {
        if atom >= self.num_atoms {
            return Err(Error::AtomOutOfRange {
                index: atom,
                num_atoms: self.num_atoms,
            });
        }
        Ok(())
    }

    /// Generalized two-mode splitter `exp[θ(a†b − ab†)]`; `θ = π/4` is the
    /// 50:50 beam splitter, with `a†|0⟩ → (a†−b†)|0⟩/√2`.
    pub fn apply_variable_beam_splitter(
        &mut self,
        modes: (usize, usize),
        theta: f64,
    ) -> Result<()> {
        let (a, b) = modes;
        self.check_mode(a)?;
        self.check_mode(b)?;
        if a == b {
            return Err(Error::IdenticalModes(a));
        }
        // Bucket amplitudes by everything except the (n_a, n_b) split of each
        // total-photon shell, then rotate each shell with its exact unitary.
        let mut buckets: BTreeMap<(Vec<u8>, u32, usize), Vec<Complex64>> = BTreeMap::new();
        for (ket, &amp) in &self.amps {
            let na = ket.occ[a] as usize;
            let nb = ket.occ[b] as usize;
            let s = na + nb;
            let mut ctx = ket.occ.clone();
            ctx[a] = 0;
            ctx[b] = 0;
            let v = buckets
                .entry((ctx, ket.atoms, s))
                .or_insert_with(|| vec![Complex64::new(0.0, 0.0); s + 1]);
            v[na] = amp;
        }
        let mut amps = BTreeMap::new();
        for ((ctx, atoms, s), vin) in buckets {
            let u = shell_unitary(s, theta);
            for m in 0..=s {
                let mut x = Complex64::new(0.0, 0.0);
                for (n, &vn) in vin.iter().enumerate() {
                    if vn != Complex64::new(0.0, 0.0) {
                        x += u[m * (s + 1) + n] * vn;
                    }
                }
                if x != Complex64::new(0.0, 0.0) {
                    let mut occ = ctx.clone();
                    occ[a] = m as u8;
                    occ[b] = (s - m) as u8;
                    amps.insert(BasisKet { occ, atoms }, x);
                }
            }
        }
        self.amps = amps;
        Ok(())
    }

    /// 50:50 beam splitter `U = exp[(π/4)(a†b − ab†)]`.
    pub fn apply_beam_splitter(&mut self, modes: (usize, usize)) -> Result<()> {
        self.apply_variable_beam_splitter(modes, std::f64::consts::FRAC_PI_4)
    }

    /// Inverse of [`Self::apply_beam_splitter`].
    pub fn apply_beam_splitter_dagger(&mut self, modes: (usize, usize)) -> Result<()> {
        self.apply_variable_beam_splitter(modes, -std::f64::consts::FRAC_PI_4)
    }

    /// Opposite phase shifts on a mode pair:
    /// `U_φ = exp[iφ(a†a − b†b)]`.
    pub fn apply_phase_pair(&mut self, modes: (usize, usize), phi: f64) -> Result<()> {
        let (a, b) = modes;
        self.check_mode(a)?;
        self.check_mode(b)?;
        if phi == 0.0 {
            return Ok(());
        }
        for (ket, amp) in self.amps.iter_mut() {
            let d = ket.occ[a] as f64 - ket.occ[b] as f64;
            *amp *= Complex64::from_polar(1.0, phi * d);
        }
        Ok(())
    }

    /// Atom-controlled parity gate: the `|↓⟩` branch of `atom` picks up a π
    /// phase per photon in `mode`; the `|↑⟩` branch is reflected unchanged.
    pub fn apply_cavity_gate(&mut self, mode: usize, atom: usize) -> Result<()> {
        self.check_mode(mode)?;
        self.check_atom(atom)?;
        let bit = 1u32 << atom;
        for (ket, amp) in self.amps.iter_mut() {
            if ket.atoms & bit == 0 && ket.occ[mode] % 2 == 1 {
                *amp = -*amp;
            }
        }
        Ok(())
    }

    /// Projects `atom` onto `|±⟩` and removes it from the register.
    pub fn measure_atom(&self, atom: usize, outcome: AtomOutcome) -> Result<Measurement> {
        self.check_atom(atom)?;
        let norm_before = self.norm_sqr();
        if norm_before <= 0.0 {
            return Err(Error::ZeroProbability);
        }
        let bit = 1u32 << atom;
        let low_mask = bit - 1;
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let sign = outcome.down_sign() * r;
        let mut amps: BTreeMap<BasisKet, Complex64> = BTreeMap::new();
        for (ket, &a) in &self.amps {
            let reduced_atoms = (ket.atoms & low_mask) | ((ket.atoms >> (atom + 1)) << atom);
            let contrib = if ket.atoms & bit != 0 {
                a * r
            } else {
                a * sign
            };
            let reduced = BasisKet {
                occ: ket.occ.clone(),
                atoms: reduced_atoms,
            };
            *amps.entry(reduced).or_insert(Complex64::new(0.0, 0.0)) += contrib;
        }
        amps.retain(|_, a| *a != Complex64::new(0.0, 0.0));
        let state = JointState {
            num_modes: self.num_modes,
            num_atoms: self.num_atoms - 1,
            cutoff: self.cutoff,
            amps,
        };
        let probability = state.norm_sqr() / norm_before;
        if probability < IMPOSSIBLE_OUTCOME_EPS {
            let mut zero = state;
            zero.amps.clear();
            return Ok(Measurement {
                probability: 0.0,
                state: zero,
                impossible: true,
            });
        }
        Ok(Measurement {
            probability,
            state,
            impossible: false,
        })
    }

    /// Zeroes all amplitudes of the wrong photon-number parity in `mode`.
    pub fn parity_project(&mut self, mode: usize, parity: Parity) -> Result<()> {
        self.check_mode(mode)?;
        self.amps
            .retain(|ket, _| parity.matches(ket.occ[mode] as usize));
        Ok(())
    }

    /// Applies the annihilation operator on `mode` (unnormalized:
    /// `a|n⟩ = √n |n−1⟩`).
    pub fn apply_annihilation(&mut self, mode: usize) -> Result<()> {
        self.check_mode(mode)?;
        let mut amps = BTreeMap::new();
        for (ket, &a) in &self.amps {
            let n = ket.occ[mode] as usize;
            if n == 0 {
                continue;
            }
            let mut occ = ket.occ.clone();
            occ[mode] = (n - 1) as u8;
            amps.insert(
                BasisKet {
                    occ,
                    atoms: ket.atoms,
                },
                a * (n as f64).sqrt(),
            );
        }
        self.amps = amps;
        Ok(())
    }

    /// Hermitian inner product `⟨self|other⟩`.
    pub fn overlap(&self, other: &JointState) -> Result<Complex64> {
        if self.num_modes != other.num_modes || self.num_atoms != other.num_atoms {
            return Err(Error::ShapeMismatch(
                format!("{} modes/{} atoms", self.num_modes, self.num_atoms),
                format!("{} modes/{} atoms", other.num_modes, other.num_atoms),
            ));
        }
        let (small, big, conj_small) = if self.amps.len() <= other.amps.len() {
            (&self.amps, &other.amps, true)
        } else {
            (&other.amps, &self.amps, false)
        };
        let mut acc = Complex64::new(0.0, 0.0);
        for (ket, &a) in small {
            if let Some(&b) = big.get(ket) {
                acc += if conj_small { a.conj() * b } else { b.conj() * a };
            }
        }
        Ok(acc)
    }

    /// Squared distance `‖self − other‖²` between two states of equal shape.
    pub fn distance_sqr(&self, other: &JointState) -> f64 {
        let mut d = 0.0;
        for (ket, &a) in &self.amps {
            let b = other
                .amps
                .get(ket)
                .copied()
                .unwrap_or(Complex64::new(0.0, 0.0));
            d += (a - b).norm_sqr();
        }
        for (ket, &b) in &other.amps {
            if !self.amps.contains_key(ket) {
                d += b.norm_sqr();
            }
        }
        d
    }

    /// Drops amplitudes with `|a|² < tol²` (used by density pipelines; gate
    /// operations themselves never prune).
    pub fn prune(&mut self, tol: f64) {
        self.amps.retain(|_, a| a.norm_sqr() >= tol * tol);
    }

    /// JSON debug dump: a list of `{occupation, atoms, re, im}` rows, sorted
    /// by basis ket. Atom bitstring character `k` refers to atom `k`,
    /// `'1'` meaning `|↑⟩`.
    pub fn to_debug_json(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .amps
            .iter()
            .map(|(ket, a)| {
                let bits: String = (0..self.num_atoms)
                    .map(|k| if ket.atoms & (1 << k) != 0 { '1' } else { '0' })
                    .collect();
                serde_json::json!({
                    "occupation": ket.occ.iter().map(|&n| n as usize).collect::<Vec<_>>(),
                    "atoms": bits,
                    "re": a.re,
                    "im": a.im,
                })
            })
            .collect();
        serde_json::Value::Array(rows)
    }
}

/// Exact shell unitary for `exp[θ(a†b − ab†)]` restricted to the `s`-photon
/// two-mode shell, row-major over `n_a = 0..=s`.
///
/// The generator on the shell is antisymmetric tridiagonal; conjugating by
/// `diag(iⁿ)` turns it into `i` times the symmetric tridiagonal `T` with
/// off-diagonal `√((n+1)(s−n))`, so the exponential follows from one real
/// symmetric eigendecomposition per shell. Shells are cached.
fn shell_unitary(s: usize, theta: f64) -> Arc<Vec<Complex64>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, u64), Arc<Vec<Complex64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let key = (s, theta.to_bits());
    if let Some(hit) = cache.lock().unwrap().get(&key) {
        return hit.clone();
    }
    let dim = s + 1;
    let mut t = DMatrix::<f64>::zeros(dim, dim);
    for n in 0..s {
        let c = (((n + 1) * (s - n)) as f64).sqrt();
        t[(n + 1, n)] = c;
        t[(n, n + 1)] = c;
    }
    let eig = SymmetricEigen::new(t);
    let q = &eig.eigenvectors;
    let phases: Vec<Complex64> = eig
        .eigenvalues
        .iter()
        .map(|&lam| Complex64::from_polar(1.0, theta * lam))
        .collect();
    let mut u = vec![Complex64::new(0.0, 0.0); dim * dim];
    for m in 0..dim {
        for n in 0..dim {
            let mut x = Complex64::new(0.0, 0.0);
            for (k, ph) in phases.iter().enumerate() {
                x += q[(m, k)] * *ph * q[(n, k)];
            }
            // exp(θK) = D† exp(iθT) D with D = diag(iⁿ).
            u[m * dim + n] = x * i_pow(n as i64 - m as i64);
        }
    }
    let arc = Arc::new(u);
    cache.lock().unwrap().insert(key, arc.clone());
    arc
}

fn i_pow(k: i64) -> Complex64 {
    match k.rem_euclid(4) {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    const C0: Complex64 = Complex64::new(0.0, 0.0);

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Random state with support on total photon number <= max_total.
    fn random_two_mode(rng: &mut impl Rng, max_total: usize) -> JointState {
        let mut s = JointState::vacuum(2, max_total);
        s.set_amplitude(&[0, 0], 0, C0);
        for na in 0..=max_total {
            for nb in 0..=(max_total - na) {
                let a = c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                s.set_amplitude(&[na, nb], 0, a);
            }
        }
        let n2 = s.normalize().unwrap();
        assert!(n2 > 0.0);
        s
    }

    #[test]
    fn coherent_vacuum_is_trivial() {
        let amps = coherent_amplitudes(&CoherentSpec::real(0.0), 4).unwrap();
        assert_eq!(amps[0], c(1.0, 0.0));
        assert!(amps[1..].iter().all(|&a| a == C0));
    }

    #[test]
    fn coherent_entry_matches_formula() {
        // n = 2 entry of |α=1⟩: e^{-1/2}/√2
        let amps = coherent_amplitudes(&CoherentSpec::real(1.0), 20).unwrap();
        let expect = (-0.5f64).exp() / 2.0f64.sqrt();
        assert!((amps[2].re - expect).abs() < 1e-14);
        assert!((amps[2].re - 0.42888).abs() < 1e-5);
    }

    #[test]
    fn coherent_tail_oracle() {
        // Brute-force Poisson tail for |α|² = 4 beyond 30.
        let lambda = 4.0f64;
        let mut pmf = (-lambda).exp();
        let mut cdf = 0.0;
        for n in 0..=30usize {
            cdf += pmf;
            pmf *= lambda / (n as f64 + 1.0);
        }
        let tail = 1.0 - cdf;
        assert!(tail < 1e-12);
        assert!((poisson_tail(lambda, 30) - tail).abs() < 1e-15 + tail);
        // α = 2 with cutoff 30 must therefore construct fine.
        let amps = coherent_amplitudes(&CoherentSpec::real(2.0), 30).unwrap();
        let mass: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        assert!(1.0 - mass < 1e-12);
    }

    #[test]
    fn coherent_cutoff_error_names_requirement() {
        let err = coherent_amplitudes(&CoherentSpec::real(2.0), 8).unwrap_err();
        match err {
            Error::CutoffTooSmall { required, .. } => {
                assert!(poisson_tail(4.0, required) < 1e-12);
                assert!(poisson_tail(4.0, required - 1) >= 1e-12);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn beam_splitter_single_photon() {
        let mut s = JointState::fock(&[1, 0], 4).unwrap();
        s.apply_beam_splitter((0, 1)).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.amplitude(&[1, 0], 0) - c(r, 0.0)).norm() < 1e-14);
        assert!((s.amplitude(&[0, 1], 0) - c(-r, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn beam_splitter_hong_ou_mandel() {
        let mut s = JointState::fock(&[1, 1], 4).unwrap();
        s.apply_beam_splitter((0, 1)).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.amplitude(&[2, 0], 0) - c(r, 0.0)).norm() < 1e-13);
        assert!((s.amplitude(&[0, 2], 0) - c(-r, 0.0)).norm() < 1e-13);
        assert!(s.amplitude(&[1, 1], 0).norm() < 1e-13);
    }

    #[test]
    fn beam_splitter_vacuum_invariant() {
        let mut s = JointState::vacuum(2, 4);
        s.apply_beam_splitter((0, 1)).unwrap();
        assert!((s.amplitude(&[0, 0], 0) - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn beam_splitter_identical_modes_rejected() {
        let mut s = JointState::vacuum(2, 4);
        assert!(matches!(
            s.apply_beam_splitter((1, 1)),
            Err(Error::IdenticalModes(1))
        ));
    }

    #[test]
    fn beam_splitter_unitary_and_involution() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..20 {
            let s0 = random_two_mode(&mut rng, 10);
            let mut s = s0.clone();
            s.apply_beam_splitter((0, 1)).unwrap();
            assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
            // Total photon number conserved exactly: support stays within
            // the input's shells.
            let shells: std::collections::BTreeSet<usize> =
                s0.iter().map(|(k, _)| k.total_photons()).collect();
            for (k, _) in s.iter() {
                assert!(shells.contains(&k.total_photons()));
            }
            s.apply_beam_splitter_dagger((0, 1)).unwrap();
            assert!(s.distance_sqr(&s0).sqrt() < 1e-12);
        }
    }

    #[test]
    fn phase_pair_examples() {
        let mut s = JointState::fock(&[3, 3], 8).unwrap();
        s.apply_phase_pair((0, 1), 0.7321).unwrap();
        assert!((s.amplitude(&[3, 3], 0) - c(1.0, 0.0)).norm() < 1e-15);

        let mut s = JointState::fock(&[2, 0], 4).unwrap();
        s.apply_phase_pair((0, 1), std::f64::consts::FRAC_PI_2).unwrap();
        assert!((s.amplitude(&[2, 0], 0) - c(-1.0, 0.0)).norm() < 1e-12);

        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let s0 = random_two_mode(&mut rng, 6);
        let mut s = s0.clone();
        s.apply_phase_pair((0, 1), 0.0).unwrap();
        assert_eq!(s, s0);
    }

    #[test]
    fn cavity_gate_fock_and_coherent() {
        let mut s = JointState::fock(&[1], 4).unwrap();
        s.add_atom(C0, c(1.0, 0.0)); // atom in |↓⟩
        s.apply_cavity_gate(0, 0).unwrap();
        assert!((s.amplitude(&[1], 0) - c(-1.0, 0.0)).norm() < 1e-15);

        let mut s = JointState::vacuum(1, 4);
        s.add_atom_plus();
        s.apply_cavity_gate(0, 0).unwrap();
        assert!((s.norm_sqr() - 1.0).abs() < 1e-15);

        // |α⟩ ⊗ (|↑⟩+|↓⟩)/√2 → (|α⟩|↑⟩ + |−α⟩|↓⟩)/√2
        let alpha = 1.3;
        let cutoff = required_cutoff(alpha * alpha, 1e-12);
        let mut s =
            JointState::coherent_product(&[CoherentSpec::real(alpha)], cutoff).unwrap();
        s.add_atom_plus();
        s.apply_cavity_gate(0, 0).unwrap();
        let plus = coherent_amplitudes(&CoherentSpec::real(alpha), cutoff).unwrap();
        let minus = coherent_amplitudes(&CoherentSpec::real(-alpha), cutoff).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        for n in 0..=cutoff {
            assert!((s.amplitude(&[n], 1) - plus[n] * r).norm() < 1e-14);
            assert!((s.amplitude(&[n], 0) - minus[n] * r).norm() < 1e-14);
        }
    }

    #[test]
    fn measurement_decoupled_plus() {
        let mut s = JointState::fock(&[2], 4).unwrap();
        s.add_atom_plus();
        let m = s.measure_atom(0, AtomOutcome::Plus).unwrap();
        assert!((m.probability - 1.0).abs() < 1e-14);
        assert!(!m.impossible);
        assert_eq!(m.state.num_atoms(), 0);
    }

    #[test]
    fn cat_state_preparation() {
        // Coherent input, one cavity, + outcome: even cat with
        // norm² = (1 + e^{-2|α|²})/2.
        let alpha = 1.1;
        let cutoff = required_cutoff(alpha * alpha, 1e-12);
        let mut s =
            JointState::coherent_product(&[CoherentSpec::real(alpha)], cutoff).unwrap();
        s.add_atom_plus();
        s.apply_cavity_gate(0, 0).unwrap();
        let m = s.measure_atom(0, AtomOutcome::Plus).unwrap();
        let expect = (1.0 + (-2.0 * alpha * alpha).exp()) / 2.0;
        assert!((m.probability - expect).abs() < 1e-12);
        // Post-state carries only even photon numbers.
        for (ket, _) in m.state.iter() {
            assert_eq!(ket.occ[0] % 2, 0);
        }
        // And equals the even projection of the coherent state.
        let amps = coherent_amplitudes(&CoherentSpec::real(alpha), cutoff).unwrap();
        for n in (0..=cutoff).step_by(2) {
            assert!((m.state.amplitude(&[n], 0) - amps[n]).norm() < 1e-13);
        }
    }

    #[test]
    fn single_photon_forces_minus() {
        let mut s = JointState::fock(&[1], 2).unwrap();
        s.add_atom_plus();
        s.apply_cavity_gate(0, 0).unwrap();
        let plus = s.measure_atom(0, AtomOutcome::Plus).unwrap();
        assert!(plus.impossible);
        assert_eq!(plus.probability, 0.0);
        let minus = s.measure_atom(0, AtomOutcome::Minus).unwrap();
        assert!((minus.probability - 1.0).abs() < 1e-14);
    }

    #[test]
    fn measurement_completeness() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut s = random_two_mode(&mut rng, 6);
            s.add_atom(
                c(rng.random::<f64>(), rng.random::<f64>()),
                c(rng.random::<f64>(), -0.3),
            );
            s.normalize().unwrap();
            s.apply_cavity_gate(0, 0).unwrap();
            let p = s.measure_atom(0, AtomOutcome::Plus).unwrap().probability;
            let m = s.measure_atom(0, AtomOutcome::Minus).unwrap().probability;
            assert!((p + m - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn parity_projection_examples() {
        let mut s = JointState::fock(&[3], 4).unwrap();
        s.parity_project(0, Parity::Even).unwrap();
        assert!(s.is_empty());

        let alpha = 0.9;
        let cutoff = required_cutoff(alpha * alpha, 1e-12);
        let mut s =
            JointState::coherent_product(&[CoherentSpec::real(alpha)], cutoff).unwrap();
        s.parity_project(0, Parity::Even).unwrap();
        let expect = (1.0 + (-2.0 * alpha * alpha).exp()) / 2.0;
        assert!((s.norm_sqr() - expect).abs() < 1e-12);
        let once = s.clone();
        s.parity_project(0, Parity::Even).unwrap();
        assert_eq!(s, once);
    }

    #[test]
    fn cavity_gate_reproduces_parity_projection() {
        // Measuring a |+⟩ atom after the gate equals the direct parity
        // projection, amplitude-exact.
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let s0 = random_two_mode(&mut rng, 8);
        let mut s = s0.clone();
        s.add_atom_plus();
        s.apply_cavity_gate(1, 0).unwrap();
        for (outcome, parity) in [
            (AtomOutcome::Plus, Parity::Even),
            (AtomOutcome::Minus, Parity::Odd),
        ] {
            let m = s.measure_atom(0, outcome).unwrap();
            let mut expect = s0.clone();
            expect.parity_project(1, parity).unwrap();
            assert!(m.state.distance_sqr(&expect).sqrt() < 1e-13);
            assert!((m.probability - expect.norm_sqr()).abs() < 1e-13);
        }
    }

    #[test]
    fn overlap_examples() {
        let a = JointState::fock(&[1, 0], 3).unwrap();
        let b = JointState::fock(&[0, 1], 3).unwrap();
        assert_eq!(a.overlap(&b).unwrap(), C0);
        assert!((a.overlap(&a).unwrap() - c(1.0, 0.0)).norm() < 1e-15);

        // Closed-form coherent overlap e^{−|α|²/2−|β|²/2+ᾱβ}.
        let alpha = c(0.8, 0.3);
        let beta = c(-0.2, 0.6);
        let cutoff = 40;
        let sa = JointState::coherent_product(&[CoherentSpec::new(alpha)], cutoff).unwrap();
        let sb = JointState::coherent_product(&[CoherentSpec::new(beta)], cutoff).unwrap();
        let got = sa.overlap(&sb).unwrap();
        let expect =
            (alpha.conj() * beta - (alpha.norm_sqr() + beta.norm_sqr()) / 2.0).exp();
        assert!((got - expect).norm() < 1e-12);

        let shaped = JointState::vacuum(3, 2);
        assert!(matches!(
            a.overlap(&shaped),
            Err(Error::ShapeMismatch(_, _))
        ));
    }

    #[test]
    fn annihilation_lowering() {
        let mut s = JointState::fock(&[3, 1], 6).unwrap();
        s.apply_annihilation(0).unwrap();
        assert!((s.amplitude(&[2, 1], 0) - c(3.0f64.sqrt(), 0.0)).norm() < 1e-15);
        let mut v = JointState::vacuum(1, 2);
        v.apply_annihilation(0).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn debug_json_shape() {
        let mut s = JointState::fock(&[1, 0], 2).unwrap();
        s.add_atom(c(1.0, 0.0), C0); // |↑⟩
        let v = s.to_debug_json();
        let rows = v.as_array().unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0]["occupation"], serde_json::json!([1, 0]));
        assert_eq!(rows[0]["atoms"], serde_json::json!("1"));
        assert_eq!(rows[0]["re"], serde_json::json!(1.0));
    }

    #[test]
    fn entangled_pair_preparation() {
        let mut s = JointState::vacuum(1, 1);
        s.add_atom_pair_phi_plus();
        assert_eq!(s.num_atoms(), 2);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.amplitude(&[0], 0b00) - c(r, 0.0)).norm() < 1e-15);
        assert!((s.amplitude(&[0], 0b11) - c(r, 0.0)).norm() < 1e-15);
        assert_eq!(s.amplitude(&[0], 0b01), C0);
    }
}
