//! Fractional photon loss and purification by re-projection.
//!
//! The loss channel is a beam splitter of reflectivity `R` coupling a mode
//! to a traced-out vacuum ancilla. On Fock dyads it has the closed form
//!
//! `|n⟩⟨m| → Σ_k √(C(n,k)C(m,k)) (1−R)^{(n+m)/2−k} R^k |n−k⟩⟨m−k|`,
//!
//! validated here against the fock-core beam-splitter-plus-partial-trace
//! oracle. Purification sends a photon-number-correlated state through the
//! loss channel and conditions on a second projection onto `S`; since the
//! channel's Kraus operators keep pure states pure, density operators are
//! carried as sparse mixtures of unnormalized pure "lines", which keeps
//! four-mode computations comfortably sparse.

use std::collections::BTreeMap;

use num_complex::Complex64;

use crate::filter::{self, PairProjection, PhaseSchedule};
use crate::fock::{self, CoherentSpec, JointState};
use crate::{Error, Result};

/// Pure pieces with squared norm below this fraction of the trace are
/// dropped while building loss mixtures; the total discarded weight stays
/// orders of magnitude below every tolerance used downstream.
const PIECE_FLOOR: f64 = 1e-18;

/// Per-mode loss reflectivities.
#[derive(Clone, Debug)]
pub struct LossSpec {
    pub reflectivity: Vec<f64>,
}

impl LossSpec {
    pub fn uniform(r: f64, modes: usize) -> Result<Self> {
        check_reflectivity(r)?;
        Ok(Self {
            reflectivity: vec![r; modes],
        })
    }
}

fn check_reflectivity(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidReflectivity(r));
    }
    Ok(())
}

/// Sparse multimode density operator: complex weights keyed by
/// (ket occupation, bra occupation).
#[derive(Clone, Debug, Default)]
pub struct SparseDensity {
    num_modes: usize,
    map: BTreeMap<(Vec<u8>, Vec<u8>), Complex64>,
}

impl SparseDensity {
    pub fn new(num_modes: usize) -> Self {
        Self {
            num_modes,
            map: BTreeMap::new(),
        }
    }

    pub fn num_modes(&self) -> usize {
        self.num_modes
    }

    pub fn from_pure(state: &JointState) -> Result<Self> {
        if state.num_atoms() != 0 {
            return Err(Error::ShapeMismatch(
                format!("{} atoms", state.num_atoms()),
                "photonic state".into(),
            ));
        }
        let mut rho = Self::new(state.num_modes());
        for (k1, a1) in state.iter() {
            for (k2, a2) in state.iter() {
                rho.add(k1.occ.clone(), k2.occ.clone(), a1 * a2.conj());
            }
        }
        Ok(rho)
    }

    pub fn add(&mut self, ket: Vec<u8>, bra: Vec<u8>, w: Complex64) {
        if w == Complex64::new(0.0, 0.0) {
            return;
        }
        let e = self
            .map
            .entry((ket, bra))
            .or_insert(Complex64::new(0.0, 0.0));
        *e += w;
    }

    pub fn weight(&self, ket: &[usize], bra: &[usize]) -> Complex64 {
        let key = (
            ket.iter().map(|&n| n as u8).collect::<Vec<_>>(),
            bra.iter().map(|&n| n as u8).collect::<Vec<_>>(),
        );
        self.map
            .get(&key)
            .copied()
            .unwrap_or(Complex64::new(0.0, 0.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(Vec<u8>, Vec<u8>), &Complex64)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn trace(&self) -> f64 {
        self.map
            .iter()
            .filter(|((k, b), _)| k == b)
            .map(|(_, w)| w.re)
            .sum()
    }

    /// `Tr(ρ²) / (Tr ρ)²`.
    pub fn purity(&self) -> Result<f64> {
        let tr = self.trace();
        if tr <= 0.0 {
            return Err(Error::ZeroTrace);
        }
        let mut tr2 = 0.0;
        for ((k, b), w) in &self.map {
            let back = self
                .map
                .get(&(b.clone(), k.clone()))
                .copied()
                .unwrap_or(Complex64::new(0.0, 0.0));
            tr2 += (w * back).re;
        }
        Ok(tr2 / (tr * tr))
    }

    /// Largest Hermiticity violation `|ρ[k,b] − ρ[b,k]*|`.
    pub fn hermiticity_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for ((k, b), w) in &self.map {
            let back = self
                .map
                .get(&(b.clone(), k.clone()))
                .copied()
                .unwrap_or(Complex64::new(0.0, 0.0));
            worst = worst.max((w - back.conj()).norm());
        }
        worst
    }

    /// `⟨ψ|ρ|ψ⟩` for a pure photonic state of matching mode count.
    pub fn expectation(&self, psi: &JointState) -> Result<f64> {
        if psi.num_modes() != self.num_modes || psi.num_atoms() != 0 {
            return Err(Error::ShapeMismatch(
                format!("{} modes", psi.num_modes()),
                format!("{} modes", self.num_modes),
            ));
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for ((k, b), w) in &self.map {
            let ak = psi.amplitude(&to_usize(k), 0);
            let ab = psi.amplitude(&to_usize(b), 0);
            acc += ak.conj() * *w * ab;
        }
        Ok(acc.re)
    }
}

fn to_usize(occ: &[u8]) -> Vec<usize> {
    occ.iter().map(|&n| n as usize).collect()
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Fractional loss of reflectivity `r` on one mode of a sparse density
/// operator (closed Fock-dyad form, trace preserving).
pub fn loss_channel(rho: &SparseDensity, mode: usize, r: f64) -> Result<SparseDensity> {
    check_reflectivity(r)?;
    if mode >= rho.num_modes() {
        return Err(Error::ModeOutOfRange {
            index: mode,
            num_modes: rho.num_modes(),
        });
    }
    let t = 1.0 - r;
    let mut out = SparseDensity::new(rho.num_modes());
    for ((ket, bra), &w) in rho.iter() {
        let n = ket[mode] as usize;
        let m = bra[mode] as usize;
        for k in 0..=n.min(m) {
            let amp = (binomial(n, k) * binomial(m, k)).sqrt()
                * t.powf((n + m) as f64 / 2.0 - k as f64)
                * r.powi(k as i32);
            if amp == 0.0 {
                continue;
            }
            let mut ket2 = ket.clone();
            let mut bra2 = bra.clone();
            ket2[mode] = (n - k) as u8;
            bra2[mode] = (m - k) as u8;
            out.add(ket2, bra2, w * amp);
        }
    }
    Ok(out)
}

/// A mixture of unnormalized pure states: the Kraus decomposition image of
/// a pure state under loss channels.
#[derive(Clone, Debug)]
pub struct PureMixture {
    pub pieces: Vec<JointState>,
}

impl PureMixture {
    pub fn trace(&self) -> f64 {
        self.pieces.iter().map(|p| p.norm_sqr()).sum()
    }

    pub fn purity(&self) -> Result<f64> {
        let tr = self.trace();
        if tr <= 0.0 {
            return Err(Error::ZeroTrace);
        }
        let mut tr2 = 0.0;
        for (i, a) in self.pieces.iter().enumerate() {
            tr2 += a.norm_sqr().powi(2);
            for b in self.pieces.iter().skip(i + 1) {
                tr2 += 2.0 * a.overlap(b)?.norm_sqr();
            }
        }
        Ok(tr2 / (tr * tr))
    }

    pub fn expectation(&self, psi: &JointState) -> Result<f64> {
        let mut acc = 0.0;
        for p in &self.pieces {
            acc += psi.overlap(p)?.norm_sqr();
        }
        Ok(acc)
    }

    pub fn to_density(&self) -> Result<SparseDensity> {
        let mut rho = SparseDensity::new(self.pieces[0].num_modes());
        for p in &self.pieces {
            let piece = SparseDensity::from_pure(p)?;
            for ((k, b), &w) in piece.iter() {
                rho.add(k.clone(), b.clone(), w);
            }
        }
        Ok(rho)
    }
}

/// Applies the loss channel with per-mode reflectivities to a pure state,
/// returning the Kraus mixture `{A_{k₁}⊗A_{k₂}⊗… |ψ⟩}` over loss counts,
/// with pieces below [`PIECE_FLOOR`] of the trace dropped.
pub fn loss_mixture(psi: &JointState, loss: &LossSpec) -> Result<PureMixture> {
    if loss.reflectivity.len() != psi.num_modes() {
        return Err(Error::ShapeMismatch(
            format!("{} reflectivities", loss.reflectivity.len()),
            format!("{} modes", psi.num_modes()),
        ));
    }
    for &r in &loss.reflectivity {
        check_reflectivity(r)?;
    }
    let norm_in = psi.norm_sqr();
    let mut pieces = vec![psi.clone()];
    for (mode, &r) in loss.reflectivity.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        let t = 1.0 - r;
        let mut next = Vec::new();
        for piece in &pieces {
            let max_n = piece
                .iter()
                .map(|(ket, _)| ket.occ[mode] as usize)
                .max()
                .unwrap_or(0);
            for k in 0..=max_n {
                // A_k on this mode: √(C(n,k)) t^{(n−k)/2} r^{k/2} |n−k⟩⟨n|.
                let mut img = piece.clone();
                let keys: Vec<_> = img.iter().map(|(ket, _)| ket.clone()).collect();
                let mut out = JointState::vacuum(img.num_modes(), img.cutoff());
                out.set_amplitude(&vec![0; img.num_modes()], 0, Complex64::new(0.0, 0.0));
                for ket in keys {
                    let n = ket.occ[mode] as usize;
                    if n < k {
                        continue;
                    }
                    let occ = to_usize(&ket.occ);
                    let amp = img.amplitude(&occ, ket.atoms);
                    let coeff = binomial(n, k).sqrt()
                        * t.powf((n - k) as f64 / 2.0)
                        * r.powf(k as f64 / 2.0);
                    let mut occ2 = occ.clone();
                    occ2[mode] = n - k;
                    let prev = out.amplitude(&occ2, ket.atoms);
                    out.set_amplitude(&occ2, ket.atoms, prev + amp * coeff);
                }
                img = out;
                if img.norm_sqr() >= PIECE_FLOOR * norm_in {
                    next.push(img);
                }
            }
        }
        pieces = next;
    }
    Ok(PureMixture { pieces })
}

/// Normalized projection of `|α⟩|α⟩` onto `S`: `Σ_n ĉ_n |n,n⟩` with
/// `c_n = e^{−|α|²} α^{2n}/n!`.
pub fn projected_coherent_pair(alpha: Complex64, cutoff: usize) -> Result<JointState> {
    let spec = CoherentSpec {
        alpha,
        tail_eps: 1.0,
    };
    let amps = fock::coherent_amplitudes(&spec, cutoff)?;
    let mut psi = JointState::vacuum(2, 2 * cutoff);
    psi.set_amplitude(&[0, 0], 0, Complex64::new(0.0, 0.0));
    for (n, &a) in amps.iter().enumerate() {
        psi.set_amplitude(&[n, n], 0, a * a);
    }
    psi.normalize()?;
    Ok(psi)
}

/// Normalized projection of `|α⟩^{⊗4}` onto `span(|n,n,n,n⟩)`.
pub fn projected_coherent_quad(alpha: Complex64, cutoff: usize) -> Result<JointState> {
    let spec = CoherentSpec {
        alpha,
        tail_eps: 1.0,
    };
    let amps = fock::coherent_amplitudes(&spec, cutoff)?;
    let mut psi = JointState::vacuum(4, 4 * cutoff);
    psi.set_amplitude(&[0, 0, 0, 0], 0, Complex64::new(0.0, 0.0));
    for (n, &a) in amps.iter().enumerate() {
        psi.set_amplitude(&[n, n, n, n], 0, a * a * a * a);
    }
    psi.normalize()?;
    Ok(psi)
}

/// How the first projection onto `S` is taken before the loss is applied.
#[derive(Clone, Debug)]
pub enum FirstProjection {
    /// Exact diagonal (the default experimental narrative).
    Exact,
    /// Finite cascade of `layers+1` units.
    Finite {
        layers: usize,
        schedule: PhaseSchedule,
    },
}

/// Purification figures (all conditioned on the second projection):
/// fidelity to the pre-loss projected state, the conditional success
/// probability, and the purity of the conditioned output.
#[derive(Clone, Copy, Debug)]
pub struct PurifyOutcome {
    pub fidelity: f64,
    pub conditional_probability: f64,
    pub purity: f64,
}

fn cutoff_for(alpha: Complex64, modes: u32) -> usize {
    // Per-mode Fock support of the projected state: |c_n|² decays like
    // (|α|^{2·modes·n})/(n!)^modes; walk until negligible.
    let lam = alpha.norm_sqr();
    let mut log_c = 0.0f64;
    let mut n = 1usize;
    let mut peak = 0.0f64;
    loop {
        log_c += (modes as f64) * (lam.ln() - (n as f64).ln());
        peak = peak.max(log_c);
        if log_c < peak - 45.0 || n > 300 {
            return n;
        }
        n += 1;
    }
}

fn first_projection_state(
    alpha: Complex64,
    first: &FirstProjection,
    cutoff: usize,
) -> Result<JointState> {
    match first {
        FirstProjection::Exact => projected_coherent_pair(alpha, cutoff),
        FirstProjection::Finite { layers, schedule } => {
            let spec = CoherentSpec {
                alpha,
                tail_eps: 1.0,
            };
            let input = JointState::coherent_product(&[spec, spec], 2 * cutoff)?;
            let mut out = filter::project_s(&input, *layers, schedule, 0)?.output;
            out.normalize()?;
            Ok(out)
        }
    }
}

fn apply_second_projection(
    piece: &JointState,
    pairs: &[(usize, usize)],
    second: &PairProjection,
) -> Result<JointState> {
    let mut out = piece.clone();
    for &pair in pairs {
        match second {
            PairProjection::Exact => filter::exact_difference_projection(&mut out, pair, 0),
            PairProjection::Finite { layers, schedule } => {
                filter::apply_cosine_layers(&mut out, pair, &schedule.angles()[..*layers], 0)?;
                filter::unit_transform(&mut out, pair)?;
            }
        }
    }
    Ok(out)
}

fn purify_outcome(
    reference: &JointState,
    mixture: &PureMixture,
    pairs: &[(usize, usize)],
    second: &PairProjection,
) -> Result<PurifyOutcome> {
    if let PairProjection::Finite { layers, schedule } = second {
        schedule
            .angles()
            .get(..*layers)
            .ok_or(Error::ScheduleTooShort {
                available: schedule.len(),
                needed: *layers,
            })?;
    }
    let trace_in = mixture.trace();
    let mut projected = Vec::with_capacity(mixture.pieces.len());
    for piece in &mixture.pieces {
        let p = apply_second_projection(piece, pairs, second)?;
        if p.norm_sqr() >= PIECE_FLOOR * trace_in {
            projected.push(p);
        }
    }
    let out = PureMixture { pieces: projected };
    let trace_out = out.trace();
    if trace_out <= 0.0 {
        return Err(Error::ZeroProbability);
    }
    Ok(PurifyOutcome {
        fidelity: out.expectation(reference)? / trace_out,
        conditional_probability: trace_out / trace_in,
        purity: grouped_purity(&out.pieces, pairs)?,
    })
}

/// Per-pair shell signature of a piece: the pairwise photon totals of every
/// loss-mixture piece lie on one line `t_p = 2n − o_p`, so the differences
/// `t_1 − t_p` and the parity of `t_1` are constant across its support.
/// Pieces with different signatures are exactly orthogonal (pairwise totals
/// are conserved by the projection cascade), which makes the purity double
/// sum sparse.
fn piece_signature(piece: &JointState, pairs: &[(usize, usize)]) -> Option<Vec<i64>> {
    let (first, _) = piece.iter().next()?;
    let totals: Vec<i64> = pairs
        .iter()
        .map(|&(a, b)| first.occ[a] as i64 + first.occ[b] as i64)
        .collect();
    let mut sig: Vec<i64> = totals.iter().map(|t| totals[0] - t).collect();
    sig[0] = totals[0] % 2;
    if cfg!(debug_assertions) {
        for (ket, _) in piece.iter() {
            let t: Vec<i64> = pairs
                .iter()
                .map(|&(a, b)| ket.occ[a] as i64 + ket.occ[b] as i64)
                .collect();
            debug_assert!(t.iter().enumerate().skip(1).all(|(i, ti)| t[0] - ti == sig[i]));
            debug_assert_eq!(t[0] % 2, sig[0]);
        }
    }
    Some(sig)
}

fn grouped_purity(pieces: &[JointState], pairs: &[(usize, usize)]) -> Result<f64> {
    let mut trace = 0.0;
    let mut groups: BTreeMap<Vec<i64>, Vec<usize>> = BTreeMap::new();
    for (idx, piece) in pieces.iter().enumerate() {
        trace += piece.norm_sqr();
        if let Some(sig) = piece_signature(piece, pairs) {
            groups.entry(sig).or_default().push(idx);
        }
    }
    if trace <= 0.0 {
        return Err(Error::ZeroTrace);
    }
    let mut tr2 = 0.0;
    for members in groups.values() {
        for (i, &a) in members.iter().enumerate() {
            tr2 += pieces[a].norm_sqr().powi(2);
            for &b in members.iter().skip(i + 1) {
                tr2 += 2.0 * pieces[a].overlap(&pieces[b])?.norm_sqr();
            }
        }
    }
    Ok(tr2 / (trace * trace))
}

/// Two-mode purification: project `|α⟩|α⟩` onto `S`, lose a fraction `r`
/// from both modes, re-project onto `S`, and report fidelity / conditional
/// probability / purity of the conditioned output.
///
/// With an exact second projection the conditioned output is pure for every
/// `r` (the surviving loss branches are all proportional to the same
/// state); a finite cascade leaks an O(r²) antisymmetric component, so the
/// purity-equals-one property belongs to [`PairProjection::Exact`].
pub fn purify_two_mode(
    alpha: Complex64,
    r: f64,
    second: &PairProjection,
    first: &FirstProjection,
) -> Result<PurifyOutcome> {
    check_reflectivity(r)?;
    let cutoff = cutoff_for(alpha, 2);
    let reference = first_projection_state(alpha, first, cutoff)?;
    let mixture = loss_mixture(&reference, &LossSpec::uniform(r, 2)?)?;
    purify_outcome(&reference, &mixture, &[(0, 1)], second)
}

/// Four-mode purification: project `|α⟩^{⊗4}` onto `span(|n,n,n,n⟩)`, lose
/// a fraction `r` from every mode, then re-project pairs (1,2) and (3,4).
pub fn purify_four_mode(
    alpha: Complex64,
    r: f64,
    second: &PairProjection,
) -> Result<PurifyOutcome> {
    check_reflectivity(r)?;
    let cutoff = cutoff_for(alpha, 4);
    let reference = projected_coherent_quad(alpha, cutoff)?;
    let mixture = loss_mixture(&reference, &LossSpec::uniform(r, 4)?)?;
    purify_outcome(&reference, &mixture, &[(0, 1), (2, 3)], second)
}

/// Probability that a single-photon loss from `mode` slips through a second
/// exact projection onto `S`. The input must lie in `S`; one-photon-loss
/// components satisfy `n−1 ≠ n`, are orthogonal to `S`, and the result is
/// exactly zero. Returns 0 for a vacuum-only input (nothing to lose,
/// detection vacuous).
pub fn single_loss_detection(state: &JointState, mode: usize) -> Result<f64> {
    if state.num_modes() != 2 || state.num_atoms() != 0 {
        return Err(Error::ShapeMismatch(
            format!("{} modes/{} atoms", state.num_modes(), state.num_atoms()),
            "2 modes/0 atoms".into(),
        ));
    }
    for (ket, amp) in state.iter() {
        if ket.occ[0] != ket.occ[1] && amp.norm_sqr() > 0.0 {
            return Err(Error::Config(
                "single_loss_detection input must lie in S".into(),
            ));
        }
    }
    let mut lost = state.clone();
    lost.apply_annihilation(mode)?;
    let n2 = lost.norm_sqr();
    if n2 <= 0.0 {
        return Ok(0.0);
    }
    let mut projected = lost.clone();
    filter::exact_difference_projection(&mut projected, (0, 1), 0);
    Ok(projected.norm_sqr() / n2)
}

/// Probability that the four-mode re-projection (exact, onto
/// `span(|n,n,n,n⟩)`) succeeds although at least one photon was lost: the
/// undetected-loss probability. Scales like `R⁴` for small `R` (a loss must
/// hit all four modes equally to slip through).
pub fn undetected_loss_probability_four_mode(alpha: Complex64, r: f64) -> Result<f64> {
    check_reflectivity(r)?;
    let cutoff = cutoff_for(alpha, 4);
    let reference = projected_coherent_quad(alpha, cutoff)?;
    let mixture = loss_mixture(&reference, &LossSpec::uniform(r, 4)?)?;
    let mut p_undetected = 0.0;
    for piece in &mixture.pieces {
        // Pieces that still pass the full diagonal projection.
        let mut projected = piece.clone();
        let keys: Vec<_> = projected
            .iter()
            .filter(|(k, _)| !k.occ.windows(2).all(|w| w[0] == w[1]))
            .map(|(k, _)| k.clone())
            .collect();
        for ket in keys {
            projected.set_amplitude(&to_usize(&ket.occ), ket.atoms, Complex64::new(0.0, 0.0));
        }
        // The no-loss piece is the intended survivor, not an error.
        let photons_lost = piece_lost_photons(piece, &reference);
        if photons_lost {
            p_undetected += projected.norm_sqr();
        }
    }
    Ok(p_undetected)
}

fn piece_lost_photons(piece: &JointState, reference: &JointState) -> bool {
    let max_total =
        |s: &JointState| s.iter().map(|(k, _)| k.total_photons()).max().unwrap_or(0);
    max_total(piece) < max_total(reference)
}
