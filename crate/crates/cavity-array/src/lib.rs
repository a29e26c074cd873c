//! Simulation of a cavity-array photon-number filter and its working modes.
//!
//! The device under study is an array of high-finesse optical cavities, 50:50
//! beam splitters, and phase shifters. A single two-level atom in each cavity
//! flips the sign of the reflected field once per photon when the atom sits in
//! its coupled ground state, which turns atomic measurements into conditional
//! photon-parity projections. Chaining such parity units with suitable phase
//! schedules yields, depending on the working mode:
//!
//! * a conditional projection of two-mode (or `M`-mode) input light onto the
//!   photon-number-correlated subspace spanned by `|n⟩|n⟩` ([`filter`]),
//! * a number-resolved photon counter built from divisibility tests, in both
//!   destructive and quantum-non-demolition variants ([`counter`]),
//! * a loss detector / purifier for photon-number-correlated states
//!   ([`loss`]),
//! * and a non-ideal model of the cavity response at finite cooperativity and
//!   finite pulse length ([`cavity`]).
//!
//! Everything is validated against the exact truncated-Fock-space engine in
//! [`fock`], which simulates the full joint state of the photonic modes and
//! the atoms gate by gate.
//!
//! The crate's primary interface is the `examples/` directory (one runnable
//! example per capability); a thin `cavity-array` binary reproduces the
//! standard curve and table experiments as CSV with deterministic seeds, see
//! [`repro`]. The [`verify`] module bundles the quantitative acceptance
//! checks behind `cavity-array --experiment verify`.

pub mod cavity;
pub mod counter;
pub mod filter;
pub mod fock;
pub mod loss;
pub mod repro;
pub mod verify;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("total-photon cutoff {requested} too small: coherent tail mass {tail:.3e} >= {eps:.3e}, need at least {required}")]
    CutoffTooSmall {
        requested: usize,
        required: usize,
        tail: f64,
        eps: f64,
    },
    #[error("mode index {index} out of range for {num_modes} modes")]
    ModeOutOfRange { index: usize, num_modes: usize },
    #[error("atom index {index} out of range for {num_atoms} atoms")]
    AtomOutOfRange { index: usize, num_atoms: usize },
    #[error("beam splitter needs two distinct modes, got mode {0} twice")]
    IdenticalModes(usize),
    #[error("register shapes differ: {0} vs {1}")]
    ShapeMismatch(String, String),
    #[error("conditional output has zero probability")]
    ZeroProbability,
    #[error("phase schedule provides {available} angles, need {needed}")]
    ScheduleTooShort { available: usize, needed: usize },
    #[error("reflectivity {0} outside [0, 1]")]
    InvalidReflectivity(f64),
    #[error("multimode projection needs an even mode count >= 2, got {0}")]
    BadModeCount(usize),
    #[error("divisor must be >= 2, got {0}")]
    BadDivisor(u64),
    #[error("verdicts are inconsistent with every photon number in 0..={0}; photon loss or test failure")]
    InconsistentVerdicts(u64),
    #[error("scalar cavity response needs kappa*T >= {min}, got {got}; use the sampled-spectrum path")]
    NarrowbandInvalid { got: f64, min: f64 },
    #[error("density operator has vanishing trace")]
    ZeroTrace,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
