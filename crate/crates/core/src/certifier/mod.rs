//! Global-optimality certificates and the rank-escalating staircase driver.

mod certificate;
mod eigen;
mod staircase;

pub use certificate::{
    build_certificate, certify, multipliers_from_product, recover_multipliers, saddle_escape, Certificate,
    CertificateResult, CertifierError, EscapeResult,
};
pub use eigen::{min_eigenpair, EigenError, EigenPair, LanczosConfig, SymmetricOperator};
pub use staircase::{riemannian_staircase, staircase_with, Eta, RankRecord, StaircaseConfig, StaircaseResult};
