//! Dataset ingestion and evaluation: g2o, ground-truth sidecars, synthetic
//! worlds, outlier injection and trajectory error.

pub mod ate;
pub mod g2o;
pub mod inject;
pub mod sidecar;
pub mod synthetic;

pub use ate::{procrustes, rmse_ate, AteError, AteResult};
pub use g2o::{
    edge_line, extract_precisions, parse_document, parse_g2o, serialize_g2o, serialize_with_estimate, G2oDocument, G2oError,
    G2oErrorKind, Record, SerializeError,
};
pub use inject::{inject_outliers, outlier_count, precision_recall, InjectError, InjectedEdge, InjectionReport};
pub use sidecar::{parse_ground_truth, write_ground_truth, SidecarError};
pub use synthetic::{generate_synthetic, SyntheticError, SyntheticSpec, World};
