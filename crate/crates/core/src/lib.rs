//! Evidential multi-phase segmentation: per-phase experts emit Dirichlet
//! evidence, opinions are fused pixel-wise with the reduced Dempster rule,
//! and the whole stack is trained end to end on synthetic phantoms.

pub mod autodiff;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod opinion;
pub mod phantom;
pub mod tensor_io;

pub use error::{Error, Result};
pub use opinion::{
    alpha_to_opinion, combine, combine_many, conflict, evidence_to_alpha, expected_probability,
    fused_prediction, opinion_to_alpha, CategorySet, DirichletParams, EvidenceMap, Opinion,
    OpinionGrid,
};
