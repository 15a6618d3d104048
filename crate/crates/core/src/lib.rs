//! Protocol core: attribute-based encryption, sealing and signatures, the
//! simulated enclave platform, onboarding and the aggregation service.

pub mod abe;
pub mod agg;
pub mod deploy;
pub mod enclave;
pub mod envelope;
pub mod mesh;
pub mod oracle;
pub mod wire;
