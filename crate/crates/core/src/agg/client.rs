//! Client side of an aggregation exchange.

use crate::abe::{AuthorityPublicKey, Policy};
use crate::envelope::{self, Certificate, HybridEnvelope, Sealed, SignedMessage, SigningKey, SymmetricKey};
use crate::mesh::Registration;

use super::{AggError, AggResponse, ClientPayload};

/// A registered client: its signing key, certificate and the public
/// parameters from registration.
pub struct Client {
    pub identity: String,
    signing_key: SigningKey,
    pub cert: Certificate,
    pub mpks: Vec<AuthorityPublicKey>,
    pub policy: Policy,
    pub model_dim: usize,
    pub client_id: Option<u64>,
    pub weights: Option<Vec<f64>>,
}

/// State kept while a request is outstanding.
pub struct PendingRequest {
    key: SymmetricKey,
    dim: usize,
}

impl PendingRequest {
    /// The fresh key this request's response must be sealed under.
    pub fn key(&self) -> &SymmetricKey {
        &self.key
    }
}

impl Client {
    /// Checks the registration against the provider key.
    pub fn enroll(signing_key: SigningKey, reg: &Registration, provider_vk: &[u8; 32]) -> Result<Self, AggError> {
        let t = reg.open(provider_vk).map_err(|_| AggError::Registration)?;
        if reg.cert.verifying_key != signing_key.verifying_key() || reg.cert.identity != t.identity {
            return Err(AggError::Registration);
        }
        Ok(Client {
            identity: t.identity,
            signing_key,
            cert: reg.cert.clone(),
            mpks: t.mpks,
            policy: t.policy,
            model_dim: t.model_dim as usize,
            client_id: None,
            weights: None,
        })
    }

    /// Without an update this is a weights request; with `(pre, trained)` an
    /// aggregation request. Each call draws a fresh request key.
    pub fn build_request(&self, update: Option<(&[f64], &[f64])>) -> Result<(SignedMessage, PendingRequest), AggError> {
        let payload = match update {
            None => ClientPayload::WeightsRequest,
            Some((pre, trained)) => ClientPayload::Aggregation {
                pre: pre.to_vec(),
                trained: trained.to_vec(),
            },
        };
        let (env, key) = HybridEnvelope::seal(&self.mpks, &self.policy, &payload.to_bytes())?;
        let msg = SignedMessage::sign(&self.signing_key, self.cert.clone(), env.to_bytes());
        Ok((
            msg,
            PendingRequest {
                key,
                dim: self.model_dim,
            },
        ))
    }

    /// Records the id and weights carried by an opened response.
    pub fn absorb(&mut self, resp: &AggResponse) {
        self.client_id = Some(resp.client_id);
        self.weights = Some(resp.weights.clone());
    }
}

pub fn open_response(pending: &PendingRequest, c3: &[u8]) -> Result<AggResponse, AggError> {
    let sealed = Sealed::from_bytes(c3)?;
    let resp = AggResponse::from_bytes(&envelope::open(&pending.key, &sealed)?)?;
    if resp.weights.len() != pending.dim {
        return Err(AggError::DimensionMismatch {
            expected: pending.dim,
            got: resp.weights.len(),
        });
    }
    Ok(resp)
}

/// True iff the response opens under this request's key and carries a
/// model of the registered dimension.
pub fn implicit_attest(pending: &PendingRequest, c3: &[u8]) -> bool {
    open_response(pending, c3).is_ok()
}
