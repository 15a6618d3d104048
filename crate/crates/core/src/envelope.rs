//! Symmetric sealing, signatures and certificates.
//!
//! Nonces are a per-process random 32-bit prefix followed by a 64-bit
//! counter, so they never repeat within one process regardless of key.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use ed25519_dalek::{Signer, Verifier};
use rand::rngs::OsRng;
use rand::RngCore;

use crate::abe::{self, AbeCiphertext, AbeError, AttributeKeySet, AuthorityPublicKey, Policy};
use crate::wire::{DecodeError, Reader, Writer};

pub const SEALED_VERSION: u8 = 1;
pub const CERT_VERSION: u8 = 1;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

const TAG_CERT_BODY: u8 = 0x10;
const TAG_SIGNED: u8 = 0x11;
const TAG_HYBRID: u8 = 0x12;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EnvelopeError {
    #[error("integrity failure")]
    Integrity,
    #[error("decode failure: {0}")]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Abe(#[from] AbeError),
    #[error("bad signature")]
    BadSignature,
    #[error("certificate chain invalid: {0}")]
    Chain(String),
}

#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey([u8; 32]);

impl SymmetricKey {
    pub fn from_bytes(b: [u8; 32]) -> Self {
        SymmetricKey(b)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

pub fn gen_symmetric_key() -> SymmetricKey {
    let mut b = [0u8; 32];
    OsRng.fill_bytes(&mut b);
    SymmetricKey(b)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sealed {
    pub nonce: [u8; NONCE_LEN],
    /// Ciphertext followed by the 16-byte tag.
    pub ciphertext: Vec<u8>,
}

impl Sealed {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1 + NONCE_LEN + self.ciphertext.len());
        out.push(SEALED_VERSION);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_version(SEALED_VERSION)?;
        let nonce = r.array("nonce")?;
        if r.remaining() < TAG_LEN {
            return Err(DecodeError::Eof("tag"));
        }
        let ciphertext = r.take(r.remaining(), "ciphertext")?.to_vec();
        Ok(Sealed { nonce, ciphertext })
    }
}

fn next_nonce() -> [u8; NONCE_LEN] {
    static PREFIX: OnceLock<[u8; 4]> = OnceLock::new();
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let prefix = PREFIX.get_or_init(|| {
        let mut p = [0u8; 4];
        OsRng.fill_bytes(&mut p);
        p
    });
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let mut out = [0u8; NONCE_LEN];
    out[..4].copy_from_slice(prefix);
    out[4..].copy_from_slice(&n.to_be_bytes());
    out
}

pub fn seal(key: &SymmetricKey, plaintext: &[u8]) -> Sealed {
    seal_with_aad(key, plaintext, &[])
}

pub fn open(key: &SymmetricKey, sealed: &Sealed) -> Result<Vec<u8>, EnvelopeError> {
    open_with_aad(key, sealed, &[])
}

pub fn seal_with_aad(key: &SymmetricKey, plaintext: &[u8], aad: &[u8]) -> Sealed {
    let cipher = Aes256Gcm::new_from_slice(&key.0).expect("32-byte key");
    let nonce = next_nonce();
    let ciphertext = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad })
        .expect("AES-GCM encryption is infallible for in-range lengths");
    Sealed { nonce, ciphertext }
}

pub fn open_with_aad(key: &SymmetricKey, sealed: &Sealed, aad: &[u8]) -> Result<Vec<u8>, EnvelopeError> {
    let cipher = Aes256Gcm::new_from_slice(&key.0).expect("32-byte key");
    cipher
        .decrypt(
            Nonce::from_slice(&sealed.nonce),
            Payload {
                msg: &sealed.ciphertext,
                aad,
            },
        )
        .map_err(|_| EnvelopeError::Integrity)
}

/// ABE-wraps a symmetric key under `policy`.
pub fn wrap_key(
    mpks: &[AuthorityPublicKey],
    policy: &Policy,
    key: &SymmetricKey,
) -> Result<AbeCiphertext, EnvelopeError> {
    Ok(abe::encrypt(mpks, policy, &key.0)?)
}

pub fn unwrap_key(
    mpks: &[AuthorityPublicKey],
    keyset: &AttributeKeySet,
    ct: &AbeCiphertext,
) -> Result<SymmetricKey, EnvelopeError> {
    let bytes = abe::decrypt(mpks, keyset, ct)?;
    let arr: [u8; 32] = bytes
        .try_into()
        .map_err(|_| DecodeError::Invalid("wrapped key length"))?;
    Ok(SymmetricKey(arr))
}

/// Client payload sealed under a fresh key, with that key ABE-wrapped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HybridEnvelope {
    pub payload: Sealed,
    pub wrapped_key: AbeCiphertext,
}

impl HybridEnvelope {
    pub fn seal(
        mpks: &[AuthorityPublicKey],
        policy: &Policy,
        payload: &[u8],
    ) -> Result<(Self, SymmetricKey), EnvelopeError> {
        let key = gen_symmetric_key();
        let env = HybridEnvelope {
            payload: seal(&key, payload),
            wrapped_key: wrap_key(mpks, policy, &key)?,
        };
        Ok((env, key))
    }

    pub fn open(
        &self,
        mpks: &[AuthorityPublicKey],
        keyset: &AttributeKeySet,
    ) -> Result<(SymmetricKey, Vec<u8>), EnvelopeError> {
        let key = unwrap_key(mpks, keyset, &self.wrapped_key)?;
        let pt = open(&key, &self.payload)?;
        Ok((key, pt))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_HYBRID);
        w.bytes(&self.payload.to_bytes())
            .bytes(&self.wrapped_key.to_bytes());
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("hybrid envelope", TAG_HYBRID)?;
        let payload = Sealed::from_bytes(r.bytes("payload")?)?;
        let wrapped_key = AbeCiphertext::from_bytes(r.bytes("wrapped key")?)?;
        r.finish()?;
        Ok(HybridEnvelope {
            payload,
            wrapped_key,
        })
    }
}

#[derive(Clone)]
pub struct SigningKey(ed25519_dalek::SigningKey);

impl SigningKey {
    pub fn generate() -> Self {
        SigningKey(ed25519_dalek::SigningKey::generate(&mut OsRng))
    }

    pub fn from_bytes(b: &[u8; 32]) -> Self {
        SigningKey(ed25519_dalek::SigningKey::from_bytes(b))
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn verifying_key(&self) -> [u8; 32] {
        self.0.verifying_key().to_bytes()
    }

    pub fn sign(&self, body: &[u8]) -> [u8; 64] {
        self.0.sign(body).to_bytes()
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SigningKey(vk={})", hex_prefix(&self.verifying_key()))
    }
}

fn hex_prefix(b: &[u8]) -> String {
    b.iter().take(6).map(|x| format!("{x:02x}")).collect()
}

pub fn sign(sk: &SigningKey, body: &[u8]) -> [u8; 64] {
    sk.sign(body)
}

/// Never panics; malformed keys or signatures verify as false.
pub fn verify(vk: &[u8], body: &[u8], signature: &[u8]) -> bool {
    let Ok(vk) = <[u8; 32]>::try_from(vk) else {
        return false;
    };
    let Ok(sig) = <[u8; 64]>::try_from(signature) else {
        return false;
    };
    let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&vk) else {
        return false;
    };
    vk.verify(body, &ed25519_dalek::Signature::from_bytes(&sig))
        .is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub identity: String,
    pub verifying_key: [u8; 32],
    pub issuer_id: String,
    pub issuer_signature: [u8; 64],
}

impl Certificate {
    fn signed_body(identity: &str, vk: &[u8; 32], issuer_id: &str) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_CERT_BODY);
        w.u8(CERT_VERSION).str(identity).raw(vk).str(issuer_id);
        w.finish()
    }

    pub fn self_signed(identity: &str, sk: &SigningKey) -> Self {
        issue_cert(sk, identity, identity, &sk.verifying_key())
    }

    pub fn is_signed_by(&self, issuer: &Certificate) -> bool {
        self.issuer_id == issuer.identity
            && verify(
                &issuer.verifying_key,
                &Self::signed_body(&self.identity, &self.verifying_key, &self.issuer_id),
                &self.issuer_signature,
            )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(CERT_VERSION)
            .str(&self.identity)
            .bytes(&self.verifying_key)
            .str(&self.issuer_id)
            .bytes(&self.issuer_signature);
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        let c = Self::read(&mut r)?;
        r.finish()?;
        Ok(c)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_version(CERT_VERSION)?;
        let identity = r.str("identity")?.to_string();
        let verifying_key = r
            .bytes("verifying key")?
            .try_into()
            .map_err(|_| DecodeError::Invalid("verifying key length"))?;
        let issuer_id = r.str("issuer")?.to_string();
        let issuer_signature = r
            .bytes("issuer signature")?
            .try_into()
            .map_err(|_| DecodeError::Invalid("signature length"))?;
        Ok(Certificate {
            identity,
            verifying_key,
            issuer_id,
            issuer_signature,
        })
    }
}

pub fn issue_cert(issuer_sk: &SigningKey, issuer_id: &str, identity: &str, vk: &[u8; 32]) -> Certificate {
    let body = Certificate::signed_body(identity, vk, issuer_id);
    Certificate {
        identity: identity.to_string(),
        verifying_key: *vk,
        issuer_id: issuer_id.to_string(),
        issuer_signature: issuer_sk.sign(&body),
    }
}

/// Validates `leaf` through `intermediates` (closest issuer first) up to
/// `root`, which must be self-signed.
pub fn validate_chain(
    leaf: &Certificate,
    intermediates: &[Certificate],
    root: &Certificate,
) -> Result<(), EnvelopeError> {
    if !root.is_signed_by(root) {
        return Err(EnvelopeError::Chain("root is not self-signed".into()));
    }
    let mut current = leaf;
    for issuer in intermediates.iter().chain(std::iter::once(root)) {
        if !current.is_signed_by(issuer) {
            return Err(EnvelopeError::Chain(format!(
                "{} not signed by {}",
                current.identity, issuer.identity
            )));
        }
        current = issuer;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedMessage {
    pub body: Vec<u8>,
    pub signature: [u8; 64],
    pub signer: Certificate,
}

impl SignedMessage {
    pub fn sign(sk: &SigningKey, signer: Certificate, body: Vec<u8>) -> Self {
        let signature = sk.sign(&body);
        SignedMessage {
            body,
            signature,
            signer,
        }
    }

    pub fn verify_signature(&self) -> bool {
        verify(&self.signer.verifying_key, &self.body, &self.signature)
    }

    /// Signature valid and signer certificate chains to `root`.
    pub fn verify(&self, intermediates: &[Certificate], root: &Certificate) -> Result<(), EnvelopeError> {
        if !self.verify_signature() {
            return Err(EnvelopeError::BadSignature);
        }
        validate_chain(&self.signer, intermediates, root)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(TAG_SIGNED);
        w.bytes(&self.body)
            .bytes(&self.signature)
            .bytes(&self.signer.to_bytes());
        w.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(b);
        r.expect_tag("signed message", TAG_SIGNED)?;
        let body = r.bytes("body")?.to_vec();
        let signature = r
            .bytes("signature")?
            .try_into()
            .map_err(|_| DecodeError::Invalid("signature length"))?;
        let signer = Certificate::from_bytes(r.bytes("signer")?)?;
        r.finish()?;
        Ok(SignedMessage {
            body,
            signature,
            signer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abe::{keygen, setup};
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn symmetric_keys_are_fresh() {
        assert_eq!(gen_symmetric_key().as_bytes().len(), 32);
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            assert!(seen.insert(*gen_symmetric_key().as_bytes()));
        }
    }

    #[test]
    fn nonces_never_repeat_across_threads() {
        let handles: Vec<_> = (0..8)
            .map(|_| std::thread::spawn(|| (0..5000).map(|_| next_nonce()).collect::<Vec<_>>()))
            .collect();
        let mut seen = HashSet::new();
        for h in handles {
            for n in h.join().unwrap() {
                assert!(seen.insert(n));
            }
        }
    }

    #[test]
    fn megabyte_roundtrip_and_wrong_key() {
        let k = gen_symmetric_key();
        let blob: Vec<u8> = (0..1 << 20).map(|i| (i * 31 % 251) as u8).collect();
        let s = seal(&k, &blob);
        let parsed = Sealed::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(open(&k, &parsed).unwrap(), blob);
        assert_eq!(open(&gen_symmetric_key(), &s), Err(EnvelopeError::Integrity));
    }

    proptest! {
        #[test]
        fn any_single_bit_flip_is_rejected(msg in proptest::collection::vec(any::<u8>(), 0..64), bit in any::<usize>()) {
            let k = gen_symmetric_key();
            let mut bytes = seal(&k, &msg).to_bytes();
            let bit = bit % (bytes.len() * 8);
            bytes[bit / 8] ^= 1 << (bit % 8);
            match Sealed::from_bytes(&bytes) {
                Ok(s) => prop_assert_eq!(open(&k, &s), Err(EnvelopeError::Integrity)),
                Err(DecodeError::Version(_)) => {}
                Err(e) => prop_assert!(false, "{e:?}"),
            }
        }
    }

    #[test]
    fn signatures() {
        let sk = SigningKey::generate();
        let sig = sign(&sk, b"body");
        assert!(verify(&sk.verifying_key(), b"body", &sig));
        assert!(!verify(&sk.verifying_key(), b"bodx", &sig));
        assert!(!verify(&SigningKey::generate().verifying_key(), b"body", &sig));
        assert!(!verify(&[1, 2, 3], b"body", &sig));
        assert!(!verify(&sk.verifying_key(), b"body", &sig[..10]));
        assert!(!verify(&[0xff; 32], b"body", &[0xff; 64]));
    }

    #[test]
    fn three_level_chain() {
        let root_sk = SigningKey::generate();
        let root = Certificate::self_signed("root", &root_sk);
        let prov_sk = SigningKey::generate();
        let prov = issue_cert(&root_sk, "root", "provider", &prov_sk.verifying_key());
        let client_sk = SigningKey::generate();
        let client = issue_cert(&prov_sk, "provider", "client-1", &client_sk.verifying_key());

        validate_chain(&client, &[prov.clone()], &root).unwrap();
        assert!(validate_chain(&client, &[], &root).is_err());

        let rogue_sk = SigningKey::generate();
        let rogue = issue_cert(&rogue_sk, "provider", "client-2", &client_sk.verifying_key());
        assert!(validate_chain(&rogue, &[prov.clone()], &root).is_err());

        let msg = SignedMessage::sign(&client_sk, client.clone(), b"req".to_vec());
        let msg = SignedMessage::from_bytes(&msg.to_bytes()).unwrap();
        msg.verify(&[prov.clone()], &root).unwrap();
        let mut forged = msg.clone();
        forged.body = b"reX".to_vec();
        assert_eq!(forged.verify(&[prov.clone()], &root), Err(EnvelopeError::BadSignature));
        assert_eq!(Certificate::from_bytes(&client.to_bytes()).unwrap(), client);
    }

    #[test]
    fn hybrid_chain_end_to_end() {
        let mk = setup(128, &["Aggregation", "Microsoft", "Other"]).unwrap();
        let mpk = [mk.public.clone()];
        let policy = Policy::parse("(Aggregation AND Microsoft)").unwrap();
        let (env, key) = HybridEnvelope::seal(&mpk, &policy, b"client update U").unwrap();
        let env = HybridEnvelope::from_bytes(&env.to_bytes()).unwrap();
        let agg = keygen(&mk.secret, "e", &["Aggregation", "Microsoft"]).unwrap();
        let (k2, u) = env.open(&mpk, &agg).unwrap();
        assert_eq!(k2, key);
        assert_eq!(u, b"client update U");

        let k = gen_symmetric_key();
        let w = wrap_key(&mpk, &policy, &k).unwrap();
        assert_eq!(unwrap_key(&mpk, &agg, &w).unwrap(), k);
        let other = keygen(&mk.secret, "e", &["Other", "Microsoft"]).unwrap();
        assert_eq!(unwrap_key(&mpk, &other, &w), Err(EnvelopeError::Abe(AbeError::AccessDenied)));
    }
}
