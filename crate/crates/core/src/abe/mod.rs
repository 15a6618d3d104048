//! Multi-authority attribute-based encryption over policy trees.
//!
//! A fresh 32-byte content key is secret-shared over the policy tree and each
//! leaf share is encapsulated to that attribute's X25519 public key
//! (ephemeral DH, HKDF-SHA256, AES-256-GCM). The payload itself is sealed
//! under the content key with the canonical policy bytes as associated data.
//!
//! Several authorities may be combined in one policy. Leaf names are looked
//! up across all supplied authorities and must resolve to exactly one of
//! them.

pub mod policy;
pub mod sharing;

use std::fmt;

use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use sha2::Sha256;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::envelope::{self, Sealed, SymmetricKey};
use crate::wire::{DecodeError, Reader, Writer};

pub use policy::{parse_policy, policy_satisfies, Policy, PolicyError};

pub const FORMAT_VERSION: u8 = 1;
pub const MAX_PAYLOAD: usize = 1024;
/// X25519 offers about 128-bit security; larger requests are refused.
pub const MAX_SECURITY_BITS: u32 = 128;

const TAG_PUBLIC: u8 = 0x41;
const TAG_SECRET: u8 = 0x42;
const TAG_KEYSET: u8 = 0x43;
const TAG_CIPHERTEXT: u8 = 0x44;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AbeError {
    #[error("empty attribute set")]
    EmptyAttributeSet,
    #[error("duplicate attribute {0}")]
    DuplicateAttribute(String),
    #[error("unsupported security parameter {0} bits")]
    UnsupportedSecurity(u32),
    #[error("unknown attribute {0}")]
    UnknownAttribute(String),
    #[error("attribute {0} is offered by more than one authority")]
    AmbiguousAttribute(String),
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    PayloadTooLarge(usize),
    #[error("empty cluster id")]
    EmptyClusterId,
    #[error("invalid policy: {0}")]
    Policy(#[from] PolicyError),
    #[error("access denied")]
    AccessDenied,
    #[error("decode failure: {0}")]
    Decode(#[from] DecodeError),
    #[error("cannot merge key sets of clusters {0} and {1}")]
    ClusterMismatch(String, String),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AuthorityId(pub [u8; 16]);

impl AuthorityId {
    pub fn random() -> Self {
        let mut b = [0u8; 16];
        OsRng.fill_bytes(&mut b);
        AuthorityId(b)
    }
}

impl fmt::Debug for AuthorityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AuthorityId({self})")
    }
}

impl fmt::Display for AuthorityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

/// One authority's public parameters: attribute names with their public keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthorityPublicKey {
    pub authority: AuthorityId,
    pub security_bits: u32,
    pub attributes: Vec<(String, [u8; 32])>,
}

#[derive(Clone)]
pub struct AuthoritySecretKey {
    pub authority: AuthorityId,
    attributes: Vec<(String, StaticSecret)>,
}

impl fmt::Debug for AuthoritySecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuthoritySecretKey")
            .field("authority", &self.authority)
            .field("attributes", &self.names())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct MasterKeyPair {
    pub public: AuthorityPublicKey,
    pub secret: AuthoritySecretKey,
}

#[derive(Clone)]
pub struct AttributeKey {
    pub authority: AuthorityId,
    pub name: String,
    secret: StaticSecret,
}

impl fmt::Debug for AttributeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AttributeKey({}/{})", self.authority, self.name)
    }
}

/// Secret keys granted to one cluster.
#[derive(Debug, Clone)]
pub struct AttributeKeySet {
    pub cluster_id: String,
    pub keys: Vec<AttributeKey>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafCapsule {
    pub authority: AuthorityId,
    pub attribute: String,
    pub ephemeral: [u8; 32],
    pub wrapped: Sealed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbeCiphertext {
    pub policy: Policy,
    pub capsules: Vec<LeafCapsule>,
    pub sealed_payload: Sealed,
}

pub fn setup(security_bits: u32, attribute_names: &[&str]) -> Result<MasterKeyPair, AbeError> {
    if security_bits == 0 || security_bits > MAX_SECURITY_BITS {
        return Err(AbeError::UnsupportedSecurity(security_bits));
    }
    if attribute_names.is_empty() {
        return Err(AbeError::EmptyAttributeSet);
    }
    let authority = AuthorityId::random();
    let mut public = Vec::with_capacity(attribute_names.len());
    let mut secret = Vec::with_capacity(attribute_names.len());
    for (i, name) in attribute_names.iter().enumerate() {
        Policy::leaf(*name).validate()?;
        if attribute_names[..i].contains(name) {
            return Err(AbeError::DuplicateAttribute(name.to_string()));
        }
        let sk = StaticSecret::random_from_rng(OsRng);
        public.push((name.to_string(), PublicKey::from(&sk).to_bytes()));
        secret.push((name.to_string(), sk));
    }
    Ok(MasterKeyPair {
        public: AuthorityPublicKey {
            authority,
            security_bits,
            attributes: public,
        },
        secret: AuthoritySecretKey {
            authority,
            attributes: secret,
        },
    })
}

pub fn keygen(
    msk: &AuthoritySecretKey,
    cluster_id: &str,
    granted: &[&str],
) -> Result<AttributeKeySet, AbeError> {
    if cluster_id.is_empty() {
        return Err(AbeError::EmptyClusterId);
    }
    let mut keys = Vec::with_capacity(granted.len());
    for (i, name) in granted.iter().enumerate() {
        if granted[..i].contains(name) {
            return Err(AbeError::DuplicateAttribute(name.to_string()));
        }
        let (_, sk) = msk
            .attributes
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| AbeError::UnknownAttribute(name.to_string()))?;
        keys.push(AttributeKey {
            authority: msk.authority,
            name: name.to_string(),
            secret: sk.clone(),
        });
    }
    Ok(AttributeKeySet {
        cluster_id: cluster_id.to_string(),
        keys,
    })
}

fn resolve<'a>(
    mpks: &'a [AuthorityPublicKey],
    name: &str,
) -> Result<(&'a AuthorityPublicKey, [u8; 32]), AbeError> {
    let mut hit = None;
    for apk in mpks {
        if let Some((_, pk)) = apk.attributes.iter().find(|(n, _)| n == name) {
            if hit.is_some() {
                return Err(AbeError::AmbiguousAttribute(name.to_string()));
            }
            hit = Some((apk, *pk));
        }
    }
    hit.ok_or_else(|| AbeError::UnknownAttribute(name.to_string()))
}

fn leaf_key(
    shared: &[u8; 32],
    index: usize,
    authority: &AuthorityId,
    name: &str,
    ephemeral: &[u8; 32],
    recipient: &[u8; 32],
) -> SymmetricKey {
    let mut info = Writer::with_tag(TAG_CIPHERTEXT);
    info.u32(index as u32)
        .raw(&authority.0)
        .str(name)
        .raw(ephemeral)
        .raw(recipient);
    let hk = Hkdf::<Sha256>::new(Some(b"latteo-abe-leaf-v1"), shared);
    let mut okm = [0u8; 32];
    hk.expand(info.as_slice(), &mut okm)
        .expect("32 bytes is a valid HKDF-SHA256 length");
    SymmetricKey::from_bytes(okm)
}

pub fn encrypt(
    mpks: &[AuthorityPublicKey],
    policy: &Policy,
    payload: &[u8],
) -> Result<AbeCiphertext, AbeError> {
    policy.validate()?;
    if payload.len() > MAX_PAYLOAD {
        return Err(AbeError::PayloadTooLarge(payload.len()));
    }
    let recipients = policy
        .leaves()
        .into_iter()
        .map(|name| resolve(mpks, name).map(|(apk, pk)| (apk.authority, name, pk)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rng = OsRng;
    let mut content_key = [0u8; 32];
    rng.fill_bytes(&mut content_key);
    let shares = sharing::share_over_policy(policy, &content_key, &mut rng);

    let capsules = recipients
        .iter()
        .zip(&shares)
        .enumerate()
        .map(|(i, ((authority, name, pk), share))| {
            let eph = StaticSecret::random_from_rng(OsRng);
            let eph_pub = PublicKey::from(&eph).to_bytes();
            let shared = eph.diffie_hellman(&PublicKey::from(*pk)).to_bytes();
            let k = leaf_key(&shared, i, authority, name, &eph_pub, pk);
            LeafCapsule {
                authority: *authority,
                attribute: name.to_string(),
                ephemeral: eph_pub,
                wrapped: envelope::seal_with_aad(&k, share, &[]),
            }
        })
        .collect();

    let sealed_payload = envelope::seal_with_aad(
        &SymmetricKey::from_bytes(content_key),
        payload,
        &policy.to_bytes(),
    );
    Ok(AbeCiphertext {
        policy: policy.clone(),
        capsules,
        sealed_payload,
    })
}

/// Payload iff the key set's attributes satisfy the carried policy.
///
/// A capsule whose key fails to open it counts as an unavailable attribute.
pub fn decrypt(
    mpks: &[AuthorityPublicKey],
    keyset: &AttributeKeySet,
    ct: &AbeCiphertext,
) -> Result<Vec<u8>, AbeError> {
    let leaves = ct.policy.leaves();
    if leaves.len() != ct.capsules.len() {
        return Err(DecodeError::Invalid("capsule count").into());
    }
    let mut shares = Vec::with_capacity(leaves.len());
    for (i, (leaf, cap)) in leaves.iter().zip(&ct.capsules).enumerate() {
        if cap.attribute != *leaf {
            return Err(DecodeError::Invalid("capsule attribute").into());
        }
        shares.push(open_capsule(mpks, keyset, i, cap));
    }
    let content_key =
        sharing::recover_from_leaves(&ct.policy, &shares).ok_or(AbeError::AccessDenied)?;
    envelope::open_with_aad(
        &SymmetricKey::from_bytes(content_key),
        &ct.sealed_payload,
        &ct.policy.to_bytes(),
    )
    .map_err(|_| AbeError::Decode(DecodeError::Invalid("payload authentication")))
}

fn open_capsule(
    mpks: &[AuthorityPublicKey],
    keyset: &AttributeKeySet,
    index: usize,
    cap: &LeafCapsule,
) -> Option<[u8; 32]> {
    let key = keyset
        .keys
        .iter()
        .find(|k| k.authority == cap.authority && k.name == cap.attribute)?;
    let apk = mpks.iter().find(|a| a.authority == cap.authority)?;
    let (_, recipient) = apk.attributes.iter().find(|(n, _)| *n == cap.attribute)?;
    let shared = key
        .secret
        .diffie_hellman(&PublicKey::from(cap.ephemeral))
        .to_bytes();
    let k = leaf_key(&shared, index, &cap.authority, &cap.attribute, &cap.ephemeral, recipient);
    let share = envelope::open_with_aad(&k, &cap.wrapped, &[]).ok()?;
    share.try_into().ok()
}

impl AuthorityPublicKey {
    pub fn names(&self) -> Vec<&str> {
        self.attributes.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(FORMAT_VERSION);
        w.u8(TAG_PUBLIC)
            .raw(&self.authority.0)
            .u32(self.security_bits)
            .u32(self.attributes.len() as u32);
        for (n, pk) in &self.attributes {
            w.str(n).raw(pk);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let v = Self::read(&mut r)?;
        r.finish()?;
        Ok(v)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_version(FORMAT_VERSION)?;
        r.expect_tag("authority public key", TAG_PUBLIC)?;
        let authority = AuthorityId(r.array("authority")?);
        let security_bits = r.u32("security")?;
        let n = r.u32("count")? as usize;
        let mut attributes = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.str("attribute")?.to_string();
            if attributes.iter().any(|(x, _): &(String, _)| *x == name) {
                return Err(DecodeError::Invalid("duplicate attribute"));
            }
            attributes.push((name, r.array("attribute key")?));
        }
        Ok(AuthorityPublicKey {
            authority,
            security_bits,
            attributes,
        })
    }
}

impl AuthoritySecretKey {
    pub fn names(&self) -> Vec<&str> {
        self.attributes.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(FORMAT_VERSION);
        w.u8(TAG_SECRET)
            .raw(&self.authority.0)
            .u32(self.attributes.len() as u32);
        for (n, sk) in &self.attributes {
            w.str(n).raw(&sk.to_bytes());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        r.expect_version(FORMAT_VERSION)?;
        r.expect_tag("authority secret key", TAG_SECRET)?;
        let authority = AuthorityId(r.array("authority")?);
        let n = r.u32("count")? as usize;
        let mut attributes = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.str("attribute")?.to_string();
            let sk: [u8; 32] = r.array("attribute key")?;
            attributes.push((name, StaticSecret::from(sk)));
        }
        r.finish()?;
        Ok(AuthoritySecretKey {
            authority,
            attributes,
        })
    }

    /// Public half, for reloading a persisted authority.
    pub fn public_key(&self, security_bits: u32) -> AuthorityPublicKey {
        AuthorityPublicKey {
            authority: self.authority,
            security_bits,
            attributes: self
                .attributes
                .iter()
                .map(|(n, sk)| (n.clone(), PublicKey::from(sk).to_bytes()))
                .collect(),
        }
    }
}

impl AttributeKey {
    /// Raw secret scalar; used by leak audits.
    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }
}

impl AttributeKeySet {
    pub fn names(&self) -> Vec<&str> {
        self.keys.iter().map(|k| k.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Combines grants from several authorities for the same cluster.
    pub fn merge(mut self, other: AttributeKeySet) -> Result<Self, AbeError> {
        if self.cluster_id != other.cluster_id {
            return Err(AbeError::ClusterMismatch(self.cluster_id, other.cluster_id));
        }
        for k in other.keys {
            if !self
                .keys
                .iter()
                .any(|x| x.authority == k.authority && x.name == k.name)
            {
                self.keys.push(k);
            }
        }
        Ok(self)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(FORMAT_VERSION);
        w.u8(TAG_KEYSET)
            .str(&self.cluster_id)
            .u32(self.keys.len() as u32);
        for k in &self.keys {
            w.raw(&k.authority.0).str(&k.name).raw(&k.secret.to_bytes());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        r.expect_version(FORMAT_VERSION)?;
        r.expect_tag("attribute key set", TAG_KEYSET)?;
        let cluster_id = r.str("cluster id")?.to_string();
        if cluster_id.is_empty() {
            return Err(DecodeError::Invalid("cluster id"));
        }
        let n = r.u32("count")? as usize;
        let mut keys = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let authority = AuthorityId(r.array("authority")?);
            let name = r.str("attribute")?.to_string();
            let sk: [u8; 32] = r.array("attribute key")?;
            keys.push(AttributeKey {
                authority,
                name,
                secret: StaticSecret::from(sk),
            });
        }
        r.finish()?;
        Ok(AttributeKeySet { cluster_id, keys })
    }
}

impl AbeCiphertext {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_tag(FORMAT_VERSION);
        w.u8(TAG_CIPHERTEXT)
            .bytes(&self.policy.to_bytes())
            .u32(self.capsules.len() as u32);
        for c in &self.capsules {
            w.raw(&c.authority.0)
                .str(&c.attribute)
                .raw(&c.ephemeral)
                .bytes(&c.wrapped.to_bytes());
        }
        w.bytes(&self.sealed_payload.to_bytes());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        r.expect_version(FORMAT_VERSION)?;
        r.expect_tag("abe ciphertext", TAG_CIPHERTEXT)?;
        let policy = Policy::from_bytes(r.bytes("policy")?)?;
        let n = r.u32("capsule count")? as usize;
        if n != policy.leaf_count() {
            return Err(DecodeError::Invalid("capsule count"));
        }
        let mut capsules = Vec::with_capacity(n);
        for _ in 0..n {
            capsules.push(LeafCapsule {
                authority: AuthorityId(r.array("authority")?),
                attribute: r.str("attribute")?.to_string(),
                ephemeral: r.array("ephemeral key")?,
                wrapped: Sealed::from_bytes(r.bytes("capsule")?)?,
            });
        }
        let sealed_payload = Sealed::from_bytes(r.bytes("payload")?)?;
        r.finish()?;
        Ok(AbeCiphertext {
            policy,
            capsules,
            sealed_payload,
        })
    }
}
