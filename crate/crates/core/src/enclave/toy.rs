//! Small enclave programs for exercising the platform.
//!
//! - `ping`: answers `pong`.
//! - `counter`: returns how many times it has been resumed (u64 BE).
//! - `probe`: produces reports and quotes over caller-chosen data.
//! - `vault`: seals and unseals blobs, keeps a generated secret.
//! - `loader`: `exec`s whatever image it is fed, under manifest `loaded`.

use sha2::{Digest, Sha256};

use super::{program_image, EnclaveCtx, EnclaveError, EnclaveProgram, ProgramRegistry, Report};

pub fn image(name: &str) -> Vec<u8> {
    program_image(name, format!("toy program {name} v1").as_bytes())
}

pub fn registry() -> ProgramRegistry {
    let mut r = ProgramRegistry::new();
    r.register("ping", |_| Ok(Box::new(Ping)))
        .register("counter", |_| Ok(Box::new(Counter(0))))
        .register("probe", |_| Ok(Box::new(Probe)))
        .register("vault", |_| Ok(Box::new(Vault(None))))
        .register("loader", |_| Ok(Box::new(Loader)));
    r
}

struct Ping;

impl EnclaveProgram for Ping {
    fn step(&mut self, _: &mut EnclaveCtx<'_>, input: &[u8]) -> Vec<u8> {
        if input == b"ping" {
            b"pong".to_vec()
        } else {
            Vec::new()
        }
    }
}

struct Counter(u64);

impl EnclaveProgram for Counter {
    fn step(&mut self, _: &mut EnclaveCtx<'_>, _: &[u8]) -> Vec<u8> {
        self.0 += 1;
        self.0.to_be_bytes().to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProbeCmd {
    Report { nonce: [u8; 32], data: Vec<u8> },
    Quote { nonce: [u8; 32], data: Vec<u8> },
    CheckLocal(Vec<u8>),
}

impl ProbeCmd {
    pub fn encode(&self) -> Vec<u8> {
        let (tag, head, tail): (u8, &[u8], &[u8]) = match self {
            ProbeCmd::Report { nonce, data } => (0, nonce, data),
            ProbeCmd::Quote { nonce, data } => (1, nonce, data),
            ProbeCmd::CheckLocal(r) => (2, &[], r),
        };
        let mut out = vec![tag];
        out.extend_from_slice(head);
        out.extend_from_slice(tail);
        out
    }
}

struct Probe;

impl EnclaveProgram for Probe {
    fn step(&mut self, ctx: &mut EnclaveCtx<'_>, input: &[u8]) -> Vec<u8> {
        match input.split_first() {
            Some((0 | 1, rest)) if rest.len() >= 32 => {
                let nonce: [u8; 32] = rest[..32].try_into().unwrap();
                let report = ctx.report(&rest[32..], nonce);
                if input[0] == 0 {
                    report.to_bytes()
                } else {
                    ctx.quote(&report).map(|q| q.to_bytes()).unwrap_or_default()
                }
            }
            Some((2, rest)) => match Report::from_bytes(rest) {
                Ok(r) => vec![ctx.verify_local_report(&r) as u8],
                Err(_) => vec![0],
            },
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VaultCmd {
    Seal(Vec<u8>),
    Unseal(Vec<u8>),
    Generate,
    Digest,
}

impl VaultCmd {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            VaultCmd::Seal(b) => [&[0][..], b].concat(),
            VaultCmd::Unseal(b) => [&[1][..], b].concat(),
            VaultCmd::Generate => vec![2],
            VaultCmd::Digest => vec![3],
        }
    }
}

struct Vault(Option<[u8; 32]>);

impl EnclaveProgram for Vault {
    /// Unseal answers `[1, sha256(blob)..]` or `[0, code]` with code 1 for
    /// identity mismatch and 2 for anything else.
    fn step(&mut self, ctx: &mut EnclaveCtx<'_>, input: &[u8]) -> Vec<u8> {
        match input.split_first() {
            Some((0, blob)) => ctx.seal_data(blob),
            Some((1, sealed)) => match ctx.unseal_data(sealed) {
                Ok(b) => [&[1][..], &Sha256::digest(&b)].concat(),
                Err(EnclaveError::SealIdentityMismatch) => vec![0, 1],
                Err(_) => vec![0, 2],
            },
            Some((2, _)) => {
                let s: [u8; 32] = ctx.random_bytes();
                ctx.log(format!("secret {}", hex::encode(s)));
                self.0 = Some(s);
                Vec::new()
            }
            Some((3, _)) => self.0.map(|s| Sha256::digest(s).to_vec()).unwrap_or_default(),
            _ => Vec::new(),
        }
    }
}

struct Loader;

impl EnclaveProgram for Loader {
    fn step(&mut self, ctx: &mut EnclaveCtx<'_>, input: &[u8]) -> Vec<u8> {
        ctx.exec(input.to_vec(), b"loaded".to_vec(), Vec::new());
        Vec::new()
    }
}
