//! Secret sharing of a 32-byte key over a policy tree.
//!
//! AND splits additively (XOR), OR duplicates, k-of-m uses bytewise Shamir
//! over GF(2^8) with evaluation points 1..=m. Leaf shares are produced in
//! pre-order, matching [`Policy::leaves`].

use rand::{CryptoRng, RngCore};

use super::policy::Policy;

pub type Share = [u8; 32];

const fn build_tables() -> ([u8; 256], [u8; 512]) {
    // Generator 3 of the AES field (x^8 + x^4 + x^3 + x + 1).
    let mut log = [0u8; 256];
    let mut exp = [0u8; 512];
    let mut x: u16 = 1;
    let mut i = 0;
    while i < 255 {
        exp[i] = x as u8;
        log[x as usize] = i as u8;
        let mut y = x << 1;
        if y & 0x100 != 0 {
            y ^= 0x11b;
        }
        x ^= y;
        i += 1;
    }
    while i < 512 {
        exp[i] = exp[i - 255];
        i += 1;
    }
    (log, exp)
}

const TABLES: ([u8; 256], [u8; 512]) = build_tables();

pub fn gf_mul(a: u8, b: u8) -> u8 {
    if a == 0 || b == 0 {
        return 0;
    }
    let (log, exp) = &TABLES;
    exp[log[a as usize] as usize + log[b as usize] as usize]
}

pub fn gf_inv(a: u8) -> u8 {
    assert!(a != 0, "zero has no inverse");
    let (log, exp) = &TABLES;
    exp[255 - log[a as usize] as usize]
}

/// `m` shares of `secret`, any `k` of which reconstruct it. Share `i` sits
/// at x = i + 1.
pub fn shamir_split<R: RngCore + CryptoRng + ?Sized>(
    secret: &Share,
    k: usize,
    m: usize,
    rng: &mut R,
) -> Vec<Share> {
    assert!(k >= 1 && k <= m && m <= 255);
    let mut coeffs = vec![[0u8; 32]; k - 1];
    for c in coeffs.iter_mut() {
        rng.fill_bytes(c);
    }
    (1..=m as u8)
        .map(|x| {
            let mut out = [0u8; 32];
            for (b, o) in out.iter_mut().enumerate() {
                // Horner from the top coefficient down to the secret.
                let mut acc = 0u8;
                for c in coeffs.iter().rev() {
                    acc = gf_mul(acc, x) ^ c[b];
                }
                *o = gf_mul(acc, x) ^ secret[b];
            }
            out
        })
        .collect()
}

/// Lagrange interpolation at zero from `(x, share)` pairs with distinct x.
pub fn shamir_combine(points: &[(u8, Share)]) -> Share {
    let mut out = [0u8; 32];
    for (j, (xj, yj)) in points.iter().enumerate() {
        let mut basis = 1u8;
        for (i, (xi, _)) in points.iter().enumerate() {
            if i != j {
                basis = gf_mul(basis, gf_mul(*xi, gf_inv(xi ^ xj)));
            }
        }
        for b in 0..32 {
            out[b] ^= gf_mul(basis, yj[b]);
        }
    }
    out
}

fn xor(a: &Share, b: &Share) -> Share {
    let mut out = *a;
    for (o, x) in out.iter_mut().zip(b) {
        *o ^= x;
    }
    out
}

pub fn share_over_policy<R: RngCore + CryptoRng + ?Sized>(
    policy: &Policy,
    secret: &Share,
    rng: &mut R,
) -> Vec<Share> {
    let mut out = Vec::with_capacity(policy.leaf_count());
    share_node(policy, secret, rng, &mut out);
    out
}

fn share_node<R: RngCore + CryptoRng + ?Sized>(
    node: &Policy,
    secret: &Share,
    rng: &mut R,
    out: &mut Vec<Share>,
) {
    match node {
        Policy::Leaf(_) => out.push(*secret),
        Policy::Or(children) => {
            for ch in children {
                share_node(ch, secret, rng, out);
            }
        }
        Policy::And(children) => {
            let mut acc = *secret;
            for (i, ch) in children.iter().enumerate() {
                let part = if i + 1 == children.len() {
                    acc
                } else {
                    let mut r = [0u8; 32];
                    rng.fill_bytes(&mut r);
                    acc = xor(&acc, &r);
                    r
                };
                share_node(ch, &part, rng, out);
            }
        }
        Policy::Threshold { k, children } => {
            let parts = shamir_split(secret, *k, children.len(), rng);
            for (ch, part) in children.iter().zip(&parts) {
                share_node(ch, part, rng, out);
            }
        }
    }
}

/// Rebuilds the root secret from whichever leaf shares are available
/// (indexed in pre-order). `None` when the available set is insufficient.
pub fn recover_from_leaves(policy: &Policy, leaves: &[Option<Share>]) -> Option<Share> {
    let mut idx = 0;
    let r = recover_node(policy, leaves, &mut idx);
    debug_assert_eq!(idx, leaves.len());
    r
}

fn recover_node(node: &Policy, leaves: &[Option<Share>], idx: &mut usize) -> Option<Share> {
    match node {
        Policy::Leaf(_) => {
            let s = leaves.get(*idx).copied().flatten();
            *idx += 1;
            s
        }
        Policy::Or(children) => {
            // Every child must be visited to keep the leaf cursor aligned.
            let mut found = None;
            for ch in children {
                let r = recover_node(ch, leaves, idx);
                if found.is_none() {
                    found = r;
                }
            }
            found
        }
        Policy::And(children) => {
            let mut acc = Some([0u8; 32]);
            for ch in children {
                let r = recover_node(ch, leaves, idx);
                acc = match (acc, r) {
                    (Some(a), Some(b)) => Some(xor(&a, &b)),
                    _ => None,
                };
            }
            acc
        }
        Policy::Threshold { k, children } => {
            let mut points = Vec::with_capacity(*k);
            for (i, ch) in children.iter().enumerate() {
                if let Some(s) = recover_node(ch, leaves, idx) {
                    if points.len() < *k {
                        points.push((i as u8 + 1, s));
                    }
                }
            }
            (points.len() == *k).then(|| shamir_combine(&points))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    /// Carry-less multiply then reduce, the textbook definition.
    fn slow_mul(mut a: u8, mut b: u8) -> u8 {
        let mut p = 0u8;
        while b != 0 {
            if b & 1 == 1 {
                p ^= a;
            }
            let hi = a & 0x80;
            a <<= 1;
            if hi != 0 {
                a ^= 0x1b;
            }
            b >>= 1;
        }
        p
    }

    #[test]
    fn table_multiplication_matches_definition() {
        for a in 0..=255u8 {
            for b in 0..=255u8 {
                assert_eq!(gf_mul(a, b), slow_mul(a, b));
            }
            if a != 0 {
                assert_eq!(gf_mul(a, gf_inv(a)), 1);
            }
        }
    }

    proptest! {
        #[test]
        fn any_k_shares_reconstruct(seed in any::<u64>(), m in 1usize..8, kk in 0usize..8, pick in any::<u64>()) {
            let k = kk % m + 1;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut secret = [0u8; 32];
            rand::RngCore::fill_bytes(&mut rng, &mut secret);
            let shares = shamir_split(&secret, k, m, &mut rng);
            // Choose k distinct indices deterministically from `pick`.
            let mut idx: Vec<usize> = (0..m).collect();
            let mut p = pick;
            for i in (1..m).rev() {
                idx.swap(i, (p % (i as u64 + 1)) as usize);
                p /= i as u64 + 1;
            }
            let pts: Vec<(u8, Share)> = idx[..k].iter().map(|&i| (i as u8 + 1, shares[i])).collect();
            prop_assert_eq!(shamir_combine(&pts), secret);
            if k > 1 {
                // k-1 shares interpolate to something else (w.h.p.).
                prop_assert_ne!(shamir_combine(&pts[..k - 1]), secret);
            }
        }
    }

    #[test]
    fn tree_sharing_recovers_only_when_satisfied() {
        let p = Policy::parse("2-of-{a, (b AND c), d OR e}").unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let secret = [0x5a; 32];
        let shares = share_over_policy(&p, &secret, &mut rng);
        let names = p.leaves();
        assert_eq!(shares.len(), names.len());
        for mask in 0u32..(1 << names.len()) {
            let avail: Vec<Option<Share>> = (0..names.len())
                .map(|i| (mask >> i & 1 == 1).then_some(shares[i]))
                .collect();
            let sat = p.satisfied_by(|n| {
                names.iter().enumerate().any(|(i, m)| *m == n && mask >> i & 1 == 1)
            });
            assert_eq!(recover_from_leaves(&p, &avail) == Some(secret), sat, "mask {mask:b}");
        }
    }
}
