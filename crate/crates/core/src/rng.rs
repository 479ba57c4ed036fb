//! Counter-based Gaussian generator.
//!
//! Philox4x32-10 maps a 128-bit counter and a 64-bit key to 128 random bits
//! with no internal state, so any draw can be produced independently of every
//! other draw. The Brownian ensemble keys it on the seed and encodes
//! `(path, step, component pair)` in the counter.

const M0: u32 = 0xD251_1F53;
const M1: u32 = 0xCD9E_8D57;
const W0: u32 = 0x9E37_79B9;
const W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

/// One Philox4x32 block with 10 rounds.
pub fn philox4x32(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(W0);
            k[1] = k[1].wrapping_add(W1);
        }
        let (hi0, lo0) = mulhilo(M0, c[0]);
        let (hi1, lo1) = mulhilo(M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// Uniform in the open interval (0, 1) from 64 random bits (53 used).
#[inline]
fn open_unit(hi: u32, lo: u32) -> f64 {
    let bits = (((hi as u64) << 32) | lo as u64) >> 11;
    (bits as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Two independent standard normals for one counter value (Box–Muller).
pub fn normal_pair(key: u64, counter: [u32; 4]) -> [f64; 2] {
    let r = philox4x32(counter, [key as u32, (key >> 32) as u32]);
    let u1 = open_unit(r[0], r[1]);
    let u2 = open_unit(r[2], r[3]);
    let radius = libm::sqrt(-2.0 * libm::log(u1));
    let angle = 2.0 * core::f64::consts::PI * u2;
    [radius * libm::cos(angle), radius * libm::sin(angle)]
}

/// Two stateless uniform draws on (0, 1).
pub fn uniform_pair(key: u64, counter: [u32; 4]) -> [f64; 2] {
    let r = philox4x32(counter, [key as u32, (key >> 32) as u32]);
    [open_unit(r[0], r[1]), open_unit(r[2], r[3])]
}

/// Sequential stream over the counter space, for callers that just want "the
/// next few random numbers" from a seed.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    domain: u32,
    next: u64,
}

impl Stream {
    pub fn new(seed: u64, domain: u32) -> Self {
        Self {
            key: seed,
            domain,
            next: 0,
        }
    }

    fn counter(&mut self) -> [u32; 4] {
        let n = self.next;
        self.next += 1;
        [n as u32, (n >> 32) as u32, self.domain, 0xA5A5_5A5A]
    }

    pub fn uniform(&mut self) -> f64 {
        let c = self.counter();
        uniform_pair(self.key, c)[0]
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let c = self.counter();
        normal_pair(self.key, c)[0]
    }
}
