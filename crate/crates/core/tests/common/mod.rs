//! Seeded test corpus shared by the integration tests.
#![allow(dead_code)]

use num_bigint::BigInt;
use polyverify::gen::{generate_from_str, random_arch, RandomArchLimits};
use polyverify::network::{InputBox, Network};
use polyverify::Rational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub seed: u64,
    pub arch: String,
    pub net: Network,
}

pub fn corpus_net(seed: u64) -> Case {
    let (shape, arch) = random_arch(seed, &RandomArchLimits::default());
    let net = generate_from_str(seed, shape, &arch).expect("corpus network");
    Case { seed, arch, net }
}

pub fn corpus(n: usize) -> Vec<Case> {
    (0..n as u64).map(corpus_net).collect()
}

/// Random dyadic image in `[0,1]`.
pub fn image(net: &Network, seed: u64) -> Vec<Rational> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 17);
    (0..net.input_shape().len())
        .map(|_| Rational::new(BigInt::from(rng.gen_range(0..=256i64)), BigInt::from(256)))
        .collect()
}

pub fn epsilon(seed: u64) -> Rational {
    let choices = [5i64, 30, 100, 250];
    Rational::new(BigInt::from(choices[(seed % 4) as usize]), BigInt::from(1000))
}

pub fn region(net: &Network, seed: u64) -> InputBox {
    InputBox::new(image(net, seed), epsilon(seed)).unwrap()
}
