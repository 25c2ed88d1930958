//! Synthetic patent-style claims for integration tests.
#![allow(dead_code)]

use aeval_core::claims::ClaimRecord;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DEVICES: &[&str] = &[
    "fastening assembly",
    "sensor module",
    "heat exchanger",
    "valve body",
    "battery pack",
    "display panel",
    "pump housing",
    "control circuit",
    "filter cartridge",
    "hinge mechanism",
];
const PARTS: &[&str] = &[
    "housing",
    "base plate",
    "first arm",
    "second arm",
    "spring",
    "sealing ring",
    "connector",
    "shaft",
    "cover",
    "bracket",
    "sensor",
    "controller",
    "channel",
    "flange",
    "latch",
];
const ADJECTIVES: &[&str] = &[
    "rigid",
    "flexible",
    "annular",
    "elongated",
    "removable",
    "threaded",
    "hollow",
    "transparent",
    "conductive",
    "resilient",
];
const MATERIALS: &[&str] = &[
    "steel",
    "aluminum",
    "a polymer",
    "ceramic",
    "rubber",
    "copper",
];
const RELATIONS: &[&str] = &[
    "coupled to",
    "mounted on",
    "disposed within",
    "attached to",
    "extending through",
    "adjacent to",
];

pub struct ClaimGen {
    rng: ChaCha8Rng,
}

impl ClaimGen {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn pick(&mut self, items: &[&'static str]) -> &'static str {
        items.choose(&mut self.rng).unwrap()
    }

    /// Body of an independent claim with `elements` recited elements.
    pub fn independent_body(&mut self, device: &str, elements: usize) -> String {
        let mut parts: Vec<String> = (0..elements.max(1))
            .map(|_| {
                format!(
                    "a {} {} {} the {}",
                    self.pick(ADJECTIVES),
                    self.pick(PARTS),
                    self.pick(RELATIONS),
                    self.pick(PARTS)
                )
            })
            .collect();
        if parts.len() > 1 {
            let last = parts.pop().unwrap();
            format!("A {device} comprising: {}; and {last}.", parts.join("; "))
        } else {
            format!("A {device} comprising {}.", parts[0])
        }
    }

    fn wherein(&mut self) -> String {
        if self.rng.random_bool(0.5) {
            format!(
                "the {} is made of {}",
                self.pick(PARTS),
                self.pick(MATERIALS)
            )
        } else {
            format!("the {} is {}", self.pick(PARTS), self.pick(ADJECTIVES))
        }
    }

    /// A claim set: claim 1 independent, later claims mostly depending on one
    /// earlier claim, occasionally on two, occasionally independent.
    pub fn claim_set(&mut self, size: usize) -> Vec<ClaimRecord> {
        let device = self.pick(DEVICES);
        let mut claims = Vec::with_capacity(size);
        for n in 1..=size as u32 {
            let roll: f64 = self.rng.random();
            let record = if n == 1 || roll < 0.1 {
                let elements = self.rng.random_range(2..=4);
                ClaimRecord::new(n, self.independent_body(device, elements), vec![])
            } else if roll < 0.2 && n >= 3 {
                let a = self.rng.random_range(1..n - 1);
                let b = self.rng.random_range(a + 1..n);
                let body = format!(
                    "The {device} of claims {a} or {b}, wherein {}.",
                    self.wherein()
                );
                ClaimRecord::new(n, body, vec![a, b])
            } else {
                let p = self.rng.random_range(1..n);
                let intro = *["of claim", "according to claim", "as claimed in claim"]
                    .choose(&mut self.rng)
                    .unwrap();
                let body = format!("The {device} {intro} {p}, wherein {}.", self.wherein());
                ClaimRecord::new(n, body, vec![p])
            };
            claims.push(record);
        }
        claims
    }

    /// Rendered independent claims (`"1. A ..."`).
    pub fn independent_claims(&mut self, count: usize, elements: usize) -> Vec<String> {
        (0..count)
            .map(|_| {
                let device = self.pick(DEVICES);
                format!("1. {}", self.independent_body(device, elements))
            })
            .collect()
    }
}
