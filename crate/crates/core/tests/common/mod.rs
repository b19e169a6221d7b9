//! Shared helpers for integration tests.
#![allow(dead_code)]

use asdtr::math::expit;
use asdtr::nuisance::{AipwNuisances, Nuisances};
use asdtr::trajectory::{Dataset, Trajectory};

pub fn seeded(seed: u64, path: &[u64]) -> rand_chacha::ChaCha8Rng {
    asdtr::rng::stream(seed, path)
}

/// Hand-built nuisances with unit censoring/survival models: c = p = m_p2 = 1,
/// logistic treatment models and linear outcome means shared between the MR
/// and AIPW sides, realizing the reduction identity setting.
pub struct UnitNuisances {
    /// logit P(A1=1) = t.0 + t.1 * x1
    pub e1: (f64, f64),
    /// logit P(A2=1) = t.0 + t.1 * x1 + t.2 * x2
    pub e2: (f64, f64, f64),
    /// mu2 per arm (a1, a2): c0 + c1 x1 + c2 x2
    pub mu2: [[(f64, f64, f64); 2]; 2],
    /// m_mu2: c0 + c1 x1
    pub m_mu2: (f64, f64),
}

impl UnitNuisances {
    fn e1p(&self, x1: &[f64]) -> f64 {
        expit(self.e1.0 + self.e1.1 * x1[0])
    }
    fn e2p(&self, x1: &[f64], x2: &[f64]) -> f64 {
        expit(self.e2.0 + self.e2.1 * x1[0] + self.e2.2 * x2[0])
    }
}

impl Nuisances for UnitNuisances {
    fn e1(&self, a1: u8, x1: &[f64]) -> f64 {
        let p = self.e1p(x1);
        if a1 == 1 {
            p
        } else {
            1.0 - p
        }
    }
    fn c1(&self, _: u8, _: &[f64]) -> f64 {
        1.0
    }
    fn p1(&self, _: u8, _: &[f64]) -> f64 {
        1.0
    }
    fn e2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        let p = self.e2p(x1, x2);
        if arm.1 == 1 {
            p
        } else {
            1.0 - p
        }
    }
    fn c2(&self, _: (u8, u8), _: &[f64], _: &[f64]) -> f64 {
        1.0
    }
    fn p2(&self, _: (u8, u8), _: &[f64], _: &[f64]) -> f64 {
        1.0
    }
    fn mu2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        let c = self.mu2[arm.0 as usize][arm.1 as usize];
        c.0 + c.1 * x1[0] + c.2 * x2[0]
    }
    fn m_p2(&self, _: (u8, u8), _: &[f64]) -> f64 {
        1.0
    }
    fn m_mu2(&self, x1: &[f64]) -> f64 {
        self.m_mu2.0 + self.m_mu2.1 * x1[0]
    }
}

impl AipwNuisances for UnitNuisances {
    fn phi_tilde1(&self, a1: u8, x1: &[f64]) -> f64 {
        Nuisances::e1(self, a1, x1) * 1.0
    }
    fn phi_tilde2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        Nuisances::e2(self, arm, x1, x2) * 1.0
    }
    fn q2(&self, arm: (u8, u8), x1: &[f64], x2: &[f64]) -> f64 {
        self.mu2(arm, x1, x2)
    }
    fn q1(&self, x1: &[f64]) -> f64 {
        Nuisances::m_mu2(self, x1)
    }
}

/// Random fully observed dataset of n rows.
pub fn fully_observed_dataset(n: usize, seed: u64) -> Dataset {
    use rand::Rng;
    let mut r = seeded(seed, &[0xF0]);
    let rows: Vec<Trajectory> = (0..n)
        .map(|_| {
            Trajectory::complete(
                vec![r.gen_range(-1.0..1.0)],
                r.gen_range(0..2u8),
                vec![r.gen_range(-2.0..2.0)],
                r.gen_range(0..2u8),
                r.gen_range(-5.0..5.0),
            )
            .unwrap()
        })
        .collect();
    Dataset::from_rows(rows, None).unwrap()
}

/// Random unit-nuisance models.
pub fn random_unit_nuisances(seed: u64) -> UnitNuisances {
    use rand::Rng;
    let mut r = seeded(seed, &[0x0E1]);
    let mut c = || r.gen_range(-1.0..1.0);
    UnitNuisances {
        e1: (c(), c()),
        e2: (c(), c(), c()),
        mu2: [[(c(), c(), c()), (c(), c(), c())], [(c(), c(), c()), (c(), c(), c())]],
        m_mu2: (c(), c()),
    }
}

/// Random linear policy on (x1) / (x1, a1, x2).
pub fn random_policy(seed: u64) -> asdtr::policy::LinearPolicy {
    use rand::Rng;
    let mut r = seeded(seed, &[0x901]);
    loop {
        let b1: Vec<f64> = (0..2).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b2: Vec<f64> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
        if let Ok(p) = asdtr::policy::LinearPolicy::new(b1, b2) {
            return p;
        }
    }
}
