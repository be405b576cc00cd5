//! Regimes of the default cascade.
//!
//! A regime is identified by the set of nodes that have already defaulted.
//! Node indices are 0-based in the API; the textual form (config section keys
//! and the `regime` CSV column) uses 1-based indices joined by commas, with the
//! empty string for the root.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};

/// Largest supported network size. The regime tree has `2^n` nodes.
pub const MAX_NODES: usize = 16;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Regime {
    n: u8,
    bits: u32,
}

impl Regime {
    pub fn root(n: usize) -> Regime {
        assert!((1..=MAX_NODES).contains(&n), "network size {n} out of range");
        Regime { n: n as u8, bits: 0 }
    }

    pub fn from_defaulted(n: usize, defaulted: &[usize]) -> Result<Regime> {
        let mut r = Regime::root(n);
        for &k in defaulted {
            if k >= n {
                return Err(Error::Contract(format!("node {} outside 1..{}", k + 1, n)));
            }
            if r.is_defaulted(k) {
                return Err(Error::Contract(format!("node {} listed twice", k + 1)));
            }
            r.bits |= 1 << k;
        }
        Ok(r)
    }

    pub(crate) fn from_bits(n: usize, bits: u32) -> Regime {
        Regime { n: n as u8, bits }
    }

    pub fn n(&self) -> usize {
        self.n as usize
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn size(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_defaulted(&self, k: usize) -> bool {
        self.bits & (1 << k) != 0
    }

    pub fn is_terminal(&self) -> bool {
        self.size() == self.n()
    }

    pub fn defaulted(&self) -> Vec<usize> {
        (0..self.n()).filter(|&k| self.is_defaulted(k)).collect()
    }

    pub fn survivors(&self) -> Vec<usize> {
        (0..self.n()).filter(|&k| !self.is_defaulted(k)).collect()
    }

    /// Surviving nodes in ascending order, without allocating.
    pub fn survivor_iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n()).filter(|&k| !self.is_defaulted(k))
    }

    /// Survivor mask: 1 for surviving nodes, 0 for defaulted ones.
    pub fn mask(&self) -> Vec<u8> {
        (0..self.n()).map(|k| u8::from(!self.is_defaulted(k))).collect()
    }

    pub fn apply_default(&self, k: usize) -> Result<Regime> {
        if k >= self.n() {
            return Err(Error::Contract(format!("node {} outside 1..{}", k + 1, self.n)));
        }
        if self.is_defaulted(k) {
            return Err(Error::Contract(format!(
                "node {} already defaulted in regime {{{}}}",
                k + 1,
                self.key()
            )));
        }
        Ok(Regime { n: self.n, bits: self.bits | (1 << k) })
    }

    /// One child per survivor, ascending node order.
    pub fn children(&self) -> Vec<(usize, Regime)> {
        self.survivors()
            .into_iter()
            .map(|k| (k, Regime { n: self.n, bits: self.bits | (1 << k) }))
            .collect()
    }

    /// Regimes obtained by removing one defaulted node.
    pub fn parents(&self) -> Vec<Regime> {
        self.defaulted()
            .into_iter()
            .map(|k| Regime { n: self.n, bits: self.bits & !(1 << k) })
            .collect()
    }

    pub fn key(&self) -> String {
        self.defaulted()
            .iter()
            .map(|k| (k + 1).to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_key(n: usize, key: &str) -> Result<Regime> {
        let key = key.trim();
        if key.is_empty() {
            return Ok(Regime::root(n));
        }
        let mut idx = Vec::new();
        let mut last = 0usize;
        for part in key.split(',') {
            let k: usize = part
                .trim()
                .parse()
                .map_err(|_| Error::Contract(format!("bad regime key \"{key}\"")))?;
            if k == 0 || k > n {
                return Err(Error::Contract(format!(
                    "regime key \"{key}\": index {k} outside 1..{n}"
                )));
            }
            if k <= last {
                return Err(Error::Contract(format!(
                    "regime key \"{key}\" must list strictly increasing indices"
                )));
            }
            last = k;
            idx.push(k - 1);
        }
        Regime::from_defaulted(n, &idx)
    }
}

impl Ord for Regime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.n
            .cmp(&other.n)
            .then(self.size().cmp(&other.size()))
            .then_with(|| self.defaulted().cmp(&other.defaulted()))
    }
}

impl PartialOrd for Regime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.key())
    }
}

/// All regimes with at least one survivor, ordered by size then lexicographically.
pub fn enumerate_active_regimes(n: usize) -> Vec<Regime> {
    let mut out: Vec<Regime> = (0u32..(1u32 << n))
        .map(|bits| Regime::from_bits(n, bits))
        .filter(|r| !r.is_terminal())
        .collect();
    out.sort();
    out
}

/// Dense indexing of the active regimes.
#[derive(Clone, Debug)]
pub struct RegimeTree {
    n: usize,
    active: Vec<Regime>,
    index: Vec<u32>,
}

impl RegimeTree {
    pub fn new(n: usize) -> RegimeTree {
        let active = enumerate_active_regimes(n);
        let mut index = vec![u32::MAX; 1 << n];
        for (i, r) in active.iter().enumerate() {
            index[r.bits() as usize] = i as u32;
        }
        RegimeTree { n, active, index }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn active(&self) -> &[Regime] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// Dense id of an active regime; `None` for the terminal regime.
    pub fn id(&self, r: &Regime) -> Option<usize> {
        match self.index[r.bits() as usize] {
            u32::MAX => None,
            i => Some(i as usize),
        }
    }

    pub fn regime(&self, id: usize) -> Regime {
        self.active[id]
    }

    /// Active regime ids, deepest first.
    pub fn backward_order(&self) -> impl Iterator<Item = usize> {
        (0..self.active.len()).rev()
    }
}
