use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One level of the memory hierarchy, ordered fastest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Hbm,
    Ddr,
    Ssd,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Hbm, Tier::Ddr, Tier::Ssd];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Hbm => "hbm",
            Tier::Ddr => "ddr",
            Tier::Ssd => "ssd",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hbm" => Ok(Tier::Hbm),
            "ddr" => Ok(Tier::Ddr),
            "ssd" => Ok(Tier::Ssd),
            other => Err(format!("unknown tier `{other}`")),
        }
    }
}

/// A value per tier, indexed by [`Tier`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerTier<T> {
    pub hbm: T,
    pub ddr: T,
    pub ssd: T,
}

impl<T> PerTier<T> {
    pub fn from_fn(mut f: impl FnMut(Tier) -> T) -> Self {
        Self {
            hbm: f(Tier::Hbm),
            ddr: f(Tier::Ddr),
            ssd: f(Tier::Ssd),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Tier, &T) -> U) -> PerTier<U> {
        PerTier::from_fn(|t| f(t, &self[t]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Tier, &T)> {
        Tier::ALL.into_iter().map(move |t| (t, &self[t]))
    }
}

impl<T> std::ops::Index<Tier> for PerTier<T> {
    type Output = T;

    fn index(&self, t: Tier) -> &T {
        match t {
            Tier::Hbm => &self.hbm,
            Tier::Ddr => &self.ddr,
            Tier::Ssd => &self.ssd,
        }
    }
}

impl<T> std::ops::IndexMut<Tier> for PerTier<T> {
    fn index_mut(&mut self, t: Tier) -> &mut T {
        match t {
            Tier::Hbm => &mut self.hbm,
            Tier::Ddr => &mut self.ddr,
            Tier::Ssd => &mut self.ssd,
        }
    }
}

impl PerTier<f64> {
    pub fn sum(&self) -> f64 {
        self.hbm + self.ddr + self.ssd
    }

    pub fn max(&self) -> f64 {
        self.hbm.max(self.ddr).max(self.ssd)
    }
}

impl PerTier<u64> {
    pub fn sum(&self) -> u64 {
        self.hbm + self.ddr + self.ssd
    }
}
