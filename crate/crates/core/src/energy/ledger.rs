use std::collections::BTreeMap;
use std::ops::AddAssign;

/// Position of a count: layer, timestep and bit-plane (virtual step).
/// Real-valued (MAC) work is filed under plane 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct OpKey {
    pub layer: usize,
    pub timestep: usize,
    pub plane: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCount {
    pub macs: u64,
    pub acs: u64,
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: Self) {
        self.macs += rhs.macs;
        self.acs += rhs.acs;
    }
}

/// Synaptic operation counts. Only non-zero cells are stored.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OpLedger {
    cells: BTreeMap<OpKey, OpCount>,
}

impl OpLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn add(&mut self, key: OpKey, count: OpCount) {
        if count != OpCount::default() {
            *self.cells.entry(key).or_default() += count;
        }
    }

    pub fn add_macs(&mut self, layer: usize, timestep: usize, macs: u64) {
        self.add(OpKey { layer, timestep, plane: 0 }, OpCount { macs, acs: 0 });
    }

    pub fn add_acs(&mut self, layer: usize, timestep: usize, plane: u32, acs: u64) {
        self.add(OpKey { layer, timestep, plane }, OpCount { macs: 0, acs });
    }

    pub fn merge(&mut self, other: &OpLedger) {
        for (k, c) in &other.cells {
            self.add(*k, *c);
        }
    }

    pub fn cells(&self) -> &BTreeMap<OpKey, OpCount> {
        &self.cells
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn totals(&self) -> OpCount {
        let mut t = OpCount::default();
        for c in self.cells.values() {
            t += *c;
        }
        t
    }

    pub fn layer_totals(&self) -> BTreeMap<usize, OpCount> {
        let mut m: BTreeMap<usize, OpCount> = BTreeMap::new();
        for (k, c) in &self.cells {
            *m.entry(k.layer).or_default() += *c;
        }
        m
    }
}
