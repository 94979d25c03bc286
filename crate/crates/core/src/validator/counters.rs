//! Lookup/update counters of the smart validator.
//!
//! Each key has a global update counter (GUC) and a global lookup counter
//! (GLC). A running SCT keeps its own local counts (LUC, LLC) for the keys it
//! touched. If the block graph is honest, no other SCT touches a key while an
//! SCT that updates it is running, so the local counts always match the global
//! ones at the moment of the check.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicI64, Ordering};

use crate::sct::Halt;
use crate::Key;

pub struct CounterTable {
    guc: Box<[AtomicI64]>,
    glc: Box<[AtomicI64]>,
}

impl CounterTable {
    /// Counters for keys `0..keys`.
    pub fn new(keys: usize) -> Self {
        let zeros = || (0..keys).map(|_| AtomicI64::new(0)).collect();
        Self { guc: zeros(), glc: zeros() }
    }

    pub fn guc(&self, key: Key) -> i64 {
        self.guc[key as usize].load(Ordering::Acquire)
    }

    pub fn glc(&self, key: Key) -> i64 {
        self.glc[key as usize].load(Ordering::Acquire)
    }

    /// Whether every global counter is back at zero.
    pub fn is_clean(&self) -> bool {
        self.guc.iter().chain(self.glc.iter()).all(|c| c.load(Ordering::Acquire) == 0)
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Local {
    luc: i64,
    llc: i64,
}

/// Local counters of one executing SCT.
pub struct TxnCounters<'a> {
    table: &'a CounterTable,
    local: BTreeMap<Key, Local>,
}

impl<'a> TxnCounters<'a> {
    pub fn begin(table: &'a CounterTable) -> Self {
        Self { table, local: BTreeMap::new() }
    }

    /// Must precede a lookup of `key`.
    pub fn lookup(&mut self, key: Key) -> Result<(), Halt> {
        let l = self.local.entry(key).or_default();
        if l.luc != self.table.guc(key) {
            return Err(Halt::Malicious { key });
        }
        self.table.glc[key as usize].fetch_add(1, Ordering::AcqRel);
        l.llc += 1;
        Ok(())
    }

    /// Must precede an insert or delete of `key`.
    pub fn update(&mut self, key: Key) -> Result<(), Halt> {
        let l = self.local.entry(key).or_default();
        if l.luc != self.table.guc(key) || l.llc != self.table.glc(key) {
            return Err(Halt::Malicious { key });
        }
        self.table.guc[key as usize].fetch_add(1, Ordering::AcqRel);
        l.luc += 1;
        Ok(())
    }

    /// Withdraws this SCT's contribution from the global counters.
    pub fn end(self) {
        for (k, l) in self.local {
            self.table.guc[k as usize].fetch_sub(l.luc, Ordering::AcqRel);
            self.table.glc[k as usize].fetch_sub(l.llc, Ordering::AcqRel);
        }
    }
}
