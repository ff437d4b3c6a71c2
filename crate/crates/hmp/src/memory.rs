//! Worker-side memory budget enforcement. Resident shard bytes and transient
//! activation tensors are registered against the device's budget; exceeding
//! it surfaces as an explicit error naming the allocation site instead of an
//! opaque out-of-memory crash.

use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

#[derive(Debug)]
struct Inner {
    budget: u64,
    resident: u64,
    peak: u64,
}

/// Shared accounting handle. Cloning shares the underlying ledger.
#[derive(Debug, Clone)]
pub struct MemoryAccountant {
    inner: Arc<Mutex<Inner>>,
}

impl MemoryAccountant {
    /// `None` budget disables enforcement but keeps accounting.
    pub fn new(budget: Option<u64>) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                budget: budget.unwrap_or(u64::MAX),
                resident: 0,
                peak: 0,
            })),
        }
    }

    pub fn budget(&self) -> u64 {
        self.inner.lock().unwrap().budget
    }

    pub fn resident(&self) -> u64 {
        self.inner.lock().unwrap().resident
    }

    pub fn peak(&self) -> u64 {
        self.inner.lock().unwrap().peak
    }

    /// Registers `bytes` at `site`; fails without mutating state if the
    /// budget would be exceeded.
    pub fn reserve(&self, site: &str, bytes: u64) -> Result<()> {
        let mut inner = self.inner.lock().unwrap();
        let next = inner.resident.saturating_add(bytes);
        if next > inner.budget {
            return Err(Error::BudgetExceeded {
                site: site.to_string(),
                requested: bytes,
                resident: inner.resident,
                budget: inner.budget,
            });
        }
        inner.resident = next;
        inner.peak = inner.peak.max(next);
        Ok(())
    }

    pub fn release(&self, bytes: u64) {
        let mut inner = self.inner.lock().unwrap();
        inner.resident = inner.resident.saturating_sub(bytes);
    }

    /// Drops all transient accounting down to `resident_floor` (the shard
    /// bytes that stay loaded between runs).
    pub fn reset_to(&self, resident_floor: u64) {
        let mut inner = self.inner.lock().unwrap();
        inner.resident = resident_floor;
    }
}

/// Reserve that releases itself on drop; used for transient activations.
pub struct Reservation<'a> {
    accountant: &'a MemoryAccountant,
    bytes: u64,
}

impl<'a> Reservation<'a> {
    pub fn take(accountant: &'a MemoryAccountant, site: &str, bytes: u64) -> Result<Self> {
        accountant.reserve(site, bytes)?;
        Ok(Self { accountant, bytes })
    }
}

impl Drop for Reservation<'_> {
    fn drop(&mut self) {
        self.accountant.release(self.bytes);
    }
}
