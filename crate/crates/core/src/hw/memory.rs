// SPDX-License-Identifier: Apache-2.0

//! Flat physical byte store.
//!
//! Pages are copy-on-write and all-zero pages are not materialized, so the
//! explorer can clone a platform per state for the cost of a pointer vector.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, OnceLock};

use crate::PAGE_SIZE;

#[derive(Clone)]
struct PageBuf {
    bytes: Box<[u8]>,
    fingerprint: OnceLock<u64>,
}

impl PageBuf {
    fn zeroed() -> Self {
        Self { bytes: vec![0u8; PAGE_SIZE as usize].into_boxed_slice(), fingerprint: OnceLock::new() }
    }

    fn fingerprint(&self) -> u64 {
        *self.fingerprint.get_or_init(|| {
            let mut h = DefaultHasher::new();
            self.bytes.hash(&mut h);
            h.finish()
        })
    }
}

#[derive(Clone)]
pub struct PhysMemory {
    pages: Vec<Option<Arc<PageBuf>>>,
}

impl PhysMemory {
    pub fn new(pages: usize) -> Self {
        Self { pages: vec![None; pages] }
    }

    pub fn size(&self) -> u64 {
        self.pages.len() as u64 * PAGE_SIZE
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    /// Caller guarantees `addr + buf.len() <= size()`.
    pub fn read(&self, addr: u64, buf: &mut [u8]) {
        let mut done = 0usize;
        while done < buf.len() {
            let a = addr + done as u64;
            let page = (a / PAGE_SIZE) as usize;
            let off = (a % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(buf.len() - done);
            match &self.pages[page] {
                Some(p) => buf[done..done + n].copy_from_slice(&p.bytes[off..off + n]),
                None => buf[done..done + n].fill(0),
            }
            done += n;
        }
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) {
        let mut done = 0usize;
        while done < data.len() {
            let a = addr + done as u64;
            let page = (a / PAGE_SIZE) as usize;
            let off = (a % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(data.len() - done);
            let chunk = &data[done..done + n];
            if self.pages[page].is_none() && chunk.iter().all(|b| *b == 0) {
                done += n;
                continue;
            }
            let slot = self.pages[page].get_or_insert_with(|| Arc::new(PageBuf::zeroed()));
            let buf = Arc::make_mut(slot);
            buf.bytes[off..off + n].copy_from_slice(chunk);
            buf.fingerprint = OnceLock::new();
            if n == PAGE_SIZE as usize && chunk.iter().all(|b| *b == 0) {
                self.pages[page] = None;
            }
            done += n;
        }
    }

    pub fn fill(&mut self, addr: u64, len: u64, byte: u8) {
        let mut done = 0u64;
        while done < len {
            let a = addr + done;
            let page = (a / PAGE_SIZE) as usize;
            let off = a % PAGE_SIZE;
            let n = (PAGE_SIZE - off).min(len - done);
            if byte == 0 && off == 0 && n == PAGE_SIZE {
                self.pages[page] = None;
            } else if byte != 0 || self.pages[page].is_some() {
                let slot = self.pages[page].get_or_insert_with(|| Arc::new(PageBuf::zeroed()));
                let buf = Arc::make_mut(slot);
                buf.bytes[off as usize..(off + n) as usize].fill(byte);
                buf.fingerprint = OnceLock::new();
            }
            done += n;
        }
    }

    /// Scan of the page's actual contents.
    pub fn page_is_zero(&self, page: usize) -> bool {
        match &self.pages[page] {
            None => true,
            Some(p) => p.bytes.iter().all(|b| *b == 0),
        }
    }

    pub(crate) fn fingerprint<H: Hasher>(&self, state: &mut H) {
        for (i, p) in self.pages.iter().enumerate() {
            if let Some(p) = p {
                if p.bytes.iter().any(|b| *b != 0) {
                    i.hash(state);
                    p.fingerprint().hash(state);
                }
            }
        }
    }

    /// As [`Self::fingerprint`], with the bytes of `masked` `(start, end)`
    /// ranges read as zero.
    pub(crate) fn fingerprint_masked<H: Hasher>(&self, state: &mut H, masked: &[(u64, u64)]) {
        for (i, p) in self.pages.iter().enumerate() {
            let Some(p) = p else { continue };
            let lo = i as u64 * PAGE_SIZE;
            let hi = lo + PAGE_SIZE;
            let cuts: Vec<_> = masked.iter().filter(|(s, e)| *s < hi && *e > lo).collect();
            if cuts.is_empty() {
                if p.bytes.iter().any(|b| *b != 0) {
                    i.hash(state);
                    p.fingerprint().hash(state);
                }
                continue;
            }
            let mut bytes = p.bytes.to_vec();
            for (s, e) in cuts {
                bytes[(s.max(&lo) - lo) as usize..(e.min(&hi) - lo) as usize].fill(0);
            }
            if bytes.iter().any(|b| *b != 0) {
                i.hash(state);
                let mut h = DefaultHasher::new();
                bytes.hash(&mut h);
                h.finish().hash(state);
            }
        }
    }
}

impl std::fmt::Debug for PhysMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let resident = self.pages.iter().filter(|p| p.is_some()).count();
        write!(f, "PhysMemory {{ pages: {}, resident: {resident} }}", self.pages.len())
    }
}
