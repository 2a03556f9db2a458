//! Bounded key/value store for streaming decoding.
//!
//! Holds the first `n_global` entries forever and a ring buffer of the most
//! recent `n_local` entries after that, so the total never exceeds
//! `n_global + n_local` no matter how long decoding runs. Positions are stored
//! as absolute token indices and never renumbered.
//!
//! Keys are stored unrotated. The global branch rotates only the query (to the
//! distance limit) while the local branch rotates both sides, and both are
//! computed from the same stored key.

use std::collections::VecDeque;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::mask::{EffectiveDistance, MaskParams};

const SNAPSHOT_MAGIC: &[u8; 4] = b"LMKV";
const SNAPSHOT_VERSION: u32 = 1;
const UNBOUNDED: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub position: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

/// One entry as seen from a query, with its clamped distance.
#[derive(Debug, Clone, Copy)]
pub struct VisibleEntry<'a> {
    pub position: usize,
    pub key: &'a [f64],
    pub value: &'a [f64],
    pub distance: EffectiveDistance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    n_global: usize,
    /// `None` keeps every entry (plain causal decoding).
    n_local: Option<usize>,
    l_pretrain: Option<usize>,
    width: usize,
    pinned: Vec<CacheEntry>,
    window: VecDeque<CacheEntry>,
    next_position: usize,
}

impl KvCache {
    /// Cache realizing the Lambda mask for entries of `width` values.
    pub fn new(params: &MaskParams, width: usize) -> Result<Self> {
        params.validate()?;
        if width == 0 {
            return Err(Error::invalid("cache entry width must be positive"));
        }
        Ok(Self {
            n_global: params.n_global,
            n_local: Some(params.n_local),
            l_pretrain: Some(params.l_pretrain),
            width,
            pinned: Vec::with_capacity(params.n_global),
            window: VecDeque::with_capacity(params.n_local),
            next_position: 0,
        })
    }

    /// Cache that never evicts and never clamps distances.
    pub fn unbounded(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::invalid("cache entry width must be positive"));
        }
        Ok(Self {
            n_global: 0,
            n_local: None,
            l_pretrain: None,
            width,
            pinned: Vec::new(),
            window: VecDeque::new(),
            next_position: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn len(&self) -> usize {
        self.pinned.len() + self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_bounded(&self) -> bool {
        self.n_local.is_some()
    }

    /// Maximum number of entries this cache can hold, if bounded.
    pub fn capacity(&self) -> Option<usize> {
        self.n_local.map(|l| l + self.n_global)
    }

    pub fn push(&mut self, key: &[f64], value: &[f64]) -> Result<()> {
        if key.len() != self.width || value.len() != self.width {
            return Err(Error::invalid(format!(
                "cache entry width {} but got key {} / value {}",
                self.width,
                key.len(),
                value.len()
            )));
        }
        let entry = CacheEntry {
            position: self.next_position,
            key: key.to_vec(),
            value: value.to_vec(),
        };
        if self.next_position < self.n_global {
            self.pinned.push(entry);
        } else {
            if Some(self.window.len()) == self.n_local {
                self.window.pop_front();
            }
            self.window.push_back(entry);
        }
        self.next_position += 1;
        Ok(())
    }

    /// Stored entries in ascending position order.
    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.pinned.iter().chain(self.window.iter())
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries().map(|e| e.position).collect()
    }

    fn clamp(&self, raw: usize) -> EffectiveDistance {
        EffectiveDistance(match self.l_pretrain {
            Some(l) => raw.min(l),
            None => raw,
        })
    }

    /// Every stored entry with its clamped distance to `query_position`, which
    /// must be the next position to be written.
    pub fn visible_entries(&self, query_position: usize) -> Result<Vec<VisibleEntry<'_>>> {
        if query_position != self.next_position {
            return Err(Error::state(format!(
                "query at position {query_position} but cache expects {}",
                self.next_position
            )));
        }
        Ok(self.entries_relative_to(query_position))
    }

    /// Entries as seen from the most recently pushed position, which is the
    /// decode-time query row after its own key has been appended.
    pub(crate) fn entries_for_last(&self) -> Result<(usize, Vec<VisibleEntry<'_>>)> {
        if self.next_position == 0 {
            return Err(Error::state("cache is empty"));
        }
        let query = self.next_position - 1;
        Ok((query, self.entries_relative_to(query)))
    }

    fn entries_relative_to(&self, query: usize) -> Vec<VisibleEntry<'_>> {
        self.entries()
            .map(|e| VisibleEntry {
                position: e.position,
                key: &e.key,
                value: &e.value,
                distance: self.clamp(query - e.position),
            })
            .collect()
    }

    pub fn n_global(&self) -> usize {
        self.n_global
    }

    /// The local window length, `None` when unbounded.
    pub fn n_local(&self) -> Option<usize> {
        self.n_local
    }

    pub fn l_pretrain(&self) -> Option<usize> {
        self.l_pretrain
    }

    /// Binary snapshot: `LMKV`, u32 version, u32 n_global, u32 n_local
    /// (`u32::MAX` = unbounded), u64 next_position, u32 l_pretrain, u32 width,
    /// u32 entry count, then per entry u64 position and `width` f32 key values
    /// followed by `width` f32 value values. Little-endian throughout.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_global as u32).to_le_bytes())?;
        let n_local = self.n_local.map_or(UNBOUNDED, |l| l as u32);
        w.write_all(&n_local.to_le_bytes())?;
        w.write_all(&(self.next_position as u64).to_le_bytes())?;
        let l_pretrain = self.l_pretrain.map_or(UNBOUNDED, |l| l as u32);
        w.write_all(&l_pretrain.to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for e in self.entries() {
            w.write_all(&(e.position as u64).to_le_bytes())?;
            for x in e.key.iter().chain(&e.value) {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut reader = SnapshotReader {
            inner: &mut r,
            offset: 0,
        };
        let magic = reader.bytes::<4>()?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(reader.error("bad magic, expected LMKV"));
        }
        let version = reader.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(reader.error(format!("unsupported version {version}")));
        }
        let n_global = reader.u32()? as usize;
        let n_local = reader.u32()?;
        let next_position = reader.u64()? as usize;
        let l_pretrain = reader.u32()?;
        let width = reader.u32()? as usize;
        let count = reader.u32()? as usize;
        let mut cache = if n_local == UNBOUNDED {
            KvCache::unbounded(width)?
        } else {
            let params = MaskParams::new(n_global, n_local as usize, l_pretrain as usize)?;
            KvCache::new(&params, width)?
        };
        if cache.capacity().is_some_and(|cap| count > cap) {
            return Err(reader.error(format!("{count} entries exceed cache capacity")));
        }
        let mut last = None;
        for _ in 0..count {
            let position = reader.u64()? as usize;
            if position >= next_position || last.is_some_and(|p| position <= p) {
                return Err(reader.error(format!("entry position {position} out of order")));
            }
            last = Some(position);
            let mut key = Vec::with_capacity(width);
            let mut value = Vec::with_capacity(width);
            for _ in 0..width {
                key.push(reader.f32()? as f64);
            }
            for _ in 0..width {
                value.push(reader.f32()? as f64);
            }
            let entry = CacheEntry {
                position,
                key,
                value,
            };
            if position < cache.n_global {
                cache.pinned.push(entry);
            } else {
                cache.window.push_back(entry);
            }
        }
        cache.next_position = next_position;
        Ok(cache)
    }
}

struct SnapshotReader<'a, R: Read> {
    inner: &'a mut R,
    offset: usize,
}

impl<R: Read> SnapshotReader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.error("truncated snapshot"))?;
        self.offset += N;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            location: format!("byte {}", self.offset),
            message: message.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache(g: usize, l: usize, lp: usize) -> KvCache {
        KvCache::new(&MaskParams::new(g, l, lp).unwrap(), 2).unwrap()
    }

    fn push_n(c: &mut KvCache, n: usize) {
        for p in 0..n {
            let x = p as f64;
            c.push(&[x, -x], &[x * 0.5, 1.0]).unwrap();
        }
    }

    /// Positions the Lambda mask keeps for a query at `next`: the set formula
    /// evaluated over every earlier position.
    fn reference_positions(next: usize, g: usize, l: usize) -> Vec<usize> {
        (0..next).filter(|&p| p < g || next - p <= l).collect()
    }

    #[test]
    fn at_capacity_nothing_evicted() {
        let mut c = cache(3, 5, 8);
        push_n(&mut c, 8);
        assert_eq!(c.positions(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn long_stream_keeps_prefix_and_window() {
        let mut c = cache(1, 2, 4);
        push_n(&mut c, 1000);
        assert_eq!(c.positions(), vec![0, 998, 999]);
        assert_eq!(c.positions(), reference_positions(1000, 1, 2));

        let mut c = cache(0, 3, 3);
        push_n(&mut c, 50);
        assert_eq!(c.positions(), vec![47, 48, 49]);
    }

    #[test]
    fn visible_entries_clamp() {
        let c = KvCache::new(&MaskParams::new(1, 2, 512).unwrap(), 2).unwrap();
        assert!(c.visible_entries(0).unwrap().is_empty());
        let mut c = c;
        push_n(&mut c, 1000);
        let vis = c.visible_entries(1000).unwrap();
        let d: Vec<usize> = vis.iter().map(|e| e.distance.value()).collect();
        assert_eq!(d, vec![512, 2, 1]);
        assert!(matches!(c.visible_entries(999), Err(Error::State(_))));
    }

    #[test]
    fn overlap_has_no_duplicates() {
        let mut c = cache(4, 4, 4);
        push_n(&mut c, 3);
        let vis = c.visible_entries(3).unwrap();
        assert_eq!(
            vis.iter().map(|e| e.position).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn width_mismatch() {
        let mut c = cache(1, 2, 2);
        assert!(c.push(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn unbounded_keeps_everything() {
        let mut c = KvCache::unbounded(2).unwrap();
        push_n(&mut c, 300);
        assert_eq!(c.len(), 300);
        let vis = c.visible_entries(300).unwrap();
        assert_eq!(vis[0].distance.value(), 300);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut c = cache(2, 3, 5);
        push_n(&mut c, 11);
        let mut buf = Vec::new();
        c.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"LMKV");
        let back = KvCache::read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(back, c);
        assert!(KvCache::read_snapshot(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(KvCache::read_snapshot(bad.as_slice()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matches_reference_simulation(g in 0usize..6, l in 1usize..9, n in 0usize..200) {
                let mut c = cache(g, l, l);
                for step in 0..n {
                    c.push(&[step as f64, 0.0], &[0.0, 0.0]).unwrap();
                    prop_assert!(c.len() <= g + l);
                    prop_assert_eq!(c.positions(), reference_positions(step + 1, g, l));
                }
            }

            #[test]
            fn identical_pushes_identical_state(g in 0usize..4, l in 1usize..6, n in 0usize..50) {
                let mut a = cache(g, l, l + 1);
                let mut b = cache(g, l, l + 1);
                push_n(&mut a, n);
                push_n(&mut b, n);
                prop_assert_eq!(a, b);
            }
        }
    }
}
