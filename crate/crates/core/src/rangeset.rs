//! Sets of `u64` stored as disjoint, merged half-open ranges.
//!
//! Used for received packet numbers, acknowledged stream bytes and
//! retransmission bookkeeping.

use std::collections::BTreeMap;
use std::ops::Range;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RangeSet {
    // start -> end (exclusive); never empty, never adjacent, never overlapping
    map: BTreeMap<u64, u64>,
}

impl RangeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Number of disjoint ranges.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn insert_one(&mut self, v: u64) -> bool {
        self.insert(v..v + 1)
    }

    /// Inserts `range`, returning true if any new value was added.
    pub fn insert(&mut self, range: Range<u64>) -> bool {
        if range.is_empty() {
            return false;
        }
        let mut start = range.start;
        let mut end = range.end;
        if self.contains_range(&range) {
            return false;
        }
        // merge with a predecessor that touches us
        if let Some((&s, &e)) = self.map.range(..=start).next_back() {
            if e >= start {
                start = s;
                end = end.max(e);
            }
        }
        // absorb successors
        let following: Vec<(u64, u64)> = self
            .map
            .range(start..=end)
            .map(|(&s, &e)| (s, e))
            .collect();
        for (s, e) in following {
            self.map.remove(&s);
            end = end.max(e);
        }
        self.map.insert(start, end);
        true
    }

    /// Removes every value in `range`.
    pub fn remove(&mut self, range: Range<u64>) {
        if range.is_empty() {
            return;
        }
        let overlapping: Vec<(u64, u64)> = self
            .map
            .range(..range.end)
            .filter(|(_, &e)| e > range.start)
            .map(|(&s, &e)| (s, e))
            .collect();
        for (s, e) in overlapping {
            self.map.remove(&s);
            if s < range.start {
                self.map.insert(s, range.start);
            }
            if e > range.end {
                self.map.insert(range.end, e);
            }
        }
    }

    pub fn contains(&self, v: u64) -> bool {
        self.map
            .range(..=v)
            .next_back()
            .is_some_and(|(_, &e)| v < e)
    }

    pub fn contains_range(&self, r: &Range<u64>) -> bool {
        if r.is_empty() {
            return true;
        }
        self.map
            .range(..=r.start)
            .next_back()
            .is_some_and(|(_, &e)| r.end <= e)
    }

    /// True if any value of `r` is in the set.
    pub fn intersects(&self, r: Range<u64>) -> bool {
        if r.is_empty() {
            return false;
        }
        self.map.range(..r.end).next_back().is_some_and(|(_, &e)| e > r.start)
    }

    pub fn min(&self) -> Option<u64> {
        self.map.keys().next().copied()
    }

    pub fn max(&self) -> Option<u64> {
        self.map.values().next_back().map(|e| e - 1)
    }

    /// The lowest range, if any.
    pub fn first(&self) -> Option<Range<u64>> {
        self.map.iter().next().map(|(&s, &e)| s..e)
    }

    pub fn pop_first(&mut self) -> Option<Range<u64>> {
        self.map.pop_first().map(|(s, e)| s..e)
    }

    pub fn iter(&self) -> impl DoubleEndedIterator<Item = Range<u64>> + '_ {
        self.map.iter().map(|(&s, &e)| s..e)
    }

    /// Number of individual values covered.
    pub fn covered(&self) -> u64 {
        self.map.iter().map(|(s, e)| e - s).sum()
    }
}
