use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{LabeledImage, TrafficClass};
use crate::error::{Error, Result};
use crate::micronet::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct StackEntry {
    pub image: LabeledImage,
    /// Push sequence number, counted over the stack's lifetime.
    pub pushed_at: u64,
}

/// One line of the stack log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackLine {
    pub source_id: String,
    pub class: TrafficClass,
    pub pushed_at: u64,
}

/// Result of moving one stack's contents onto another.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub moved: usize,
    pub evicted: usize,
}

/// Bounded LIFO of labeled images awaiting retraining.
///
/// Pushing onto a full stack evicts the oldest (bottom) entry. Duplicates are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct ReFeedStack {
    /// Bottom first.
    entries: Vec<StackEntry>,
    capacity: usize,
    total_pushed: u64,
    evicted: u64,
}

impl ReFeedStack {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("stack capacity must be >= 1".into()));
        }
        Ok(Self {
            entries: Vec::new(),
            capacity,
            total_pushed: 0,
            evicted: 0,
        })
    }

    /// Capacity of `ceil(fraction * training_size)`, at least 1.
    pub fn capacity_for(training_size: usize, fraction: f64) -> usize {
        ((fraction * training_size as f64).ceil() as usize).max(1)
    }

    /// Pushes `item` on top, returning the evicted bottom entry if the stack was full.
    pub fn push(&mut self, item: LabeledImage) -> Option<LabeledImage> {
        let evicted = if self.entries.len() == self.capacity {
            self.evicted += 1;
            Some(self.entries.remove(0).image)
        } else {
            None
        };
        self.entries.push(StackEntry {
            image: item,
            pushed_at: self.total_pushed,
        });
        self.total_pushed += 1;
        evicted
    }

    pub fn pop(&mut self) -> Option<LabeledImage> {
        self.entries.pop().map(|e| e.image)
    }

    pub fn peek(&self) -> Option<&LabeledImage> {
        self.entries.last().map(|e| &e.image)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total_pushed(&self) -> u64 {
        self.total_pushed
    }

    pub fn evicted(&self) -> u64 {
        self.evicted
    }

    /// Entries from bottom (oldest) to top.
    pub fn entries(&self) -> &[StackEntry] {
        &self.entries
    }

    /// Images from bottom to top.
    pub fn images(&self) -> Vec<LabeledImage> {
        self.entries.iter().map(|e| e.image.clone()).collect()
    }

    /// Empties the stack. Lifetime counters are kept.
    pub fn reset(&mut self) {
        self.entries.clear();
    }

    /// Moves every entry onto `dest` so that this stack's top ends up on top of `dest`.
    pub fn transfer_into(&mut self, dest: &mut ReFeedStack) -> TransferReport {
        let mut report = TransferReport::default();
        for entry in self.entries.drain(..) {
            if dest.push(entry.image).is_some() {
                report.evicted += 1;
            }
            report.moved += 1;
        }
        report
    }

    pub fn to_lines(&self) -> Vec<StackLine> {
        self.entries
            .iter()
            .map(|e| StackLine {
                source_id: e.image.source_id.clone(),
                class: e.image.label,
                pushed_at: e.pushed_at,
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.to_lines()
            .iter()
            .map(|l| serde_json::to_string(l).expect("stack line serializes") + "\n")
            .collect()
    }

    /// Rebuilds a stack from its log. Pixels come from `resolve(source_id)`.
    ///
    /// The lifetime push counter resumes after the largest logged sequence
    /// number; the eviction counter restarts at zero.
    pub fn from_jsonl(
        text: &str,
        capacity: usize,
        origin: &Path,
        mut resolve: impl FnMut(&str) -> Result<Tensor<f64>>,
    ) -> Result<Self> {
        let mut stack = Self::new(capacity)?;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::StateFile {
                path: origin.to_path_buf(),
                line: n + 1,
                reason,
            };
            let parsed: StackLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let pixels = resolve(&parsed.source_id).map_err(|e| bad(e.to_string()))?;
            let image = LabeledImage::new(pixels, parsed.class, parsed.source_id)
                .map_err(|e| bad(e.to_string()))?;
            if stack.entries.len() == capacity {
                stack.entries.remove(0);
            }
            stack.entries.push(StackEntry {
                image,
                pushed_at: parsed.pushed_at,
            });
            stack.total_pushed = stack.total_pushed.max(parsed.pushed_at + 1);
        }
        Ok(stack)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::datasets::synth_scene;

    fn item(i: u64) -> LabeledImage {
        synth_scene(TrafficClass::from_index(i as usize % 4).unwrap(), i)
    }

    #[test]
    fn push_and_pop_are_lifo() {
        let mut s = ReFeedStack::new(10).unwrap();
        assert!(s.push(item(1)).is_none());
        assert_eq!(s.len(), 1);
        s.push(item(2));
        s.push(item(3));
        let popped: Vec<_> = std::iter::from_fn(|| s.pop()).collect();
        assert_eq!(popped, vec![item(3), item(2), item(1)]);
    }

    #[test]
    fn full_stack_evicts_oldest() {
        let mut s = ReFeedStack::new(3).unwrap();
        for i in 1..=3 {
            s.push(item(i));
        }
        assert_eq!(s.push(item(4)), Some(item(1)));
        assert_eq!(s.len(), 3);
        assert_eq!(s.entries()[0].image, item(2));
        assert_eq!(s.total_pushed(), 4);
        assert_eq!(s.evicted(), 1);
    }

    #[test]
    fn reset_empties_but_keeps_counters() {
        let mut s = ReFeedStack::new(3).unwrap();
        s.push(item(1));
        s.push(item(1));
        assert_eq!(s.len(), 2, "duplicates are kept");
        s.reset();
        assert!(s.is_empty());
        assert_eq!(s.total_pushed(), 2);
    }

    #[test]
    fn zero_capacity_rejected() {
        assert!(ReFeedStack::new(0).is_err());
        assert_eq!(ReFeedStack::capacity_for(400, 0.10), 40);
        assert_eq!(ReFeedStack::capacity_for(301, 0.10), 31);
        assert_eq!(ReFeedStack::capacity_for(0, 0.10), 1);
    }

    #[test]
    fn transfer_conserves_and_keeps_order() {
        let mut src = ReFeedStack::new(10).unwrap();
        let mut dst = ReFeedStack::new(10).unwrap();
        assert_eq!(src.transfer_into(&mut dst), TransferReport::default());
        for i in 0..5 {
            src.push(item(i));
        }
        dst.push(item(100));
        let report = src.transfer_into(&mut dst);
        assert_eq!(report, TransferReport { moved: 5, evicted: 0 });
        assert!(src.is_empty());
        assert_eq!(dst.len(), 6);
        assert_eq!(dst.peek(), Some(&item(4)));
    }

    #[test]
    fn transfer_reports_overflow_evictions() {
        let mut src = ReFeedStack::new(10).unwrap();
        let mut dst = ReFeedStack::new(4).unwrap();
        for i in 0..3 {
            dst.push(item(i));
        }
        for i in 10..15 {
            src.push(item(i));
        }
        let report = src.transfer_into(&mut dst);
        assert_eq!(report.evicted, 4);
        assert_eq!(dst.len(), 4);
    }

    #[test]
    fn jsonl_round_trip_with_resolver() {
        let mut s = ReFeedStack::new(5).unwrap();
        for i in 0..7 {
            s.push(item(i));
        }
        let text = s.to_jsonl();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with(r#"{"source_id":"synth:target:Heavy:2","class":"Heavy","pushed_at":2}"#));
        let back = ReFeedStack::from_jsonl(&text, 5, Path::new("stack.jsonl"), |id| {
            let seed: u64 = id.rsplit(':').next().unwrap().parse().unwrap();
            Ok(item(seed).pixels)
        })
        .unwrap();
        assert_eq!(back.entries(), s.entries());
        assert_eq!(back.total_pushed(), 7);
    }

    #[test]
    fn malformed_log_line_reports_position() {
        let err = ReFeedStack::from_jsonl("\n{oops\n", 3, Path::new("s.jsonl"), |_| unreachable!())
            .unwrap_err();
        assert!(matches!(err, Error::StateFile { line: 2, .. }));
    }

    proptest! {
        #[test]
        fn never_exceeds_capacity(cap in 1usize..8, pushes in 0u64..30) {
            let mut s = ReFeedStack::new(cap).unwrap();
            for i in 0..pushes {
                s.push(item(i));
                prop_assert!(s.len() <= cap);
            }
            prop_assert_eq!(s.len() as u64, pushes.min(cap as u64));
            prop_assert_eq!(s.evicted(), pushes.saturating_sub(cap as u64));
        }
    }
}
