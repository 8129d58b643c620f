use crate::error::{Error, Result};

/// Maps each sparse entry to the segment (destination) it is normalized or
/// reduced within. Entries of one segment need not be contiguous.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentIndex {
    entry_segment: Vec<usize>,
    segment_count: usize,
}

impl SegmentIndex {
    pub fn new(entry_segment: Vec<usize>, segment_count: usize) -> Result<Self> {
        if let Some((i, &s)) = entry_segment
            .iter()
            .enumerate()
            .find(|(_, &s)| s >= segment_count)
        {
            return Err(Error::InvalidParameter(format!(
                "entry {i} maps to segment {s}, but only {segment_count} segments exist"
            )));
        }
        Ok(Self {
            entry_segment,
            segment_count,
        })
    }

    pub fn entries(&self) -> &[usize] {
        &self.entry_segment
    }

    pub fn entry_count(&self) -> usize {
        self.entry_segment.len()
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }

    /// Number of entries per segment.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.segment_count];
        for &s in &self.entry_segment {
            sizes[s] += 1;
        }
        sizes
    }
}
