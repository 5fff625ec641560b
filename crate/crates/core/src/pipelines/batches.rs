//! Location-stratified mini-batches: rows are cut into small same-location
//! chunks and each batch joins several chunks, so every batch spans
//! several locations with a few rows each.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::losses::LocationId;

#[derive(Clone, Debug)]
pub struct StratifiedBatches {
    by_location: Vec<Vec<usize>>,
    batch: usize,
    rows_per_location: usize,
}

impl StratifiedBatches {
    /// `locations` gives the location of every row.
    pub fn new(locations: &[LocationId], batch: usize, rows_per_location: usize) -> Self {
        let mut by: std::collections::BTreeMap<LocationId, Vec<usize>> = Default::default();
        for (i, &l) in locations.iter().enumerate() {
            by.entry(l).or_default().push(i);
        }
        StratifiedBatches {
            by_location: by.into_values().collect(),
            batch: batch.max(1),
            rows_per_location: rows_per_location.clamp(1, batch.max(1)),
        }
    }

    pub fn rows(&self) -> usize {
        self.by_location.iter().map(Vec::len).sum()
    }

    /// One shuffled pass over all rows.
    pub fn epoch(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut chunks: Vec<(usize, Vec<usize>)> = Vec::new();
        for (loc, rows) in self.by_location.iter().enumerate() {
            let mut rows = rows.clone();
            rows.shuffle(rng);
            chunks.extend(
                rows.chunks(self.rows_per_location)
                    .map(|c| (loc, c.to_vec())),
            );
        }
        chunks.shuffle(rng);
        let per_batch = (self.batch / self.rows_per_location).max(2);
        let mut batches: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for group in chunks.chunks(per_batch) {
            let locs: Vec<usize> = group.iter().map(|(l, _)| *l).collect();
            let rows: Vec<usize> = group.iter().flat_map(|(_, r)| r.iter().copied()).collect();
            batches.push((locs, rows));
        }
        // a trailing batch from a single location joins the previous one
        if batches.len() > 1 {
            let last = &batches[batches.len() - 1].0;
            if last.iter().all(|l| *l == last[0]) {
                let (locs, rows) = batches.pop().expect("len > 1");
                let prev = batches.last_mut().expect("len > 1");
                prev.0.extend(locs);
                prev.1.extend(rows);
            }
        }
        batches.into_iter().map(|(_, r)| r).collect()
    }
}

/// Endless stream of stratified batches, reshuffled after every pass.
#[derive(Clone, Debug)]
pub struct BatchStream {
    sampler: StratifiedBatches,
    rng: ChaCha8Rng,
    queue: Vec<Vec<usize>>,
}

impl BatchStream {
    pub fn new(sampler: StratifiedBatches, rng: ChaCha8Rng) -> Self {
        BatchStream {
            sampler,
            rng,
            queue: Vec::new(),
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.queue = self.sampler.epoch(&mut self.rng);
            self.queue.reverse();
        }
        self.queue.pop().expect("sampler yields at least one batch")
    }
}
