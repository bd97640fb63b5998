use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A stored training dialog of an earlier task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub task: usize,
    pub dialog: usize,
}

/// Whole dialogs kept from finished tasks, a fixed quota per task.
#[derive(Clone, Debug)]
pub struct RehearsalBuffer {
    per_task: usize,
    entries: Vec<BufferEntry>,
    rng: ChaCha8Rng,
}

impl RehearsalBuffer {
    pub fn new(per_task: usize, seed: u64) -> Self {
        Self {
            per_task,
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stores `min(per_task, dialogs)` randomly chosen dialogs of `task`.
    pub fn add_task(&mut self, task: usize, dialogs: usize) {
        let k = self.per_task.min(dialogs);
        let mut picked = index::sample(&mut self.rng, dialogs, k).into_vec();
        picked.sort_unstable();
        self.entries.extend(picked.into_iter().map(|dialog| BufferEntry { task, dialog }));
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_for(&self, task: usize) -> usize {
        self.entries.iter().filter(|e| e.task == task).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_and_determinism() {
        let mut a = RehearsalBuffer::new(50, 3);
        let mut b = RehearsalBuffer::new(50, 3);
        for t in 0..3 {
            a.add_task(t, 120);
            b.add_task(t, 120);
        }
        assert_eq!(a.len(), 150);
        assert_eq!(a.entries(), b.entries());
        assert!((0..3).all(|t| a.count_for(t) == 50));
        let mut c = RehearsalBuffer::new(50, 4);
        c.add_task(0, 120);
        assert_ne!(c.entries(), &a.entries()[..50]);
    }

    #[test]
    fn small_task_is_stored_whole() {
        let mut buf = RehearsalBuffer::new(50, 0);
        buf.add_task(0, 7);
        assert_eq!(buf.len(), 7);
        let mut zero = RehearsalBuffer::new(0, 0);
        zero.add_task(0, 7);
        assert!(zero.is_empty());
    }
}
