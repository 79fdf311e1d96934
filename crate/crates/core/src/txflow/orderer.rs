// SPDX-License-Identifier: Apache-2.0

use std::time::Duration;

use super::Transaction;

/// FIFO block cutter. A batch is cut when it reaches `batch_size` or when
/// `timeout` has elapsed since its first transaction arrived.
///
/// Time is an opaque nanosecond counter supplied by the caller.
#[derive(Debug)]
pub struct Batcher {
    batch_size: usize,
    timeout_ns: u64,
    pending: Vec<Transaction>,
    deadline: Option<u64>,
}

impl Batcher {
    pub fn new(batch_size: u32, timeout: Duration) -> Self {
        Batcher {
            batch_size: batch_size.max(1) as usize,
            timeout_ns: timeout.as_nanos() as u64,
            pending: Vec::new(),
            deadline: None,
        }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    /// When the current batch must be cut, if one is open.
    pub fn deadline(&self) -> Option<u64> {
        self.deadline
    }

    /// Enqueues `tx`. Returns a full batch if this arrival completed one.
    pub fn push(&mut self, tx: Transaction, now_ns: u64) -> Option<Vec<Transaction>> {
        if self.pending.is_empty() {
            self.deadline = Some(now_ns.saturating_add(self.timeout_ns));
        }
        self.pending.push(tx);
        if self.pending.len() >= self.batch_size {
            return Some(self.take());
        }
        None
    }

    /// Cuts the open batch if its deadline has passed.
    pub fn poll(&mut self, now_ns: u64) -> Option<Vec<Transaction>> {
        match self.deadline {
            Some(d) if d <= now_ns && !self.pending.is_empty() => Some(self.take()),
            _ => None,
        }
    }

    fn take(&mut self) -> Vec<Transaction> {
        self.deadline = None;
        std::mem::take(&mut self.pending)
    }
}

/// Offline ordering of a timed arrival sequence. Arrival times must be
/// non-decreasing. Any batch still open at the end is cut at its deadline.
pub fn order(arrivals: Vec<(u64, Transaction)>, batch_size: u32, timeout: Duration) -> Vec<Vec<Transaction>> {
    let mut b = Batcher::new(batch_size, timeout);
    let mut out = Vec::new();
    for (t, tx) in arrivals {
        if let Some(batch) = b.poll(t) {
            out.push(batch);
        }
        if let Some(batch) = b.push(tx, t) {
            out.push(batch);
        }
    }
    if let Some(d) = b.deadline() {
        out.extend(b.poll(d));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::Consortium;
    use crate::txflow::ReadWriteSet;

    fn txs(n: usize) -> Vec<Transaction> {
        let c = Consortium::three_org(9);
        (0..n)
            .map(|i| c.endorse_with("client.org1", &["peer0.org1"], ReadWriteSet::default(), i as u64))
            .collect()
    }

    const MS: u64 = 1_000_000;

    #[test]
    fn size_cut() {
        let arrivals: Vec<_> = txs(25).into_iter().map(|t| (0, t)).collect();
        let blocks = order(arrivals, 10, Duration::from_millis(200));
        assert_eq!(blocks.iter().map(Vec::len).collect::<Vec<_>>(), vec![10, 10, 5]);
    }

    #[test]
    fn timeout_cut() {
        let t = txs(3);
        let arrivals = vec![(0, t[0].clone()), (150 * MS, t[1].clone()), (250 * MS, t[2].clone())];
        let blocks = order(arrivals, 10, Duration::from_millis(200));
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0], vec![t[0].clone(), t[1].clone()]);
        assert_eq!(blocks[1], vec![t[2].clone()]);
    }

    #[test]
    fn fifo_preserved() {
        let t = txs(12);
        let arrivals: Vec<_> = t.iter().cloned().enumerate().map(|(i, x)| (i as u64 * 30 * MS, x)).collect();
        let flat: Vec<_> = order(arrivals, 10, Duration::from_millis(200)).concat();
        assert_eq!(flat, t);
    }
}
