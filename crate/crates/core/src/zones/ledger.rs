use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    TeeToHost,
    HostToTee,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::TeeToHost => "tee_to_host",
            Direction::HostToTee => "host_to_tee",
        }
    }
}

/// One transfer of activations (or their gradients) between the zones.
#[derive(Debug, Clone, PartialEq)]
pub struct Crossing {
    pub direction: Direction,
    /// e.g. `attn.in`, `mlp.out`, `attn.grad_in`.
    pub kind: &'static str,
    pub block: usize,
    pub elements: u64,
    pub bytes: u64,
    /// Time since the ledger was opened.
    pub at: Duration,
}

/// Record of everything that crossed the zone boundary during one call.
///
/// Control traffic (session setup, optimizer steps, adapter export) is
/// counted separately from activation crossings.
#[derive(Debug, Clone)]
pub struct ZoneLedger {
    opened: Instant,
    element_size: usize,
    pub crossings: Vec<Crossing>,
    pub control_messages: u64,
    pub control_bytes: u64,
    pub host_time: Duration,
    pub total_time: Duration,
}

impl ZoneLedger {
    pub fn new(element_size: usize) -> Self {
        ZoneLedger {
            opened: Instant::now(),
            element_size,
            crossings: Vec::new(),
            control_messages: 0,
            control_bytes: 0,
            host_time: Duration::ZERO,
            total_time: Duration::ZERO,
        }
    }

    pub fn element_size(&self) -> usize {
        self.element_size
    }

    pub fn record(
        &mut self,
        direction: Direction,
        kind: &'static str,
        block: usize,
        elements: usize,
    ) {
        self.crossings.push(Crossing {
            direction,
            kind,
            block,
            elements: elements as u64,
            bytes: (elements * self.element_size) as u64,
            at: self.opened.elapsed(),
        });
    }

    pub fn record_control(&mut self, elements: usize) {
        self.control_messages += 1;
        self.control_bytes += (elements * self.element_size) as u64;
    }

    pub fn crossing_count(&self) -> usize {
        self.crossings.len()
    }

    pub fn count(&self, direction: Direction) -> usize {
        self.crossings
            .iter()
            .filter(|c| c.direction == direction)
            .count()
    }

    pub fn elements(&self, direction: Direction) -> u64 {
        self.crossings
            .iter()
            .filter(|c| c.direction == direction)
            .map(|c| c.elements)
            .sum()
    }

    pub fn bytes(&self, direction: Direction) -> u64 {
        self.crossings
            .iter()
            .filter(|c| c.direction == direction)
            .map(|c| c.bytes)
            .sum()
    }

    pub fn total_elements(&self) -> u64 {
        self.crossings.iter().map(|c| c.elements).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.crossings.iter().map(|c| c.bytes).sum()
    }

    /// Wall time not spent waiting on the host.
    pub fn tee_time(&self) -> Duration {
        self.total_time.saturating_sub(self.host_time)
    }

    pub(crate) fn close(&mut self) {
        self.total_time = self.opened.elapsed();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_follow_element_size() {
        let mut l = ZoneLedger::new(4);
        l.record(Direction::TeeToHost, "attn.in", 0, 10);
        l.record(Direction::HostToTee, "attn.out", 0, 6);
        assert_eq!(l.crossing_count(), 2);
        assert_eq!(l.total_bytes(), 64);
        assert_eq!(l.bytes(Direction::HostToTee), 24);
        assert_eq!(l.elements(Direction::TeeToHost), 10);
        l.record_control(3);
        assert_eq!(l.crossing_count(), 2);
        assert_eq!(l.control_bytes, 12);
    }
}
