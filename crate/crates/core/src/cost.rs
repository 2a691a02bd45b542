//! Closed-form communication and computation cost of a round.

use crate::graph::Topology;

/// Bytes to send a full parameter vector once: `Q_p · N_p`.
pub fn parameter_payload_bytes(num_params: u64, param_bytes: u64) -> u64 {
    param_bytes * num_params
}

/// Bytes to send outputs on the shared set once: `Q_o · K · |D_s|`.
pub fn output_payload_bytes(num_classes: u64, shared_len: u64, output_bytes: u64) -> u64 {
    output_bytes * num_classes * shared_len
}

/// Directed link uses per exchange: `Σ_i |N_i| = 2|E|`.
pub fn link_uses(topology: &Topology) -> u64 {
    2 * topology.num_edges() as u64
}

/// Distillation steps per round: `⌈|D_s| / kd_batch⌉`.
pub fn kd_steps(shared_len: usize, kd_batch: usize) -> usize {
    shared_len.div_ceil(kd_batch)
}

/// Ratio of distillation mini-batch gradient steps to local SGD steps.
/// With one local epoch and equal batch sizes this is `|D_s| / |D_i|`.
pub fn kd_overhead_ratio(shared_len: usize, kd_batch: usize, local_steps: usize) -> f64 {
    kd_steps(shared_len, kd_batch) as f64 / local_steps as f64
}

/// Decimal megabytes, as used for reporting model sizes.
pub fn megabytes(bytes: u64) -> f64 {
    bytes as f64 / 1e6
}

pub fn kilobytes(bytes: u64) -> f64 {
    bytes as f64 / 1e3
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payloads() {
        assert_eq!(output_payload_bytes(10, 100, 8), 8000);
        assert_eq!(parameter_payload_bytes(1_663_432, 4), 6_653_728);
        assert_eq!(output_payload_bytes(10, 1000, 4), 40_000);
        assert_eq!(link_uses(&Topology::ring(10).unwrap()), 20);
    }

    #[test]
    fn overhead() {
        assert_eq!(kd_overhead_ratio(200, 20, 10), 1.0);
        assert_eq!(kd_overhead_ratio(400, 20, 10), 2.0);
        assert_eq!(kd_steps(201, 20), 11);
    }
}
