use crate::model::PlainParams;
use crate::numerics::{Matrix, Scalar};
use crate::partition::HostSide;

/// Tensors closer than this to a plain weight count as leaked.
pub const LEAK_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct HostAudit {
    pub tensors_checked: usize,
    pub comparisons: usize,
    /// Smallest max-abs distance between a host tensor and a plain weight.
    pub closest: f64,
    /// Host tensors within [`LEAK_THRESHOLD`] of some plain weight.
    pub leaks: Vec<String>,
}

impl HostAudit {
    pub fn clean(&self) -> bool {
        self.leaks.is_empty()
    }
}

fn plain_weights<T: Scalar>(plain: &PlainParams<T>) -> Vec<Matrix<f64>> {
    plain
        .blocks
        .iter()
        .flat_map(|b| {
            [
                &b.attn.w_q,
                &b.attn.w_k,
                &b.attn.w_v,
                &b.attn.w_o,
                &b.mlp.w_1,
                &b.mlp.w_2,
            ]
        })
        .map(|m| m.cast())
        .collect()
}

/// Compares every host tensor with every plain base weight of the same shape.
pub fn audit_host<T: Scalar>(host: &[(String, Matrix<f64>)], plain: &PlainParams<T>) -> HostAudit {
    let weights = plain_weights(plain);
    let mut audit = HostAudit {
        tensors_checked: host.len(),
        comparisons: 0,
        closest: f64::INFINITY,
        leaks: Vec::new(),
    };
    for (name, m) in host {
        for w in weights.iter().filter(|w| w.shape() == m.shape()) {
            audit.comparisons += 1;
            let d = m.max_abs_diff(w);
            audit.closest = audit.closest.min(d);
            if d <= LEAK_THRESHOLD {
                audit.leaks.push(name.clone());
                break;
            }
        }
    }
    audit
}

impl<T: Scalar> HostSide<T> {
    /// Weight tensors of the host half, widened to f64.
    pub fn audit_tensors(&self) -> Vec<(String, Matrix<f64>)> {
        let mut out = Vec::new();
        for (b, blk) in self.blocks.iter().enumerate() {
            for (name, m) in [
                ("w_q", &blk.attn.w_q),
                ("w_k", &blk.attn.w_k),
                ("w_v", &blk.attn.w_v),
                ("w_o", &blk.attn.w_o),
                ("w_1", &blk.mlp.w_1),
                ("w_2", &blk.mlp.w_2),
            ] {
                out.push((format!("block{b}.{name}"), m.cast()));
            }
        }
        out
    }
}
