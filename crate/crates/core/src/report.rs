//! Run metrics and the analytic operation count.
//!
//! Records are single lines of space-separated `key=value` fields in a fixed
//! order, so they can be parsed by splitting on whitespace.

use std::fmt::Write as _;

use crate::model::ModelConfig;

/// Per-image operation counts of one forward pass.
///
/// Binary operations (`bops`) are ±1 multiply-accumulates done with XNOR and
/// popcount. Float operations (`flops`) count one per full-precision
/// multiply-accumulate and one per element of every elementwise float step:
///
/// | term | bops | flops |
/// |---|---|---|
/// | patch embedding | | `N·P·C + 2·N·C` (product, bias, position) |
/// | Q, K projections | `2·N·C²` | |
/// | V, output projections | `2·N·C²` | |
/// | similarity, attention apply | `2·N²·C` | |
/// | MLP | `2·N·C·H` | |
/// | layer norms | | `2·N·C` |
/// | shortcuts and residuals | | `6·N·C` |
/// | softmax | | `heads·N²` |
/// | activation | | `N·H` |
/// | Haar bands (frequency Q/K) | | `2·N·C` |
/// | negative neighbourhood (DIBA) | `9·N·C` | `5·N·C` (scales and sums) |
/// | final norm, pooling | | `2·N·C` |
/// | classifier | | `C·K + K` |
///
/// The full-precision model moves every `bops` term except the DIBA one into
/// `flops` and has no shortcut adds around the projections (`3·N·C` instead
/// of `6·N·C`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpsReport {
    pub bops: u64,
    pub flops: u64,
}

impl OpsReport {
    /// `BOPs / 64 + FLOPs`.
    pub fn ops(&self) -> f64 {
        self.bops as f64 / 64.0 + self.flops as f64
    }

    pub fn for_config(cfg: &ModelConfig) -> Self {
        let n = cfg.tokens() as u64;
        let c = cfg.embed_dim as u64;
        let h = cfg.hidden_dim() as u64;
        let p = cfg.patch_dim() as u64;
        let k = cfg.classes as u64;
        let heads = cfg.heads as u64;
        let products = 4 * n * c * c + 2 * n * n * c + 2 * n * c * h;
        let mut block_bops = 0;
        let mut block_flops = 2 * n * c + heads * n * n + n * h;
        if cfg.binary {
            block_bops += products;
            block_flops += 6 * n * c;
        } else {
            block_flops += products + 3 * n * c;
        }
        if cfg.use_hfsc {
            block_flops += 2 * n * c;
        }
        if cfg.use_diba {
            block_bops += 9 * n * c;
            block_flops += 5 * n * c;
        }
        let depth = cfg.depth as u64;
        let flops = n * p * c + 2 * n * c + depth * block_flops + 2 * n * c + c * k + k;
        Self {
            bops: depth * block_bops,
            flops,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "kind=ops bops={} flops={} ops={:.1}",
            self.bops,
            self.flops,
            self.ops()
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub wall_s: f64,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        format!(
            "kind=epoch epoch={} loss={:.6} train_acc={:.4} test_acc={:.4} lr={:.6e} wall_s={:.2}",
            self.epoch, self.loss, self.train_acc, self.test_acc, self.lr, self.wall_s
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub label: String,
    pub params: usize,
    pub epochs: Vec<EpochRecord>,
    pub ops: OpsReport,
    pub wall_s: f64,
}

impl RunReport {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_acc)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kind=run label={} params={}", self.label, self.params);
        for e in &self.epochs {
            let _ = writeln!(s, "{}", e.line());
        }
        let _ = writeln!(s, "{}", self.ops.line());
        let _ = writeln!(
            s,
            "kind=final test_acc={:.4} wall_s={:.2}",
            self.final_accuracy().unwrap_or(f64::NAN),
            self.wall_s
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn fields_keep_their_order() {
        let e = EpochRecord {
            epoch: 3,
            loss: 1.25,
            train_acc: 0.5,
            test_acc: 0.25,
            lr: 5e-4,
            wall_s: 1.0,
        };
        let line = e.line();
        let keys: Vec<&str> = line
            .split(' ')
            .map(|kv| kv.split_once('=').unwrap().0)
            .collect();
        assert_eq!(
            keys,
            [
                "kind",
                "epoch",
                "loss",
                "train_acc",
                "test_acc",
                "lr",
                "wall_s"
            ]
        );
    }

    #[test]
    fn switches_add_their_terms() {
        let base = OpsReport::for_config(&ModelConfig::toy().with_variant(Variant::Baseline));
        let diba = OpsReport::for_config(&ModelConfig::toy().with_variant(Variant::Diba));
        let hf = OpsReport::for_config(&ModelConfig::toy().with_variant(Variant::DibaHfsc));
        // 2 blocks × 9·16·64 neighbourhood bops
        assert_eq!(diba.bops - base.bops, 2 * 9 * 16 * 64);
        assert_eq!(diba.flops - base.flops, 2 * 5 * 16 * 64);
        assert_eq!(hf.flops - diba.flops, 2 * 2 * 16 * 64);
        assert_eq!(hf.bops, diba.bops);
        let teacher = OpsReport::for_config(&ModelConfig::toy().teacher());
        assert_eq!(teacher.bops, 0);
        assert!(teacher.ops() > base.ops());
    }
}
