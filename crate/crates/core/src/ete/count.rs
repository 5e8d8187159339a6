//! Closed-form trainable-parameter counts.
//!
//! Counting is analytic so the billion-parameter configuration can be verified
//! without allocating it; a test cross-checks the formula against a fully
//! built small model.

use serde::{Deserialize, Serialize};

use super::EteConfig;
use crate::tokenizer::vocabulary_size;

/// Encoder configuration plus the graph network depth that shares its widths.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullConfig {
    pub ete: EteConfig,
    pub teg_layers: usize,
}

impl FullConfig {
    pub fn base() -> Self {
        Self { ete: EteConfig::base(), teg_layers: 3 }
    }

    pub fn large() -> Self {
        Self { ete: EteConfig::large(), teg_layers: 3 }
    }

    pub fn huge() -> Self {
        Self { ete: EteConfig::huge(), teg_layers: 4 }
    }

    pub fn giant() -> Self {
        Self { ete: EteConfig::giant(), teg_layers: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub vocabulary: u64,
    pub encoder: u64,
    pub graph: u64,
}

impl ParamCount {
    pub fn total(&self) -> u64 {
        self.vocabulary + self.encoder + self.graph
    }
}

/// Exact trainable-parameter count of vocabulary + encoder + graph network
/// (task heads excluded; they depend on the registered tasks).
///
/// Encoder per layer: two norm scales, Q/K/V/O projections (4·d²), SwiGLU
/// feed-forward (3·d·I). Stem: input projection with bias, `max_len` learned
/// positions, final norm, two-layer prediction head with biases. Graph layer:
/// two norm scales, per-head attention maps (d·d total) with scoring vectors
/// (2·d total), and a two-matrix feed-forward (2·d·I).
pub fn count_parameters(cfg: &FullConfig) -> ParamCount {
    let v = vocabulary_size() as u64;
    let d = cfg.ete.hidden as u64;
    let c = cfg.ete.token_width as u64;
    let i = cfg.ete.intermediate as u64;
    let l = cfg.ete.layers as u64;
    let k = cfg.teg_layers as u64;
    let max_len = cfg.ete.max_seq_len as u64;

    let vocabulary = v * c;
    let per_block = 2 * d + 4 * d * d + 3 * d * i;
    let encoder = (c * d + d)            // input projection
        + max_len * d                    // positions
        + l * per_block
        + d                              // final norm
        + (d * d + d)                    // head layer 1
        + (d * c + c); // head layer 2
    let per_graph_layer = 2 * d          // norms
        + d * d                          // per-head maps, concatenated
        + 2 * d                          // scoring vectors a (2·head_size × heads)
        + 2 * d * i; // feed-forward
    let graph = v * d + c + k * per_graph_layer;

    ParamCount {
        vocabulary,
        encoder,
        graph,
    }
}
