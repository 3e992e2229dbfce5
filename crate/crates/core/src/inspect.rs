//! Parameter and FLOP accounting.
//!
//! Convolutions cost `2 K^2 Cin Cout H W` over their output extent and each
//! attention product costs `2 N (N/R) C`. The encoder and CSA are counted
//! once per date.

use serde::{Deserialize, Serialize};

use crate::backbone::stage_size;
use crate::error::Result;
use crate::model::{ModelConfig, RctNet};

pub const INSPECT_SIZE: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCost {
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub input: (usize, usize),
    pub ablation: String,
    /// Sum of every stored parameter tensor.
    pub params: usize,
    /// Sum of the per-layer closed forms; equals `params`.
    pub params_by_formula: usize,
    pub flops: u64,
    pub encoder: ComponentCost,
    pub csa: ComponentCost,
    pub decoder: ComponentCost,
}

impl InspectReport {
    pub fn summary(&self) -> String {
        format!(
            "input {}x{} ({})\nparams  {:>12} ({:.3} M)\nflops   {:>12} ({:.3} G)\n  encoder  {:>10} params {:>14} flops (x2 dates)\n  csa      {:>10} params {:>14} flops (x2 dates)\n  decoder  {:>10} params {:>14} flops",
            self.input.0,
            self.input.1,
            self.ablation,
            self.params,
            self.params as f64 / 1e6,
            self.flops,
            self.flops as f64 / 1e9,
            self.encoder.params,
            self.encoder.flops,
            self.csa.params,
            self.csa.flops,
            self.decoder.params,
            self.decoder.flops,
        )
    }
}

pub fn inspect(cfg: &ModelConfig, h: usize, w: usize) -> Result<InspectReport> {
    crate::backbone::check_input_size(h, w)?;
    let model = RctNet::<f32>::new(cfg, 0)?;
    let sizes = [1, 2, 3, 4].map(|k| stage_size(h, w, k));
    let encoder = ComponentCost {
        params: model.encoder().num_params(),
        flops: 2 * model.encoder().flops(h, w),
    };
    let csa = ComponentCost {
        params: model.csa().map_or(0, |c| c.num_params()),
        flops: 2 * model.csa().map_or(0, |c| c.flops(sizes)),
    };
    let decoder = ComponentCost {
        params: model.decoder().num_params(),
        flops: model.decoder().flops(sizes),
    };
    Ok(InspectReport {
        input: (h, w),
        ablation: cfg.ablation.label(),
        params: model.store().num_params(),
        params_by_formula: model.num_params(),
        flops: model.flops(h, w),
        encoder,
        csa,
        decoder,
    })
}
