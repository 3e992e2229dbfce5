//! The full change-detection network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_input_size, stage_size, Encoder, EncoderConfig, Pyramid};
use crate::csa::{temporal_difference_vars, Csa, CsaConfig};
use crate::decoder::{Decoder, DecoderBlocks, EsaConfig, MsfConfig, PredictionSet, PredictionVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Builder, Ctx, ParamStore};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Component switches; all `true` is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default = "yes")]
    pub use_csa: bool,
    #[serde(default = "yes")]
    pub use_msf: bool,
    #[serde(default = "yes")]
    pub use_esa: bool,
}

fn yes() -> bool {
    true
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_csa: true,
            use_msf: true,
            use_esa: true,
        }
    }
}

impl Ablation {
    /// Short label such as `full` or `w/o CSA+ESA`.
    pub fn label(&self) -> String {
        let removed: Vec<&str> = [
            (self.use_csa, "CSA"),
            (self.use_msf, "MSF"),
            (self.use_esa, "ESA"),
        ]
        .iter()
        .filter(|(on, _)| !on)
        .map(|(_, n)| *n)
        .collect();
        if removed.is_empty() {
            "full".into()
        } else {
            format!("w/o {}", removed.join("+"))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub csa: CsaConfig,
    #[serde(default)]
    pub msf: MsfConfig,
    #[serde(default)]
    pub esa: EsaConfig,
    #[serde(default)]
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.csa.validate()?;
        self.msf.validate()?;
        self.esa.validate()?;
        let widths = self.decoder_channels();
        if self.ablation.use_esa {
            for (k, &c) in widths.iter().enumerate() {
                let heads = self.esa.heads_for(c);
                if c % heads != 0 {
                    return Err(Error::config(
                        "esa.head_count",
                        format!("level {} width {c} does not split into {heads} heads", k + 1),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Channel widths reaching the decoder, finest first.
    pub fn decoder_channels(&self) -> [usize; 4] {
        let enc = self.encoder.channels();
        if self.ablation.use_csa {
            [0, 1, 2, 3].map(|k| self.csa.branches[k].out_channels.unwrap_or(enc[k]))
        } else {
            enc
        }
    }
}

/// Intermediate and final graph values of one forward pass.
pub struct ModelOutput<'g, T: Scalar> {
    pub features: (Pyramid<Var<'g, T>>, Pyramid<Var<'g, T>>),
    pub aggregated: (Pyramid<Var<'g, T>>, Pyramid<Var<'g, T>>),
    pub difference: Pyramid<Var<'g, T>>,
    pub predictions: PredictionVars<'g, T>,
}

pub struct RctNet<T: Scalar> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    encoder: Encoder,
    csa: Option<Csa>,
    decoder: Decoder,
}

impl<T: Scalar> RctNet<T> {
    /// Builds the network with parameters drawn from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let encoder = Encoder::new(&mut b.sub("encoder"), &cfg.encoder)?;
        let csa = if cfg.ablation.use_csa {
            Some(Csa::new(&mut b.sub("csa"), &cfg.csa, cfg.encoder.channels())?)
        } else {
            None
        };
        let decoder = Decoder::new(
            &mut b.sub("decoder"),
            cfg.decoder_channels(),
            &cfg.msf,
            &cfg.esa,
            DecoderBlocks {
                msf: cfg.ablation.use_msf,
                esa: cfg.ablation.use_esa,
            },
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            csa,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn csa(&self) -> Option<&Csa> {
        self.csa.as_ref()
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Forward pass over `[n, c, h, w]` image batches.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_, T>, t1: Var<'g, T>, t2: Var<'g, T>) -> Result<ModelOutput<'g, T>> {
        let (s1, s2) = (t1.shape(), t2.shape());
        if s1 != s2 {
            return Err(Error::shape("bitemporal pair", &s1, &s2));
        }
        if s1.len() != 4 {
            return Err(Error::InvalidInput(format!("expected NCHW images, got {s1:?}")));
        }
        check_input_size(s1[2], s1[3])?;
        let n = s1[0];
        let split = |p: &Pyramid<Var<'g, T>>| (p.map(|v| v.narrow_batch(0, n)), p.map(|v| v.narrow_batch(n, n)));

        let joint = self.encoder.forward(ctx, ops::concat(&[t1, t2], 0))?;
        let features = split(&joint);
        let aggregated = match &self.csa {
            Some(csa) => split(&csa.forward(ctx, &joint)?),
            None => features.clone(),
        };
        let difference = temporal_difference_vars(&aggregated.0, &aggregated.1)?;
        let predictions = self.decoder.forward(ctx, &difference, s1[2], s1[3])?;
        Ok(ModelOutput {
            features,
            aggregated,
            difference,
            predictions,
        })
    }

    /// Evaluation-mode prediction for image batches `[n, c, h, w]`.
    pub fn predict(&self, t1: &Tensor<T>, t2: &Tensor<T>) -> Result<PredictionSet<T>> {
        let graph = Graph::inference();
        let ctx = Ctx::new(&graph, &self.store, false);
        let out = self.forward(&ctx, graph.constant(t1.clone()), graph.constant(t2.clone()))?;
        let probs = out.predictions.0.map(|v| v.value().as_ref().clone());
        Ok(PredictionSet::from_probs(probs))
    }

    /// Parameter count summed from each layer's closed form.
    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.csa.as_ref().map_or(0, Csa::num_params) + self.decoder.num_params()
    }

    /// Estimated FLOPs of one forward pass on an `h x w` pair (two encoder
    /// passes, two CSA passes, one decoder pass).
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let sizes = [1, 2, 3, 4].map(|k| stage_size(h, w, k));
        2 * self.encoder.flops(h, w) + 2 * self.csa.as_ref().map_or(0, |c| c.flops(sizes)) + self.decoder.flops(sizes)
    }
}
