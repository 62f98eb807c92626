use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::Result;
use crate::nn::{self, FcHead};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Average of the raw region features through an MLP.
#[derive(Debug, Clone)]
pub(super) struct ImageOnly {
    head: FcHead,
}

impl ImageOnly {
    pub(super) fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            head: FcHead::new(
                store,
                "head",
                cfg.region_feature_dim,
                cfg.head_hidden_dim,
                cfg.num_classes,
                rng,
            ),
        }
    }

    pub(super) fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, regions: Var<'t>) -> Result<Var<'t>> {
        let pooled = nn::pool_average(regions, None)?;
        self.head.forward(tape, store, pooled)
    }
}
