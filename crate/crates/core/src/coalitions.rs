//! The four masked decoder states needed for a two-player interaction.
//!
//! | condition | image slots      | text positions |
//! |-----------|------------------|----------------|
//! | `Full`    | projected image  | real tokens    |
//! | `VOnly`   | projected image  | pad            |
//! | `TOnly`   | zeros            | real tokens    |
//! | `None`    | zeros            | pad            |
//!
//! The image is projected once per episode. Each condition keeps its own
//! incremental cache; the three auxiliary conditions are evaluated together
//! in one batched sweep over the layers.
//!
//! Step protocol: the caches hold every committed position, and each
//! condition carries one *pending* query token that has not been committed
//! yet. A decode step runs the pending token (without committing), picks the
//! next token, then [`CoalitionCaches::append_committed_token`] commits the
//! pending keys/values and makes the chosen token pending.

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, ForwardItem, ForwardResult, KvCache, StepKv};
use crate::error::{Error, Result};
use crate::intervention::InterventionPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoalitionId {
    Full,
    VOnly,
    TOnly,
    None,
}

impl CoalitionId {
    pub const ALL: [CoalitionId; 4] = [Self::Full, Self::VOnly, Self::TOnly, Self::None];
    pub const AUXILIARY: [CoalitionId; 3] = [Self::VOnly, Self::TOnly, Self::None];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn sees_image(self) -> bool {
        matches!(self, Self::Full | Self::VOnly)
    }

    pub fn sees_text(self) -> bool {
        matches!(self, Self::Full | Self::TOnly)
    }
}

/// How text is masked in the image-only and empty conditions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskingOptions {
    /// Leading prompt tokens (e.g. BOS or a system preamble) that stay
    /// visible in every condition. Zero pads every text position.
    pub keep_system_prefix: usize,
}

/// Logits of the three masked conditions for the current step, plus the
/// keys/values needed to commit the pending position later.
#[derive(Debug, Clone)]
pub struct AuxForwards {
    pub v_only: ForwardResult,
    pub t_only: ForwardResult,
    pub none: ForwardResult,
}

impl AuxForwards {
    pub fn logits(&self, id: CoalitionId) -> &[f64] {
        match id {
            CoalitionId::VOnly => &self.v_only.logits,
            CoalitionId::TOnly => &self.t_only.logits,
            CoalitionId::None => &self.none.logits,
            CoalitionId::Full => panic!("FULL is not an auxiliary condition"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoalitionCaches {
    caches: [KvCache; 4],
    pending: [usize; 4],
    pad_token: usize,
    prompt_len: usize,
    /// Decode-step forwards per condition.
    forwards: [usize; 4],
    /// Forwards spent committing the image and prompt prefix.
    prefill_forwards: usize,
}

impl CoalitionCaches {
    /// Encode the image once and seed all four conditions with the image
    /// slots and every prompt token but the last, which becomes pending.
    pub fn init_episode(
        decoder: &mut Decoder<'_>,
        image_features: &[Vec<f64>],
        prompt: &[usize],
        masking: MaskingOptions,
    ) -> Result<Self> {
        let Some((&last, committed)) = prompt.split_last() else {
            return Err(Error::Argument("prompt must not be empty".into()));
        };
        let cfg = decoder.config();
        let pad = cfg.pad_token;
        let vision = decoder.encode_vision(image_features)?;
        let mut prefill_forwards = 0;

        let mut seen = KvCache::new(cfg);
        for e in &vision.embeddings {
            decoder.forward_step(&mut seen, e, None, true)?;
            prefill_forwards += 1;
        }
        let mut blind = KvCache::new(cfg);
        let zero = vec![0.0; cfg.d_model];
        for _ in 0..cfg.n_visual_slots {
            decoder.forward_step(&mut blind, &zero, None, true)?;
            prefill_forwards += 1;
        }

        let mut caches = [seen.clone(), seen, blind.clone(), blind];
        let masked = |i: usize, tok: usize| if i < masking.keep_system_prefix { tok } else { pad };
        let weights = decoder.weights();
        for id in CoalitionId::ALL {
            let cache = &mut caches[id.index()];
            for (i, &tok) in committed.iter().enumerate() {
                let tok = if id.sees_text() { tok } else { masked(i, tok) };
                decoder.forward_step(cache, &weights.embed_token(tok)?, None, true)?;
                prefill_forwards += 1;
            }
            cache.set_origin(cache.len());
        }

        let last_masked = masked(committed.len(), last);
        let pending = CoalitionId::ALL.map(|id| if id.sees_text() { last } else { last_masked });
        Ok(Self {
            caches,
            pending,
            pad_token: pad,
            prompt_len: prompt.len(),
            forwards: [0; 4],
            prefill_forwards,
        })
    }

    pub fn cache(&self, id: CoalitionId) -> &KvCache {
        &self.caches[id.index()]
    }

    pub fn pending_token(&self, id: CoalitionId) -> usize {
        self.pending[id.index()]
    }

    /// Committed length shared by all conditions.
    pub fn len(&self) -> usize {
        self.caches[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn lengths(&self) -> [usize; 4] {
        self.caches.each_ref().map(KvCache::len)
    }

    pub fn forwards(&self, id: CoalitionId) -> usize {
        self.forwards[id.index()]
    }

    pub fn total_forwards(&self) -> usize {
        self.forwards.iter().sum()
    }

    pub fn prefill_forwards(&self) -> usize {
        self.prefill_forwards
    }

    /// Run the pending query of one condition without committing it.
    pub fn forward(
        &mut self,
        decoder: &Decoder<'_>,
        id: CoalitionId,
        plan: Option<&InterventionPlan>,
    ) -> Result<ForwardResult> {
        let emb = decoder.weights().embed_token(self.pending[id.index()])?;
        let mut result = decoder.forward_batch(&[ForwardItem {
            cache: &self.caches[id.index()],
            embedding: &emb,
            plan,
        }])?;
        self.forwards[id.index()] += 1;
        Ok(result.pop().expect("one result"))
    }

    /// Logits of one condition for the current step.
    pub fn logits(&mut self, decoder: &Decoder<'_>, id: CoalitionId) -> Result<Vec<f64>> {
        Ok(self.forward(decoder, id, None)?.logits)
    }

    /// The three masked conditions in a single batched pass.
    pub fn auxiliary_logits(&mut self, decoder: &Decoder<'_>) -> Result<AuxForwards> {
        let w = decoder.weights();
        let embs = CoalitionId::AUXILIARY
            .map(|id| w.embed_token(self.pending[id.index()]))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<ForwardItem<'_>> = CoalitionId::AUXILIARY
            .iter()
            .zip(&embs)
            .map(|(id, e)| ForwardItem {
                cache: &self.caches[id.index()],
                embedding: e,
                plan: None,
            })
            .collect();
        let mut out = decoder.forward_batch(&items)?.into_iter();
        for id in CoalitionId::AUXILIARY {
            self.forwards[id.index()] += 1;
        }
        Ok(AuxForwards {
            v_only: out.next().expect("three results"),
            t_only: out.next().expect("three results"),
            none: out.next().expect("three results"),
        })
    }

    /// Same as [`Self::auxiliary_logits`] but one condition at a time.
    pub fn auxiliary_logits_sequential(&mut self, decoder: &Decoder<'_>) -> Result<AuxForwards> {
        Ok(AuxForwards {
            v_only: self.forward(decoder, CoalitionId::VOnly, None)?,
            t_only: self.forward(decoder, CoalitionId::TOnly, None)?,
            none: self.forward(decoder, CoalitionId::None, None)?,
        })
    }

    /// Commit this step's pending positions and make `chosen` the next query.
    /// The text stream stays masked in the image-only and empty conditions.
    pub fn append_committed_token(&mut self, full_kv: &StepKv, aux: &AuxForwards, chosen: usize) -> Result<()> {
        let kvs = [full_kv, &aux.v_only.kv, &aux.t_only.kv, &aux.none.kv];
        // Check up front so a full cache never leaves the conditions out of step.
        for cache in &self.caches {
            cache.check_room()?;
        }
        for (cache, kv) in self.caches.iter_mut().zip(kvs) {
            cache.push(kv)?;
        }
        for id in CoalitionId::ALL {
            self.pending[id.index()] = if id.sees_text() { chosen } else { self.pad_token };
        }
        debug_assert!(self.lengths().iter().all(|&l| l == self.len()));
        Ok(())
    }
}
