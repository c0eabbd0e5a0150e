//! The full captioner: encoder, decoder, ablation switches, teacher-forced
//! loss and inference.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asg::{Asg, FlowGraph, MultiRelGraph};
use crate::decoder::{
    beam_search, decode_step, greedy, init_state, BeamConfig, DecodeOptions, DecoderParams, DecoderState,
    FlowOperators, Hypothesis, StateVars, StepInfo, Stepper,
};
use crate::encoder::{encode, EncodeOptions, EncoderParams, FeatureBundle};
use crate::error::{Error, Result};
use crate::num::{Gradients, ParamStore, Tape, Tensor, Var};

/// Component switches; `true` keeps the component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub role_embed: bool,
    pub mrgcn: bool,
    pub content_attn: bool,
    pub flow_attn: bool,
    pub graph_update: bool,
    pub beam_search: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { role_embed: true, mrgcn: true, content_attn: true, flow_attn: true, graph_update: true, beam_search: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub vocab_size: usize,
    /// Rows of the attribute position table.
    pub max_attrs: usize,
    pub max_len: usize,
    pub bos: usize,
    pub eos: usize,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn new(dim: usize, vocab_size: usize) -> Self {
        Self { dim, layers: 2, vocab_size, max_attrs: 4, max_len: 20, bos: 1, eos: 2, ablation: Ablation::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if self.dim == 0 || self.vocab_size < 2 || self.max_attrs == 0 || self.max_len == 0 {
            return bad("dim, vocab_size, max_attrs and max_len must be positive (vocab at least 2)");
        }
        if self.bos >= self.vocab_size || self.eos >= self.vocab_size {
            return bad("start and end tokens must lie inside the vocabulary");
        }
        if !self.ablation.content_attn && !self.ablation.flow_attn {
            return bad("at least one of content and flow attention must stay enabled");
        }
        Ok(())
    }

    fn encode_options(&self) -> EncodeOptions {
        EncodeOptions { role_embed: self.ablation.role_embed, layers: if self.ablation.mrgcn { self.layers } else { 0 } }
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            content_attn: self.ablation.content_attn,
            flow_attn: self.ablation.flow_attn,
            graph_update: self.ablation.graph_update,
        }
    }
}

/// Graph-derived structures reused across every pass over one example.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub asg: Asg,
    pub mrg: MultiRelGraph,
    pub flow: FlowOperators,
}

impl Prepared {
    pub fn new(asg: &Asg) -> Result<Self> {
        let mrg = MultiRelGraph::build(asg)?;
        let flow = FlowOperators::new(&FlowGraph::build(asg)?);
        Ok(Self { asg: asg.clone(), mrg, flow })
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    store: ParamStore,
    enc: EncoderParams,
    dec: DecoderParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = EncoderParams::register(&mut store, config.dim, config.layers, config.max_attrs, &mut rng);
        let dec = DecoderParams::register(&mut store, config.dim, config.vocab_size, &mut rng);
        Ok(Self { config, store, enc, dec })
    }

    /// Rebuilds a model around stored weights (for instance a checkpoint).
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let enc = EncoderParams::bind(&store, config.dim, config.layers, config.max_attrs)?;
        let dec = DecoderParams::bind(&store, config.dim, config.vocab_size)?;
        Ok(Self { config, store, enc, dec })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn encoder_params(&self) -> &EncoderParams {
        &self.enc
    }

    pub fn decoder_params(&self) -> &DecoderParams {
        &self.dec
    }

    /// Negative log-likelihood of `caption` followed by the end token, summed
    /// over tokens, recorded on `tape`. Returns the loss and the token count.
    pub fn sequence_loss(
        &self,
        tape: &mut Tape<'_>,
        prep: &Prepared,
        feats: &FeatureBundle,
        caption: &[usize],
    ) -> Result<(Var, usize)> {
        if let Some(&bad) = caption.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!("caption token {bad} outside vocabulary")));
        }
        let enc = encode(tape, &self.enc, &prep.asg, &prep.mrg, feats, self.config.encode_options())?;
        let init = init_state(tape.value(enc.nodes).clone());
        let mut st = StateVars::load(tape, &init);
        st.x = enc.nodes;
        let opts = self.config.decode_options();
        let mut prev = self.config.bos;
        let mut total: Option<Var> = None;
        let targets = caption.iter().copied().chain(core::iter::once(self.config.eos));
        let mut count = 0;
        for target in targets {
            let out = decode_step(tape, &self.dec, opts, &prep.flow, &st, enc.global, prev)?;
            let lp = tape.pick(out.logp, &[target])?;
            total = Some(match total {
                None => lp,
                Some(acc) => tape.add(acc, lp)?,
            });
            st = out.state;
            prev = target;
            count += 1;
        }
        let nll = tape.scale(total.expect("at least the end token"), -1.0)?;
        Ok((nll, count))
    }

    /// Summed token NLL, token count and parameter gradients of one example.
    pub fn loss_and_grads(&self, prep: &Prepared, feats: &FeatureBundle, caption: &[usize]) -> Result<(f64, usize, Gradients)> {
        let mut tape = Tape::with_params(&self.store);
        let (loss, n) = self.sequence_loss(&mut tape, prep, feats, caption)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), n, grads))
    }

    /// Node embeddings (start symbol first) and fused global feature.
    pub fn encode_values(&self, prep: &Prepared, feats: &FeatureBundle) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::with_params(&self.store);
        let enc = encode(&mut tape, &self.enc, &prep.asg, &prep.mrg, feats, self.config.encode_options())?;
        Ok((tape.value(enc.nodes).clone(), tape.value(enc.global).clone()))
    }

    /// A step-wise decoder for one graph and its initial state.
    pub fn decoder<'m>(&'m self, prep: &Prepared, feats: &FeatureBundle) -> Result<(GraphDecoder<'m>, DecoderState)> {
        let (x, vbar) = self.encode_values(prep, feats)?;
        Ok((GraphDecoder { model: self, flow: prep.flow.clone(), vbar }, init_state(x)))
    }

    fn beam_config(&self, beam: usize) -> BeamConfig {
        BeamConfig { beam, max_len: self.config.max_len, bos: self.config.bos, eos: Some(self.config.eos) }
    }

    /// Ranked hypotheses. With beam search ablated this is a single greedy result.
    pub fn generate(&self, asg: &Asg, feats: &FeatureBundle, beam: usize) -> Result<Vec<Hypothesis>> {
        let prep = Prepared::new(asg)?;
        let (dec, init) = self.decoder(&prep, feats)?;
        let beam = if self.config.ablation.beam_search { beam } else { 1 };
        beam_search(&dec, init, self.beam_config(beam))
    }

    pub fn greedy(&self, asg: &Asg, feats: &FeatureBundle) -> Result<Hypothesis> {
        let prep = Prepared::new(asg)?;
        self.greedy_prepared(&prep, feats)
    }

    pub fn greedy_prepared(&self, prep: &Prepared, feats: &FeatureBundle) -> Result<Hypothesis> {
        let (dec, init) = self.decoder(prep, feats)?;
        greedy(&dec, init, self.beam_config(1))
    }
}

/// Decodes one token at a time on a fresh tape per step.
pub struct GraphDecoder<'m> {
    model: &'m Model,
    flow: FlowOperators,
    vbar: Tensor,
}

impl GraphDecoder<'_> {
    pub fn global(&self) -> &Tensor {
        &self.vbar
    }
}

impl Stepper for GraphDecoder<'_> {
    type State = DecoderState;

    fn step(&self, state: &DecoderState, token: usize) -> Result<(DecoderState, Vec<f64>, StepInfo)> {
        let m = self.model;
        let mut tape = Tape::with_params(&m.store);
        let sv = StateVars::load(&mut tape, state);
        let vbar = tape.input(self.vbar.clone());
        let opts = m.config.decode_options();
        let out = decode_step(&mut tape, &m.dec, opts, &self.flow, &sv, vbar, token)?;
        let info = StepInfo::read(&tape, &out, opts);
        let logp = tape.value(out.logp).data().to_vec();
        Ok((out.state.read(&tape, state.t + 1), logp, info))
    }
}
