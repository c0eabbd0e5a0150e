//! Graph-aware language decoder: attention LSTM query, graph content and
//! flow attention, gated fusion, language LSTM and erase/add graph updates.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asg::{FlowGraph, FLOW_MASS_FLOOR, START_SLOT};
use crate::error::{Error, Result};
use crate::num::{Axis, ParamId, ParamStore, Tape, Tensor, Var};

/// Gated LSTM weights: `[input; h] (in+d) × 4d` and a `1 × 4d` bias.
/// Gate blocks are ordered input, forget, output, candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub dim: usize,
    pub vocab: usize,
    pub embed: ParamId,
    pub att: LstmParams,
    pub lang: LstmParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub w_xc: ParamId,
    pub w_hc: ParamId,
    pub w_c: ParamId,
    pub w_s: ParamId,
    pub w_sh: ParamId,
    pub w_sz: ParamId,
    pub w_g: ParamId,
    pub w_gh: ParamId,
    pub w_gz: ParamId,
    pub vs_w: ParamId,
    pub vs_b: ParamId,
    pub ers_w: ParamId,
    pub ers_b: ParamId,
    pub add_w: ParamId,
    pub add_b: ParamId,
}

/// `(name, rows, cols)` for every decoder parameter, in registration order.
fn layout(dim: usize, vocab: usize) -> [(&'static str, usize, usize); 22] {
    let d = dim;
    [
        ("dec.embed", vocab, d),
        ("dec.att.w", 4 * d, 4 * d),
        ("dec.att.b", 1, 4 * d),
        ("dec.lang.w", 3 * d, 4 * d),
        ("dec.lang.b", 1, 4 * d),
        ("dec.out.w", d, vocab),
        ("dec.out.b", 1, vocab),
        ("dec.content.wx", d, d),
        ("dec.content.wh", d, d),
        ("dec.content.w", d, 1),
        ("dec.flow.ws", d, 3),
        ("dec.flow.wh", d, d),
        ("dec.flow.wz", d, d),
        ("dec.fuse.w", d, 1),
        ("dec.fuse.wh", d, d),
        ("dec.fuse.wz", d, d),
        ("dec.sentinel.w", d, 1),
        ("dec.sentinel.b", 1, 1),
        ("dec.erase.w", 2 * d, d),
        ("dec.erase.b", 1, d),
        ("dec.add.w", 2 * d, d),
        ("dec.add.b", 1, d),
    ]
}

impl DecoderParams {
    pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, vocab: usize, rng: &mut R) -> Self {
        let mut ids = Vec::new();
        for (name, rows, cols) in layout(dim, vocab) {
            let id = if name.ends_with(".b") {
                store.add(name, Tensor::zeros(&[rows, cols]))
            } else if name == "dec.embed" {
                store.add_normal(name, rows, cols, 0.5, rng)
            } else {
                store.add_normal(name, rows, cols, 1.0 / libm::sqrt(rows as f64), rng)
            };
            ids.push(id);
        }
        let p = Self::from_ids(dim, vocab, &ids);
        for lstm in [p.att, p.lang] {
            store.value_mut(lstm.b).data_mut()[dim..2 * dim].iter_mut().for_each(|v| *v = 1.0);
        }
        p
    }

    pub fn bind(store: &ParamStore, dim: usize, vocab: usize) -> Result<Self> {
        let mut ids = Vec::new();
        for (name, rows, cols) in layout(dim, vocab) {
            let id = store.find(name).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            if store.value(id).shape() != [rows, cols] {
                return Err(Error::InvalidArgument(format!(
                    "{name} has shape {:?}, expected [{rows}, {cols}]",
                    store.value(id).shape()
                )));
            }
            ids.push(id);
        }
        Ok(Self::from_ids(dim, vocab, &ids))
    }

    fn from_ids(dim: usize, vocab: usize, ids: &[ParamId]) -> Self {
        Self {
            dim,
            vocab,
            embed: ids[0],
            att: LstmParams { w: ids[1], b: ids[2] },
            lang: LstmParams { w: ids[3], b: ids[4] },
            out_w: ids[5],
            out_b: ids[6],
            w_xc: ids[7],
            w_hc: ids[8],
            w_c: ids[9],
            w_s: ids[10],
            w_sh: ids[11],
            w_sz: ids[12],
            w_g: ids[13],
            w_gh: ids[14],
            w_gz: ids[15],
            vs_w: ids[16],
            vs_b: ids[17],
            ers_w: ids[18],
            ers_b: ids[19],
            add_w: ids[20],
            add_b: ids[21],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub content_attn: bool,
    pub flow_attn: bool,
    pub graph_update: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { content_attn: true, flow_attn: true, graph_update: true }
    }
}

/// Transposed flow transitions, ready to right-multiply a row distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOperators {
    slots: usize,
    step1: Tensor,
    step2: Tensor,
}

impl FlowOperators {
    pub fn new(fg: &FlowGraph) -> Self {
        let n = fg.size();
        let transpose = |m: &[f64]| {
            let mut t = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    t[j * n + i] = m[i * n + j];
                }
            }
            Tensor::matrix(n, n, t).expect("square flow matrix")
        };
        Self { slots: n, step1: transpose(fg.power(1)), step2: transpose(fg.power(2)) }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }
}

/// Decoder state as plain values (one per beam hypothesis).
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub x: Tensor,
    pub ha: Tensor,
    pub ca: Tensor,
    pub hl: Tensor,
    pub cl: Tensor,
    pub alpha: Tensor,
    pub z: Tensor,
    pub t: usize,
}

/// Zero recurrent states, attention on the start symbol, zero context.
pub fn init_state(x_enc: Tensor) -> DecoderState {
    let (n, d) = (x_enc.rows(), x_enc.cols());
    let zero = || Tensor::zeros(&[1, d]);
    let mut alpha = Tensor::zeros(&[1, n]);
    alpha.data_mut()[START_SLOT] = 1.0;
    DecoderState { x: x_enc, ha: zero(), ca: zero(), hl: zero(), cl: zero(), alpha, z: zero(), t: 1 }
}

/// Decoder state as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub x: Var,
    pub ha: Var,
    pub ca: Var,
    pub hl: Var,
    pub cl: Var,
    pub alpha: Var,
    pub z: Var,
}

impl StateVars {
    pub fn load(tape: &mut Tape<'_>, s: &DecoderState) -> Self {
        Self {
            x: tape.input(s.x.clone()),
            ha: tape.input(s.ha.clone()),
            ca: tape.input(s.ca.clone()),
            hl: tape.input(s.hl.clone()),
            cl: tape.input(s.cl.clone()),
            alpha: tape.input(s.alpha.clone()),
            z: tape.input(s.z.clone()),
        }
    }

    pub fn read(&self, tape: &Tape<'_>, t: usize) -> DecoderState {
        DecoderState {
            x: tape.value(self.x).clone(),
            ha: tape.value(self.ha).clone(),
            ca: tape.value(self.ca).clone(),
            hl: tape.value(self.hl).clone(),
            cl: tape.value(self.cl).clone(),
            alpha: tape.value(self.alpha).clone(),
            z: tape.value(self.z).clone(),
            t,
        }
    }
}

pub fn lstm_cell(tape: &mut Tape<'_>, p: &LstmParams, input: Var, h: Var, c: Var) -> Result<(Var, Var)> {
    let d = tape.shape(h).1;
    let cat = tape.concat(&[input, h], Axis::Cols)?;
    let w = tape.param(p.w);
    let b = tape.param(p.b);
    let gates = tape.affine(cat, w, b)?;
    let block = |tape: &mut Tape<'_>, k: usize| tape.slice(gates, Axis::Cols, k * d, d);
    let i = block(tape, 0)?;
    let i = tape.sigmoid(i)?;
    let f = block(tape, 1)?;
    let f = tape.sigmoid(f)?;
    let o = block(tape, 2)?;
    let o = tape.sigmoid(o)?;
    let g = block(tape, 3)?;
    let g = tape.tanh(g)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let squashed = tape.tanh(c_new)?;
    let h_new = tape.mul(o, squashed)?;
    Ok((h_new, c_new))
}

/// Attention LSTM over `[v̄; w_{t−1}; hˡ_{t−1}]`.
pub fn attention_query_step(
    tape: &mut Tape<'_>,
    p: &DecoderParams,
    st: &StateVars,
    vbar: Var,
    w_prev: Var,
) -> Result<(Var, Var)> {
    let input = tape.concat(&[vbar, w_prev, st.hl], Axis::Cols)?;
    lstm_cell(tape, &p.att, input, st.ha, st.ca)
}

/// `softmax_i(w_cᵀ tanh(W_xc x_i + W_hc hᵃ))` over every slot, as `1 × n`.
pub fn content_attention(tape: &mut Tape<'_>, p: &DecoderParams, x: Var, ha: Var) -> Result<Var> {
    let n = tape.shape(x).0;
    let wx = tape.param(p.w_xc);
    let wh = tape.param(p.w_hc);
    let wc = tape.param(p.w_c);
    let xp = tape.matmul(x, wx)?;
    let hp = tape.matmul(ha, wh)?;
    let pre = tape.add_row(xp, hp)?;
    let act = tape.tanh(pre)?;
    let scores = tape.matmul(act, wc)?;
    let row = tape.reshape(scores, 1, n)?;
    tape.softmax(row)
}

/// One or two flow transitions of a row distribution, renormalized, with the
/// input returned unchanged when the transported mass vanishes.
pub fn transport(tape: &mut Tape<'_>, flow: &FlowOperators, alpha: Var, k: usize) -> Result<Var> {
    let op = match k {
        0 => return Ok(alpha),
        1 => &flow.step1,
        2 => &flow.step2,
        _ => return Err(Error::InvalidArgument(format!("flow step k={k} not in {{0,1,2}}"))),
    };
    let m = tape.input(op.clone());
    let raw = tape.matmul(alpha, m)?;
    let mass: f64 = tape.value(raw).data().iter().sum();
    if mass < FLOW_MASS_FLOOR {
        Ok(alpha)
    } else {
        tape.normalize(raw)
    }
}

/// Returns `(α^f, s)` with `s = softmax(W_s relu(W_sh hᵃ + W_sz z_{t−1}))`.
pub fn flow_attention(
    tape: &mut Tape<'_>,
    p: &DecoderParams,
    flow: &FlowOperators,
    alpha_prev: Var,
    ha: Var,
    z_prev: Var,
) -> Result<(Var, Var)> {
    let wh = tape.param(p.w_sh);
    let wz = tape.param(p.w_sz);
    let ws = tape.param(p.w_s);
    let a = tape.matmul(ha, wh)?;
    let b = tape.matmul(z_prev, wz)?;
    let pre = tape.add(a, b)?;
    let hidden = tape.relu(pre)?;
    let logits = tape.matmul(hidden, ws)?;
    let s = tape.softmax(logits)?;
    let alpha_f = mix_transitions(tape, flow, alpha_prev, s)?;
    Ok((alpha_f, s))
}

/// `Σ_k s_k · transport(α, k)` for a given `1 × 3` gate.
pub fn mix_transitions(tape: &mut Tape<'_>, flow: &FlowOperators, alpha_prev: Var, s: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for k in 0..3 {
        let moved = transport(tape, flow, alpha_prev, k)?;
        let sk = tape.slice(s, Axis::Cols, k, 1)?;
        let term = tape.scale_by(sk, moved)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(acc.expect("three transitions"))
}

/// `β = sigmoid(w_g relu(W_gh hᵃ + W_gz z_{t−1}))`, `1 × 1`.
pub fn fusion_gate(tape: &mut Tape<'_>, p: &DecoderParams, ha: Var, z_prev: Var) -> Result<Var> {
    let wh = tape.param(p.w_gh);
    let wz = tape.param(p.w_gz);
    let wg = tape.param(p.w_g);
    let a = tape.matmul(ha, wh)?;
    let b = tape.matmul(z_prev, wz)?;
    let pre = tape.add(a, b)?;
    let hidden = tape.relu(pre)?;
    let logit = tape.matmul(hidden, wg)?;
    tape.sigmoid(logit)
}

/// `α = β α^c + (1−β) α^f` and `z = α X`.
pub fn fuse_and_context(tape: &mut Tape<'_>, beta: Var, alpha_c: Var, alpha_f: Var, x: Var) -> Result<(Var, Var)> {
    let from_c = tape.scale_by(beta, alpha_c)?;
    let rest = tape.one_minus(beta)?;
    let from_f = tape.scale_by(rest, alpha_f)?;
    let alpha = tape.add(from_c, from_f)?;
    let z = tape.matmul(alpha, x)?;
    Ok((alpha, z))
}

/// Language LSTM over `[z; hᵃ]`; returns `(hˡ, cˡ, log p)`.
pub fn language_step(
    tape: &mut Tape<'_>,
    p: &DecoderParams,
    z: Var,
    ha: Var,
    hl: Var,
    cl: Var,
) -> Result<(Var, Var, Var)> {
    let input = tape.concat(&[z, ha], Axis::Cols)?;
    let (h, c) = lstm_cell(tape, &p.lang, input, hl, cl)?;
    let w = tape.param(p.out_w);
    let b = tape.param(p.out_b);
    let logits = tape.affine(h, w, b)?;
    let logp = tape.log_softmax(logits)?;
    Ok((h, c, logp))
}

/// Erase-then-add rewrite of node embeddings scaled by `u = sentinel · α`.
/// Returns `(X_{t+1}, sentinel)`.
pub fn graph_update(tape: &mut Tape<'_>, p: &DecoderParams, x: Var, hl: Var, alpha: Var) -> Result<(Var, Var)> {
    let n = tape.shape(x).0;
    let vs_w = tape.param(p.vs_w);
    let vs_b = tape.param(p.vs_b);
    let gate = tape.affine(hl, vs_w, vs_b)?;
    let sentinel = tape.sigmoid(gate)?;
    let u_row = tape.scale_by(sentinel, alpha)?;
    let u = tape.reshape(u_row, n, 1)?;
    let h_rows = tape.gather(hl, &vec![0; n])?;
    let hx = tape.concat(&[h_rows, x], Axis::Cols)?;
    let ew = tape.param(p.ers_w);
    let eb = tape.param(p.ers_b);
    let e_pre = tape.affine(hx, ew, eb)?;
    let e = tape.sigmoid(e_pre)?;
    let aw = tape.param(p.add_w);
    let ab = tape.param(p.add_b);
    let a_pre = tape.affine(hx, aw, ab)?;
    let a = tape.relu(a_pre)?;
    let ue = tape.scale_rows(e, u)?;
    let keep = tape.one_minus(ue)?;
    let erased = tape.mul(x, keep)?;
    let added = tape.scale_rows(a, u)?;
    let x_new = tape.add(erased, added)?;
    Ok((x_new, sentinel))
}

/// Everything one decoding step produces.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub state: StateVars,
    pub logp: Var,
    pub alpha_c: Option<Var>,
    pub alpha_f: Option<Var>,
    /// `None` when one attention is disabled and β is implied.
    pub beta: Option<Var>,
    pub s: Option<Var>,
    pub sentinel: Option<Var>,
}

pub fn decode_step(
    tape: &mut Tape<'_>,
    p: &DecoderParams,
    opts: DecodeOptions,
    flow: &FlowOperators,
    st: &StateVars,
    vbar: Var,
    token: usize,
) -> Result<StepVars> {
    if !opts.content_attn && !opts.flow_attn {
        return Err(Error::InvalidArgument("content and flow attention cannot both be disabled".into()));
    }
    if token >= p.vocab {
        return Err(Error::InvalidArgument(format!("token {token} outside vocabulary of {}", p.vocab)));
    }
    let table = tape.param(p.embed);
    let w_prev = tape.gather(table, &[token])?;
    let (ha, ca) = attention_query_step(tape, p, st, vbar, w_prev)?;
    let alpha_c = if opts.content_attn { Some(content_attention(tape, p, st.x, ha)?) } else { None };
    let (alpha_f, s) = if opts.flow_attn {
        let (a, s) = flow_attention(tape, p, flow, st.alpha, ha, st.z)?;
        (Some(a), Some(s))
    } else {
        (None, None)
    };
    let (alpha, z, beta) = match (alpha_c, alpha_f) {
        (Some(c), Some(f)) => {
            let beta = fusion_gate(tape, p, ha, st.z)?;
            let (alpha, z) = fuse_and_context(tape, beta, c, f, st.x)?;
            (alpha, z, Some(beta))
        }
        (Some(only), None) | (None, Some(only)) => (only, tape.matmul(only, st.x)?, None),
        (None, None) => unreachable!(),
    };
    let (hl, cl, logp) = language_step(tape, p, z, ha, st.hl, st.cl)?;
    let (x, sentinel) = if opts.graph_update {
        let (x, s) = graph_update(tape, p, st.x, hl, alpha)?;
        (x, Some(s))
    } else {
        (st.x, None)
    };
    Ok(StepVars {
        state: StateVars { x, ha, ca, hl, cl, alpha, z },
        logp,
        alpha_c,
        alpha_f,
        beta,
        s,
        sentinel,
    })
}

/// Per-step attention record of a generated caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub token: usize,
    pub alpha: Vec<f64>,
    pub beta: f64,
    pub s: Option<[f64; 3]>,
    pub sentinel: Option<f64>,
}

/// Attention quantities of one step, read off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub alpha: Vec<f64>,
    pub alpha_c: Option<Vec<f64>>,
    pub alpha_f: Option<Vec<f64>>,
    pub beta: f64,
    pub s: Option<[f64; 3]>,
    pub sentinel: Option<f64>,
}

impl StepInfo {
    pub fn read(tape: &Tape<'_>, sv: &StepVars, opts: DecodeOptions) -> Self {
        let vec_of = |v: Var| tape.value(v).data().to_vec();
        let beta = match sv.beta {
            Some(b) => tape.value(b).item(),
            None if opts.content_attn => 1.0,
            None => 0.0,
        };
        Self {
            alpha: vec_of(sv.state.alpha),
            alpha_c: sv.alpha_c.map(vec_of),
            alpha_f: sv.alpha_f.map(vec_of),
            beta,
            s: sv.s.map(|s| {
                let d = tape.value(s).data();
                [d[0], d[1], d[2]]
            }),
            sentinel: sv.sentinel.map(|s| tape.value(s).item()),
        }
    }
}

/// Anything that can be decoded one token at a time.
pub trait Stepper {
    type State: Clone;
    /// Consumes `token` and returns the next state, log-probabilities over
    /// the vocabulary and attention details.
    fn step(&self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>, StepInfo)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam: usize,
    pub max_len: usize,
    pub bos: usize,
    /// Hypotheses stop once they emit this token.
    pub eos: Option<usize>,
}

/// A finished or length-capped hypothesis. `tokens` excludes the end token;
/// `trace` has one entry per emitted token, including the end token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub trace: Vec<TraceStep>,
}

struct Beam<S> {
    last: usize,
    tokens: Vec<usize>,
    score: f64,
    trace: Vec<TraceStep>,
    state: S,
    done: bool,
}

/// Beam search by total log-probability, no length normalization. Ties are
/// broken towards earlier parents, then lower token ids.
pub fn beam_search<M: Stepper>(model: &M, init: M::State, cfg: BeamConfig) -> Result<Vec<Hypothesis>> {
    if cfg.beam == 0 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    let mut beams = vec![Beam { last: cfg.bos, tokens: Vec::new(), score: 0.0, trace: Vec::new(), state: init, done: false }];
    for _ in 0..cfg.max_len {
        if beams.iter().all(|b| b.done) {
            break;
        }
        struct Cand {
            parent: usize,
            token: Option<usize>,
            score: f64,
        }
        let mut expanded = Vec::with_capacity(beams.len());
        let mut cands = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            if b.done {
                cands.push(Cand { parent: bi, token: None, score: b.score });
                expanded.push(None);
                continue;
            }
            let (next, logp, info) = model.step(&b.state, b.last)?;
            for (tok, lp) in logp.iter().enumerate() {
                cands.push(Cand { parent: bi, token: Some(tok), score: b.score + lp });
            }
            expanded.push(Some((next, info)));
        }
        cands.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.parent.cmp(&b.parent))
                .then(a.token.map_or(0, |t| t + 1).cmp(&b.token.map_or(0, |t| t + 1)))
        });
        cands.truncate(cfg.beam);
        let mut next_beams = Vec::with_capacity(cands.len());
        for c in cands {
            let parent = &beams[c.parent];
            match c.token {
                None => next_beams.push(Beam {
                    last: parent.last,
                    tokens: parent.tokens.clone(),
                    score: parent.score,
                    trace: parent.trace.clone(),
                    state: parent.state.clone(),
                    done: true,
                }),
                Some(tok) => {
                    let (state, info) = expanded[c.parent].as_ref().expect("expanded parent");
                    let mut tokens = parent.tokens.clone();
                    let done = cfg.eos == Some(tok);
                    if !done {
                        tokens.push(tok);
                    }
                    let mut trace = parent.trace.clone();
                    trace.push(TraceStep {
                        token: tok,
                        alpha: info.alpha.clone(),
                        beta: info.beta,
                        s: info.s,
                        sentinel: info.sentinel,
                    });
                    next_beams.push(Beam { last: tok, tokens, score: c.score, trace, state: state.clone(), done });
                }
            }
        }
        beams = next_beams;
    }
    let mut out: Vec<Hypothesis> =
        beams.into_iter().map(|b| Hypothesis { tokens: b.tokens, score: b.score, trace: b.trace }).collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy<M: Stepper>(model: &M, init: M::State, cfg: BeamConfig) -> Result<Hypothesis> {
    let mut state = init;
    let mut last = cfg.bos;
    let mut hyp = Hypothesis { tokens: Vec::new(), score: 0.0, trace: Vec::new() };
    for _ in 0..cfg.max_len {
        let (next, logp, info) = model.step(&state, last)?;
        let mut best = 0;
        for (i, &lp) in logp.iter().enumerate() {
            if lp > logp[best] {
                best = i;
            }
        }
        hyp.score += logp[best];
        hyp.trace.push(TraceStep { token: best, alpha: info.alpha, beta: info.beta, s: info.s, sentinel: info.sentinel });
        if cfg.eos == Some(best) {
            break;
        }
        hyp.tokens.push(best);
        state = next;
        last = best;
    }
    Ok(hyp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asg::{Asg, AsgBuilder};
    use crate::num::{grad_check, math};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const D: usize = 3;
    const V: usize = 5;

    fn setup(seed: u64) -> (ParamStore, DecoderParams) {
        let mut store = ParamStore::new();
        let p = DecoderParams::register(&mut store, D, V, &mut ChaCha8Rng::seed_from_u64(seed));
        (store, p)
    }

    fn set(store: &mut ParamStore, id: ParamId, data: &[f64]) {
        store.value_mut(id).data_mut().copy_from_slice(data);
    }

    fn zero(store: &mut ParamStore, id: ParamId) {
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    /// o1→a1, o1→r→o2 (ids o1=0, o2=1, a1=2, r=3).
    fn chain() -> Asg {
        let mut b = AsgBuilder::new();
        let o1 = b.object(0);
        let o2 = b.object(1);
        b.attribute(o1);
        b.relationship(o1, o2);
        b.build()
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> DecoderState {
        let mut mk = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = mk(n, D);
        let (ha, ca, hl, cl, z) = (mk(1, D), mk(1, D), mk(1, D), mk(1, D), mk(1, D));
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let alpha = Tensor::row(raw.iter().map(|v| v / total).collect());
        DecoderState { x, ha, ca, hl, cl, alpha, z, t: 3 }
    }

    #[test]
    fn init_state_is_on_start_with_zero_context() {
        let x = Tensor::full(&[4, D], 0.5);
        let s = init_state(x.clone());
        assert_eq!(s.alpha.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert!(s.z.data().iter().all(|&v| v == 0.0));
        assert!(s.ha.data().iter().chain(s.hl.data()).all(|&v| v == 0.0));
        assert_eq!(s.t, 1);
        assert_eq!(init_state(x), s);
    }

    #[test]
    fn zero_lstm_gives_zero_hidden() {
        let (mut store, p) = setup(1);
        zero(&mut store, p.att.w);
        zero(&mut store, p.att.b);
        let mut tape = Tape::with_params(&store);
        let st = StateVars::load(&mut tape, &init_state(Tensor::zeros(&[2, D])));
        let vbar = tape.input(Tensor::zeros(&[1, D]));
        let w = tape.input(Tensor::zeros(&[1, D]));
        let (h, c) = attention_query_step(&mut tape, &p, &st, vbar, w).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_cell_matches_hand_computation() {
        // One hidden unit, one input: gates = [x, h] W + b, W rows (x, h).
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 4, vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0, 1.0, -1.0]).unwrap());
        let b = store.add("b", Tensor::matrix(1, 4, vec![0.0, 0.0, 0.5, 0.0]).unwrap());
        let p = LstmParams { w, b };
        let (x, h0, c0) = (0.5, -0.2, 0.3);
        let pre = [x * 1.0, x * 0.5 + h0 * 1.0, x * -1.0 + h0 * 1.0 + 0.5, x * 2.0 + h0 * -1.0];
        let (i, f, o, g) = (math::sigmoid(pre[0]), math::sigmoid(pre[1]), math::sigmoid(pre[2]), math::tanh(pre[3]));
        let c1 = f * c0 + i * g;
        let h1 = o * math::tanh(c1);
        let mut tape = Tape::with_params(&store);
        let xv = tape.input(Tensor::scalar(x));
        let hv = tape.input(Tensor::scalar(h0));
        let cv = tape.input(Tensor::scalar(c0));
        let (h, c) = lstm_cell(&mut tape, &p, xv, hv, cv).unwrap();
        assert!((tape.value(h).item() - h1).abs() < 1e-15);
        assert!((tape.value(c).item() - c1).abs() < 1e-15);
    }

    #[test]
    fn lstm_is_deterministic() {
        let (store, p) = setup(2);
        let run = || {
            let mut tape = Tape::with_params(&store);
            let st = StateVars::load(&mut tape, &random_state(&mut ChaCha8Rng::seed_from_u64(3), 3));
            let vbar = tape.input(Tensor::full(&[1, D], 0.3));
            let w = tape.input(Tensor::full(&[1, D], -0.1));
            let (h, _) = attention_query_step(&mut tape, &p, &st, vbar, w).unwrap();
            tape.value(h).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn content_attention_cases() {
        let (store, p) = setup(4);
        let mut tape = Tape::with_params(&store);
        let x = tape.input(Tensor::full(&[4, D], 0.7));
        let h = tape.input(Tensor::full(&[1, D], -0.3));
        let a = content_attention(&mut tape, &p, x, h).unwrap();
        for &v in tape.value(a).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x1 = tape.input(Tensor::full(&[1, D], 0.7));
        let a1 = content_attention(&mut tape, &p, x1, h).unwrap();
        assert_eq!(tape.value(a1).data(), &[1.0]);
    }

    #[test]
    fn content_attention_two_nodes_by_hand() {
        // d = 1: score_i = w_c tanh(w_x x_i + w_h h).
        let mut store = ParamStore::new();
        let p = DecoderParams::register(&mut store, 1, 2, &mut ChaCha8Rng::seed_from_u64(0));
        set(&mut store, p.w_xc, &[2.0]);
        set(&mut store, p.w_hc, &[-1.0]);
        set(&mut store, p.w_c, &[1.5]);
        let (x0, x1, h) = (0.3, -0.4, 0.2);
        let s0 = 1.5 * math::tanh(2.0 * x0 - h);
        let s1 = 1.5 * math::tanh(2.0 * x1 - h);
        let p0 = math::exp(s0) / (math::exp(s0) + math::exp(s1));
        let mut tape = Tape::with_params(&store);
        let xv = tape.input(Tensor::matrix(2, 1, vec![x0, x1]).unwrap());
        let hv = tape.input(Tensor::scalar(h));
        let a = content_attention(&mut tape, &p, xv, hv).unwrap();
        assert!((tape.value(a).data()[0] - p0).abs() < 1e-15);
        assert!((tape.value(a).data()[1] - (1.0 - p0)).abs() < 1e-15);
    }

    fn flow_of(g: &Asg) -> (FlowGraph, FlowOperators) {
        let fg = FlowGraph::build(g).unwrap();
        let ops = FlowOperators::new(&fg);
        (fg, ops)
    }

    #[test]
    fn forced_flow_gates() {
        let (fg, ops) = flow_of(&chain());
        let alpha = [0.1, 0.3, 0.2, 0.25, 0.15];
        let mut tape = Tape::new();
        let a = tape.input(Tensor::row(alpha.to_vec()));

        let stay = tape.input(Tensor::row(vec![1.0, 0.0, 0.0]));
        let out = mix_transitions(&mut tape, &ops, a, stay).unwrap();
        assert_eq!(tape.value(out).data(), &alpha);

        // Chain slots: S=0, o1=1, o2=2, a1=3, r=4. One step from r lands on o2.
        let on_r = tape.input(Tensor::row(vec![0.0, 0.0, 0.0, 0.0, 1.0]));
        let one = tape.input(Tensor::row(vec![0.0, 1.0, 0.0]));
        let out = mix_transitions(&mut tape, &ops, on_r, one).unwrap();
        let expected = fg.step(&[0.0, 0.0, 0.0, 0.0, 1.0], 1).unwrap();
        assert_eq!(tape.value(out).data(), expected.as_slice());
        assert_eq!(expected, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_gate_preactivations_average_the_transitions() {
        let (mut store, p) = setup(6);
        zero(&mut store, p.w_s);
        let (fg, ops) = flow_of(&chain());
        let alpha = [0.1, 0.3, 0.2, 0.25, 0.15];
        let mut tape = Tape::with_params(&store);
        let a = tape.input(Tensor::row(alpha.to_vec()));
        let h = tape.input(Tensor::full(&[1, D], 0.4));
        let z = tape.input(Tensor::full(&[1, D], -0.2));
        let (af, s) = flow_attention(&mut tape, &p, &ops, a, h, z).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let steps: Vec<Vec<f64>> = (0..3).map(|k| fg.step(&alpha, k).unwrap()).collect();
        for i in 0..5 {
            let mean = (steps[0][i] + steps[1][i] + steps[2][i]) / 3.0;
            assert!((tape.value(af).data()[i] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn vanishing_mass_falls_back() {
        // Operators that move no mass at all.
        let ops = FlowOperators { slots: 2, step1: Tensor::zeros(&[2, 2]), step2: Tensor::zeros(&[2, 2]) };
        let mut tape = Tape::new();
        let a = tape.input(Tensor::row(vec![0.4, 0.6]));
        let out = transport(&mut tape, &ops, a, 1).unwrap();
        assert_eq!(tape.value(out).data(), &[0.4, 0.6]);
    }

    #[test]
    fn fusion_and_context() {
        let mut tape = Tape::new();
        let ac = tape.input(Tensor::row(vec![0.7, 0.3]));
        let af = tape.input(Tensor::row(vec![0.2, 0.8]));
        let x = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap());
        let one = tape.input(Tensor::scalar(1.0));
        let (alpha, z) = fuse_and_context(&mut tape, one, ac, af, x).unwrap();
        assert_eq!(tape.value(alpha).data(), &[0.7, 0.3]);
        assert!((tape.value(z).data()[0] - (0.7 - 0.9)).abs() < 1e-12);
        assert!((tape.value(z).data()[1] - (1.4 + 0.15)).abs() < 1e-12);

        let beta = tape.input(Tensor::scalar(0.37));
        let (alpha, _) = fuse_and_context(&mut tape, beta, ac, ac, x).unwrap();
        for (a, b) in tape.value(alpha).data().iter().zip([0.7, 0.3]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_projection_gives_uniform_words() {
        let (mut store, p) = setup(7);
        zero(&mut store, p.out_w);
        zero(&mut store, p.out_b);
        let mut tape = Tape::with_params(&store);
        let st = StateVars::load(&mut tape, &random_state(&mut ChaCha8Rng::seed_from_u64(8), 3));
        let (_, _, logp) = language_step(&mut tape, &p, st.z, st.ha, st.hl, st.cl).unwrap();
        for &lp in tape.value(logp).data() {
            assert!((math::exp(lp) - 1.0 / V as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn language_step_by_hand() {
        // d = 1, vocab 2; with W_p = (1, -1) and b_p = (0, 0.5).
        let mut store = ParamStore::new();
        let p = DecoderParams::register(&mut store, 1, 2, &mut ChaCha8Rng::seed_from_u64(0));
        set(&mut store, p.lang.w, &[0.2, -0.1, 0.3, 0.4, 0.5, 0.6, -0.7, 0.8, 0.9, 1.0, -1.1, 0.1]);
        set(&mut store, p.lang.b, &[0.0, 1.0, 0.0, 0.0]);
        set(&mut store, p.out_w, &[1.0, -1.0]);
        set(&mut store, p.out_b, &[0.0, 0.5]);
        let (z, ha, hl, cl) = (0.3, -0.5, 0.2, 0.1);
        let wv = [0.2, -0.1, 0.3, 0.4, 0.5, 0.6, -0.7, 0.8, 0.9, 1.0, -1.1, 0.1];
        let pre: Vec<f64> = (0..4).map(|k| z * wv[k] + ha * wv[4 + k] + hl * wv[8 + k] + [0.0, 1.0, 0.0, 0.0][k]).collect();
        let c = math::sigmoid(pre[1]) * cl + math::sigmoid(pre[0]) * math::tanh(pre[3]);
        let h = math::sigmoid(pre[2]) * math::tanh(c);
        let (l0, l1) = (h, -h + 0.5);
        let p0 = math::exp(l0) / (math::exp(l0) + math::exp(l1));
        let mut tape = Tape::with_params(&store);
        let [zv, hav, hlv, clv] = [z, ha, hl, cl].map(|v| tape.input(Tensor::scalar(v)));
        let (hv, _, logp) = language_step(&mut tape, &p, zv, hav, hlv, clv).unwrap();
        assert!((tape.value(hv).item() - h).abs() < 1e-15);
        assert!((math::exp(tape.value(logp).data()[0]) - p0).abs() < 1e-14);
        let total: f64 = tape.value(logp).data().iter().map(|&l| math::exp(l)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn graph_update_intensity_cases() {
        let (mut store, p) = setup(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let st = random_state(&mut rng, 3);

        // α with a zero slot: that row stays bit-identical.
        let mut tape = Tape::with_params(&store);
        let x = tape.input(st.x.clone());
        let hl = tape.input(st.hl.clone());
        let alpha = tape.input(Tensor::row(vec![0.6, 0.0, 0.4]));
        let (x_new, _) = graph_update(&mut tape, &p, x, hl, alpha).unwrap();
        assert_eq!(tape.value(x_new).row_slice(1), st.x.row_slice(1));
        assert_ne!(tape.value(x_new).row_slice(0), st.x.row_slice(0));

        // Full erase with zero add: u = 1, e = 1, a = 0 gives a zero row.
        set(&mut store, p.vs_b, &[800.0]);
        zero(&mut store, p.vs_w);
        zero(&mut store, p.ers_w);
        store.value_mut(p.ers_b).data_mut().iter_mut().for_each(|v| *v = 800.0);
        zero(&mut store, p.add_w);
        zero(&mut store, p.add_b);
        let mut tape = Tape::with_params(&store);
        let x = tape.input(st.x.clone());
        let hl = tape.input(st.hl.clone());
        let alpha = tape.input(Tensor::row(vec![1.0, 0.0, 0.0]));
        let (x_new, s) = graph_update(&mut tape, &p, x, hl, alpha).unwrap();
        assert_eq!(tape.value(s).item(), 1.0);
        assert!(tape.value(x_new).row_slice(0).iter().all(|&v| v == 0.0));

        // Saturated-off sentinel leaves everything untouched.
        set(&mut store, p.vs_b, &[-800.0]);
        let mut tape = Tape::with_params(&store);
        let x = tape.input(st.x.clone());
        let hl = tape.input(st.hl.clone());
        let alpha = tape.input(st.alpha.clone());
        let (x_new, s) = graph_update(&mut tape, &p, x, hl, alpha).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
        assert_eq!(tape.value(x_new), &st.x);
    }

    #[test]
    fn full_step_distributions_are_valid() {
        let (store, p) = setup(11);
        let (_, ops) = flow_of(&chain());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let st = random_state(&mut rng, 5);
            let mut tape = Tape::with_params(&store);
            let sv = StateVars::load(&mut tape, &st);
            let vbar = tape.input(Tensor::full(&[1, D], 0.2));
            let out = decode_step(&mut tape, &p, DecodeOptions::default(), &ops, &sv, vbar, 2).unwrap();
            let info = StepInfo::read(&tape, &out, DecodeOptions::default());
            for dist in [Some(info.alpha), info.alpha_c, info.alpha_f].into_iter().flatten() {
                assert!(dist.iter().all(|&v| v >= 0.0));
                assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            assert!(info.beta > 0.0 && info.beta < 1.0);
        }
    }

    #[test]
    fn rejects_bad_options_and_tokens() {
        let (store, p) = setup(13);
        let (_, ops) = flow_of(&chain());
        let mut tape = Tape::with_params(&store);
        let sv = StateVars::load(&mut tape, &init_state(Tensor::full(&[5, D], 0.1)));
        let vbar = tape.input(Tensor::full(&[1, D], 0.2));
        let off = DecodeOptions { content_attn: false, flow_attn: false, graph_update: true };
        assert!(decode_step(&mut tape, &p, off, &ops, &sv, vbar, 0).is_err());
        assert!(decode_step(&mut tape, &p, DecodeOptions::default(), &ops, &sv, vbar, V).is_err());
    }

    #[test]
    fn teacher_forced_decode_gradients() {
        let (mut store, p) = setup(14);
        let (_, ops) = flow_of(&chain());
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let st = random_state(&mut rng, 5);
        let vbar = Tensor::full(&[1, D], 0.3);
        let tokens = [1usize, 3, 4, 0, 2];
        let report = grad_check(&mut store, 1e-5, |tape| {
            let mut sv = StateVars::load(tape, &init_state(st.x.clone()));
            let vb = tape.input(vbar.clone());
            let mut loss: Option<Var> = None;
            for w in tokens.windows(2) {
                let out = decode_step(tape, &p, DecodeOptions::default(), &ops, &sv, vb, w[0])?;
                let lp = tape.pick(out.logp, &[w[1]])?;
                loss = Some(match loss {
                    None => lp,
                    Some(l) => tape.add(l, lp)?,
                });
                sv = out.state;
            }
            tape.scale(loss.unwrap(), -1.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    /// Fixed two-token model where state is the step count.
    struct Toy;
    impl Stepper for Toy {
        type State = usize;
        fn step(&self, state: &usize, token: usize) -> Result<(usize, Vec<f64>, StepInfo)> {
            let p0 = match (state, token) {
                (0, _) => 0.6,
                (_, 0) => 0.1,
                _ => 0.7,
            };
            let info = StepInfo { alpha: vec![1.0], alpha_c: None, alpha_f: None, beta: 1.0, s: None, sentinel: None };
            Ok((state + 1, vec![math::ln(p0), math::ln(1.0 - p0)], info))
        }
    }

    #[test]
    fn beam_enumerates_short_sequences() {
        let cfg = BeamConfig { beam: 4, max_len: 2, bos: 0, eos: None };
        let hyps = beam_search(&Toy, 0, cfg).unwrap();
        assert_eq!(hyps.len(), 4);
        let expect = |a: usize, b: usize| {
            let p1 = if a == 0 { 0.6 } else { 0.4 };
            let q = if a == 0 { 0.1 } else { 0.7 };
            let p2 = if b == 0 { q } else { 1.0 - q };
            math::ln(p1) + math::ln(p2)
        };
        let mut seen = Vec::new();
        for h in &hyps {
            assert!((h.score - expect(h.tokens[0], h.tokens[1])).abs() < 1e-12);
            seen.push(h.tokens.clone());
        }
        seen.sort();
        assert_eq!(seen, vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert!(hyps.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(beam_search(&Toy, 0, BeamConfig { beam: 0, ..cfg }).is_err());
    }

    #[test]
    fn beam_one_is_greedy_and_eos_stops() {
        let cfg = BeamConfig { beam: 1, max_len: 6, bos: 0, eos: Some(0) };
        let b = beam_search(&Toy, 0, cfg).unwrap();
        let g = greedy(&Toy, 0, cfg).unwrap();
        assert_eq!(b[0], g);
        assert_eq!(g.tokens, Vec::<usize>::new());
        assert_eq!(g.trace.len(), 1);
        let cfg = BeamConfig { eos: Some(1), ..cfg };
        let b = beam_search(&Toy, 0, cfg).unwrap();
        assert_eq!(b[0], greedy(&Toy, 0, cfg).unwrap());
    }
}
