//! Attention-based caption decoder trained to reproduce the input expression.
//!
//! The decoder reads the channel concatenation of the raw and gated visual
//! features, attends over grid cells with a small MLP scorer, and is trained
//! with teacher forcing; the summed per-step cross-entropy (including the
//! closing `<eos>` step) is the caption-consistency loss. The word embedding
//! table is shared with the sentence encoder.

use crate::error::{Error, Result};
use crate::lang::{embed_token, lstm_step, LstmDirParams, LstmDirVars, BOS, EOS};
use crate::optim::{he_limit, uniform_init, ParamId, ParamStore, TapeBindings};
use crate::scalar::{fl, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct CaptionParams {
    lstm: LstmDirParams,
    att_feat: ParamId,
    att_hid: ParamId,
    att_score: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    pub hidden: usize,
    pub max_len: usize,
}

pub struct CaptionVars {
    lstm: LstmDirVars,
    att_feat: Var,
    att_hid: Var,
    att_score: Var,
    out_w: Var,
    out_b: Var,
    hidden: usize,
    max_len: usize,
}

pub fn init_caption<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    feat_channels: usize,
    embed_dim: usize,
    vocab_size: usize,
    hidden: usize,
    att_dim: usize,
    max_len: usize,
    rng: &mut R,
) -> CaptionParams {
    let input_dim = embed_dim + feat_channels;
    let w_ih = store.add(
        "cap.lstm.w_ih",
        uniform_init(rng, vec![input_dim, 4 * hidden], 0.08),
    );
    let w_hh = store.add("cap.lstm.w_hh", uniform_init(rng, vec![hidden, 4 * hidden], 0.08));
    let mut bias = Tensor::zeros(vec![1, 4 * hidden]);
    for i in hidden..2 * hidden {
        bias.data[i] = T::one();
    }
    let bias = store.add("cap.lstm.bias", bias);
    let att_feat = store.add(
        "cap.att.feat",
        uniform_init(rng, vec![feat_channels, att_dim], he_limit(feat_channels)),
    );
    let att_hid =
        store.add("cap.att.hid", uniform_init(rng, vec![hidden, att_dim], he_limit(hidden)));
    let att_score =
        store.add("cap.att.score", uniform_init(rng, vec![att_dim, 1], he_limit(att_dim)));
    let out_w = store.add(
        "cap.out.w",
        uniform_init(rng, vec![hidden + feat_channels, vocab_size], he_limit(hidden + feat_channels)),
    );
    let out_b = store.add("cap.out.b", Tensor::zeros(vec![1, vocab_size]));
    CaptionParams {
        lstm: LstmDirParams { w_ih, w_hh, bias },
        att_feat,
        att_hid,
        att_score,
        out_w,
        out_b,
        hidden,
        max_len,
    }
}

pub fn bind_caption<T: Scalar>(
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    binds: &mut TapeBindings,
    p: &CaptionParams,
) -> CaptionVars {
    CaptionVars {
        lstm: crate::lang::bind_lstm_dir(store, tape, binds, &p.lstm),
        att_feat: store.bind(tape, p.att_feat, binds),
        att_hid: store.bind(tape, p.att_hid, binds),
        att_score: store.bind(tape, p.att_score, binds),
        out_w: store.bind(tape, p.out_w, binds),
        out_b: store.bind(tape, p.out_b, binds),
        hidden: p.hidden,
        max_len: p.max_len,
    }
}

/// Concatenates the raw and gated feature maps along channels, optionally
/// area-resizing to a square grid.
pub fn build_caption_input<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    gated: Var,
    resize: Option<usize>,
) -> Result<Var> {
    let (sf, sg) = (tape.shape(features).to_vec(), tape.shape(gated).to_vec());
    if sf[1] != sg[1] || sf[2] != sg[2] {
        return Err(Error::InvalidConfig(format!(
            "caption input extents differ: {sf:?} vs {sg:?}"
        )));
    }
    let cat = tape.concat_channels(&[features, gated])?;
    match resize {
        Some(g) => Ok(tape.adaptive_avg_pool(cat, g, g)),
        None => Ok(cat),
    }
}

/// Per-sample attention workspace: cell features `[N, F]` and their
/// projection `[N, A]`, computed once and reused across decode steps.
pub struct CaptionFeatures {
    pub feats: Var,
    proj: Var,
}

pub fn prepare_features<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &CaptionVars,
    caption_input: Var,
) -> Result<CaptionFeatures> {
    let s = tape.shape(caption_input).to_vec();
    let (c, n) = (s[0], s[1] * s[2]);
    let flat = tape.reshape(caption_input, vec![c, n])?;
    let feats = tape.transpose(flat);
    let proj = tape.matmul(feats, vars.att_feat)?;
    Ok(CaptionFeatures { feats, proj })
}

pub struct DecodeState {
    pub h: Var,
    pub c: Var,
    pub step: usize,
}

pub fn initial_state<T: Scalar>(tape: &mut Tape<T>, vars: &CaptionVars) -> DecodeState {
    let zero = Tensor::<T>::full(vec![1, vars.hidden], fl(0.0));
    DecodeState { h: tape.constant(zero.clone()), c: tape.constant(zero), step: 0 }
}

pub struct StepOutput {
    pub logits: Var,
    pub attention: Var,
    pub state: DecodeState,
}

/// One decode step: soft attention from the previous hidden state, LSTM over
/// `[embed(prev), context]`, logits from `[hidden, context]`.
pub fn step<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &CaptionVars,
    embed: Var,
    feats: &CaptionFeatures,
    prev_word: usize,
    state: DecodeState,
) -> Result<StepOutput> {
    let e = embed_token(tape, embed, prev_word)?;
    let hz = tape.matmul(state.h, vars.att_hid)?;
    let u = tape.add_row(feats.proj, hz)?;
    let u = tape.tanh_act(u);
    let scores = tape.matmul(u, vars.att_score)?;
    let attention = tape.softmax(scores);
    let alpha_row = tape.transpose(attention);
    let context = tape.matmul(alpha_row, feats.feats)?;
    let x = tape.concat_cols(&[e, context])?;
    let (h, c) = lstm_step(tape, &vars.lstm, x, state.h, state.c)?;
    let hc = tape.concat_cols(&[h, context])?;
    let z = tape.matmul(hc, vars.out_w)?;
    let logits = tape.add(z, vars.out_b)?;
    Ok(StepOutput { logits, attention, state: DecodeState { h, c, step: state.step + 1 } })
}

/// Teacher-forced cross-entropy summed over `w_1 .. w_T, <eos>`.
pub fn caption_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &CaptionVars,
    embed: Var,
    feats: &CaptionFeatures,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::EmptyExpression);
    }
    if tokens.len() + 1 > vars.max_len {
        return Err(Error::Data(format!(
            "expression of {} tokens exceeds the decoder cap {}",
            tokens.len(),
            vars.max_len
        )));
    }
    let mut state = initial_state(tape, vars);
    let mut prev = BOS;
    let mut total: Option<Var> = None;
    for t in 0..=tokens.len() {
        let target = if t < tokens.len() { tokens[t] } else { EOS };
        let out = step(tape, vars, embed, feats, prev, state)?;
        let l = tape.softmax_ce(out.logits, target)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
        state = out.state;
        prev = target;
    }
    Ok(total.expect("at least one scored step"))
}

/// Greedy argmax decoding from `<bos>` until `<eos>` or the length cap;
/// returns tokens without the markers.
pub fn greedy_decode<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &CaptionVars,
    embed: Var,
    feats: &CaptionFeatures,
) -> Result<Vec<usize>> {
    let mut state = initial_state(tape, vars);
    let mut prev = BOS;
    let mut out_tokens = Vec::new();
    for _ in 0..vars.max_len {
        let out = step(tape, vars, embed, feats, prev, state)?;
        let logits = tape.value(out.logits);
        let mut best = (0usize, logits.data[0]);
        for (i, &v) in logits.data.iter().enumerate().skip(1) {
            if v > best.1 {
                best = (i, v);
            }
        }
        if best.0 == EOS {
            break;
        }
        out_tokens.push(best.0);
        state = out.state;
        prev = best.0;
    }
    Ok(out_tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, filled_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(
        seed: u64,
        feat_c: usize,
        vocab: usize,
        hidden: usize,
    ) -> (ParamStore<f64>, CaptionParams, ParamId) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = store.add("lang.embed", uniform_init(&mut rng, vec![vocab, 4], 0.08));
        let p = init_caption(&mut store, feat_c, 4, vocab, hidden, 6, 15, &mut rng);
        (store, p, embed)
    }

    fn zero_store(store: &mut ParamStore<f64>) {
        let names: Vec<String> = store.entries().map(|e| e.name.clone()).collect();
        for n in names {
            let id = store.id(&n).unwrap();
            store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn caption_input_concat_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::zeros(vec![32, 16, 16]));
        let g = tape.constant(Tensor::zeros(vec![32, 16, 16]));
        let cat = build_caption_input(&mut tape, f, g, None).unwrap();
        assert_eq!(tape.shape(cat), &[64, 16, 16]);
        let resized = build_caption_input(&mut tape, f, g, Some(14)).unwrap();
        assert_eq!(tape.shape(resized), &[64, 14, 14]);
    }

    #[test]
    fn caption_input_extent_mismatch_is_error() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::zeros(vec![8, 16, 16]));
        let g = tape.constant(Tensor::zeros(vec![8, 14, 14]));
        assert!(matches!(
            build_caption_input(&mut tape, f, g, None),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn attention_sums_to_one() {
        let (store, p, embed) = setup(1, 6, 12, 8);
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_caption(&store, &mut tape, &mut binds, &p);
        let ev = store.bind(&mut tape, embed, &mut binds);
        let input = tape.constant(filled_tensor(2, vec![6, 4, 4], 1.0));
        let feats = prepare_features(&mut tape, &vars, input).unwrap();
        let state = initial_state(&mut tape, &vars);
        let out = step(&mut tape, &vars, ev, &feats, BOS, state).unwrap();
        let total: f64 = tape.value(out.attention).data.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_features_uniform_attention() {
        let (store, p, embed) = setup(3, 6, 12, 8);
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_caption(&store, &mut tape, &mut binds, &p);
        let ev = store.bind(&mut tape, embed, &mut binds);
        let input = tape.constant(Tensor::full(vec![6, 4, 4], 0.37));
        let feats = prepare_features(&mut tape, &vars, input).unwrap();
        let state = initial_state(&mut tape, &vars);
        let out = step(&mut tape, &vars, ev, &feats, BOS, state).unwrap();
        for &a in &tape.value(out.attention).data {
            assert!((a - 1.0 / 16.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_scorer_grads_match_finite_differences() {
        let att_score = filled_tensor(41, vec![6, 1], 0.8);
        let att_hid = filled_tensor(42, vec![4, 6], 0.8);
        let (store, p, embed) = setup(4, 6, 12, 4);
        let report = check_gradients(&[att_score, att_hid], |tape, vs| {
            let mut binds = TapeBindings::new();
            let mut vars = bind_caption(&store, tape, &mut binds, &p);
            let ev = store.bind(tape, embed, &mut binds);
            // Override the scorer pieces with the probed leaves.
            vars.att_score = vs[0];
            vars.att_hid = vs[1];
            // One fixed preliminary step makes h nonzero so att_hid matters.
            let input = tape.constant(filled_tensor(43, vec![6, 3, 3], 1.0));
            let feats = prepare_features(tape, &vars, input).unwrap();
            let state = initial_state(tape, &vars);
            let out = step(tape, &vars, ev, &feats, BOS, state).unwrap();
            let out2 = step(tape, &vars, ev, &feats, 5, out.state).unwrap();
            let ramp = tape.constant(filled_tensor(44, vec![1, 12], 1.0));
            let m = tape.mul(out2.logits, ramp).unwrap();
            tape.sum(m)
        });
        // The attention path re-projects [N,A] each probe; tolerance as spec'd.
        assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
    }

    #[test]
    fn uniform_logits_sum_to_t_plus_one_ln_v() {
        let (mut store, p, embed) = setup(5, 6, 10, 8);
        zero_store(&mut store);
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_caption(&store, &mut tape, &mut binds, &p);
        let ev = store.bind(&mut tape, embed, &mut binds);
        let input = tape.constant(Tensor::zeros(vec![6, 4, 4]));
        let feats = prepare_features(&mut tape, &vars, input).unwrap();
        let l = caption_loss(&mut tape, &vars, ev, &feats, &[4, 7]).unwrap();
        assert!((tape.scalar_value(l) - 3.0 * (10.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn empty_expression_rejected() {
        let (store, p, embed) = setup(6, 6, 10, 8);
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_caption(&store, &mut tape, &mut binds, &p);
        let ev = store.bind(&mut tape, embed, &mut binds);
        let input = tape.constant(Tensor::zeros(vec![6, 4, 4]));
        let feats = prepare_features(&mut tape, &vars, input).unwrap();
        assert!(matches!(
            caption_loss(&mut tape, &vars, ev, &feats, &[]),
            Err(Error::EmptyExpression)
        ));
    }

    #[test]
    fn eos_decoder_emits_empty_sequence() {
        let (mut store, p, embed) = setup(7, 6, 10, 8);
        zero_store(&mut store);
        let id = store.id("cap.out.b").unwrap();
        store.value_mut(id).data[EOS] = 5.0;
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_caption(&store, &mut tape, &mut binds, &p);
        let ev = store.bind(&mut tape, embed, &mut binds);
        let input = tape.constant(Tensor::zeros(vec![6, 4, 4]));
        let feats = prepare_features(&mut tape, &vars, input).unwrap();
        let out = greedy_decode(&mut tape, &vars, ev, &feats).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn greedy_decode_respects_length_cap() {
        let (mut store, p, embed) = setup(8, 6, 10, 8);
        zero_store(&mut store);
        let id = store.id("cap.out.b").unwrap();
        store.value_mut(id).data[7] = 5.0; // always prefers word 7, never eos
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_caption(&store, &mut tape, &mut binds, &p);
        let ev = store.bind(&mut tape, embed, &mut binds);
        let input = tape.constant(Tensor::zeros(vec![6, 4, 4]));
        let feats = prepare_features(&mut tape, &vars, input).unwrap();
        let out = greedy_decode(&mut tape, &vars, ev, &feats).unwrap();
        assert_eq!(out.len(), 15);
        assert!(out.iter().all(|&t| t == 7));
    }
}
