//! Expression tokenizer and bi-directional LSTM sentence encoder.
//!
//! A sentence is lowercased, whitespace-split and mapped through the
//! vocabulary; each token is one-hot embedded, passed through a learned
//! linear embedding, and run through forward and backward LSTMs. The sentence
//! feature is the concatenation of the forward-final and backward-final
//! hidden states, so it always has length `2 * hidden_dim`.

use crate::error::{Error, Result};
use crate::optim::{uniform_init, ParamId, ParamStore, TapeBindings};
use crate::scalar::{fl, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::HashMap;
use std::path::Path;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word list with reserved tokens at fixed indices; file order defines ids.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from the non-reserved word list.
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words.into_iter().map(Into::into));
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words: all, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.words[i].clone()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let words: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if words.len() < RESERVED.len() || words[..4] != RESERVED.map(String::from) {
            return Err(Error::Parse(format!(
                "{}: vocabulary must start with the reserved tokens",
                path.display()
            )));
        }
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(Vocabulary { words, index })
    }
}

/// Lowercased whitespace tokenization; unknown words map to `<unk>`.
/// No `<bos>`/`<eos>` markers are added here.
pub fn tokenize(sentence: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let tokens: Vec<usize> =
        sentence.split_whitespace().map(|w| vocab.lookup(&w.to_lowercase())).collect();
    if tokens.is_empty() {
        return Err(Error::EmptyExpression);
    }
    Ok(tokens)
}

// ── LSTM ─────────────────────────────────────────────────────────────

/// Gate order inside the packed `[_, 4H]` matrices: input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmDirParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmDirVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

const INIT_RANGE: f64 = 0.08;

/// Registers one LSTM direction; weights uniform in ±0.08, forget bias 1.
pub fn init_lstm_dir<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    input_dim: usize,
    hidden_dim: usize,
    rng: &mut R,
) -> LstmDirParams {
    let w_ih = store.add(
        &format!("{prefix}.w_ih"),
        uniform_init(rng, vec![input_dim, 4 * hidden_dim], INIT_RANGE),
    );
    let w_hh = store.add(
        &format!("{prefix}.w_hh"),
        uniform_init(rng, vec![hidden_dim, 4 * hidden_dim], INIT_RANGE),
    );
    let mut bias = Tensor::zeros(vec![1, 4 * hidden_dim]);
    for i in hidden_dim..2 * hidden_dim {
        bias.data[i] = T::one();
    }
    let bias = store.add(&format!("{prefix}.bias"), bias);
    LstmDirParams { w_ih, w_hh, bias }
}

pub fn bind_lstm_dir<T: Scalar>(
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    binds: &mut TapeBindings,
    p: &LstmDirParams,
) -> LstmDirVars {
    LstmDirVars {
        w_ih: store.bind(tape, p.w_ih, binds),
        w_hh: store.bind(tape, p.w_hh, binds),
        bias: store.bind(tape, p.bias, binds),
    }
}

/// One LSTM cell update; `x: [1,E]`, `h, c: [1,H]`.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &LstmDirVars,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let hidden = tape.shape(h)[1];
    let zx = tape.matmul(x, vars.w_ih)?;
    let zh = tape.matmul(h, vars.w_hh)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add(z, vars.bias)?;
    let gi = tape.slice_cols(z, 0, hidden)?;
    let gf = tape.slice_cols(z, hidden, hidden)?;
    let gg = tape.slice_cols(z, 2 * hidden, hidden)?;
    let go = tape.slice_cols(z, 3 * hidden, hidden)?;
    let i = tape.sigmoid(gi);
    let f = tape.sigmoid(gf);
    let g = tape.tanh_act(gg);
    let o = tape.sigmoid(go);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh_act(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c_new))
}

// ── sentence encoder ─────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LangParams {
    pub embed: ParamId,
    pub fwd: LstmDirParams,
    pub bwd: LstmDirParams,
    pub hidden_dim: usize,
}

pub struct LangVars {
    pub embed: Var,
    pub fwd: LstmDirVars,
    pub bwd: LstmDirVars,
    pub hidden_dim: usize,
}

/// Sentence feature plus per-step hidden states for diagnostics.
pub struct LangEncoding {
    /// `[1, 2 * hidden_dim]`: forward-final then backward-final state.
    pub feature: Var,
    pub forward_states: Vec<Var>,
    /// Indexed by token position (state t is produced scanning right-to-left).
    pub backward_states: Vec<Var>,
}

pub fn init_lang<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    vocab_size: usize,
    embed_dim: usize,
    hidden_dim: usize,
    rng: &mut R,
) -> LangParams {
    let embed =
        store.add("lang.embed", uniform_init(rng, vec![vocab_size, embed_dim], INIT_RANGE));
    let fwd = init_lstm_dir(store, "lang.fwd", embed_dim, hidden_dim, rng);
    let bwd = init_lstm_dir(store, "lang.bwd", embed_dim, hidden_dim, rng);
    LangParams { embed, fwd, bwd, hidden_dim }
}

pub fn bind_lang<T: Scalar>(
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    binds: &mut TapeBindings,
    p: &LangParams,
) -> LangVars {
    LangVars {
        embed: store.bind(tape, p.embed, binds),
        fwd: bind_lstm_dir(store, tape, binds, &p.fwd),
        bwd: bind_lstm_dir(store, tape, binds, &p.bwd),
        hidden_dim: p.hidden_dim,
    }
}

/// One-hot row `[1, vocab_size]` for a token.
pub fn one_hot<T: Scalar>(tape: &mut Tape<T>, token: usize, vocab_size: usize) -> Result<Var> {
    if token >= vocab_size {
        return Err(Error::Vocabulary { index: token, vocab_size });
    }
    let mut t = Tensor::zeros(vec![1, vocab_size]);
    t.data[token] = T::one();
    Ok(tape.constant(t))
}

/// Looks a token up through the learned embedding table.
pub fn embed_token<T: Scalar>(tape: &mut Tape<T>, embed: Var, token: usize) -> Result<Var> {
    let vocab_size = tape.shape(embed)[0];
    let oh = one_hot(tape, token, vocab_size)?;
    tape.matmul(oh, embed)
}

/// Encodes a token sequence into the sentence feature (forward-final and
/// backward-final hidden states, concatenated).
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &LangVars,
    tokens: &[usize],
) -> Result<LangEncoding> {
    if tokens.is_empty() {
        return Err(Error::EmptyExpression);
    }
    let hidden = vars.hidden_dim;
    let embedded: Vec<Var> =
        tokens.iter().map(|&t| embed_token(tape, vars.embed, t)).collect::<Result<_>>()?;

    let zero = Tensor::<T>::full(vec![1, hidden], fl(0.0));
    let mut h = tape.constant(zero.clone());
    let mut c = tape.constant(zero.clone());
    let mut forward_states = Vec::with_capacity(tokens.len());
    for &x in &embedded {
        let (nh, nc) = lstm_step(tape, &vars.fwd, x, h, c)?;
        forward_states.push(nh);
        h = nh;
        c = nc;
    }
    let fwd_final = h;

    let mut h = tape.constant(zero.clone());
    let mut c = tape.constant(zero);
    let mut backward_states = vec![Var(0); tokens.len()];
    for (t, &x) in embedded.iter().enumerate().rev() {
        let (nh, nc) = lstm_step(tape, &vars.bwd, x, h, c)?;
        backward_states[t] = nh;
        h = nh;
        c = nc;
    }
    let bwd_final = h;

    let feature = tape.concat_cols(&[fwd_final, bwd_final])?;
    Ok(LangEncoding { feature, forward_states, backward_states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, filled_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_vocab() -> Vocabulary {
        Vocabulary::new(["red", "blue", "square", "circle"])
    }

    #[test]
    fn tokenize_direct_lookup() {
        let v = test_vocab();
        let t = tokenize("red square", &v).unwrap();
        assert_eq!(t, vec![v.lookup("red"), v.lookup("square")]);
    }

    #[test]
    fn tokenize_case_folds() {
        let v = test_vocab();
        assert_eq!(tokenize("RED square", &v).unwrap(), tokenize("red square", &v).unwrap());
    }

    #[test]
    fn tokenize_unknown_maps_to_unk() {
        let v = test_vocab();
        let t = tokenize("crimson square", &v).unwrap();
        assert_eq!(t, vec![UNK, v.lookup("square")]);
    }

    #[test]
    fn tokenize_empty_is_error() {
        let v = test_vocab();
        assert!(matches!(tokenize("   ", &v), Err(Error::EmptyExpression)));
    }

    #[test]
    fn vocab_roundtrip_preserves_order() {
        let v = test_vocab();
        let dir = std::env::temp_dir().join("refseg_lang_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("vocab.txt");
        v.save(&p).unwrap();
        let back = Vocabulary::load(&p).unwrap();
        assert_eq!(back.len(), v.len());
        for i in 0..v.len() {
            assert_eq!(back.word(i), v.word(i));
        }
    }

    fn zeroed_lang(store: &mut ParamStore<f64>, vocab: usize, e: usize, h: usize) -> LangParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = init_lang(store, vocab, e, h, &mut rng);
        let names: Vec<String> = store.entries().map(|e| e.name.clone()).collect();
        for name in names {
            let id = store.id(&name).unwrap();
            let t = store.value_mut(id);
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        p.hidden_dim = h;
        p
    }

    #[test]
    fn zero_weights_give_zero_feature() {
        let mut store = ParamStore::<f64>::new();
        let p = zeroed_lang(&mut store, 8, 4, 5);
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_lang(&store, &mut tape, &mut binds, &p);
        let enc = encode(&mut tape, &vars, &[4, 5, 6]).unwrap();
        let f = tape.value(enc.feature);
        assert_eq!(f.shape, vec![1, 10]);
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_boundary() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_lang(&mut store, 8, 4, 5, &mut rng);
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_lang(&store, &mut tape, &mut binds, &p);
        let enc = encode(&mut tape, &vars, &[7]).unwrap();
        assert_eq!(enc.forward_states.len(), 1);
        assert_eq!(enc.backward_states.len(), 1);
        // With one token, both final states come from the same step.
        let f = tape.value(enc.feature).data.clone();
        let fwd = tape.value(enc.forward_states[0]).data.clone();
        let bwd = tape.value(enc.backward_states[0]).data.clone();
        assert_eq!(&f[..5], &fwd[..]);
        assert_eq!(&f[5..], &bwd[..]);
    }

    #[test]
    fn feature_length_is_twice_hidden_for_any_length() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = init_lang(&mut store, 9, 4, 6, &mut rng);
        for t_len in 1..=12 {
            let mut tape = Tape::new();
            let mut binds = TapeBindings::new();
            let vars = bind_lang(&store, &mut tape, &mut binds, &p);
            let tokens: Vec<usize> = (0..t_len).map(|i| 4 + (i % 5)).collect();
            let enc = encode(&mut tape, &vars, &tokens).unwrap();
            assert_eq!(tape.shape(enc.feature), &[1, 12]);
        }
    }

    #[test]
    fn token_out_of_vocab_is_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init_lang(&mut store, 8, 4, 5, &mut rng);
        let mut tape = Tape::new();
        let mut binds = TapeBindings::new();
        let vars = bind_lang(&store, &mut tape, &mut binds, &p);
        assert!(matches!(
            encode(&mut tape, &vars, &[8]),
            Err(Error::Vocabulary { index: 8, vocab_size: 8 })
        ));
    }

    #[test]
    fn reversal_swaps_feature_halves_when_directions_swap() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = init_lang(&mut store, 10, 4, 5, &mut rng);
        let tokens = [4, 7, 5, 9];
        let reversed: Vec<usize> = tokens.iter().rev().copied().collect();

        let run = |fwd: LstmDirParams, bwd: LstmDirParams, toks: &[usize]| {
            let q = LangParams { embed: p.embed, fwd, bwd, hidden_dim: 5 };
            let mut tape = Tape::new();
            let mut binds = TapeBindings::new();
            let vars = bind_lang(&store, &mut tape, &mut binds, &q);
            let enc = encode(&mut tape, &vars, toks).unwrap();
            tape.value(enc.feature).data.clone()
        };

        let original = run(p.fwd, p.bwd, &tokens);
        let swapped = run(p.bwd, p.fwd, &reversed);
        let (a, b) = original.split_at(5);
        let (c, d) = swapped.split_at(5);
        assert_eq!(a, d);
        assert_eq!(b, c);
    }

    #[test]
    fn lstm_encode_grads_match_finite_differences() {
        // Random weights, T=3: gradient of a scalar of the sentence feature
        // w.r.t. every gate weight and the embedding.
        let e = 3;
        let h = 4;
        let v = 6;
        let inputs = vec![
            filled_tensor(61, vec![v, e], 0.5),     // embed
            filled_tensor(62, vec![e, 4 * h], 0.5), // fwd w_ih
            filled_tensor(63, vec![h, 4 * h], 0.5), // fwd w_hh
            filled_tensor(64, vec![1, 4 * h], 0.5), // fwd bias
            filled_tensor(65, vec![e, 4 * h], 0.5), // bwd w_ih
            filled_tensor(66, vec![h, 4 * h], 0.5), // bwd w_hh
            filled_tensor(67, vec![1, 4 * h], 0.5), // bwd bias
        ];
        let report = check_gradients(&inputs, |tape, vars| {
            let lang_vars = LangVars {
                embed: vars[0],
                fwd: LstmDirVars { w_ih: vars[1], w_hh: vars[2], bias: vars[3] },
                bwd: LstmDirVars { w_ih: vars[4], w_hh: vars[5], bias: vars[6] },
                hidden_dim: h,
            };
            let enc = encode(tape, &lang_vars, &[1, 4, 2]).unwrap();
            // Weighted sum keeps every feature coordinate observable.
            let ramp = filled_tensor(68, vec![1, 2 * h], 1.0);
            let k = tape.constant(ramp);
            let weighted = tape.mul(enc.feature, k).unwrap();
            tape.sum(weighted)
        });
        assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
    }
}
