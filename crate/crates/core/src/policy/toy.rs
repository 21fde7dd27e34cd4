//! Linear-softmax toy policy over hashed features.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::parse_turn;
use crate::model::{ActionSpace, ConfigViolation};
use crate::policy::features::{encode, position_features, DecodeState, EncodedContext, PositionFeatures};
use crate::policy::vocab::{Vocab, VocabError, VocabSpec, EOS};
use crate::policy::{DecodeMode, Policy, PolicyContext, PolicyError, SampledTurn};
use crate::seed::mix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    /// Hashed dense rows, each holding one logit per token.
    pub dense_rows: usize,
    /// Hashed scalar pointer weights.
    pub pointer_slots: usize,
    /// Coordinate bins per axis.
    pub bins: usize,
    pub max_len: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { dense_rows: 1 << 14, pointer_slots: 1 << 13, bins: 20, max_len: 96 }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ConfigViolation> {
        if self.dense_rows == 0 || self.pointer_slots == 0 {
            return Err(ConfigViolation::new("dense_rows", "feature tables must be non-empty"));
        }
        if self.bins < 2 {
            return Err(ConfigViolation::new("bins", "need at least 2 bins"));
        }
        if self.max_len == 0 {
            return Err(ConfigViolation::new("max_len", "must be positive"));
        }
        Ok(())
    }
}

/// Fixed architecture: vocabulary, action space and feature table sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocab: Vocab,
    space: ActionSpace,
    config: ToyConfig,
}

/// Log-probabilities of a token sequence and everything needed to backprop.
#[derive(Debug, Clone)]
pub struct Scored {
    pub features: Vec<PositionFeatures>,
    /// Log-softmax over the vocabulary at each position.
    pub log_probs: Vec<Vec<f64>>,
    pub token_logprobs: Vec<f64>,
}

/// Gradient restricted to the touched parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    pub rows: HashMap<u32, Vec<f64>>,
    pub pointers: HashMap<u32, f64>,
}

impl SparseGrad {
    /// Adds `scale * g` where `g` is a gradient with respect to the logits
    /// at a position with features `f`.
    pub fn add_logit_grad(&mut self, f: &PositionFeatures, g: &[f64], scale: f64) {
        for &r in &f.rows {
            let row = self.rows.entry(r).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in row.iter_mut().zip(g) {
                *a += scale * b;
            }
        }
        for &(p, tok) in &f.pointers {
            *self.pointers.entry(p).or_insert(0.0) += scale * g[tok as usize];
        }
    }

    pub fn merge(&mut self, other: &SparseGrad) {
        for (r, g) in &other.rows {
            let row = self.rows.entry(*r).or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in row.iter_mut().zip(g) {
                *a += b;
            }
        }
        for (p, g) in &other.pointers {
            *self.pointers.entry(*p).or_insert(0.0) += g;
        }
    }

    pub fn to_dense(&self, model: &ToyModel) -> Vec<f64> {
        let mut out = vec![0.0; model.dim()];
        self.axpy(model, &mut out, 1.0);
        out
    }

    /// `theta += step * self`
    pub fn axpy(&self, model: &ToyModel, theta: &mut [f64], step: f64) {
        let v = model.vocab.len();
        for (r, g) in &self.rows {
            let base = *r as usize * v;
            for (t, x) in theta[base..base + v].iter_mut().zip(g) {
                *t += step * x;
            }
        }
        let base = model.pointer_offset();
        for (p, g) in &self.pointers {
            theta[base + *p as usize] += step * g;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        let mut keys: Vec<_> = self.rows.keys().copied().collect();
        keys.sort_unstable();
        let dense: f64 = keys.iter().map(|k| self.rows[k].iter().map(|x| x * x).sum::<f64>()).sum();
        let mut pk: Vec<_> = self.pointers.keys().copied().collect();
        pk.sort_unstable();
        dense + pk.iter().map(|k| self.pointers[k].powi(2)).sum::<f64>()
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad parameter file: {0}")]
    Format(String),
}

#[derive(Serialize, Deserialize)]
struct ParamsHeader {
    vocab: VocabSpec,
    action_space: ActionSpace,
    config: ToyConfig,
    dim: usize,
}

const PARAMS_MAGIC: &str = "#navrl-toy-params=1";

impl ToyModel {
    pub fn new(vocab: Vocab, space: ActionSpace, config: ToyConfig) -> Self {
        Self { vocab, space, config }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn dim(&self) -> usize {
        self.pointer_offset() + self.config.pointer_slots
    }

    fn pointer_offset(&self) -> usize {
        self.config.dense_rows * self.vocab.len()
    }

    pub fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    pub fn encode(&self, ctx: &PolicyContext) -> EncodedContext {
        encode(&self.vocab, ctx)
    }

    pub fn features(&self, enc: &EncodedContext, st: &DecodeState) -> PositionFeatures {
        position_features(enc, st, self.config.dense_rows, self.config.pointer_slots)
    }

    pub fn logits(&self, theta: &[f64], f: &PositionFeatures) -> Vec<f64> {
        let v = self.vocab.len();
        let mut z = vec![0.0; v];
        for &r in &f.rows {
            let base = r as usize * v;
            for (a, b) in z.iter_mut().zip(&theta[base..base + v]) {
                *a += b;
            }
        }
        let base = self.pointer_offset();
        for &(p, tok) in &f.pointers {
            z[tok as usize] += theta[base + p as usize];
        }
        z
    }

    pub fn log_probs(&self, theta: &[f64], f: &PositionFeatures) -> Vec<f64> {
        log_softmax(&self.logits(theta, f))
    }

    /// Autoregressive decode. Greedy ties go to the lowest token id.
    pub fn decode(&self, theta: &[f64], enc: &EncodedContext, mut rng: Option<&mut ChaCha8Rng>) -> (Vec<u32>, Vec<f64>) {
        let mut st = DecodeState::default();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        for _ in 0..self.config.max_len {
            let lp = self.log_probs(theta, &self.features(enc, &st));
            let tok = match rng.as_deref_mut() {
                None => {
                    let mut best = 0;
                    for (i, &x) in lp.iter().enumerate() {
                        if x > lp[best] {
                            best = i;
                        }
                    }
                    best
                }
                Some(rng) => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = lp.len() - 1;
                    for (i, &x) in lp.iter().enumerate() {
                        acc += x.exp();
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
            } as u32;
            tokens.push(tok);
            logprobs.push(lp[tok as usize]);
            if tok == EOS {
                break;
            }
            st.push(&self.vocab, tok);
        }
        (tokens, logprobs)
    }

    /// Teacher-forced features for every position of `tokens`.
    pub fn forced_features(&self, enc: &EncodedContext, tokens: &[u32]) -> Result<Vec<PositionFeatures>, VocabError> {
        self.vocab.check(tokens)?;
        let mut st = DecodeState::default();
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            out.push(self.features(enc, &st));
            st.push(&self.vocab, t);
        }
        Ok(out)
    }

    pub fn score(&self, theta: &[f64], enc: &EncodedContext, tokens: &[u32]) -> Result<Scored, VocabError> {
        let features = self.forced_features(enc, tokens)?;
        Ok(self.score_features(theta, features, tokens))
    }

    pub fn score_features(&self, theta: &[f64], features: Vec<PositionFeatures>, tokens: &[u32]) -> Scored {
        let log_probs: Vec<Vec<f64>> = features.iter().map(|f| self.log_probs(theta, f)).collect();
        let token_logprobs = tokens.iter().zip(&log_probs).map(|(&t, lp)| lp[t as usize]).collect();
        Scored { features, log_probs, token_logprobs }
    }

    /// Per-token log-probabilities and the gradient of their sum.
    pub fn logprob_and_grad(
        &self,
        theta: &[f64],
        ctx: &PolicyContext,
        tokens: &[u32],
    ) -> Result<(Vec<f64>, SparseGrad), VocabError> {
        let scored = self.score(theta, &self.encode(ctx), tokens)?;
        let mut grad = SparseGrad::default();
        for ((f, lp), &t) in scored.features.iter().zip(&scored.log_probs).zip(tokens) {
            let mut g: Vec<f64> = lp.iter().map(|x| -x.exp()).collect();
            g[t as usize] += 1.0;
            grad.add_logit_grad(f, &g, 1.0);
        }
        Ok((scored.token_logprobs, grad))
    }

    pub fn render(&self, tokens: &[u32]) -> Result<SampledTurn, VocabError> {
        let text = self.vocab.detokenize(tokens)?;
        Ok(SampledTurn { turn: parse_turn(&text, &self.space), token_ids: None, token_logprobs: None })
    }

    pub fn save_params(&self, path: &Path, theta: &[f64]) -> Result<(), ParamsError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_params(&mut w, theta)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_params<W: Write>(&self, mut w: W, theta: &[f64]) -> Result<(), ParamsError> {
        let header = ParamsHeader {
            vocab: self.vocab.spec().clone(),
            action_space: self.space.clone(),
            config: self.config.clone(),
            dim: theta.len(),
        };
        writeln!(w, "{PARAMS_MAGIC}")?;
        serde_json::to_writer(&mut w, &header).map_err(|e| ParamsError::Format(e.to_string()))?;
        w.write_all(b"\n")?;
        for x in theta {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_params(path: &Path) -> Result<(ToyModel, Vec<f64>), ParamsError> {
        Self::read_params(BufReader::new(File::open(path)?))
    }

    pub fn read_params<R: BufRead>(mut r: R) -> Result<(ToyModel, Vec<f64>), ParamsError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != PARAMS_MAGIC {
            return Err(ParamsError::Format(format!("expected {PARAMS_MAGIC}, found {:?}", line.trim_end())));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: ParamsHeader = serde_json::from_str(&line).map_err(|e| ParamsError::Format(e.to_string()))?;
        let model = ToyModel::new(Vocab::from_spec(header.vocab), header.action_space, header.config);
        if model.dim() != header.dim {
            return Err(ParamsError::Format(format!("dimension {} does not match architecture {}", header.dim, model.dim())));
        }
        let mut bytes = Vec::with_capacity(header.dim * 8);
        r.read_to_end(&mut bytes)?;
        if bytes.len() != header.dim * 8 {
            return Err(ParamsError::Format(format!("expected {} parameter bytes, found {}", header.dim * 8, bytes.len())));
        }
        let theta = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok((model, theta))
    }
}

/// A [`ToyModel`] bound to one parameter snapshot.
#[derive(Debug, Clone)]
pub struct ToyPolicy {
    pub model: Arc<ToyModel>,
    pub theta: Arc<Vec<f64>>,
}

impl ToyPolicy {
    pub fn new(model: Arc<ToyModel>, theta: Arc<Vec<f64>>) -> Self {
        Self { model, theta }
    }

    /// Decodes `n` turns with token ids and log-probabilities.
    pub fn sample_tokens(&self, ctx: &PolicyContext, n: usize, mode: DecodeMode, seed: u64) -> Result<Vec<SampledTurn>, PolicyError> {
        let enc = self.model.encode(ctx);
        let mut out = Vec::with_capacity(n);
        match mode {
            DecodeMode::Greedy => {
                let (tokens, logprobs) = self.model.decode(&self.theta, &enc, None);
                let turn = self.finish(tokens, logprobs)?;
                out.resize(n, turn);
            }
            DecodeMode::Stochastic => {
                for i in 0..n {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64));
                    let (tokens, logprobs) = self.model.decode(&self.theta, &enc, Some(&mut rng));
                    out.push(self.finish(tokens, logprobs)?);
                }
            }
        }
        Ok(out)
    }

    fn finish(&self, tokens: Vec<u32>, logprobs: Vec<f64>) -> Result<SampledTurn, PolicyError> {
        let mut s = self.model.render(&tokens)?;
        s.token_ids = Some(tokens);
        s.token_logprobs = Some(logprobs);
        Ok(s)
    }
}

impl Policy for ToyPolicy {
    fn sample(&self, ctx: &PolicyContext, n: usize, mode: DecodeMode, seed: u64) -> Result<Vec<SampledTurn>, PolicyError> {
        self.sample_tokens(ctx, n, mode, seed)
    }

    fn action_space(&self) -> &ActionSpace {
        &self.model.space
    }
}
