//! Encoder-decoder parser with decode-vocabulary, predicate, type, pointer
//! and detection heads.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use super::tape::{softmax_rows, Tape, Var};
use super::vocab::Question;
use crate::error::{Error, Result};
use crate::grammar::{Category, DecodeToken};
use crate::linker::label_space_size;
use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Hidden width of every feed-forward block, as a multiple of `d_model`.
    pub ffn_mult: usize,
    pub max_input_len: usize,
    pub max_decode_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub num_predicates: usize,
    pub num_types: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 6,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_mult: 4,
            max_input_len: 64,
            max_decode_len: 41,
            dropout: 0.0,
            vocab_size: 0,
            num_predicates: 0,
            num_types: 0,
        }
    }
}

impl ModelConfig {
    /// Per-head width; rounded up when `heads` does not divide `d_model`.
    pub fn head_dim(&self) -> usize {
        self.d_model.div_ceil(self.heads)
    }

    pub fn label_space(&self) -> usize {
        label_space_size(self.num_types)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.d_model > 0, "d_model must be positive"),
            (self.heads > 0, "heads must be positive"),
            (self.ffn_mult > 0, "ffn_mult must be positive"),
            (self.vocab_size > 3, "vocabulary is empty"),
            (self.num_predicates > 0, "no predicates"),
            (self.num_types > 0, "no types"),
            (self.max_input_len >= 2, "max_input_len below 2"),
            (self.max_decode_len >= 2, "max_decode_len below 2"),
            ((0.0..1.0).contains(&self.dropout), "dropout outside [0, 1)"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }
}

/// Contextual token embeddings, one row per input position.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<T> {
    pub h: Array2<T>,
}

impl<T: Scalar> EncoderOutput<T> {
    pub fn len(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.nrows() == 0
    }

    /// Embedding of the trailing context token.
    pub fn context(&self) -> ndarray::ArrayView1<'_, T> {
        self.h.row(self.h.nrows() - 1)
    }
}

/// Next-step distributions after a decode prefix. Pointer distributions
/// cover the content positions only.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDistributions<T> {
    pub token: Vec<T>,
    pub predicate: Vec<T>,
    pub ty: Vec<T>,
    pub entity: Vec<T>,
    pub number: Vec<T>,
}

impl<T: Scalar> StepDistributions<T> {
    pub fn for_category(&self, cat: Category) -> &[T] {
        match cat {
            Category::Entity => &self.entity,
            Category::Predicate => &self.predicate,
            Category::Type => &self.ty,
            Category::Number => &self.number,
            _ => &[],
        }
    }
}

/// Weights of the combined objective `alpha * parsing + detection * tagging`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub detection: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.5,
            detection: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValue {
    pub total: f64,
    pub parsing: f64,
    pub detection: f64,
}

impl LossValue {
    fn add_scaled(&mut self, other: &LossValue, s: f64) {
        self.total += other.total * s;
        self.parsing += other.parsing * s;
        self.detection += other.detection * s;
    }
}

/// `alpha * parsing + beta * detection` on the tape.
pub fn combine_losses<T: Scalar>(tape: &mut Tape<'_, T>, parsing: Var, detection: Var, w: LossWeights) -> Var {
    let a = tape.scale(parsing, T::of(w.alpha));
    let b = tape.scale(detection, T::of(w.detection));
    tape.add(a, b)
}

/// Supervision for one question in index form.
#[derive(Clone, Debug, PartialEq)]
pub struct ParseTargets {
    /// Gold decode tokens including the final `end`.
    pub tokens: Vec<DecodeToken>,
    /// Instantiation label for each entry step.
    pub inst: Vec<Option<usize>>,
    pub labels: Vec<usize>,
}

impl ParseTargets {
    pub fn from_question(q: &Question, cfg: &ModelConfig) -> Result<Self> {
        let n = q.tokens.len();
        let labels = q
            .labels
            .as_ref()
            .ok_or_else(|| Error::data(&q.id, "missing entity tags"))?;
        if labels.len() + 1 != n {
            return Err(Error::data(
                &q.id,
                format!("{} tags for {} content tokens", labels.len(), n - 1),
            ));
        }
        let prog = q
            .program
            .as_ref()
            .ok_or_else(|| Error::data(&q.id, "missing gold program"))?;
        let mut tokens = prog.tokens();
        let mut inst = prog.targets()?;
        tokens.push(DecodeToken::End);
        inst.push(None);
        if tokens.len() > cfg.max_decode_len {
            return Err(Error::data(&q.id, "gold program longer than max_decode_len"));
        }
        for (tok, t) in tokens.iter().zip(&inst) {
            let Some(cat) = tok.entry_category() else { continue };
            let t = t.ok_or_else(|| Error::data(&q.id, format!("no label at {tok} step")))?;
            let bound = match cat {
                Category::Predicate => cfg.num_predicates,
                Category::Type => cfg.num_types,
                _ => n - 1,
            };
            if t >= bound {
                return Err(Error::data(&q.id, format!("{tok} label {t} out of range {bound}")));
            }
        }
        Ok(ParseTargets {
            tokens,
            inst,
            labels: labels.iter().map(|l| l.index()).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TeacherForced {
    pub steps: usize,
    pub token_correct: usize,
    pub entries: usize,
    pub entry_correct: usize,
}

impl TeacherForced {
    pub fn merge(&mut self, o: TeacherForced) {
        self.steps += o.steps;
        self.token_correct += o.token_correct;
        self.entries += o.entries;
        self.entry_correct += o.entry_correct;
    }

    pub fn token_accuracy(&self) -> f64 {
        self.token_correct as f64 / self.steps.max(1) as f64
    }

    pub fn entry_accuracy(&self) -> f64 {
        self.entry_correct as f64 / self.entries.max(1) as f64
    }
}

fn argmax<T: Scalar>(row: ndarray::ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Dropout source for one forward pass.
pub struct Noise {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Noise {
    pub fn off() -> Self {
        Noise { p: 0.0, rng: None }
    }

    pub fn new(p: f64, seed: u64) -> Self {
        Noise {
            p,
            rng: (p > 0.0).then(|| ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn apply<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut() else { return x };
        let keep = 1.0 - self.p;
        let dim = tape.value(x).raw_dim();
        let mask = Array2::from_shape_fn(dim, |_| {
            if rng.gen::<f64>() < keep {
                T::of(1.0 / keep)
            } else {
                T::zero()
            }
        });
        tape.mul_const(x, mask)
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let d = cfg.d_model;
        let inner = cfg.heads * cfg.head_dim();
        let hidden = cfg.ffn_mult * d;
        let r = &mut rng;

        fn linear<T: Scalar>(p: &mut ParamStore<T>, name: &str, i: usize, o: usize, r: &mut ChaCha8Rng) {
            p.insert_uniform(&format!("{name}.w"), (i, o), i, r);
            p.insert_const(&format!("{name}.b"), 1, o, 0.0);
        }
        fn ffn<T: Scalar>(p: &mut ParamStore<T>, name: &str, i: usize, h: usize, o: usize, r: &mut ChaCha8Rng) {
            linear(p, &format!("{name}.l1"), i, h, r);
            linear(p, &format!("{name}.l2"), h, o, r);
        }
        fn attention<T: Scalar>(p: &mut ParamStore<T>, name: &str, d: usize, inner: usize, r: &mut ChaCha8Rng) {
            for part in ["q", "k", "v"] {
                linear(p, &format!("{name}.{part}"), d, inner, r);
            }
            linear(p, &format!("{name}.o"), inner, d, r);
        }
        fn norm<T: Scalar>(p: &mut ParamStore<T>, name: &str, d: usize) {
            p.insert_const(&format!("{name}.g"), 1, d, 1.0);
            p.insert_const(&format!("{name}.b"), 1, d, 0.0);
        }

        p.insert_uniform("enc.embed", (cfg.vocab_size, d), d, r);
        p.insert_uniform("enc.pos", (cfg.max_input_len, d), d, r);
        for l in 0..cfg.encoder_layers {
            attention(&mut p, &format!("enc.{l}.attn"), d, inner, r);
            norm(&mut p, &format!("enc.{l}.ln1"), d);
            ffn(&mut p, &format!("enc.{l}.ffn"), d, hidden, d, r);
            norm(&mut p, &format!("enc.{l}.ln2"), d);
        }
        p.insert_uniform("dec.embed", (DecodeToken::COUNT, d), d, r);
        p.insert_uniform("dec.pos", (cfg.max_decode_len, d), d, r);
        for l in 0..cfg.decoder_layers {
            attention(&mut p, &format!("dec.{l}.self"), d, inner, r);
            norm(&mut p, &format!("dec.{l}.ln1"), d);
            attention(&mut p, &format!("dec.{l}.cross"), d, inner, r);
            norm(&mut p, &format!("dec.{l}.ln2"), d);
            ffn(&mut p, &format!("dec.{l}.ffn"), d, hidden, d, r);
            norm(&mut p, &format!("dec.{l}.ln3"), d);
        }
        ffn(&mut p, "head.tok", d, hidden, DecodeToken::COUNT, r);
        ffn(&mut p, "head.pred", 2 * d, hidden, cfg.num_predicates, r);
        ffn(&mut p, "head.type", 2 * d, hidden, cfg.num_types, r);
        p.insert_uniform("head.ent.w", (d, d), d, r);
        p.insert_uniform("head.num.w", (d, d), d, r);
        ffn(&mut p, "head.det", d, hidden, cfg.label_space(), r);
        Ok(Model { cfg, params: p })
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_tensors(cfg: ModelConfig, tensors: Vec<(String, Array2<T>)>) -> Result<Self> {
        let template = Model::<T>::new(cfg.clone(), 0)?;
        let mut params = ParamStore::default();
        let mut given: std::collections::HashMap<String, Array2<T>> = tensors.into_iter().collect();
        for (name, expected) in template.params.iter() {
            let t = given
                .remove(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            if t.dim() != expected.dim() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.dim(),
                    expected.dim()
                )));
            }
            params.insert(name, t);
        }
        if let Some(extra) = given.keys().next() {
            return Err(Error::Config(format!("unexpected tensor {extra}")));
        }
        Ok(Model { cfg, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    fn linear(&self, t: &mut Tape<'_, T>, x: Var, name: &str) -> Var {
        let w = t.param_named(&format!("{name}.w"));
        let b = t.param_named(&format!("{name}.b"));
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }

    fn ffn(&self, t: &mut Tape<'_, T>, x: Var, name: &str) -> Var {
        let h = self.linear(t, x, &format!("{name}.l1"));
        let h = t.gelu(h);
        self.linear(t, h, &format!("{name}.l2"))
    }

    fn add_norm(&self, t: &mut Tape<'_, T>, x: Var, y: Var, name: &str) -> Var {
        let s = t.add(x, y);
        let g = t.param_named(&format!("{name}.g"));
        let b = t.param_named(&format!("{name}.b"));
        t.layer_norm(s, g, b, LN_EPS)
    }

    fn attention(&self, t: &mut Tape<'_, T>, xq: Var, xkv: Var, name: &str, causal: bool) -> Var {
        let dh = self.cfg.head_dim();
        let q = self.linear(t, xq, &format!("{name}.q"));
        let k = self.linear(t, xkv, &format!("{name}.k"));
        let v = self.linear(t, xkv, &format!("{name}.v"));
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = t.slice_cols(q, a, b);
            let kh = t.slice_cols(k, a, b);
            let vh = t.slice_cols(v, a, b);
            let s = t.matmul_t(qh, kh);
            let s = t.scale(s, scale);
            let p = t.softmax(s, causal);
            outs.push(t.matmul(p, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs) };
        self.linear(t, cat, &format!("{name}.o"))
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.len() < 2 {
            return Err(Error::Input(
                "question needs a content token and the context token".into(),
            ));
        }
        if ids.len() > self.cfg.max_input_len {
            return Err(Error::Input(format!(
                "input of {} tokens exceeds max_input_len {}",
                ids.len(),
                self.cfg.max_input_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Encoder on a tape; returns the `n x d` contextual embeddings.
    pub fn encode_on(&self, t: &mut Tape<'_, T>, ids: &[usize], noise: &mut Noise) -> Result<Var> {
        self.check_ids(ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let emb = t.gather(self.params.id("enc.embed").expect("enc.embed"), ids);
        let pos = t.gather(self.params.id("enc.pos").expect("enc.pos"), &positions);
        let mut x = t.add(emb, pos);
        x = noise.apply(t, x);
        for l in 0..self.cfg.encoder_layers {
            let a = self.attention(t, x, x, &format!("enc.{l}.attn"), false);
            let a = noise.apply(t, a);
            x = self.add_norm(t, x, a, &format!("enc.{l}.ln1"));
            let f = self.ffn(t, x, &format!("enc.{l}.ffn"));
            let f = noise.apply(t, f);
            x = self.add_norm(t, x, f, &format!("enc.{l}.ln2"));
        }
        Ok(x)
    }

    pub fn encode(&self, ids: &[usize]) -> Result<EncoderOutput<T>> {
        let mut t = Tape::new(&self.params);
        let h = self.encode_on(&mut t, ids, &mut Noise::off())?;
        Ok(EncoderOutput { h: t.value(h).clone() })
    }

    /// Decoder states for inputs `inputs` (starting with `start`).
    pub fn decode_on(&self, t: &mut Tape<'_, T>, h: Var, inputs: &[DecodeToken], noise: &mut Noise) -> Result<Var> {
        if inputs.is_empty() || inputs.len() > self.cfg.max_decode_len {
            return Err(Error::Input(format!(
                "decoder input of length {} outside 1..={}",
                inputs.len(),
                self.cfg.max_decode_len
            )));
        }
        let toks: Vec<usize> = inputs.iter().map(|d| d.index()).collect();
        let positions: Vec<usize> = (0..inputs.len()).collect();
        let emb = t.gather(self.params.id("dec.embed").expect("dec.embed"), &toks);
        let pos = t.gather(self.params.id("dec.pos").expect("dec.pos"), &positions);
        let mut y = t.add(emb, pos);
        y = noise.apply(t, y);
        for l in 0..self.cfg.decoder_layers {
            let a = self.attention(t, y, y, &format!("dec.{l}.self"), true);
            let a = noise.apply(t, a);
            y = self.add_norm(t, y, a, &format!("dec.{l}.ln1"));
            let c = self.attention(t, y, h, &format!("dec.{l}.cross"), false);
            let c = noise.apply(t, c);
            y = self.add_norm(t, y, c, &format!("dec.{l}.ln2"));
            let f = self.ffn(t, y, &format!("dec.{l}.ffn"));
            let f = noise.apply(t, f);
            y = self.add_norm(t, y, f, &format!("dec.{l}.ln3"));
        }
        Ok(y)
    }

    /// Logits over the decode vocabulary, one row per decoder state.
    pub fn token_logits_on(&self, t: &mut Tape<'_, T>, s: Var) -> Var {
        self.ffn(t, s, "head.tok")
    }

    /// Instantiation logits for decoder states `s` (`k x d`). Predicate and
    /// type heads see `[s; h_ctx]`; pointer heads score content positions.
    pub fn entry_logits_on(&self, t: &mut Tape<'_, T>, cat: Category, s: Var, h: Var) -> Var {
        let n = t.value(h).nrows();
        let k = t.value(s).nrows();
        match cat {
            Category::Predicate | Category::Type => {
                let ctx = t.select_rows(h, &[n - 1]);
                let rep = t.repeat_row(ctx, k);
                let x = t.concat_cols(&[s, rep]);
                let name = if cat == Category::Predicate {
                    "head.pred"
                } else {
                    "head.type"
                };
                self.ffn(t, x, name)
            }
            Category::Entity | Category::Number => {
                let name = if cat == Category::Entity {
                    "head.ent.w"
                } else {
                    "head.num.w"
                };
                let w = t.param_named(name);
                let sw = t.matmul(s, w);
                let content: Vec<usize> = (0..n - 1).collect();
                let hc = t.select_rows(h, &content);
                t.matmul_t(sw, hc)
            }
            other => panic!("{other} is not an entry category"),
        }
    }

    /// Tagging logits for content positions, `(n - 1) x |labels|`.
    pub fn detection_logits_on(&self, t: &mut Tape<'_, T>, h: Var) -> Var {
        let n = t.value(h).nrows();
        let content: Vec<usize> = (0..n - 1).collect();
        let hc = t.select_rows(h, &content);
        self.ffn(t, hc, "head.det")
    }

    /// Per-token label distributions for the content positions.
    pub fn detection_probs(&self, enc: &EncoderOutput<T>) -> Array2<T> {
        let mut t = Tape::new(&self.params);
        let h = t.constant(enc.h.clone());
        let l = self.detection_logits_on(&mut t, h);
        softmax_rows(t.value(l), false)
    }

    /// Distributions for the token following `prefix` (which excludes
    /// `start`).
    pub fn step_distributions(&self, enc: &EncoderOutput<T>, prefix: &[DecodeToken]) -> Result<StepDistributions<T>> {
        let mut t = Tape::new(&self.params);
        let h = t.constant(enc.h.clone());
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        inputs.push(DecodeToken::Start);
        inputs.extend_from_slice(prefix);
        let s = self.decode_on(&mut t, h, &inputs, &mut Noise::off())?;
        let last = t.select_rows(s, &[inputs.len() - 1]);
        let dist = |t: &mut Tape<'_, T>, v: Var| -> Vec<T> { softmax_rows(t.value(v), false).into_iter().collect() };
        let tok = self.token_logits_on(&mut t, last);
        let token = dist(&mut t, tok);
        let mut heads = Vec::with_capacity(4);
        for cat in [Category::Predicate, Category::Type, Category::Entity, Category::Number] {
            let l = self.entry_logits_on(&mut t, cat, last, h);
            heads.push(dist(&mut t, l));
        }
        let number = heads.pop().expect("4 heads");
        let entity = heads.pop().expect("4 heads");
        let ty = heads.pop().expect("4 heads");
        let predicate = heads.pop().expect("4 heads");
        Ok(StepDistributions {
            token,
            predicate,
            ty,
            entity,
            number,
        })
    }

    /// Builds the weighted objective for one question on `t`. Terms with
    /// zero weight are skipped and reported as zero.
    pub fn loss_on(
        &self,
        t: &mut Tape<'_, T>,
        ids: &[usize],
        targets: &ParseTargets,
        w: LossWeights,
        noise: &mut Noise,
    ) -> Result<(Var, LossValue)> {
        let h = self.encode_on(t, ids, noise)?;
        let zero = t.constant(Array2::zeros((1, 1)));
        let (sp, sp_val) = if w.alpha != 0.0 {
            let sp = self.parsing_loss_on(t, h, targets, noise)?;
            (sp, t.scalar(sp).to_f64_lossy())
        } else {
            (zero, 0.0)
        };
        let (ed, ed_val) = if w.detection != 0.0 {
            let ed = self.detection_loss_on(t, h, targets);
            (ed, t.scalar(ed).to_f64_lossy())
        } else {
            (zero, 0.0)
        };
        let total = combine_losses(t, sp, ed, w);
        let value = LossValue {
            total: t.scalar(total).to_f64_lossy(),
            parsing: sp_val,
            detection: ed_val,
        };
        Ok((total, value))
    }

    fn parsing_loss_on(&self, t: &mut Tape<'_, T>, h: Var, targets: &ParseTargets, noise: &mut Noise) -> Result<Var> {
        let m = targets.tokens.len();
        let mut inputs = Vec::with_capacity(m);
        inputs.push(DecodeToken::Start);
        inputs.extend_from_slice(&targets.tokens[..m - 1]);
        let s = self.decode_on(t, h, &inputs, noise)?;
        let wt = T::of(1.0 / m as f64);
        let logits = self.token_logits_on(t, s);
        let picks = targets
            .tokens
            .iter()
            .enumerate()
            .map(|(j, tok)| (j, tok.index(), wt))
            .collect();
        let mut parts = vec![t.nll(logits, picks)];
        for cat in [Category::Entity, Category::Predicate, Category::Type, Category::Number] {
            let rows: Vec<usize> = (0..m)
                .filter(|&j| targets.tokens[j].entry_category() == Some(cat))
                .collect();
            if rows.is_empty() {
                continue;
            }
            let sel = t.select_rows(s, &rows);
            let logits = self.entry_logits_on(t, cat, sel, h);
            let picks = rows
                .iter()
                .enumerate()
                .map(|(k, &j)| (k, targets.inst[j].expect("validated"), wt))
                .collect();
            parts.push(t.nll(logits, picks));
        }
        Ok(t.sum(&parts))
    }

    fn detection_loss_on(&self, t: &mut Tape<'_, T>, h: Var, targets: &ParseTargets) -> Var {
        let logits = self.detection_logits_on(t, h);
        let wt = T::of(1.0 / targets.labels.len() as f64);
        let picks = targets.labels.iter().enumerate().map(|(i, &l)| (i, l, wt)).collect();
        t.nll(logits, picks)
    }

    /// Loss and gradients for one question, gradients scaled by `seed`.
    pub fn loss_grads(
        &self,
        ids: &[usize],
        targets: &ParseTargets,
        w: LossWeights,
        noise: &mut Noise,
        seed: T,
        grads: &mut Grads<T>,
    ) -> Result<LossValue> {
        let mut t = Tape::new(&self.params);
        let (l, v) = self.loss_on(&mut t, ids, targets, w, noise)?;
        t.backward(l, seed, grads);
        Ok(v)
    }

    /// Mean loss and summed-then-averaged gradients over a batch.
    pub fn batch_loss_grads(
        &self,
        batch: &[(Vec<usize>, &ParseTargets)],
        w: LossWeights,
        noise_seed: Option<u64>,
    ) -> Result<(LossValue, Grads<T>)> {
        use rayon::prelude::*;
        const CHUNK: usize = 8;
        let scale = 1.0 / batch.len().max(1) as f64;
        let partial: Vec<Result<(LossValue, Grads<T>)>> = batch
            .par_chunks(CHUNK)
            .enumerate()
            .map(|(c, chunk)| {
                let mut g = Grads::for_store(&self.params);
                let mut v = LossValue::default();
                for (k, (ids, tg)) in chunk.iter().enumerate() {
                    let mut noise = match noise_seed {
                        Some(s) => Noise::new(
                            self.cfg.dropout,
                            s.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (c * CHUNK + k) as u64,
                        ),
                        None => Noise::off(),
                    };
                    let lv = self.loss_grads(ids, tg, w, &mut noise, T::of(scale), &mut g)?;
                    v.add_scaled(&lv, scale);
                }
                Ok((v, g))
            })
            .collect();
        let mut grads = Grads::for_store(&self.params);
        let mut value = LossValue::default();
        for p in partial {
            let (v, g) = p?;
            value.add_scaled(&v, 1.0);
            grads.merge(g);
        }
        Ok((value, grads))
    }

    /// Argmax agreement with gold tokens and instantiations under teacher
    /// forcing.
    pub fn teacher_forced(&self, ids: &[usize], targets: &ParseTargets) -> Result<TeacherForced> {
        let mut t = Tape::new(&self.params);
        let mut noise = Noise::off();
        let h = self.encode_on(&mut t, ids, &mut noise)?;
        let m = targets.tokens.len();
        let mut inputs = vec![DecodeToken::Start];
        inputs.extend_from_slice(&targets.tokens[..m - 1]);
        let s = self.decode_on(&mut t, h, &inputs, &mut noise)?;
        let logits = self.token_logits_on(&mut t, s);
        let mut out = TeacherForced {
            steps: m,
            ..Default::default()
        };
        let lv = t.value(logits).clone();
        for (j, tok) in targets.tokens.iter().enumerate() {
            if argmax(lv.row(j)) == tok.index() {
                out.token_correct += 1;
            }
        }
        for (j, tok) in targets.tokens.iter().enumerate() {
            let Some(cat) = tok.entry_category() else { continue };
            out.entries += 1;
            let sel = t.select_rows(s, &[j]);
            let l = self.entry_logits_on(&mut t, cat, sel, h);
            if Some(argmax(t.value(l).row(0))) == targets.inst[j] {
                out.entry_correct += 1;
            }
        }
        Ok(out)
    }

    /// Argmax tag per content position.
    pub fn detect(&self, enc: &EncoderOutput<T>) -> Vec<usize> {
        let p = self.detection_probs(enc);
        p.rows().into_iter().map(argmax).collect()
    }
}

/// Coarse parameter group of a tensor name, e.g. `enc.0` or `head.pred`.
pub fn param_group(name: &str) -> &str {
    match name.match_indices('.').nth(1) {
        Some((i, _)) => &name[..i],
        None => name,
    }
}
