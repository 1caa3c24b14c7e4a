//! Dual-head causal transformer: shared trunk, a guidance head regressing
//! subgoal states and an action head producing masked switch distributions.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use gridseq_nn::{masked_softmax, NnError, ParamId, ParamStore, Tape, Var};

use crate::data::{ActionSample, GuidanceSample};
use crate::env::{ActionVector, MaskVector};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("sequence of {len} tokens exceeds max length {max}")]
    TooLong { len: usize, max: usize },
    #[error("mask allows no switch; the episode should already have terminated")]
    EmptyMask,
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Context window: actions per action-head sequence.
    #[serde(rename = "K")]
    pub k: usize,
    pub q: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub seed: u64,
    pub n_cells: usize,
    pub n_switches: usize,
    /// Scalar on the subgoal regression term of the loss.
    pub guidance_weight: f64,
    /// Probability that a training guidance sequence has its slots replaced by null tokens.
    pub null_slot_prob: f64,
    /// Returns are divided by this before entering the RTG projection.
    pub rtg_scale: f64,
}

impl ModelConfig {
    pub fn new(n_cells: usize, n_switches: usize, q: usize, k: usize) -> Self {
        Self {
            embed_dim: 128,
            n_layers: 3,
            n_heads: 4,
            k,
            q,
            max_seq_len: Self::required_len(q, k),
            dropout: 0.1,
            seed: 0,
            n_cells,
            n_switches,
            guidance_weight: 1.0,
            null_slot_prob: 0.5,
            rtg_scale: 1.0,
        }
    }

    pub fn required_len(q: usize, k: usize) -> usize {
        (4 + 3 * q).max(q + 1 + 2 * k)
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n_cells
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad("embed_dim must be a positive multiple of n_heads");
        }
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if self.q == 0 {
            return bad("q must be at least 1");
        }
        if self.max_seq_len < Self::required_len(self.q, self.k) {
            return bad("max_seq_len too small for q and K");
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.null_slot_prob) {
            return bad("dropout and null_slot_prob must be probabilities");
        }
        if self.n_cells == 0 || self.n_switches == 0 {
            return bad("feeder must have cells and switches");
        }
        if !(self.rtg_scale.is_finite() && self.rtg_scale > 0.0) {
            return bad("rtg_scale must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenType {
    Goal = 0,
    State = 1,
    Action = 2,
    Rtg = 3,
    Offset = 4,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Token {
    Goal(Vec<f64>),
    State(Vec<f64>),
    NullState,
    Action(usize),
    NullAction,
    /// Already divided by the RTG scale.
    Rtg(f64),
    NullRtg,
    Offset(Vec<f64>),
}

impl Token {
    pub fn kind(&self) -> TokenType {
        match self {
            Token::Goal(_) => TokenType::Goal,
            Token::State(_) | Token::NullState => TokenType::State,
            Token::Action(_) | Token::NullAction => TokenType::Action,
            Token::Rtg(_) | Token::NullRtg => TokenType::Rtg,
            Token::Offset(_) => TokenType::Offset,
        }
    }
}

/// Guidance tokens. With `null_slots` the initial action and every subgoal
/// slot are replaced by learned null tokens, as at inference.
pub fn guidance_tokens(sample: &GuidanceSample, null_slots: bool, rtg_scale: f64) -> Vec<Token> {
    let action = |a: Option<usize>| match a {
        Some(a) if !null_slots => Token::Action(a),
        _ => Token::NullAction,
    };
    let mut t = vec![
        Token::Goal(sample.goal.clone()),
        Token::State(sample.initial.state.clone()),
        action(sample.initial.action),
        Token::Rtg(sample.initial.rtg / rtg_scale),
    ];
    for slot in &sample.subgoals {
        if null_slots {
            t.extend([Token::NullState, Token::NullAction, Token::NullRtg]);
        } else {
            t.extend([
                Token::State(slot.state.clone()),
                action(slot.action),
                Token::Rtg(slot.rtg / rtg_scale),
            ]);
        }
    }
    t
}

/// Slot `n` (0-based) is read at the token just before its state token.
pub fn guidance_read_positions(q: usize) -> Vec<usize> {
    (0..q).map(|n| 3 + 3 * n).collect()
}

/// Action tokens `[G, s_w, offsets.., a_w, s_w+1, a_w+1, ..]`, ending with
/// whichever of the last state or action the sample holds.
pub fn action_tokens(sample: &ActionSample) -> Vec<Token> {
    let mut t = vec![Token::Goal(sample.goal.clone()), Token::State(sample.anchor.clone())];
    t.extend(sample.offsets.iter().map(|o| Token::Offset(o.clone())));
    for j in 0..sample.actions.len().max(sample.states.len()) {
        if let Some(&a) = sample.actions.get(j) {
            t.push(Token::Action(a));
        }
        if let Some(s) = sample.states.get(j) {
            t.push(Token::State(s.clone()));
        }
    }
    t
}

/// Positions predicting each action: the last offset token for the anchor
/// action, then each body state token.
pub fn action_read_positions(q: usize, n_predictions: usize) -> Vec<usize> {
    (0..n_predictions).map(|j| q + 1 + 2 * j).collect()
}

/// Rejects any action-head sequence that carries return-to-go information.
pub fn check_action_layout(tokens: &[Token], q: usize) -> Result<(), ModelError> {
    if tokens.iter().any(|t| t.kind() == TokenType::Rtg) {
        return Err(ModelError::Layout("RTG token in action-head sequence".into()));
    }
    let ok_prefix = tokens.len() >= q + 2
        && tokens[0].kind() == TokenType::Goal
        && tokens[1].kind() == TokenType::State
        && tokens[2..q + 2].iter().all(|t| t.kind() == TokenType::Offset);
    let ok_body = tokens[(q + 2).min(tokens.len())..].iter().enumerate().all(|(i, t)| {
        let want = if i % 2 == 0 { TokenType::Action } else { TokenType::State };
        t.kind() == want
    });
    if !(ok_prefix && ok_body) {
        return Err(ModelError::Layout("action-head tokens out of order".into()));
    }
    Ok(())
}

struct BlockIds {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

struct Ids {
    goal: (ParamId, ParamId),
    state: (ParamId, ParamId),
    offset: (ParamId, ParamId),
    rtg: (ParamId, ParamId),
    action_table: ParamId,
    null_state: ParamId,
    null_rtg: ParamId,
    type_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<BlockIds>,
    ln_f: (ParamId, ParamId),
    guide: (ParamId, ParamId),
    act: (ParamId, ParamId),
}

/// A guidance sequence with its regression targets.
#[derive(Debug, Clone)]
pub struct GuidanceItem {
    pub tokens: Vec<Token>,
    pub targets: Vec<Vec<f64>>,
}

/// An action sequence with one target and mask per prediction.
#[derive(Debug, Clone)]
pub struct ActionItem {
    pub tokens: Vec<Token>,
    pub targets: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
}

pub struct LossVars {
    pub total: Var,
    pub guidance: Option<Var>,
    pub action: Option<Var>,
}

pub struct DhModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Array2<f64> {
    let a = std * 3f64.sqrt();
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-a..a))
}

impl DhModel {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let d = config.embed_dim;
        let sd = config.state_dim();
        let std = 0.02;
        let linear = |p: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut ChaCha8Rng| {
            (
                p.add(format!("{name}.weight"), uniform(rng, i, o, std)),
                p.add(format!("{name}.bias"), Array2::zeros((1, o))),
            )
        };
        let norm = |p: &mut ParamStore, name: &str| {
            (
                p.add(format!("{name}.gain"), Array2::ones((1, d))),
                p.add(format!("{name}.bias"), Array2::zeros((1, d))),
            )
        };
        let goal = linear(&mut p, "embed.goal", sd, d, &mut rng);
        let state = linear(&mut p, "embed.state", sd, d, &mut rng);
        let offset = linear(&mut p, "embed.offset", sd, d, &mut rng);
        let rtg = linear(&mut p, "embed.rtg", 1, d, &mut rng);
        let action_table = p.add("embed.action", uniform(&mut rng, config.n_switches + 1, d, std));
        let null_state = p.add("embed.null_state", uniform(&mut rng, 1, d, std));
        let null_rtg = p.add("embed.null_rtg", uniform(&mut rng, 1, d, std));
        let type_emb = p.add("embed.type", uniform(&mut rng, 5, d, std));
        let pos_emb = p.add("embed.position", uniform(&mut rng, config.max_seq_len, d, std));
        let mut blocks = Vec::new();
        for l in 0..config.n_layers {
            let name = |s: &str| format!("block{l}.{s}");
            blocks.push(BlockIds {
                ln1: norm(&mut p, &name("ln1")),
                qkv: linear(&mut p, &name("attn.qkv"), d, 3 * d, &mut rng),
                proj: linear(&mut p, &name("attn.proj"), d, d, &mut rng),
                ln2: norm(&mut p, &name("ln2")),
                fc: linear(&mut p, &name("mlp.fc"), d, 4 * d, &mut rng),
                out: linear(&mut p, &name("mlp.out"), 4 * d, d, &mut rng),
            });
        }
        let ln_f = norm(&mut p, "ln_f");
        let guide = linear(&mut p, "head.guidance", d, sd, &mut rng);
        let act = linear(&mut p, "head.action", d, config.n_switches, &mut rng);
        Ok(Self {
            config,
            params: p,
            ids: Ids {
                goal,
                state,
                offset,
                rtg,
                action_table,
                null_state,
                null_rtg,
                type_emb,
                pos_emb,
                blocks,
                ln_f,
                guide,
                act,
            },
        })
    }

    fn check_token(&self, t: &Token) -> Result<(), ModelError> {
        let sd = self.config.state_dim();
        match t {
            Token::Goal(v) | Token::State(v) | Token::Offset(v) if v.len() != sd => Err(ModelError::Layout(
                format!("{:?} token has {} values, expected {sd}", t.kind(), v.len()),
            )),
            Token::Action(a) if *a >= self.config.n_switches => {
                Err(ModelError::Layout(format!("action {a} out of range")))
            }
            _ => Ok(()),
        }
    }

    /// Embeds packed sequences into an `N x d` matrix; returns it with the segment list.
    pub fn encode(&self, tape: &mut Tape, seqs: &[&[Token]]) -> Result<(Var, Vec<(usize, usize)>), ModelError> {
        let d = self.config.embed_dim;
        let sd = self.config.state_dim();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut vec_rows: [(Vec<usize>, Vec<f64>); 3] = Default::default();
        let mut rtg_rows = (Vec::new(), Vec::new());
        let mut act_rows = (Vec::new(), Vec::new());
        let mut null_s = Vec::new();
        let mut null_r = Vec::new();
        let mut types = Vec::new();
        let mut positions = Vec::new();
        let mut n = 0;
        for seq in seqs {
            if seq.len() > self.config.max_seq_len {
                return Err(ModelError::TooLong {
                    len: seq.len(),
                    max: self.config.max_seq_len,
                });
            }
            segments.push((n, seq.len()));
            for (pos, tok) in seq.iter().enumerate() {
                self.check_token(tok)?;
                let row = n + pos;
                types.push(tok.kind() as usize);
                positions.push(pos);
                match tok {
                    Token::Goal(v) => push_row(&mut vec_rows[0], row, v),
                    Token::State(v) => push_row(&mut vec_rows[1], row, v),
                    Token::Offset(v) => push_row(&mut vec_rows[2], row, v),
                    Token::Rtg(r) => push_row(&mut rtg_rows, row, &[*r]),
                    Token::Action(a) => {
                        act_rows.0.push(row);
                        act_rows.1.push(*a);
                    }
                    Token::NullAction => {
                        act_rows.0.push(row);
                        act_rows.1.push(self.config.n_switches);
                    }
                    Token::NullState => null_s.push(row),
                    Token::NullRtg => null_r.push(row),
                }
            }
            n += seq.len();
        }
        let ids = &self.ids;
        let mut parts = Vec::new();
        let maps = [ids.goal, ids.state, ids.offset];
        for (i, (rows, data)) in vec_rows.into_iter().enumerate() {
            if !rows.is_empty() {
                let x = tape.constant(Array2::from_shape_vec((rows.len(), sd), data).expect("rows"));
                parts.push((self.project(tape, x, maps[i]), rows));
            }
        }
        if !rtg_rows.0.is_empty() {
            let x = tape.constant(Array2::from_shape_vec((rtg_rows.0.len(), 1), rtg_rows.1).expect("rows"));
            parts.push((self.project(tape, x, ids.rtg), rtg_rows.0));
        }
        if !act_rows.0.is_empty() {
            let table = tape.param(&self.params, ids.action_table);
            parts.push((tape.gather(table, &act_rows.1), act_rows.0));
        }
        for (rows, id) in [(null_s, ids.null_state), (null_r, ids.null_rtg)] {
            if !rows.is_empty() {
                let table = tape.param(&self.params, id);
                parts.push((tape.gather(table, &vec![0; rows.len()]), rows));
            }
        }
        let content = tape.scatter_rows(n, d, &parts);
        let type_table = tape.param(&self.params, ids.type_emb);
        let te = tape.gather(type_table, &types);
        let pos_table = tape.param(&self.params, ids.pos_emb);
        let pe = tape.gather(pos_table, &positions);
        let x = tape.add(content, te);
        Ok((tape.add(x, pe), segments))
    }

    fn project(&self, tape: &mut Tape, x: Var, (w, b): (ParamId, ParamId)) -> Var {
        let w = tape.param(&self.params, w);
        let b = tape.param(&self.params, b);
        tape.linear(x, w, b)
    }

    fn norm(&self, tape: &mut Tape, x: Var, (g, b): (ParamId, ParamId)) -> Var {
        let g = tape.param(&self.params, g);
        let b = tape.param(&self.params, b);
        tape.layer_norm(x, g, b)
    }

    /// Pre-norm blocks and a final layer norm. `dropout_seed` enables dropout.
    pub fn trunk(&self, tape: &mut Tape, x: Var, segments: &[(usize, usize)], dropout_seed: Option<u64>) -> Var {
        let rate = if dropout_seed.is_some() { self.config.dropout } else { 0.0 };
        let seed = dropout_seed.unwrap_or(0);
        let mut x = tape.dropout(x, rate, seed);
        for (l, b) in self.ids.blocks.iter().enumerate() {
            let h = self.norm(tape, x, b.ln1);
            let qkv = self.project(tape, h, b.qkv);
            let att = tape.causal_attention(qkv, segments, self.config.n_heads);
            let att = self.project(tape, att, b.proj);
            let att = tape.dropout(att, rate, seed.wrapping_add(2 * l as u64 + 1));
            x = tape.add(x, att);
            let h = self.norm(tape, x, b.ln2);
            let f = self.project(tape, h, b.fc);
            let f = tape.gelu(f);
            let f = self.project(tape, f, b.out);
            let f = tape.dropout(f, rate, seed.wrapping_add(2 * l as u64 + 2));
            x = tape.add(x, f);
        }
        self.norm(tape, x, self.ids.ln_f)
    }

    /// Hidden states for one sequence, dropout disabled.
    pub fn trunk_forward(&self, tokens: &[Token]) -> Result<Array2<f64>, ModelError> {
        let mut tape = Tape::new();
        let (x, seg) = self.encode(&mut tape, &[tokens])?;
        let h = self.trunk(&mut tape, x, &seg, None);
        Ok(tape.value(h).clone())
    }

    /// Builds the joint loss `w_g * MSE + mean masked cross-entropy` on one tape.
    pub fn loss(
        &self,
        tape: &mut Tape,
        guidance: &[GuidanceItem],
        actions: &[ActionItem],
        dropout_seed: Option<u64>,
    ) -> Result<LossVars, ModelError> {
        let q = self.config.q;
        let sd = self.config.state_dim();
        for a in actions {
            check_action_layout(&a.tokens, q)?;
        }
        let mut seqs: Vec<&[Token]> = guidance.iter().map(|g| g.tokens.as_slice()).collect();
        seqs.extend(actions.iter().map(|a| a.tokens.as_slice()));
        let (x, segments) = self.encode(tape, &seqs)?;
        let h = self.trunk(tape, x, &segments, dropout_seed);

        let mut terms = Vec::new();
        let mut l_g = None;
        if !guidance.is_empty() {
            let mut rows = Vec::new();
            let mut target = Vec::with_capacity(guidance.len() * q * sd);
            for (i, g) in guidance.iter().enumerate() {
                if g.targets.len() != q || g.tokens.len() != 4 + 3 * q {
                    return Err(ModelError::Layout("guidance sequence does not match q".into()));
                }
                let start = segments[i].0;
                rows.extend(guidance_read_positions(q).into_iter().map(|p| start + p));
                g.targets.iter().for_each(|t| target.extend_from_slice(t));
            }
            let n = rows.len();
            let sel = tape.select_rows(h, &rows);
            let pred = self.project(tape, sel, self.ids.guide);
            let target = Array2::from_shape_vec((n, sd), target).expect("targets");
            let w = self.config.guidance_weight / (n * sd) as f64;
            let v = tape.sse(pred, target, w);
            terms.push(v);
            l_g = Some(v);
        }
        let mut l_a = None;
        let total_preds: usize = actions.iter().map(|a| a.targets.len()).sum();
        if total_preds > 0 {
            let mut rows = Vec::new();
            let mut masks = Vec::new();
            let mut targets = Vec::new();
            for (i, a) in actions.iter().enumerate() {
                let start = segments[guidance.len() + i].0;
                if a.masks.len() != a.targets.len() {
                    return Err(ModelError::Layout("one mask per action target required".into()));
                }
                rows.extend(action_read_positions(q, a.targets.len()).into_iter().map(|p| start + p));
                masks.extend(a.masks.iter().cloned());
                targets.extend_from_slice(&a.targets);
            }
            let sel = tape.select_rows(h, &rows);
            let logits = self.project(tape, sel, self.ids.act);
            let v = tape.masked_cross_entropy(logits, &masks, &targets, 1.0 / total_preds as f64)?;
            terms.push(v);
            l_a = Some(v);
        }
        let total = match terms.as_slice() {
            [] => return Err(ModelError::Layout("empty batch".into())),
            [one] => *one,
            [a, b] => tape.add(*a, *b),
            _ => unreachable!(),
        };
        Ok(LossVars {
            total,
            guidance: l_g,
            action: l_a,
        })
    }

    /// Predicted subgoal vectors (continuous), one per slot.
    pub fn guidance_forward(&self, sample: &GuidanceSample, null_slots: bool) -> Result<Vec<Vec<f64>>, ModelError> {
        let q = self.config.q;
        if sample.subgoals.len() != q {
            return Err(ModelError::Layout(format!("{} subgoal slots, expected {q}", sample.subgoals.len())));
        }
        let tokens = guidance_tokens(sample, null_slots, self.config.rtg_scale);
        let mut tape = Tape::new();
        let (x, seg) = self.encode(&mut tape, &[&tokens])?;
        let h = self.trunk(&mut tape, x, &seg, None);
        let sel = tape.select_rows(h, &guidance_read_positions(q));
        let pred = self.project(&mut tape, sel, self.ids.guide);
        Ok(tape.value(pred).rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// Distribution for the next action of `sample` (which must end on a state
    /// or offset token) under `mask`, plus the raw logits.
    pub fn action_forward(&self, sample: &ActionSample, mask: &MaskVector) -> Result<(ActionVector, Vec<f64>), ModelError> {
        if mask.allowed.len() != self.config.n_switches {
            return Err(ModelError::Layout("mask width differs from switch count".into()));
        }
        if !mask.any() {
            return Err(ModelError::EmptyMask);
        }
        if sample.actions.len() != sample.states.len() {
            return Err(ModelError::Layout("action sample must end on a state".into()));
        }
        let tokens = action_tokens(sample);
        check_action_layout(&tokens, self.config.q)?;
        let mut tape = Tape::new();
        let (x, seg) = self.encode(&mut tape, &[&tokens])?;
        let h = self.trunk(&mut tape, x, &seg, None);
        let pos = *action_read_positions(self.config.q, sample.states.len() + 1).last().expect("one read");
        let sel = tape.select_rows(h, &[pos]);
        let logits = self.project(&mut tape, sel, self.ids.act);
        let logits = tape.value(logits).row(0).to_vec();
        let probs = masked_softmax(&logits, &mask.allowed);
        Ok((ActionVector { probs }, logits))
    }
}

fn push_row(acc: &mut (Vec<usize>, Vec<f64>), row: usize, v: &[f64]) {
    acc.0.push(row);
    acc.1.extend_from_slice(v);
}
