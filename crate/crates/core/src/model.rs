//! Rally outcome model.
//!
//! Pipeline for one rally of N shots:
//!
//! 1. encode each shot (see [`crate::encoder`]) into an N × d_shot matrix;
//! 2. run two same-padded 1-D CNNs with ReLU and interleave their outputs by
//!    row parity, odd (1-based) rows from the first CNN and even rows from the
//!    second, giving short-term patterns `p` (N × d_cnn);
//! 3. scan `p` with a bidirectional GRU (d_gru / 2 units per direction, zero
//!    initial state) giving long-term states `h` (N × d_gru);
//! 4. score each step from `p_n ⊕ h_n`, softmax the scores into attention
//!    weights `α`, and pool `r̂ = Σ α_n (p_n ⊕ h_n)`;
//! 5. `P_win = σ((r̂ ⊕ R̂) W_L + b_L)` where `R̂` is the rally context.
//!
//! Training minimizes binary cross-entropy plus λ times the squared norm of
//! every weight matrix (biases and embeddings excluded).
//!
//! Each stage can be switched off through [`ModelConfig`] for ablations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Gradients, Graph, Tensor, Var};
use crate::blsr::{Area, Instance, PlayerId, ShotType};
use crate::encoder::{self, EncodedRally, EncoderParams, RallyContext, TemporalTables, FLAG_COUNT};
use crate::{Error, Result};

pub use crate::autodiff::alternate_merge;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Predicted-win threshold on `P_win`.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_loc: usize,
    pub d_type: usize,
    pub d_cnn: usize,
    /// Total bidirectional width; each direction gets half.
    pub d_gru: usize,
    pub kernel_size: usize,
    pub d_rally: usize,
    pub lambda: f64,
    pub use_two_cnns: bool,
    pub use_cnn: bool,
    pub use_bigru: bool,
    pub use_temporal_score: bool,
    pub use_attention: bool,
    pub use_rally_input: bool,
    /// Normalize attention scores by their plain sum instead of softmax.
    pub literal_normalization: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_loc: 10,
            d_type: 15,
            d_cnn: 32,
            d_gru: 32,
            kernel_size: 3,
            d_rally: RallyContext::DIM,
            lambda: 0.01,
            use_two_cnns: true,
            use_cnn: true,
            use_bigru: true,
            use_temporal_score: true,
            use_attention: true,
            use_rally_input: true,
            literal_normalization: false,
        }
    }
}

/// Single-component ablations of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    TwoCnns,
    Cnn,
    BiGru,
    TemporalScore,
    Attention,
    RallyInput,
    LiteralNormalization,
}

impl Ablation {
    /// The structural ablations, one per model component.
    pub const STRUCTURAL: [Ablation; 6] = [
        Ablation::TwoCnns,
        Ablation::Cnn,
        Ablation::BiGru,
        Ablation::TemporalScore,
        Ablation::Attention,
        Ablation::RallyInput,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::TwoCnns => "w/o 2 CNNs",
            Ablation::Cnn => "w/o CNN",
            Ablation::BiGru => "w/o BiGRU",
            Ablation::TemporalScore => "w/o temporal score",
            Ablation::Attention => "w/o attention",
            Ablation::RallyInput => "w/o rally input",
            Ablation::LiteralNormalization => "literal score normalization",
        }
    }
}

impl ModelConfig {
    pub fn with_ablation(&self, ablation: Ablation) -> ModelConfig {
        let mut c = self.clone();
        match ablation {
            Ablation::TwoCnns => c.use_two_cnns = false,
            Ablation::Cnn => c.use_cnn = false,
            Ablation::BiGru => c.use_bigru = false,
            Ablation::TemporalScore => c.use_temporal_score = false,
            Ablation::Attention => c.use_attention = false,
            Ablation::RallyInput => c.use_rally_input = false,
            Ablation::LiteralNormalization => c.literal_normalization = true,
        }
        c
    }

    pub fn d_shot(&self) -> usize {
        self.d_type + 3 * self.d_loc + FLAG_COUNT
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.kernel_size % 2 == 0 {
            return bad("kernel_size must be odd");
        }
        if [self.d_loc, self.d_type, self.d_cnn, self.d_gru, self.kernel_size].contains(&0) {
            return bad("dimensions must be positive");
        }
        if self.d_gru % 2 != 0 {
            return bad("d_gru must be even (split across two directions)");
        }
        if self.d_rally != RallyContext::DIM {
            return bad("d_rally must be 2 (score difference, consecutive points)");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    /// K × C_in × C_out.
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    /// c × 3h, blocks ordered update, reset, candidate.
    pub w_x: Tensor,
    /// h × 3h.
    pub w_h: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub conv1: Option<ConvParams>,
    pub conv2: Option<ConvParams>,
    /// Replaces the CNNs when they are disabled.
    pub pattern_proj: Option<DenseParams>,
    pub gru_forward: Option<GruParams>,
    pub gru_backward: Option<GruParams>,
    /// Replaces the BiGRU when it is disabled.
    pub sequence_proj: Option<DenseParams>,
    pub attention: Option<DenseParams>,
    pub output: DenseParams,
}

fn dense_zeros(a: usize, b: usize) -> DenseParams {
    DenseParams {
        weight: Tensor::zeros(&[a, b]),
        bias: Tensor::zeros(&[b]),
    }
}

fn conv_zeros(k: usize, c_in: usize, c_out: usize) -> ConvParams {
    ConvParams {
        kernel: Tensor::zeros(&[k, c_in, c_out]),
        bias: Tensor::zeros(&[c_out]),
    }
}

fn gru_zeros(c: usize, h: usize) -> GruParams {
    GruParams {
        w_x: Tensor::zeros(&[c, 3 * h]),
        w_h: Tensor::zeros(&[h, 3 * h]),
        bias: Tensor::zeros(&[3 * h]),
    }
}

impl ModelParams {
    /// All-zero parameters shaped for `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> ModelParams {
        let d_shot = cfg.d_shot();
        let k = cfg.kernel_size;
        let half = cfg.d_gru / 2;
        let pooled = cfg.d_cnn + cfg.d_gru;
        let out_in = pooled + if cfg.use_rally_input { cfg.d_rally } else { 0 };
        ModelParams {
            encoder: EncoderParams {
                location_table: Tensor::zeros(&[Area::COUNT, cfg.d_loc]),
                type_table: Tensor::zeros(&[ShotType::ALL.len(), cfg.d_type]),
                temporal: cfg.use_temporal_score.then(|| TemporalTables {
                    theta: Tensor::zeros(&[ShotType::ALL.len()]),
                    mu: Tensor::zeros(&[ShotType::ALL.len()]),
                }),
            },
            conv1: cfg.use_cnn.then(|| conv_zeros(k, d_shot, cfg.d_cnn)),
            conv2: (cfg.use_cnn && cfg.use_two_cnns).then(|| conv_zeros(k, d_shot, cfg.d_cnn)),
            pattern_proj: (!cfg.use_cnn).then(|| dense_zeros(d_shot, cfg.d_cnn)),
            gru_forward: cfg.use_bigru.then(|| gru_zeros(cfg.d_cnn, half)),
            gru_backward: cfg.use_bigru.then(|| gru_zeros(cfg.d_cnn, half)),
            sequence_proj: (!cfg.use_bigru).then(|| dense_zeros(cfg.d_cnn, cfg.d_gru)),
            attention: cfg.use_attention.then(|| dense_zeros(pooled, 1)),
            output: dense_zeros(out_in, 1),
        }
    }

    /// Random initialization: embeddings uniform on ±0.05, temporal tables
    /// and biases zero, weight matrices Glorot-uniform.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ModelParams> {
        cfg.validate()?;
        let mut params = ModelParams::zeros(cfg);
        for (name, t) in params.slots_mut() {
            match ParamKind::of(name) {
                ParamKind::Embedding => t
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-encoder::EMBEDDING_INIT..=encoder::EMBEDDING_INIT)),
                ParamKind::Weight => {
                    let (fan_in, fan_out) = match t.shape() {
                        [k, i, o] => (k * i, k * o),
                        [i, o] => (*i, *o),
                        s => unreachable!("weight {name} with shape {s:?}"),
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-limit..=limit));
                }
                ParamKind::Bias | ParamKind::Temporal => {}
            }
        }
        Ok(params)
    }

    /// Every tensor with its name, in the canonical slot order.
    pub fn slots(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v: Vec<(&'static str, &Tensor)> = vec![
            ("encoder.location_table", &self.encoder.location_table),
            ("encoder.type_table", &self.encoder.type_table),
        ];
        if let Some(t) = &self.encoder.temporal {
            v.push(("encoder.theta", &t.theta));
            v.push(("encoder.mu", &t.mu));
        }
        if let Some(c) = &self.conv1 {
            v.push(("conv1.kernel", &c.kernel));
            v.push(("conv1.bias", &c.bias));
        }
        if let Some(c) = &self.conv2 {
            v.push(("conv2.kernel", &c.kernel));
            v.push(("conv2.bias", &c.bias));
        }
        if let Some(d) = &self.pattern_proj {
            v.push(("pattern_proj.weight", &d.weight));
            v.push(("pattern_proj.bias", &d.bias));
        }
        if let Some(g) = &self.gru_forward {
            v.push(("gru_forward.w_x", &g.w_x));
            v.push(("gru_forward.w_h", &g.w_h));
            v.push(("gru_forward.bias", &g.bias));
        }
        if let Some(g) = &self.gru_backward {
            v.push(("gru_backward.w_x", &g.w_x));
            v.push(("gru_backward.w_h", &g.w_h));
            v.push(("gru_backward.bias", &g.bias));
        }
        if let Some(d) = &self.sequence_proj {
            v.push(("sequence_proj.weight", &d.weight));
            v.push(("sequence_proj.bias", &d.bias));
        }
        if let Some(d) = &self.attention {
            v.push(("attention.weight", &d.weight));
            v.push(("attention.bias", &d.bias));
        }
        v.push(("output.weight", &self.output.weight));
        v.push(("output.bias", &self.output.bias));
        v
    }

    /// Mutable counterpart of [`ModelParams::slots`], same order.
    pub fn slots_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v: Vec<(&'static str, &mut Tensor)> = vec![
            ("encoder.location_table", &mut self.encoder.location_table),
            ("encoder.type_table", &mut self.encoder.type_table),
        ];
        if let Some(t) = &mut self.encoder.temporal {
            v.push(("encoder.theta", &mut t.theta));
            v.push(("encoder.mu", &mut t.mu));
        }
        if let Some(c) = &mut self.conv1 {
            v.push(("conv1.kernel", &mut c.kernel));
            v.push(("conv1.bias", &mut c.bias));
        }
        if let Some(c) = &mut self.conv2 {
            v.push(("conv2.kernel", &mut c.kernel));
            v.push(("conv2.bias", &mut c.bias));
        }
        if let Some(d) = &mut self.pattern_proj {
            v.push(("pattern_proj.weight", &mut d.weight));
            v.push(("pattern_proj.bias", &mut d.bias));
        }
        if let Some(g) = &mut self.gru_forward {
            v.push(("gru_forward.w_x", &mut g.w_x));
            v.push(("gru_forward.w_h", &mut g.w_h));
            v.push(("gru_forward.bias", &mut g.bias));
        }
        if let Some(g) = &mut self.gru_backward {
            v.push(("gru_backward.w_x", &mut g.w_x));
            v.push(("gru_backward.w_h", &mut g.w_h));
            v.push(("gru_backward.bias", &mut g.bias));
        }
        if let Some(d) = &mut self.sequence_proj {
            v.push(("sequence_proj.weight", &mut d.weight));
            v.push(("sequence_proj.bias", &mut d.bias));
        }
        if let Some(d) = &mut self.attention {
            v.push(("attention.weight", &mut d.weight));
            v.push(("attention.bias", &mut d.bias));
        }
        v.push(("output.weight", &mut self.output.weight));
        v.push(("output.bias", &mut self.output.bias));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.slots().iter().map(|(_, t)| t.len()).sum()
    }

    /// Sum of squared entries of all regularized weight matrices.
    pub fn regularization(&self) -> f64 {
        self.slots()
            .iter()
            .filter(|(n, _)| ParamKind::of(n) == ParamKind::Weight)
            .map(|(_, t)| t.sum_squares())
            .sum()
    }

    fn bind<'p>(&'p self, g: &mut Graph<'p>) -> Result<Bound> {
        let mut vars = Vec::new();
        for (slot, (name, t)) in self.slots().into_iter().enumerate() {
            vars.push((name, g.param(slot, t)?));
        }
        Ok(Bound(vars))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Embedding,
    Temporal,
    Weight,
    Bias,
}

impl ParamKind {
    fn of(name: &str) -> ParamKind {
        match name {
            "encoder.location_table" | "encoder.type_table" => ParamKind::Embedding,
            "encoder.theta" | "encoder.mu" => ParamKind::Temporal,
            n if n.ends_with("bias") => ParamKind::Bias,
            _ => ParamKind::Weight,
        }
    }
}

/// Parameter nodes of one graph in slot order, so reductions over them are
/// summed in a fixed order.
struct Bound(Vec<(&'static str, Var)>);

impl Bound {
    fn get(&self, name: &str) -> Result<Var> {
        self.0
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::InvalidConfig(format!("parameters lack `{name}` required by the config")))
    }
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// N × d_shot encoded shots.
    pub features: Tensor,
    /// N × d_cnn short-term patterns.
    pub patterns: Tensor,
    /// N × d_gru long-term states.
    pub hidden: Tensor,
    pub attention: Vec<f64>,
    /// d_cnn + d_gru pooled representation.
    pub pooled: Vec<f64>,
    pub context: RallyContext,
    pub p_win: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub cross_entropy: f64,
    pub regularization: f64,
}

pub fn predicts_win(p_win: f64) -> bool {
    p_win > DECISION_THRESHOLD
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

fn encode_on_graph(g: &mut Graph<'_>, b: &Bound, inst: &Instance, cfg: &ModelConfig) -> Result<Var> {
    let shots = &inst.shots;
    if shots.is_empty() {
        return Err(Error::EmptyRally);
    }
    let types: Vec<usize> = shots.iter().map(|s| s.shot_type.index()).collect();
    let mut type_rows = g.lookup(b.get("encoder.type_table")?, &types)?;
    if cfg.use_temporal_score {
        let timestamps: Vec<f64> = shots.iter().map(|s| s.timestamp).collect();
        let taus = g.constant(Tensor::vector(encoder::time_proportions(&timestamps)?))?;
        let theta = g.lookup(b.get("encoder.theta")?, &types)?;
        let mu = g.lookup(b.get("encoder.mu")?, &types)?;
        let slope = g.mul(mu, taus)?;
        let pre = g.add(theta, slope)?;
        let delta = g.sigmoid(pre)?;
        type_rows = g.scale_rows(type_rows, delta)?;
    }
    let loc = b.get("encoder.location_table")?;
    let hit = g.lookup(loc, &shots.iter().map(|s| s.hit_area.index()).collect::<Vec<_>>())?;
    let player = g.lookup(loc, &shots.iter().map(|s| s.player_area.index()).collect::<Vec<_>>())?;
    let opponent = g.lookup(loc, &shots.iter().map(|s| s.opponent_area.index()).collect::<Vec<_>>())?;
    let flags: Vec<f64> = shots
        .iter()
        .flat_map(|s| encoder::shot_flags(s, inst.target))
        .collect();
    let flags = g.constant(Tensor::matrix(shots.len(), FLAG_COUNT, flags)?)?;
    g.concat(&[type_rows, hit, player, opponent, flags])
}

fn patterns_on_graph(g: &mut Graph<'_>, b: &Bound, features: Var, cfg: &ModelConfig) -> Result<Var> {
    if !cfg.use_cnn {
        return g.dense(features, b.get("pattern_proj.weight")?, b.get("pattern_proj.bias")?);
    }
    let c1 = g.conv1d_same(features, b.get("conv1.kernel")?, b.get("conv1.bias")?)?;
    let p_hat = g.relu(c1)?;
    if !cfg.use_two_cnns {
        return Ok(p_hat);
    }
    let c2 = g.conv1d_same(features, b.get("conv2.kernel")?, b.get("conv2.bias")?)?;
    let p_bar = g.relu(c2)?;
    g.alternate_merge(p_hat, p_bar)
}

fn sequence_on_graph(g: &mut Graph<'_>, b: &Bound, patterns: Var, cfg: &ModelConfig) -> Result<Var> {
    if !cfg.use_bigru {
        return g.dense(patterns, b.get("sequence_proj.weight")?, b.get("sequence_proj.bias")?);
    }
    let n = g.value(patterns).rows();
    let half = cfg.d_gru / 2;
    let steps: Vec<Var> = (0..n).map(|i| g.row(patterns, i)).collect::<Result<_>>()?;

    let scan = |g: &mut Graph<'_>, prefix: &str, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Option<Var>>> {
        let (wx, wh, bias) = (
            b.get(&format!("{prefix}.w_x"))?,
            b.get(&format!("{prefix}.w_h"))?,
            b.get(&format!("{prefix}.bias"))?,
        );
        let mut h = g.constant(Tensor::zeros(&[half]))?;
        let mut out = vec![None; n];
        for i in order {
            h = g.gru_cell(h, steps[i], wx, wh, bias)?;
            out[i] = Some(h);
        }
        Ok(out)
    };
    let fwd = scan(g, "gru_forward", &mut (0..n))?;
    let bwd = scan(g, "gru_backward", &mut (0..n).rev())?;
    let fwd: Vec<Var> = fwd.into_iter().map(|v| v.expect("every step visited")).collect();
    let bwd: Vec<Var> = bwd.into_iter().map(|v| v.expect("every step visited")).collect();
    let hf = g.stack_rows(&fwd)?;
    let hb = g.stack_rows(&bwd)?;
    g.concat(&[hf, hb])
}

/// Returns (α, r̂).
fn attend_on_graph(g: &mut Graph<'_>, b: &Bound, patterns: Var, hidden: Var, cfg: &ModelConfig) -> Result<(Var, Var)> {
    let joint = g.concat(&[patterns, hidden])?;
    let n = g.value(joint).rows();
    let alpha = if cfg.use_attention {
        let scores = g.dense(joint, b.get("attention.weight")?, b.get("attention.bias")?)?;
        if cfg.literal_normalization {
            g.normalize(scores)?
        } else {
            g.softmax(scores, None)?
        }
    } else {
        g.constant(Tensor::full(&[n], 1.0 / n as f64))?
    };
    let pooled = g.weighted_sum(alpha, joint)?;
    Ok((alpha, pooled))
}

fn predict_on_graph(g: &mut Graph<'_>, b: &Bound, pooled: Var, ctx: &RallyContext, cfg: &ModelConfig) -> Result<Var> {
    let input = if cfg.use_rally_input {
        let c = g.constant(Tensor::vector(ctx.vector().to_vec()))?;
        g.concat(&[pooled, c])?
    } else {
        pooled
    };
    let logit = g.dense(input, b.get("output.weight")?, b.get("output.bias")?)?;
    g.sigmoid(logit)
}

struct Recorded {
    features: Var,
    patterns: Var,
    hidden: Var,
    alpha: Var,
    pooled: Var,
    p_win: Var,
    context: RallyContext,
}

fn record<'p>(g: &mut Graph<'p>, inst: &Instance, params: &'p ModelParams, cfg: &ModelConfig) -> Result<(Bound, Recorded)> {
    let b = params.bind(g)?;
    let features = encode_on_graph(g, &b, inst, cfg)?;
    let patterns = patterns_on_graph(g, &b, features, cfg)?;
    let hidden = sequence_on_graph(g, &b, patterns, cfg)?;
    let (alpha, pooled) = attend_on_graph(g, &b, patterns, hidden, cfg)?;
    let context = encoder::rally_context(inst.context, &inst.prior_winners, inst.target);
    let p_win = predict_on_graph(g, &b, pooled, &context, cfg)?;
    Ok((
        b,
        Recorded {
            features,
            patterns,
            hidden,
            alpha,
            pooled,
            p_win,
            context,
        },
    ))
}

fn loss_on_graph(g: &mut Graph<'_>, b: &Bound, p_win: Var, y: f64, cfg: &ModelConfig) -> Result<(Var, Var, Var)> {
    let ce = g.bce(p_win, y)?;
    let weights: Vec<Var> = b
        .0
        .iter()
        .filter(|(n, _)| ParamKind::of(n) == ParamKind::Weight)
        .map(|(_, v)| *v)
        .collect();
    let reg = g.sum_squares(&weights)?;
    let scaled = g.scale(reg, cfg.lambda)?;
    let total = g.add(ce, scaled)?;
    Ok((total, ce, reg))
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

pub fn forward(inst: &Instance, params: &ModelParams, cfg: &ModelConfig) -> Result<ForwardTrace> {
    let mut g = Graph::new();
    let (_, r) = record(&mut g, inst, params, cfg)?;
    Ok(ForwardTrace {
        features: g.value(r.features).clone(),
        patterns: g.value(r.patterns).clone(),
        hidden: g.value(r.hidden).clone(),
        attention: g.value(r.alpha).data().to_vec(),
        pooled: g.value(r.pooled).data().to_vec(),
        context: r.context,
        p_win: g.value(r.p_win).data()[0],
    })
}

pub fn predict(inst: &Instance, params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    forward(inst, params, cfg).map(|t| t.p_win)
}

/// Loss of one instance and its gradient for every parameter slot.
pub fn loss_and_gradients(inst: &Instance, params: &ModelParams, cfg: &ModelConfig) -> Result<(LossParts, Gradients, f64)> {
    let mut g = Graph::new();
    let (b, r) = record(&mut g, inst, params, cfg)?;
    let (total, ce, reg) = loss_on_graph(&mut g, &b, r.p_win, inst.y(), cfg)?;
    let parts = LossParts {
        total: g.value(total).data()[0],
        cross_entropy: g.value(ce).data()[0],
        regularization: g.value(reg).data()[0],
    };
    let grads = g.backward(total, &Tensor::scalar(1.0))?;
    Ok((parts, grads, g.value(r.p_win).data()[0]))
}

/// Total loss `ce + λ·reg` for a given win probability and label.
pub fn compute_loss(p_win: f64, label: bool, params: &ModelParams, cfg: &ModelConfig) -> Result<LossParts> {
    let y = if label { 1.0 } else { 0.0 };
    let cross_entropy = crate::autodiff::binary_cross_entropy(p_win, y);
    let regularization = params.regularization();
    let total = cross_entropy + cfg.lambda * regularization;
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(LossParts {
        total,
        cross_entropy,
        regularization,
    })
}

fn with_bound<T>(params: &ModelParams, f: impl for<'p> FnOnce(&mut Graph<'p>, &Bound) -> Result<T>) -> Result<T> {
    let mut g = Graph::new();
    let b = params.bind(&mut g)?;
    f(&mut g, &b)
}

/// Short-term patterns for already-encoded shots.
pub fn extract_patterns(enc: &EncodedRally, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    with_bound(params, |g, b| {
        let x = g.constant(enc.features.clone())?;
        let p = patterns_on_graph(g, b, x, cfg)?;
        Ok(g.value(p).clone())
    })
}

/// Long-term states for a pattern sequence.
pub fn encode_patterns(patterns: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    with_bound(params, |g, b| {
        let x = g.constant(patterns.clone())?;
        let h = sequence_on_graph(g, b, x, cfg)?;
        Ok(g.value(h).clone())
    })
}

/// Attention weights and pooled representation.
pub fn attend(patterns: &Tensor, hidden: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    with_bound(params, |g, b| {
        let p = g.constant(patterns.clone())?;
        let h = g.constant(hidden.clone())?;
        let (alpha, pooled) = attend_on_graph(g, b, p, h, cfg)?;
        Ok((g.value(alpha).data().to_vec(), g.value(pooled).data().to_vec()))
    })
}

pub fn predict_win(pooled: &[f64], ctx: &RallyContext, params: &ModelParams, cfg: &ModelConfig) -> Result<f64> {
    with_bound(params, |g, b| {
        let r = g.constant(Tensor::vector(pooled.to_vec()))?;
        let p = predict_on_graph(g, b, r, ctx, cfg)?;
        Ok(g.value(p).data()[0])
    })
}

/// Shot encoding as the model computes it (graph path).
pub fn encode_instance(inst: &Instance, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    with_bound(params, |g, b| {
        let f = encode_on_graph(g, b, inst, cfg)?;
        Ok(g.value(f).clone())
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSnapshot {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<NamedTensor>,
    pub second_moment: Vec<NamedTensor>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub target: Option<PlayerId>,
    pub val_auc: Option<f64>,
    pub val_brier: Option<f64>,
}

/// Self-contained model file: config, parameters, optimizer state and
/// training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<NamedTensor>,
    pub adam: Option<AdamSnapshot>,
    pub metadata: CheckpointMeta,
}

fn named(names: &[&'static str], tensors: &[&Tensor]) -> Vec<NamedTensor> {
    names
        .iter()
        .zip(tensors)
        .map(|(n, t)| NamedTensor {
            name: n.to_string(),
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    pub fn new(cfg: &ModelConfig, params: &ModelParams, adam: Option<&AdamState>, metadata: CheckpointMeta) -> Checkpoint {
        let slots = params.slots();
        let names: Vec<&'static str> = slots.iter().map(|(n, _)| *n).collect();
        let tensors: Vec<&Tensor> = slots.iter().map(|(_, t)| *t).collect();
        let adam = adam.map(|s| AdamSnapshot {
            lr: s.config.lr,
            beta1: s.config.beta1,
            beta2: s.config.beta2,
            eps: s.config.eps,
            step: s.step,
            first_moment: named(&names, &s.first_moment.iter().collect::<Vec<_>>()),
            second_moment: named(&names, &s.second_moment.iter().collect::<Vec<_>>()),
        });
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: cfg.clone(),
            params: named(&names, &tensors),
            adam,
            metadata,
        }
    }

    /// Rebuilds parameters, checking every tensor name and shape against
    /// the stored config.
    pub fn params(&self) -> Result<ModelParams> {
        self.config.validate()?;
        let mut params = ModelParams::zeros(&self.config);
        let expected = params.slots().len();
        if self.params.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} tensors, found {}",
                self.params.len()
            )));
        }
        for ((name, t), stored) in params.slots_mut().into_iter().zip(&self.params) {
            load_tensor(name, t, stored)?;
        }
        Ok(params)
    }

    pub fn adam_state(&self) -> Result<Option<AdamState>> {
        let Some(s) = &self.adam else { return Ok(None) };
        let params = ModelParams::zeros(&self.config);
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (i, (name, t)) in params.slots().into_iter().enumerate() {
            let mut m = t.clone();
            let mut v = t.clone();
            let (Some(sm), Some(sv)) = (s.first_moment.get(i), s.second_moment.get(i)) else {
                return Err(Error::Checkpoint("optimizer state is missing tensors".into()));
            };
            load_tensor(name, &mut m, sm)?;
            load_tensor(name, &mut v, sv)?;
            first.push(m);
            second.push(v);
        }
        Ok(Some(AdamState {
            config: AdamConfig {
                lr: s.lr,
                beta1: s.beta1,
                beta2: s.beta2,
                eps: s.eps,
            },
            step: s.step,
            first_moment: first,
            second_moment: second,
        }))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Checkpoint> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                c.format_version
            )));
        }
        Ok(c)
    }
}

fn load_tensor(name: &str, target: &mut Tensor, stored: &NamedTensor) -> Result<()> {
    if stored.name != name {
        return Err(Error::Checkpoint(format!("expected tensor `{name}`, found `{}`", stored.name)));
    }
    if stored.shape != target.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has shape {:?}, config requires {:?}",
            stored.shape,
            target.shape()
        )));
    }
    let t = Tensor::new(stored.shape.clone(), stored.values.clone())?;
    if !t.is_finite() {
        return Err(Error::Checkpoint(format!("tensor `{name}` has non-finite values")));
    }
    *target = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blsr::{Area, ScoreContext, Shot};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(n: usize, seed: u64) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shots = (0..n)
            .map(|i| Shot {
                player: if i % 2 == 0 { PlayerId::A } else { PlayerId::B },
                timestamp: i as f64 * 1.3,
                shot_type: if i == 0 {
                    ShotType::ShortService
                } else {
                    ShotType::ALL[rng.gen_range(0..16)]
                },
                back_hand: rng.gen_bool(0.3),
                around_head: rng.gen_bool(0.2),
                hit_area: Area::new(rng.gen_range(1..=16)).unwrap(),
                player_area: Area::new(rng.gen_range(1..=16)).unwrap(),
                opponent_area: Area::new(rng.gen_range(1..=16)).unwrap(),
            })
            .collect();
        Instance {
            rally_id: "r".into(),
            match_id: "m".into(),
            shots,
            context: ScoreContext { roundscore_a: 4, roundscore_b: 7 },
            prior_winners: vec![PlayerId::A, PlayerId::B],
            target: PlayerId::B,
            label: true,
        }
    }

    fn params(cfg: &ModelConfig, seed: u64) -> ModelParams {
        ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        let p = params(&cfg, 0);
        assert_eq!(cfg.d_shot(), 48);
        assert_eq!(p.conv1.as_ref().unwrap().kernel.shape(), &[3, 48, 32]);
        assert_eq!(p.gru_forward.as_ref().unwrap().w_x.shape(), &[32, 48]);
        assert_eq!(p.attention.as_ref().unwrap().weight.shape(), &[64, 1]);
        assert_eq!(p.output.weight.shape(), &[66, 1]);
        let names: Vec<_> = p.slots().iter().map(|(n, _)| *n).collect();
        let mut q = p.clone();
        let names_mut: Vec<_> = q.slots_mut().iter().map(|(n, _)| *n).collect();
        assert_eq!(names, names_mut);
        assert!(p.encoder.temporal.as_ref().unwrap().theta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.kernel_size = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.d_gru = 31;
        assert!(c.validate().is_err());
        let unknown = serde_json::from_str::<ModelConfig>(r#"{"d_cnn": 8, "bogus": 1}"#);
        assert!(unknown.is_err());
        let partial: ModelConfig = serde_json::from_str(r#"{"d_cnn": 8}"#).unwrap();
        assert_eq!(partial.d_cnn, 8);
        assert_eq!(partial.d_gru, 32);
    }

    #[test]
    fn alternate_merge_examples() {
        let a = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![-1.0], vec![-2.0], vec![-3.0]]).unwrap();
        assert_eq!(alternate_merge(&a, &b).unwrap().data(), &[1.0, -2.0, 3.0]);
        assert_eq!(alternate_merge(&a, &a).unwrap(), a);
        let a2 = Tensor::from_rows(&[vec![1.0, 1.5], vec![2.0, 2.5]]).unwrap();
        let b2 = Tensor::from_rows(&[vec![-1.0, -1.5], vec![-2.0, -2.5]]).unwrap();
        assert_eq!(alternate_merge(&a2, &b2).unwrap().data(), &[1.0, 1.5, -2.0, -2.5]);
        assert!(alternate_merge(&a, &a2).is_err());
    }

    #[test]
    fn graph_encoding_matches_value_encoder() {
        let cfg = ModelConfig::default();
        let mut p = params(&cfg, 1);
        {
            let t = p.encoder.temporal.as_mut().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            t.theta.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            t.mu.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let inst = instance(6, 2);
        let via_graph = encode_instance(&inst, &p, &cfg).unwrap();
        let direct = encoder::encode_rally(&inst.shots, &p.encoder, inst.target).unwrap();
        for (a, b) in via_graph.data().iter().zip(direct.features.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn identical_convs_merge_to_either() {
        let cfg = ModelConfig::default();
        let mut p = params(&cfg, 3);
        p.conv2 = p.conv1.clone();
        let inst = instance(5, 4);
        let enc = encoder::encode_rally(&inst.shots, &p.encoder, inst.target).unwrap();
        let merged = extract_patterns(&enc, &p, &cfg).unwrap();
        let single = extract_patterns(&enc, &p, &ModelConfig { use_two_cnns: false, ..cfg.clone() }).unwrap();
        assert_eq!(merged, single);
    }

    #[test]
    fn single_shot_pattern_comes_from_first_cnn() {
        let cfg = ModelConfig::default();
        let p = params(&cfg, 5);
        let inst = instance(1, 6);
        let enc = encoder::encode_rally(&inst.shots, &p.encoder, inst.target).unwrap();
        let merged = extract_patterns(&enc, &p, &cfg).unwrap();
        let c1 = p.conv1.as_ref().unwrap();
        let mut expected = crate::autodiff::conv1d_same(&enc.features, &c1.kernel, &c1.bias).unwrap();
        expected.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        assert_eq!(merged, expected);
    }

    #[test]
    fn zero_gru_gives_zero_states() {
        let cfg = ModelConfig::default();
        let mut p = params(&cfg, 7);
        for g in [p.gru_forward.as_mut().unwrap(), p.gru_backward.as_mut().unwrap()] {
            g.w_x.data_mut().fill(0.0);
            g.w_h.data_mut().fill(0.0);
            g.bias.data_mut().fill(0.0);
        }
        let pats = Tensor::from_rows(&vec![vec![0.7; 32]; 4]).unwrap();
        let h = encode_patterns(&pats, &p, &cfg).unwrap();
        assert_eq!(h.shape(), &[4, 32]);
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_singleton_and_uniform() {
        let cfg = ModelConfig::default();
        let mut p = params(&cfg, 8);
        let pats = Tensor::from_rows(&[vec![0.5; 32]]).unwrap();
        let hid = Tensor::from_rows(&[vec![-0.25; 32]]).unwrap();
        let (alpha, pooled) = attend(&pats, &hid, &p, &cfg).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(pooled[..32], [0.5; 32]);
        assert_eq!(pooled[32..], [-0.25; 32]);

        p.attention.as_mut().unwrap().weight.data_mut().fill(0.0);
        let pats = Tensor::from_rows(&[vec![1.0; 32], vec![3.0; 32]]).unwrap();
        let hid = Tensor::from_rows(&[vec![0.0; 32], vec![1.0; 32]]).unwrap();
        let (alpha, pooled) = attend(&pats, &hid, &p, &cfg).unwrap();
        assert_eq!(alpha, vec![0.5, 0.5]);
        assert_eq!(pooled[0], 2.0);
        assert_eq!(pooled[40], 0.5);
    }

    #[test]
    fn predict_win_examples() {
        let cfg = ModelConfig::default();
        let mut p = ModelParams::zeros(&cfg);
        let ctx = RallyContext { score_diff: 3, consecutive_points: -2 };
        assert_eq!(predict_win(&[0.3; 64], &ctx, &p, &cfg).unwrap(), 0.5);
        p.output.bias.data_mut()[0] = 40.0;
        assert!(predict_win(&[0.3; 64], &ctx, &p, &cfg).unwrap() > 1.0 - 1e-12);
        assert!(predicts_win(0.7));
        assert!(!predicts_win(0.5));
        assert!(predict_win(&[0.3; 10], &ctx, &p, &cfg).is_err());
    }

    #[test]
    fn zero_model_predicts_half() {
        for cfg in std::iter::once(ModelConfig::default())
            .chain(Ablation::STRUCTURAL.iter().map(|a| ModelConfig::default().with_ablation(*a)))
        {
            let p = ModelParams::zeros(&cfg);
            for n in [1, 4, 9] {
                let t = forward(&instance(n, n as u64), &p, &cfg).unwrap();
                assert_eq!(t.p_win, 0.5);
                assert_eq!(t.attention.len(), n);
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_normalized() {
        let cfg = ModelConfig::default();
        let p = params(&cfg, 10);
        let inst = instance(3, 11);
        let a = forward(&inst, &p, &cfg).unwrap();
        let b = forward(&inst, &p, &cfg).unwrap();
        assert_eq!(a.p_win.to_bits(), b.p_win.to_bits());
        assert!((a.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.p_win > 0.0 && a.p_win < 1.0);
        assert_eq!(a.context, RallyContext { score_diff: 3, consecutive_points: 1 });
    }

    #[test]
    fn loss_examples() {
        let mut cfg = ModelConfig { lambda: 0.0, ..ModelConfig::default() };
        let p = params(&cfg, 12);
        let l = compute_loss(0.5, true, &p, &cfg).unwrap();
        assert_abs_diff_eq!(l.total, 2f64.ln(), epsilon = 1e-12);
        assert!(compute_loss(1.0, true, &p, &cfg).unwrap().cross_entropy < 1e-6);
        assert!(compute_loss(0.0, false, &p, &cfg).unwrap().cross_entropy < 1e-6);

        let l0 = compute_loss(0.3, false, &p, &cfg).unwrap();
        cfg.lambda = 0.01;
        let l1 = compute_loss(0.3, false, &p, &cfg).unwrap();
        let sum_w2 = p.regularization();
        assert!(sum_w2 > 0.0);
        assert_abs_diff_eq!(l1.total - l0.total, 0.01 * sum_w2, epsilon = 1e-12);
    }

    #[test]
    fn regularization_covers_weight_matrices_only() {
        let cfg = ModelConfig::default();
        let mut p = ModelParams::zeros(&cfg);
        p.encoder.location_table.data_mut().fill(1.0);
        p.conv1.as_mut().unwrap().bias.data_mut().fill(1.0);
        assert_eq!(p.regularization(), 0.0);
        p.conv2.as_mut().unwrap().kernel.data_mut()[0] = 2.0;
        p.gru_backward.as_mut().unwrap().w_h.data_mut()[0] = 1.0;
        p.attention.as_mut().unwrap().weight.data_mut()[0] = 1.0;
        p.output.weight.data_mut()[0] = 1.0;
        assert_eq!(p.regularization(), 7.0);
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let cfg = ModelConfig::default();
        let p = params(&cfg, 13);
        let inst = instance(7, 14);
        let (parts, grads, p_win) = loss_and_gradients(&inst, &p, &cfg).unwrap();
        let direct = compute_loss(p_win, inst.label, &p, &cfg).unwrap();
        assert_abs_diff_eq!(parts.total, direct.total, epsilon = 1e-12);
        assert_abs_diff_eq!(parts.regularization, direct.regularization, epsilon = 1e-9);
        assert_eq!(grads.0.len(), p.slots().len());
        // Every tensor that the rally touches receives gradient.
        for (i, (name, _)) in p.slots().iter().enumerate() {
            let norm = grads.get(i).sum_squares();
            assert!(norm > 0.0, "{name} got no gradient");
        }
    }

    #[test]
    fn ablations_shrink_parameter_count() {
        let full = ModelParams::zeros(&ModelConfig::default()).parameter_count();
        for a in Ablation::STRUCTURAL {
            let cfg = ModelConfig::default().with_ablation(a);
            let p = params(&cfg, 15);
            assert!(p.parameter_count() < full, "{}", a.label());
            let t = forward(&instance(5, 16), &p, &cfg).unwrap();
            assert!(t.p_win > 0.0 && t.p_win < 1.0);
        }
        let literal = ModelConfig::default().with_ablation(Ablation::LiteralNormalization);
        assert_eq!(ModelParams::zeros(&literal).parameter_count(), full);
    }

    #[test]
    fn literal_normalization_divides_by_sum() {
        let cfg = ModelConfig::default().with_ablation(Ablation::LiteralNormalization);
        let mut p = ModelParams::zeros(&cfg);
        p.attention.as_mut().unwrap().weight.data_mut()[0] = 1.0;
        let pats = Tensor::from_rows(&[vec![1.0; 32], vec![3.0; 32]]).unwrap();
        let hid = Tensor::zeros(&[2, 32]);
        let (alpha, _) = attend(&pats, &hid, &p, &cfg).unwrap();
        assert_eq!(alpha, vec![0.25, 0.75]);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let cfg = ModelConfig::default().with_ablation(Ablation::BiGru);
        let p = params(&cfg, 17);
        let mut adam = AdamState::new(AdamConfig::default(), p.slots().iter().map(|(_, t)| *t));
        adam.step = 3;
        adam.first_moment[0].data_mut()[0] = 0.125;
        let meta = CheckpointMeta { epoch: 4, seed: 9, target: Some(PlayerId::B), val_auc: Some(0.9), val_brier: None };
        let ck = Checkpoint::new(&cfg, &p, Some(&adam), meta);
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params().unwrap(), p);
        assert_eq!(back.adam_state().unwrap().unwrap(), adam);

        let wrong_version = text.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        assert!(Checkpoint::from_json(&wrong_version).is_err());
        let mut other = ck.clone();
        other.config.d_cnn = 16;
        assert!(other.params().is_err());
    }
}
