//! Per-shot feature encoding.
//!
//! Each shot becomes one row:
//!
//! ```text
//! [δ · type_emb(type)] ⊕ loc(hit) ⊕ loc(player) ⊕ loc(opponent) ⊕ back_hand ⊕ around_head ⊕ is_target
//! ```
//!
//! where `δ = σ(θ[type] + μ[type]·τ)` is the temporal score and `τ` the
//! shot's time proportion within the rally. One location table is shared by
//! the three area roles.
//!
//! The model builds the same rows on its differentiation graph; the
//! functions here are the plain-value form used for inspection and tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tensor};
use crate::blsr::{Area, PlayerId, ScoreContext, Shot, ShotType};
use crate::{Error, Result};

/// Number of per-shot binary flags appended after the embeddings.
pub const FLAG_COUNT: usize = 3;

/// Half-width of the uniform embedding initializer.
pub const EMBEDDING_INIT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalTables {
    /// Per-type offset θ.
    pub theta: Tensor,
    /// Per-type slope μ on the time proportion.
    pub mu: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// 16 × d_loc.
    pub location_table: Tensor,
    /// 18 × d_type.
    pub type_table: Tensor,
    /// Absent when the temporal score is disabled (δ ≡ 1).
    pub temporal: Option<TemporalTables>,
}

impl EncoderParams {
    pub fn init(rng: &mut impl Rng, d_loc: usize, d_type: usize, temporal: bool) -> EncoderParams {
        let mut uniform = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.gen_range(-EMBEDDING_INIT..=EMBEDDING_INIT))
                .collect();
            Tensor::matrix(rows, cols, data).expect("sized buffer")
        };
        let location_table = uniform(Area::COUNT, d_loc);
        let type_table = uniform(ShotType::ALL.len(), d_type);
        EncoderParams {
            location_table,
            type_table,
            temporal: temporal.then(|| TemporalTables {
                theta: Tensor::zeros(&[ShotType::ALL.len()]),
                mu: Tensor::zeros(&[ShotType::ALL.len()]),
            }),
        }
    }

    pub fn d_loc(&self) -> usize {
        self.location_table.cols()
    }

    pub fn d_type(&self) -> usize {
        self.type_table.cols()
    }

    pub fn d_shot(&self) -> usize {
        self.d_type() + 3 * self.d_loc() + FLAG_COUNT
    }
}

/// Encoded shot sequence of one rally.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedRally {
    /// N × d_shot.
    pub features: Tensor,
    pub time_proportions: Vec<f64>,
    pub temporal_scores: Vec<f64>,
}

/// τ_n = (t_n − t_1) / (t_N − t_1); all zeros when the span is zero.
pub fn time_proportions(timestamps: &[f64]) -> Result<Vec<f64>> {
    let Some((&first, _)) = timestamps.split_first() else {
        return Err(Error::EmptyRally);
    };
    if let Some(i) = timestamps.windows(2).position(|w| w[1] < w[0]) {
        return Err(Error::DecreasingTimestamps { index: i + 2 });
    }
    let span = timestamps[timestamps.len() - 1] - first;
    if span <= 0.0 {
        return Ok(vec![0.0; timestamps.len()]);
    }
    Ok(timestamps.iter().map(|t| (t - first) / span).collect())
}

/// δ_n = σ(θ[type_n] + μ[type_n]·τ_n), or 1 when the tables are absent.
pub fn temporal_scores(types: &[ShotType], taus: &[f64], params: &EncoderParams) -> Vec<f64> {
    match &params.temporal {
        Some(t) => types
            .iter()
            .zip(taus)
            .map(|(ty, tau)| {
                let k = ty.index();
                sigmoid(t.theta.data()[k] + t.mu.data()[k] * tau)
            })
            .collect(),
        None => vec![1.0; types.len()],
    }
}

/// The three flag slots of a shot row.
pub fn shot_flags(shot: &Shot, target: PlayerId) -> [f64; FLAG_COUNT] {
    let b = |v: bool| if v { 1.0 } else { 0.0 };
    [b(shot.back_hand), b(shot.around_head), b(shot.player == target)]
}

pub fn encode_rally(shots: &[Shot], params: &EncoderParams, target: PlayerId) -> Result<EncodedRally> {
    let timestamps: Vec<f64> = shots.iter().map(|s| s.timestamp).collect();
    let taus = time_proportions(&timestamps)?;
    let types: Vec<ShotType> = shots.iter().map(|s| s.shot_type).collect();
    let deltas = temporal_scores(&types, &taus, params);

    let d_shot = params.d_shot();
    let mut data = Vec::with_capacity(shots.len() * d_shot);
    for (shot, delta) in shots.iter().zip(&deltas) {
        data.extend(params.type_table.row(shot.shot_type.index()).iter().map(|v| v * delta));
        for area in [shot.hit_area, shot.player_area, shot.opponent_area] {
            data.extend_from_slice(params.location_table.row(area.index()));
        }
        data.extend(shot_flags(shot, target));
    }
    Ok(EncodedRally {
        features: Tensor::matrix(shots.len(), d_shot, data)?,
        time_proportions: taus,
        temporal_scores: deltas,
    })
}

/// Game-state summary fed next to the pooled rally representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RallyContext {
    /// Target score minus opponent score at rally start.
    pub score_diff: i64,
    /// Length of the current scoring run, positive when the target holds it.
    pub consecutive_points: i64,
}

impl RallyContext {
    pub const DIM: usize = 2;

    pub fn vector(&self) -> [f64; 2] {
        [self.score_diff as f64, self.consecutive_points as f64]
    }
}

/// Builds the context from round scores and the winners of earlier rallies
/// of the same game (most recent last).
pub fn rally_context(scores: ScoreContext, history: &[PlayerId], target: PlayerId) -> RallyContext {
    let (a, b) = (i64::from(scores.roundscore_a), i64::from(scores.roundscore_b));
    let score_diff = match target {
        PlayerId::A => a - b,
        PlayerId::B => b - a,
    };
    let consecutive_points = match history.last() {
        None => 0,
        Some(&last) => {
            let run = history.iter().rev().take_while(|&&w| w == last).count() as i64;
            if last == target {
                run
            } else {
                -run
            }
        }
    };
    RallyContext {
        score_diff,
        consecutive_points,
    }
}
