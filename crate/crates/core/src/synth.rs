//! Synthetic rally generator with a planted outcome rule.
//!
//! Shots follow hand-written type transitions (a service is answered by net
//! play or a lob, a lob invites a smash or a clear, a smash draws a defensive
//! return, and so on). Areas follow the shot: net play lands in the rows
//! nearest the net, lobs and clears in the back rows, and each hitter stands
//! where the previous shot landed.
//!
//! Planted rule, applied to the final three shots of a rally:
//!
//! * if exactly one player hit a smash or wrist smash there, that player wins;
//! * otherwise the last hitter wins when the rally ended `in`.
//!
//! The end reason itself follows the last shot: a rally closed by one of
//! [`FINISHING_SHOTS`] ends `in`, any other last shot ends in an error. With
//! probability `signal_strength` the winner comes from this rule, otherwise
//! from a fair coin; `getpoint_player` and `end_reason` always agree (the
//! last hitter wins exactly when the rally ended `in`).

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blsr::{Area, Dataset, EndReason, PlayerId, Rally, RallyInfo, Shot, ShotType};
use crate::{Error, Result};

pub const MAX_RALLY_LENGTH: usize = 40;

/// Window at the end of a rally that the planted rule inspects.
pub const DECISIVE_WINDOW: usize = 3;

pub const ATTACKING_SHOTS: [ShotType; 2] = [ShotType::Smash, ShotType::WristSmash];

/// Last-shot types that end a rally `in`.
pub const FINISHING_SHOTS: [ShotType; 3] = [ShotType::Smash, ShotType::WristSmash, ShotType::Rush];

const ERROR_REASONS: [EndReason; 4] = [
    EndReason::Out,
    EndReason::TouchNet,
    EndReason::NotPassOverNet,
    EndReason::Misjudge,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_matches: usize,
    pub rallies_per_match: usize,
    pub mean_rally_length: f64,
    pub signal_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_matches: 19,
            rallies_per_match: 74,
            mean_rally_length: 11.0,
            signal_strength: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_matches == 0 || self.rallies_per_match == 0 {
            return bad("n_matches and rallies_per_match must be at least 1");
        }
        if !(self.mean_rally_length >= 1.0 && self.mean_rally_length.is_finite()) {
            return bad("mean_rally_length must be a finite number ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return bad("signal_strength must lie in [0, 1]");
        }
        Ok(())
    }
}

fn successors(prev: ShotType) -> &'static [(ShotType, u32)] {
    use ShotType::*;
    match prev {
        ShortService => &[(ReturnNet, 3), (NetShot, 2), (Push, 2), (Lob, 3), (Rush, 1)],
        LongService => &[(Clear, 3), (Smash, 2), (Drop, 3), (Drive, 1)],
        NetShot | ReturnNet | CrossCourtNetShot => &[
            (ReturnNet, 2),
            (NetShot, 1),
            (CrossCourtNetShot, 1),
            (Lob, 3),
            (Push, 1),
            (Rush, 1),
        ],
        Lob | DefensiveReturnLob | Clear => &[
            (Smash, 3),
            (WristSmash, 1),
            (Clear, 2),
            (Drop, 3),
            (PassiveDrop, 1),
        ],
        Smash | WristSmash => &[
            (DefensiveReturnDrive, 3),
            (DefensiveReturnLob, 3),
            (ReturnNet, 1),
            (Lob, 1),
        ],
        Drive | DrivenFlight | BackCourtDrive | DefensiveReturnDrive => &[
            (Drive, 2),
            (DrivenFlight, 1),
            (BackCourtDrive, 1),
            (Push, 1),
            (Lob, 1),
            (Smash, 1),
        ],
        Drop | PassiveDrop => &[(ReturnNet, 2), (NetShot, 1), (Lob, 3), (Push, 1)],
        Push | Rush => &[
            (Lob, 2),
            (Drive, 2),
            (DefensiveReturnDrive, 1),
            (DefensiveReturnLob, 1),
            (ReturnNet, 1),
        ],
    }
}

/// Court rows (1 = nearest the net) where a shot of this type lands.
fn landing_rows(t: ShotType) -> (u8, u8) {
    use ShotType::*;
    match t {
        NetShot | ReturnNet | CrossCourtNetShot | Drop | PassiveDrop | Rush | ShortService => (1, 2),
        Lob | DefensiveReturnLob | Clear | LongService | BackCourtDrive => (3, 4),
        Smash | WristSmash | Drive | DrivenFlight | DefensiveReturnDrive | Push => (2, 3),
    }
}

fn is_overhead(t: ShotType) -> bool {
    matches!(
        t,
        ShotType::Smash | ShotType::WristSmash | ShotType::Clear | ShotType::Drop | ShotType::PassiveDrop
    )
}

fn random_area(rng: &mut impl Rng, rows: (u8, u8)) -> Area {
    let row = rng.gen_range(rows.0..=rows.1) - 1;
    let col = rng.gen_range(0..4);
    Area::from_grid(row, col).expect("grid cell in range")
}

fn rally_length(rng: &mut impl Rng, mean: f64) -> usize {
    let stop = 1.0 / mean;
    let mut n = 1;
    while n < MAX_RALLY_LENGTH && !rng.gen_bool(stop) {
        n += 1;
    }
    n
}

fn generate_shots(rng: &mut impl Rng, server: PlayerId, start: f64, mean_len: f64) -> Vec<Shot> {
    let n = rally_length(rng, mean_len);
    let mut shots: Vec<Shot> = Vec::with_capacity(n);
    let mut t = start;
    for i in 0..n {
        let shot_type = match shots.last() {
            None if rng.gen_bool(0.7) => ShotType::ShortService,
            None => ShotType::LongService,
            Some(prev) => {
                let table = successors(prev.shot_type);
                let dist = WeightedIndex::new(table.iter().map(|(_, w)| *w)).expect("positive weights");
                table[dist.sample(rng)].0
            }
        };
        let (player_area, opponent_area) = match shots.last() {
            None => (random_area(rng, (2, 2)), random_area(rng, (2, 2))),
            Some(prev) => (prev.hit_area, prev.player_area),
        };
        if i > 0 {
            t += rng.gen_range(0.5..=3.0);
        }
        shots.push(Shot {
            player: if i % 2 == 0 { server } else { server.other() },
            timestamp: t,
            shot_type,
            back_hand: rng.gen_bool(0.25),
            around_head: is_overhead(shot_type) && rng.gen_bool(0.2),
            hit_area: random_area(rng, landing_rows(shot_type)),
            player_area,
            opponent_area,
        });
    }
    shots
}

/// Winner under the planted rule for a rally that ended with `end_reason`.
pub fn planted_winner(shots: &[Shot], end_reason: EndReason) -> Option<PlayerId> {
    let last = shots.last()?.player;
    let window = &shots[shots.len().saturating_sub(DECISIVE_WINDOW)..];
    let attacked = |p: PlayerId| window.iter().any(|s| s.player == p && ATTACKING_SHOTS.contains(&s.shot_type));
    Some(match (attacked(PlayerId::A), attacked(PlayerId::B)) {
        (true, false) => PlayerId::A,
        (false, true) => PlayerId::B,
        _ if end_reason == EndReason::In => last,
        _ => last.other(),
    })
}

fn natural_end_reason(last: ShotType) -> bool {
    FINISHING_SHOTS.contains(&last)
}

/// Game score tracker: games to 21, win by two, capped at 30.
struct Score {
    a: u32,
    b: u32,
}

impl Score {
    fn record(&mut self, winner: PlayerId) {
        match winner {
            PlayerId::A => self.a += 1,
            PlayerId::B => self.b += 1,
        }
        let (hi, lo) = (self.a.max(self.b), self.a.min(self.b));
        if (hi >= 21 && hi - lo >= 2) || hi == 30 {
            self.a = 0;
            self.b = 0;
        }
    }
}

fn generate_match(cfg: &SynthConfig, m: usize) -> Vec<Rally> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(m as u64 + 1);
    let match_id = format!("m{:02}", m + 1);
    let mut score = Score { a: 0, b: 0 };
    let mut server = if rng.gen_bool(0.5) { PlayerId::A } else { PlayerId::B };
    let mut clock = rng.gen_range(5.0..30.0);
    let mut rallies = Vec::with_capacity(cfg.rallies_per_match);
    for r in 0..cfg.rallies_per_match {
        let shots = generate_shots(&mut rng, server, clock, cfg.mean_rally_length);
        let last = shots.last().expect("rally has a shot");
        let natural = if natural_end_reason(last.shot_type) {
            EndReason::In
        } else {
            EndReason::Out
        };
        let ruled = planted_winner(&shots, natural).expect("non-empty rally");
        let winner = if rng.gen_bool(cfg.signal_strength) {
            ruled
        } else if rng.gen_bool(0.5) {
            PlayerId::A
        } else {
            PlayerId::B
        };
        let end_reason = if winner == last.player {
            EndReason::In
        } else {
            ERROR_REASONS[rng.gen_range(0..ERROR_REASONS.len())]
        };
        clock = last.timestamp + rng.gen_range(10.0..30.0);
        rallies.push(Rally {
            rally_id: format!("{match_id}-r{:03}", r + 1),
            match_id: match_id.clone(),
            shots,
            info: RallyInfo {
                roundscore_a: score.a,
                roundscore_b: score.b,
                getpoint_player: winner,
                end_reason,
            },
        });
        score.record(winner);
        server = winner;
    }
    rallies
}

/// Generates `n_matches × rallies_per_match` valid rallies. Each match draws
/// from its own stream of the seeded generator.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let rallies = (0..cfg.n_matches).flat_map(|m| generate_match(cfg, m)).collect();
    Ok(Dataset::from_rallies(rallies))
}
