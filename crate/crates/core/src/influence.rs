//! Per-shot influence from the model's attention weights.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blsr::{Instance, PlayerId, ShotType};
use crate::model::{self, ModelConfig, ModelParams};
use crate::Result;

/// How a pattern's attention weight is attributed to shots.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    /// α_n goes wholly to shot n, the centre of pattern n.
    #[default]
    Center,
    /// α_n is shared equally by the in-range shots of the K-window around n.
    Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotInfluence {
    /// 1-based position in the rally.
    pub shot_index: usize,
    pub player: PlayerId,
    pub shot_type: ShotType,
    pub influence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub rally_id: String,
    pub shots: Vec<ShotInfluence>,
    pub p_win: f64,
    /// Whether the target actually won, when known.
    pub label: Option<bool>,
}

impl InfluenceReport {
    /// Most influential shot; the earliest one on ties.
    pub fn peak(&self) -> Option<&ShotInfluence> {
        self.shots
            .iter()
            .reduce(|best, s| if s.influence > best.influence { s } else { best })
    }
}

pub fn score_shots(inst: &Instance, params: &ModelParams, cfg: &ModelConfig) -> Result<InfluenceReport> {
    score_shots_with(inst, params, cfg, Attribution::Center)
}

pub fn score_shots_with(inst: &Instance, params: &ModelParams, cfg: &ModelConfig, attribution: Attribution) -> Result<InfluenceReport> {
    let trace = model::forward(inst, params, cfg)?;
    let influence = match attribution {
        Attribution::Center => trace.attention,
        Attribution::Spread => spread(&trace.attention, cfg.kernel_size),
    };
    let shots = inst
        .shots
        .iter()
        .zip(influence)
        .enumerate()
        .map(|(i, (s, influence))| ShotInfluence {
            shot_index: i + 1,
            player: s.player,
            shot_type: s.shot_type,
            influence,
        })
        .collect();
    Ok(InfluenceReport {
        rally_id: inst.rally_id.clone(),
        shots,
        p_win: trace.p_win,
        label: Some(inst.label),
    })
}

fn spread(alpha: &[f64], k: usize) -> Vec<f64> {
    let n = alpha.len();
    let half = k / 2;
    let mut out = vec![0.0; n];
    for (i, a) in alpha.iter().enumerate() {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let share = a / (hi - lo + 1) as f64;
        out[lo..=hi].iter_mut().for_each(|v| *v += share);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRally {
    pub rally_id: String,
    pub peak_influence: f64,
    /// 1-based index of the peak shot.
    pub shot_index: usize,
}

/// The `top_k` rallies with the most concentrated attention, highest peak
/// first, ties broken by rally id.
pub fn rank_rallies(instances: &[Instance], params: &ModelParams, cfg: &ModelConfig, top_k: usize) -> Result<Vec<RankedRally>> {
    if top_k == 0 {
        return Ok(Vec::new());
    }
    let mut ranked = Vec::with_capacity(instances.len());
    for inst in instances {
        let report = score_shots(inst, params, cfg)?;
        let peak = report.peak().expect("rallies have at least one shot");
        ranked.push(RankedRally {
            rally_id: report.rally_id.clone(),
            peak_influence: peak.influence,
            shot_index: peak.shot_index,
        });
    }
    ranked.sort_by(|a, b| {
        b.peak_influence
            .total_cmp(&a.peak_influence)
            .then_with(|| a.rally_id.cmp(&b.rally_id))
    });
    ranked.truncate(top_k);
    Ok(ranked)
}

pub fn reports_json(reports: &[InfluenceReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}

const BAR_WIDTH: usize = 30;

/// Aligned-column text with a proportional bar per shot.
pub fn report_text(r: &InfluenceReport) -> String {
    let mut out = format!("rally {}  p_win {:.4}", r.rally_id, r.p_win);
    if let Some(l) = r.label {
        let _ = write!(out, "  actual {}", if l { "win" } else { "loss" });
    }
    out.push('\n');
    let width = r.shots.iter().map(|s| s.shot_type.name().len()).max().unwrap_or(4).max(4);
    let _ = writeln!(out, "{:>4}  {:<6}  {:<width$}  {:>9}", "shot", "player", "type", "influence");
    for s in &r.shots {
        let bar = "#".repeat((s.influence * BAR_WIDTH as f64).round() as usize);
        let _ = writeln!(
            out,
            "{:>4}  {:<6}  {:<width$}  {:>9.4}  {bar}",
            s.shot_index,
            s.player.as_str(),
            s.shot_type.name(),
            s.influence
        );
    }
    out
}

/// Bar-chart data: one row per shot.
pub fn reports_csv(reports: &[InfluenceReport]) -> String {
    let mut out = String::from("rally_id,shot_index,player,type,influence\n");
    for r in reports {
        for s in &r.shots {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.rally_id,
                s.shot_index,
                s.player.as_str(),
                s.shot_type.name(),
                s.influence
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blsr::{build_instances, InstanceFilter};
    use crate::synth::{generate, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instances() -> Vec<Instance> {
        let d = generate(&SynthConfig { n_matches: 2, rallies_per_match: 15, ..SynthConfig::default() }).unwrap();
        build_instances(&d, PlayerId::B, InstanceFilter::default())
    }

    #[test]
    fn zero_attention_weights_give_uniform_influence() {
        let cfg = ModelConfig::default();
        let mut p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.attention.as_mut().unwrap().weight.data_mut().fill(0.0);
        for inst in instances() {
            let r = score_shots(&inst, &p, &cfg).unwrap();
            let n = inst.shots.len() as f64;
            assert_eq!(r.shots.len(), inst.shots.len());
            assert!(r.shots.iter().all(|s| (s.influence - 1.0 / n).abs() < 1e-12));
        }
    }

    #[test]
    fn influence_matches_attention_and_preserves_params() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = p.clone();
        for inst in instances() {
            let trace = model::forward(&inst, &p, &cfg).unwrap();
            let r = score_shots(&inst, &p, &cfg).unwrap();
            let inf: Vec<f64> = r.shots.iter().map(|s| s.influence).collect();
            assert_eq!(inf, trace.attention);
            assert_eq!(r.p_win, trace.p_win);
            if inst.shots.len() == 1 {
                assert_eq!(inf, vec![1.0]);
            }
            let spread = score_shots_with(&inst, &p, &cfg, Attribution::Spread).unwrap();
            let total: f64 = spread.shots.iter().map(|s| s.influence).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(spread.shots.iter().all(|s| s.influence >= 0.0));
        }
        assert_eq!(p, before);
    }

    #[test]
    fn spread_divides_over_window() {
        let s = spread(&[0.0, 0.6, 0.0], 3);
        assert!(s.iter().all(|v| (v - 0.2).abs() < 1e-15));
        assert_eq!(spread(&[1.0, 0.0, 0.0], 3), vec![0.5, 0.5, 0.0]);
        assert_eq!(spread(&[1.0], 3), vec![1.0]);
    }

    #[test]
    fn ranking_rules() {
        let cfg = ModelConfig::default().with_ablation(crate::model::Ablation::Attention);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let inst = instances();
        assert!(rank_rallies(&inst, &p, &cfg, 0).unwrap().is_empty());
        let all = rank_rallies(&inst, &p, &cfg, inst.len() + 5).unwrap();
        assert_eq!(all.len(), inst.len());
        for w in all.windows(2) {
            assert!(w[0].peak_influence > w[1].peak_influence
                || (w[0].peak_influence == w[1].peak_influence && w[0].rally_id < w[1].rally_id));
        }
        let by_id = inst.iter().find(|i| i.rally_id == all[0].rally_id).unwrap();
        assert_eq!(all[0].peak_influence, 1.0 / by_id.shots.len() as f64);
    }

    #[test]
    fn text_and_csv_outputs() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let inst = &instances()[0];
        let r = score_shots(inst, &p, &cfg).unwrap();
        let text = report_text(&r);
        assert_eq!(text.lines().count(), inst.shots.len() + 2);
        let csv = reports_csv(std::slice::from_ref(&r));
        assert_eq!(csv.lines().count(), inst.shots.len() + 1);
        let json: Vec<InfluenceReport> = serde_json::from_str(&reports_json(&[r.clone()]).unwrap()).unwrap();
        assert_eq!(json[0], r);
    }
}
