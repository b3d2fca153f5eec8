//! Per-agent channel quality estimation: upper-confidence-bound indices over
//! collision-free reward samples, preference ordering, and the sample-count
//! constants used by the convergence bounds.

use crate::env::GapStats;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LearningError {
    #[error("channel {0} out of range")]
    IndexOutOfRange(usize),
}

/// One agent's running statistics. `cumulative_reward[k]` and
/// `sample_count[k]` accumulate only over collision-free transmissions on
/// channel `k`; sensing observations never touch them. `slot_clock` counts
/// the agent's own elapsed slots since it entered the network, so agents
/// that join late still have a self-consistent confidence term.
#[derive(Debug, Clone, Serialize)]
pub struct ChannelStats {
    cumulative_reward: Vec<f64>,
    sample_count: Vec<u64>,
    slot_clock: u64,
}

impl ChannelStats {
    pub fn new(num_channels: usize) -> Self {
        Self {
            cumulative_reward: vec![0.0; num_channels],
            sample_count: vec![0; num_channels],
            slot_clock: 0,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.sample_count.len()
    }

    pub fn slot_clock(&self) -> u64 {
        self.slot_clock
    }

    pub fn tick(&mut self) {
        self.slot_clock += 1;
    }

    pub fn samples(&self, channel: usize) -> u64 {
        self.sample_count[channel]
    }

    pub fn reward_total(&self, channel: usize) -> f64 {
        self.cumulative_reward[channel]
    }

    /// Records one collision-free reward observation.
    pub fn update(&mut self, channel: usize, reward: u8) -> Result<(), LearningError> {
        if channel >= self.sample_count.len() {
            return Err(LearningError::IndexOutOfRange(channel));
        }
        self.sample_count[channel] += 1;
        self.cumulative_reward[channel] += f64::from(reward);
        Ok(())
    }

    /// Optimistic index: empirical mean plus sqrt(2 ln t / S). Channels with
    /// no samples get +inf so they are explored first.
    pub fn ucb_index(&self, channel: usize) -> f64 {
        let s = self.sample_count[channel];
        if s == 0 {
            return f64::INFINITY;
        }
        let t = self.slot_clock.max(1) as f64;
        let s = s as f64;
        self.cumulative_reward[channel] / s + (2.0 * t.ln() / s).sqrt()
    }

    /// Channels sorted by index, best first; ties broken by lower channel
    /// index so traces are reproducible.
    pub fn rank_channels(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.num_channels()).collect();
        let scores: Vec<f64> = order.iter().map(|&k| self.ucb_index(k)).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        order
    }

    /// The channels currently ranked strictly above `reserved`, best first.
    pub fn preference_list(&self, reserved: usize) -> Vec<usize> {
        let ranking = self.rank_channels();
        let pos = ranking
            .iter()
            .position(|&k| k == reserved)
            .expect("reserved channel is in the ranking");
        ranking[..pos].to_vec()
    }
}

/// Minimum per-channel sample count after which the empirical ranking is
/// correct with high probability: 8 ln t / gap^2.
pub fn s_min(t: u64, gaps: &GapStats) -> f64 {
    8.0 * (t as f64).ln() / (gaps.min_gap * gaps.min_gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{random_matrix, RewardMatrix, RngStream};

    fn stats_with(clock: u64, entries: &[(usize, f64, u64)]) -> ChannelStats {
        let k = entries.iter().map(|e| e.0).max().unwrap_or(0) + 1;
        let mut s = ChannelStats::new(k.max(2));
        for &(ch, p, n) in entries {
            s.cumulative_reward[ch] = p;
            s.sample_count[ch] = n;
        }
        s.slot_clock = clock;
        s
    }

    #[test]
    fn update_counts() {
        let mut s = ChannelStats::new(3);
        s.update(0, 1).unwrap();
        assert_eq!(s.samples(0), 1);
        assert_eq!(s.reward_total(0), 1.0);
        let mut s = stats_with(10, &[(1, 3.0, 4)]);
        s.update(1, 0).unwrap();
        assert_eq!(s.samples(1), 5);
        assert_eq!(s.reward_total(1), 3.0);
    }

    #[test]
    fn update_isolated() {
        let mut s = ChannelStats::new(4);
        for _ in 0..1000 {
            s.update(0, 1).unwrap();
        }
        assert_eq!(s.samples(0), 1000);
        assert_eq!(s.reward_total(0), 1000.0);
        for k in 1..4 {
            assert_eq!(s.samples(k), 0);
            assert_eq!(s.reward_total(k), 0.0);
        }
    }

    #[test]
    fn update_rejects_bad_index() {
        let mut s = ChannelStats::new(2);
        assert!(s.update(2, 1).is_err());
    }

    #[test]
    fn ucb_unsampled_is_infinite() {
        let s = stats_with(5, &[]);
        assert!(s.ucb_index(0).is_infinite());
    }

    #[test]
    fn ucb_matches_closed_form() {
        let s = stats_with(100, &[(0, 3.0, 4)]);
        assert!((s.ucb_index(0) - 2.267428).abs() < 1e-5);
        let s = stats_with(2, &[(0, 0.0, 1)]);
        assert!((s.ucb_index(0) - 1.177410).abs() < 1e-5);
    }

    #[test]
    fn ucb_monotone_in_reward_and_samples() {
        let lo = stats_with(50, &[(0, 2.0, 8)]);
        let hi = stats_with(50, &[(0, 3.0, 8)]);
        assert!(hi.ucb_index(0) > lo.ucb_index(0));
        // same empirical mean, more samples: smaller confidence term
        let few = stats_with(50, &[(0, 2.0, 4)]);
        let many = stats_with(50, &[(0, 8.0, 16)]);
        assert!(many.ucb_index(0) < few.ucb_index(0));
    }

    #[test]
    fn rank_all_unsampled_is_index_order() {
        let s = stats_with(1, &[]);
        let mut s4 = ChannelStats::new(4);
        s4.slot_clock = 1;
        assert_eq!(s.rank_channels(), vec![0, 1]);
        assert_eq!(s4.rank_channels(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn rank_sorts_by_score() {
        // craft scores roughly (0.5, 2.1, 1.0) via pure empirical means at
        // huge sample counts so the confidence terms are negligible
        let s = stats_with(
            10,
            &[
                (0, 500_000.0, 1_000_000),
                (1, 1_000_000.0, 1_000_000),
                (2, 750_000.0, 1_000_000),
            ],
        );
        assert_eq!(s.rank_channels(), vec![1, 2, 0]);
    }

    #[test]
    fn rank_tie_breaks_by_lower_index() {
        let s = stats_with(10, &[(0, 3.0, 6), (1, 3.0, 6)]);
        assert_eq!(s.rank_channels(), vec![0, 1]);
    }

    #[test]
    fn preference_list_prefix() {
        let s = stats_with(
            10,
            &[
                (0, 800_000.0, 1_000_000),
                (1, 200_000.0, 1_000_000),
                (2, 999_999.0, 1_000_000),
            ],
        );
        // ranking is [2, 0, 1]
        assert_eq!(s.rank_channels(), vec![2, 0, 1]);
        assert_eq!(s.preference_list(1), vec![2, 0]);
        assert_eq!(s.preference_list(2), Vec::<usize>::new());
        assert_eq!(s.preference_list(0), vec![2]);
    }

    #[test]
    fn s_min_values() {
        let gaps = GapStats {
            per_user_gap: vec![1.0],
            min_gap: 1.0,
        };
        // t = 3 is close to e; check the formula directly instead
        let v = s_min(1000, &GapStats {
            per_user_gap: vec![0.2],
            min_gap: 0.2,
        });
        assert!((v - 1381.551).abs() < 0.01);
        let at_e = 8.0 * std::f64::consts::E.ln() / 1.0;
        assert!((at_e - 8.0).abs() < 1e-12);
        // doubling the gap quarters the bound
        let half = s_min(1000, &gaps);
        let double = s_min(
            1000,
            &GapStats {
                per_user_gap: vec![2.0],
                min_gap: 2.0,
            },
        );
        assert!((half / double - 4.0).abs() < 1e-9);
    }

    #[test]
    fn ranking_consistent_after_s_min_samples() {
        // with every channel sampled at least s_min(t) times, the empirical
        // ranking should match the true ranking in at least 95% of trials
        let matrix = RewardMatrix::validate(vec![vec![0.15, 0.35, 0.55, 0.75]]).unwrap();
        let gaps = matrix.gap_stats();
        let t = 5000u64;
        let needed = s_min(t, &gaps).ceil() as u64;
        let mut hits = 0;
        for trial in 0..200u64 {
            let mut rng = RngStream::new(1000 + trial);
            let mut stats = ChannelStats::new(4);
            stats.slot_clock = t;
            for k in 0..4 {
                for _ in 0..needed {
                    let r = matrix.sample_reward(0, k, &mut rng).unwrap();
                    stats.update(k, r).unwrap();
                }
            }
            if stats.rank_channels() == vec![3, 2, 1, 0] {
                hits += 1;
            }
        }
        assert!(hits >= 190, "correct ranking in only {hits}/200 trials");
    }

    #[test]
    fn preference_list_never_contains_reserved() {
        let mut rng = RngStream::new(77);
        for _ in 0..50 {
            let m = random_matrix(1, 6, 0.01, &mut rng);
            let mut stats = ChannelStats::new(6);
            stats.slot_clock = 500;
            for k in 0..6 {
                for _ in 0..(1 + rng.gen_range_usize(40)) {
                    let r = m.sample_reward(0, k, &mut rng).unwrap();
                    stats.update(k, r).unwrap();
                }
            }
            let ranking = stats.rank_channels();
            for reserved in 0..6 {
                let prefs = stats.preference_list(reserved);
                assert!(!prefs.contains(&reserved));
                let res_pos = ranking.iter().position(|&k| k == reserved).unwrap();
                for p in prefs {
                    assert!(ranking.iter().position(|&k| k == p).unwrap() < res_pos);
                }
            }
        }
    }
}
