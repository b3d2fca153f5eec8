//! Ground-truth channel environment: heterogeneous mean rewards, reward
//! sampling, and the gap statistics that parameterize the analytical bounds.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("mean reward {value} at user {user}, channel {channel} is outside [0, 1]")]
    EntryOutOfRange {
        user: usize,
        channel: usize,
        value: f64,
    },
    #[error("user {user} has two channels with identical mean reward {value}")]
    DegenerateRow { user: usize, value: f64 },
    #[error("matrix must have at least one user and two channels (got {users}x{channels})")]
    BadShape { users: usize, channels: usize },
    #[error("ragged matrix: row {user} has {got} entries, expected {expected}")]
    RaggedRow {
        user: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite entry at user {user}, channel {channel}")]
    NonFinite { user: usize, channel: usize },
    #[error("user {user} or channel {channel} index out of range")]
    IndexOutOfRange { user: usize, channel: usize },
}

/// True mean throughput for every (user, channel) pair. Hidden from agents;
/// only the sampler and the analysis code see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct RewardMatrix {
    means: Vec<Vec<f64>>,
}

impl RewardMatrix {
    /// Validates a raw table: entries in [0, 1], finite, and pairwise
    /// distinct within each row (a repeated mean would make the minimum
    /// gap zero and every sample-count bound infinite).
    pub fn validate(raw: Vec<Vec<f64>>) -> Result<Self, EnvError> {
        let users = raw.len();
        let channels = raw.first().map_or(0, |r| r.len());
        if users < 1 || channels < 2 {
            return Err(EnvError::BadShape { users, channels });
        }
        for (n, row) in raw.iter().enumerate() {
            if row.len() != channels {
                return Err(EnvError::RaggedRow {
                    user: n,
                    got: row.len(),
                    expected: channels,
                });
            }
            for (k, &mu) in row.iter().enumerate() {
                if !mu.is_finite() {
                    return Err(EnvError::NonFinite { user: n, channel: k });
                }
                if !(0.0..=1.0).contains(&mu) {
                    return Err(EnvError::EntryOutOfRange {
                        user: n,
                        channel: k,
                        value: mu,
                    });
                }
            }
            for i in 0..channels {
                for j in i + 1..channels {
                    if row[i] == row[j] {
                        return Err(EnvError::DegenerateRow {
                            user: n,
                            value: row[i],
                        });
                    }
                }
            }
        }
        Ok(Self { means: raw })
    }

    pub fn num_users(&self) -> usize {
        self.means.len()
    }

    pub fn num_channels(&self) -> usize {
        self.means[0].len()
    }

    pub fn mean(&self, user: usize, channel: usize) -> f64 {
        self.means[user][channel]
    }

    pub fn row(&self, user: usize) -> &[f64] {
        &self.means[user]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Appends a row for a newly entered user. The row is validated against
    /// the same constraints as the initial matrix.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<(), EnvError> {
        let user = self.means.len();
        if row.len() != self.num_channels() {
            return Err(EnvError::RaggedRow {
                user,
                got: row.len(),
                expected: self.num_channels(),
            });
        }
        for (k, &mu) in row.iter().enumerate() {
            if !mu.is_finite() {
                return Err(EnvError::NonFinite { user, channel: k });
            }
            if !(0.0..=1.0).contains(&mu) {
                return Err(EnvError::EntryOutOfRange {
                    user,
                    channel: k,
                    value: mu,
                });
            }
        }
        for i in 0..row.len() {
            for j in i + 1..row.len() {
                if row[i] == row[j] {
                    return Err(EnvError::DegenerateRow { user, value: row[i] });
                }
            }
        }
        self.means.push(row);
        Ok(())
    }

    /// Per-row minimum pairwise gaps and the network-wide minimum.
    /// The minimization runs over channel pairs within each user's row.
    pub fn gap_stats(&self) -> GapStats {
        let per_user_gap: Vec<f64> = self
            .means
            .iter()
            .map(|row| {
                let mut gap = f64::INFINITY;
                for i in 0..row.len() {
                    for j in i + 1..row.len() {
                        gap = gap.min((row[i] - row[j]).abs());
                    }
                }
                gap
            })
            .collect();
        let min_gap = per_user_gap.iter().cloned().fold(f64::INFINITY, f64::min);
        GapStats {
            per_user_gap,
            min_gap,
        }
    }

    /// Bernoulli reward draw for a collision-free transmission. Consumes
    /// exactly one draw from the stream.
    pub fn sample_reward(
        &self,
        user: usize,
        channel: usize,
        rng: &mut RngStream,
    ) -> Result<u8, EnvError> {
        if user >= self.num_users() || channel >= self.num_channels() {
            return Err(EnvError::IndexOutOfRange { user, channel });
        }
        let draw: f64 = rng.rng.gen();
        Ok(u8::from(draw < self.means[user][channel]))
    }
}

impl TryFrom<Vec<Vec<f64>>> for RewardMatrix {
    type Error = EnvError;
    fn try_from(raw: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        Self::validate(raw)
    }
}

impl From<RewardMatrix> for Vec<Vec<f64>> {
    fn from(m: RewardMatrix) -> Self {
        m.means
    }
}

/// Sub-optimality gap statistics of a reward matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub per_user_gap: Vec<f64>,
    pub min_gap: f64,
}

/// Deterministic, seedable random stream. Identical seed and draw order
/// give identical outputs on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent sub-stream, e.g. one per replication or one
    /// per purpose (matrix generation vs. reward draws vs. agent decisions).
    pub fn substream(&self, index: u64) -> Self {
        // splitmix64-style mix so nearby indices land far apart
        let mut z = self.seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        Self::new(z ^ (z >> 31))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn gen_range_usize(&mut self, upper: usize) -> usize {
        self.rng.gen_range(0..upper)
    }

    pub fn gen_f64(&mut self) -> f64 {
        self.rng.gen()
    }
}

/// Draws a row of iid uniform means, resampled until all pairwise gaps in
/// the row reach `gap_floor`. Keeps the sample-count bounds finite while
/// matching "statistics chosen randomly per experiment".
pub fn random_row(num_channels: usize, gap_floor: f64, rng: &mut RngStream) -> Vec<f64> {
    loop {
        let row: Vec<f64> = (0..num_channels).map(|_| rng.gen_f64()).collect();
        let mut ok = true;
        'outer: for i in 0..num_channels {
            for j in i + 1..num_channels {
                if (row[i] - row[j]).abs() < gap_floor {
                    ok = false;
                    break 'outer;
                }
            }
        }
        if ok {
            return row;
        }
    }
}

/// Generates a full random matrix with every row satisfying the gap floor.
pub fn random_matrix(
    num_users: usize,
    num_channels: usize,
    gap_floor: f64,
    rng: &mut RngStream,
) -> RewardMatrix {
    let rows = (0..num_users)
        .map(|_| random_row(num_channels, gap_floor, rng))
        .collect();
    RewardMatrix::validate(rows).expect("generated rows satisfy the invariants")
}
