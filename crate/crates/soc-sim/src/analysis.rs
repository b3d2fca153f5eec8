//! Offline analysis over the true reward matrix: allocation quality,
//! stability checking, the optimal assignment benchmark, and the
//! closed-form convergence bounds.

use crate::env::{GapStats, RewardMatrix};
use crate::protocol::rh_duration;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("user {user} or channel {channel} out of range")]
    IndexOutOfRange { user: usize, channel: usize },
    #[error("channel {0} assigned to more than one user")]
    NonOrthogonal(usize),
    #[error("more users assigned ({users}) than channels available ({channels})")]
    TooManyUsers { users: usize, channels: usize },
    #[error("invalid bound parameter: {0}")]
    InvalidParameter(String),
}

/// An orthogonal partial assignment of users to channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Allocation {
    map: BTreeMap<usize, usize>,
}

impl Allocation {
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, AnalysisError> {
        let mut map = BTreeMap::new();
        let mut used = BTreeMap::new();
        for (user, channel) in pairs {
            if let Some(_prev) = used.insert(channel, user) {
                return Err(AnalysisError::NonOrthogonal(channel));
            }
            map.insert(user, channel);
        }
        Ok(Self { map })
    }

    pub fn channel_of(&self, user: usize) -> Option<usize> {
        self.map.get(&user).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.map.iter().map(|(&u, &c)| (u, c))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn occupied(&self, channel: usize) -> bool {
        self.map.values().any(|&c| c == channel)
    }
}

/// Number of channels a user truly prefers to `channel`: 0 means the
/// user's best channel.
pub fn user_rank(
    matrix: &RewardMatrix,
    user: usize,
    channel: usize,
) -> Result<usize, AnalysisError> {
    if user >= matrix.num_users() || channel >= matrix.num_channels() {
        return Err(AnalysisError::IndexOutOfRange { user, channel });
    }
    let row = matrix.row(user);
    Ok(row.iter().filter(|&&mu| mu > row[channel]).count())
}

/// Sum of user ranks under the allocation; 0 iff every assigned user sits
/// on her personal best channel.
pub fn network_potential(
    matrix: &RewardMatrix,
    alloc: &Allocation,
) -> Result<usize, AnalysisError> {
    alloc
        .iter()
        .map(|(u, c)| user_rank(matrix, u, c))
        .sum()
}

/// A strictly potential-decreasing deviation from an allocation, if any.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Witness {
    /// moving `user` to the vacant `channel` lowers the potential
    MoveToVacant { user: usize, channel: usize },
    /// exchanging the channels of `user_a` and `user_b` lowers the potential
    Swap { user_a: usize, user_b: usize },
}

/// Tests whether the allocation is stable: no single move to a vacant
/// channel and no pairwise exchange strictly decreases the network
/// potential. Returns a witness for unstable allocations.
pub fn is_soc(
    matrix: &RewardMatrix,
    alloc: &Allocation,
) -> Result<(bool, Option<Witness>), AnalysisError> {
    if alloc.len() > matrix.num_channels() {
        return Err(AnalysisError::TooManyUsers {
            users: alloc.len(),
            channels: matrix.num_channels(),
        });
    }
    for (u, c) in alloc.iter() {
        if u >= matrix.num_users() || c >= matrix.num_channels() {
            return Err(AnalysisError::IndexOutOfRange { user: u, channel: c });
        }
    }
    let users: Vec<(usize, usize)> = alloc.iter().collect();
    for &(u, c) in &users {
        for k in 0..matrix.num_channels() {
            if !alloc.occupied(k) {
                if user_rank(matrix, u, k)? < user_rank(matrix, u, c)? {
                    return Ok((false, Some(Witness::MoveToVacant { user: u, channel: k })));
                }
            }
        }
    }
    for i in 0..users.len() {
        for j in i + 1..users.len() {
            let (a, ca) = users[i];
            let (b, cb) = users[j];
            let before = user_rank(matrix, a, ca)? + user_rank(matrix, b, cb)?;
            let after = user_rank(matrix, a, cb)? + user_rank(matrix, b, ca)?;
            if after < before {
                return Ok((false, Some(Witness::Swap { user_a: a, user_b: b })));
            }
        }
    }
    Ok((true, None))
}

/// Maximum achievable sum of true means over orthogonal assignments of all
/// users, via the Hungarian method with potentials (O(n^2 m)).
pub fn optimal_reward(matrix: &RewardMatrix) -> Result<f64, AnalysisError> {
    let n = matrix.num_users();
    let m = matrix.num_channels();
    if n > m {
        return Err(AnalysisError::TooManyUsers {
            users: n,
            channels: m,
        });
    }
    // minimize cost = -mean; 1-indexed arrays in the classic formulation
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1]; // row matched to each column
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = -matrix.mean(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            total += matrix.mean(p[j] - 1, j - 1);
        }
    }
    Ok(total)
}

/// Convergence-time ingredients shared by the static and dynamic bounds.
#[derive(Debug, Clone, Serialize)]
pub struct StaticBounds {
    pub t_rh: u64,
    /// per-channel samples needed at time `t_m` for a reliable ranking
    pub s_min_at_t_m: f64,
    /// sample-rate constant 16 K / gap^2
    pub m: f64,
    /// smallest integer t >= 2 with t >= m ln t (numeric; authoritative)
    pub t_m: u64,
    /// the quadratic-formula value printed alongside the numeric root;
    /// None when the discriminant is negative
    pub t_m_quadratic: Option<f64>,
    /// worst-case slots per potential step: 2 K^2 (K - 1)
    pub tau: u64,
    /// probability all rankings are correct from t_m on
    pub p_soc: f64,
    /// ln(1 - p_soc), kept separately because p_soc rounds to 1.0
    pub ln_one_minus_p_soc: f64,
    /// high-probability convergence horizon t_m + tau ln(delta / (1 - p_soc))
    pub t_delta: f64,
}

/// Extra terms for the dynamic variant with entries and exits.
#[derive(Debug, Clone, Serialize)]
pub struct DynamicBounds {
    /// worst-case slots for one newcomer to hold a reserved channel:
    /// K (2K + 4) + 1
    pub t_s_d: u64,
    /// worst-case slots of disruption after one departure: 2 K^2 (K - 1)
    pub t_l_d: u64,
    /// sample-rate constant for a lone newcomer: 16 (K - N) / gap^2
    pub m_nu: f64,
    pub t_m_nu: u64,
    pub ln_one_minus_p_soc_nu: f64,
    /// newcomer re-convergence horizon t_m_nu + ln(delta / (1 - p_soc_nu))
    pub t_e_d: f64,
    /// sample-rate constant with `entries` newcomers and `exits` leavers:
    /// 16 (K - N - exits) / gap^2
    pub m_d: f64,
    pub t_m_d: u64,
    pub ln_one_minus_p_soc_d: f64,
    /// worst-case slots per potential step with churn: 2 K e (K - 1)
    pub tau_d: u64,
    pub t_d_delta: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub num_channels: usize,
    pub num_users: usize,
    pub delta: f64,
    pub min_gap: f64,
    pub stat: StaticBounds,
    pub dynamic: Option<DynamicBounds>,
}

/// Smallest integer t >= 2 with t >= m * ln t. For m > e the crossing is
/// unique beyond t = m, so a bisection on [m, hi] suffices.
pub fn t_m_numeric(m: f64) -> u64 {
    let f = |t: f64| t - m * t.ln();
    if f(2.0) >= 0.0 {
        return 2;
    }
    let mut lo = m.max(2.0); // f(lo) < 0 here
    let mut hi = lo * 2.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    while hi - lo > 0.5 {
        let mid = (lo + hi) / 2.0;
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut t = lo.floor() as u64;
    while (t as f64) < m * (t as f64).ln() {
        t += 1;
    }
    t
}

fn quadratic_root(m: f64) -> Option<f64> {
    let disc = (m - 1.0) * (m - 1.0) - 4.0 * m;
    (disc >= 0.0).then(|| ((m - 1.0) - disc.sqrt()) / 2.0)
}

/// ln(1 - (1 - 2 t^-4)^e) without catastrophic cancellation: the inner
/// probability rounds to 1.0 in f64 for realistic t.
fn ln_one_minus_p(t_m: u64, exponent: f64) -> f64 {
    let t = t_m as f64;
    // ln p = e * ln(1 - 2 t^-4); 1 - p = -expm1(ln p)
    let ln_p = exponent * (-2.0 * t.powi(-4)).ln_1p();
    (-ln_p.exp_m1()).ln()
}

/// Static-protocol convergence bounds.
pub fn static_bounds(
    num_channels: usize,
    num_users: usize,
    delta: f64,
    gaps: &GapStats,
) -> Result<StaticBounds, AnalysisError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AnalysisError::InvalidParameter(format!("delta = {delta}")));
    }
    if !(gaps.min_gap > 0.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "min gap = {}",
            gaps.min_gap
        )));
    }
    let k = num_channels as f64;
    let gap2 = gaps.min_gap * gaps.min_gap;
    let m = 16.0 * k / gap2;
    let t_m = t_m_numeric(m);
    let tau = 2 * (num_channels as u64).pow(2) * (num_channels as u64 - 1);
    let exponent = (num_users * (num_channels - 1)) as f64;
    let ln_1mp = ln_one_minus_p(t_m, exponent);
    let p_soc = -(ln_1mp.exp()) + 1.0;
    let t_delta = t_m as f64 + tau as f64 * (delta.ln() - ln_1mp);
    Ok(StaticBounds {
        t_rh: rh_duration(delta, num_channels)
            .map_err(|e| AnalysisError::InvalidParameter(e.to_string()))?,
        s_min_at_t_m: 8.0 * (t_m as f64).ln() / gap2,
        m,
        t_m,
        t_m_quadratic: quadratic_root(m),
        tau,
        p_soc,
        ln_one_minus_p_soc: ln_1mp,
        t_delta,
    })
}

/// Dynamic-protocol bounds for `entries` newcomers and `exits` leavers on
/// top of N incumbents. Requires spare channels: K > N + exits.
pub fn dynamic_bounds(
    num_channels: usize,
    num_users: usize,
    delta: f64,
    gaps: &GapStats,
    entries: usize,
    exits: usize,
) -> Result<DynamicBounds, AnalysisError> {
    let k = num_channels;
    if num_users + exits >= k {
        return Err(AnalysisError::InvalidParameter(format!(
            "need spare channels: K = {k}, N = {num_users}, exits = {exits}"
        )));
    }
    if entries == 0 {
        return Err(AnalysisError::InvalidParameter("entries = 0".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(AnalysisError::InvalidParameter(format!("delta = {delta}")));
    }
    let gap2 = gaps.min_gap * gaps.min_gap;
    let ku = k as u64;
    let t_s_d = ku * (2 * ku + 4) + 1;
    let t_l_d = 2 * ku * ku * (ku - 1);
    let m_nu = 16.0 * (k - num_users) as f64 / gap2;
    let t_m_nu = t_m_numeric(m_nu);
    let exponent_nu = (k - 1) as f64;
    let ln_1mp_nu = ln_one_minus_p(t_m_nu, exponent_nu);
    let t_e_d = t_m_nu as f64 + (delta.ln() - ln_1mp_nu);
    let m_d = 16.0 * (k - num_users - exits) as f64 / gap2;
    let t_m_d = t_m_numeric(m_d);
    let exponent_d = ((num_users + entries) * (k - 1)) as f64;
    let ln_1mp_d = ln_one_minus_p(t_m_d, exponent_d);
    let tau_d = 2 * ku * entries as u64 * (ku - 1);
    let t_d_delta = t_m_d as f64 + tau_d as f64 * (delta.ln() - ln_1mp_d);
    Ok(DynamicBounds {
        t_s_d,
        t_l_d,
        m_nu,
        t_m_nu,
        ln_one_minus_p_soc_nu: ln_1mp_nu,
        t_e_d,
        m_d,
        t_m_d,
        ln_one_minus_p_soc_d: ln_1mp_d,
        tau_d,
        t_d_delta,
    })
}

pub fn bound_report(
    num_channels: usize,
    num_users: usize,
    delta: f64,
    gaps: &GapStats,
    entries: Option<usize>,
    exits: Option<usize>,
) -> Result<BoundReport, AnalysisError> {
    let stat = static_bounds(num_channels, num_users, delta, gaps)?;
    let dynamic = match (entries, exits) {
        (Some(e), l) => Some(dynamic_bounds(
            num_channels,
            num_users,
            delta,
            gaps,
            e,
            l.unwrap_or(0),
        )?),
        _ => None,
    };
    Ok(BoundReport {
        num_channels,
        num_users,
        delta,
        min_gap: gaps.min_gap,
        stat,
        dynamic,
    })
}

/// Precomputed `rank_of[user][channel]` table for fast potential updates
/// inside the simulation loop.
#[derive(Debug, Clone)]
pub struct RankTable {
    ranks: Vec<Vec<usize>>,
}

impl RankTable {
    pub fn new(matrix: &RewardMatrix) -> Self {
        let ranks = (0..matrix.num_users())
            .map(|u| {
                (0..matrix.num_channels())
                    .map(|c| user_rank(matrix, u, c).unwrap())
                    .collect()
            })
            .collect();
        Self { ranks }
    }

    pub fn push_user(&mut self, matrix: &RewardMatrix, user: usize) {
        debug_assert_eq!(user, self.ranks.len());
        self.ranks.push(
            (0..matrix.num_channels())
                .map(|c| user_rank(matrix, user, c).unwrap())
                .collect(),
        );
    }

    pub fn rank(&self, user: usize, channel: usize) -> usize {
        self.ranks[user][channel]
    }

    pub fn num_users(&self) -> usize {
        self.ranks.len()
    }
}
