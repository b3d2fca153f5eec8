//! Per-agent protocol state machine: random hopping, the master /
//! non-master negotiation over the block grid, and the sensing-only
//! synchronization path that lets late joiners align to the grid without a
//! global clock.

use crate::env::RngStream;
use crate::learning::ChannelStats;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("delta must lie strictly between 0 and 1 (got {0})")]
    InvalidDelta(f64),
    #[error("operation not valid in phase {0:?}")]
    PhaseViolation(Phase),
}

/// Which protocol flavour an agent runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// All users present from slot 0; non-masters transmit through the
    /// first sub-block.
    Static,
    /// Static negotiation plus per-channel exponential backoff after
    /// rejected switch requests, on a half-length master block.
    StaticHeuristic,
    /// Non-masters stay silent in the first sub-block so newcomers can
    /// find the grid; users may enter and leave.
    Dynamic,
}

impl Variant {
    pub fn silent_first_sub_block(self) -> bool {
        matches!(self, Variant::Dynamic)
    }

    /// Sub-blocks per master block: K for the standard grid, K/2 for the
    /// heuristic's shortened master block.
    pub fn sbs_per_mb(self, num_channels: usize) -> usize {
        match self {
            Variant::StaticHeuristic => (num_channels / 2).max(2),
            _ => num_channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    RandomHopping,
    Synchronizing,
    AcquiringReserved,
    Smcs,
    Departed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Master,
    NonMaster,
}

/// What an agent does with its single narrowband radio in one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SlotAction {
    Transmit(usize),
    Sense(usize),
    Idle,
}

/// Feedback delivered at the end of a slot. Carries no global slot number:
/// agents keep their own clocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    /// After a transmission: collided, or a reward sample if alone.
    Transmit { collided: bool, reward: Option<u8> },
    /// After sensing: whether anyone transmitted on the sensed channel.
    Sense { busy: bool },
    /// After an idle slot.
    None,
}

/// Agent-local position on the block grid, counted from the agent's own
/// alignment point. Two slots per sub-block (CT then CS), `sbs_per_mb`
/// sub-blocks per master block, K master blocks per switching round.
#[derive(Debug, Clone, Serialize)]
pub struct BlockClock {
    num_channels: usize,
    sbs_per_mb: usize,
    smcs_slot: u64,
}

impl BlockClock {
    pub fn new(num_channels: usize, variant: Variant) -> Self {
        Self {
            num_channels,
            sbs_per_mb: variant.sbs_per_mb(num_channels),
            smcs_slot: 0,
        }
    }

    pub fn mb_len(&self) -> u64 {
        2 * self.sbs_per_mb as u64
    }

    pub fn ohs_len(&self) -> u64 {
        self.num_channels as u64 * self.mb_len()
    }

    pub fn ohs_index(&self) -> u64 {
        self.smcs_slot / self.ohs_len()
    }

    /// 1-based index of the current master block within the switching round.
    pub fn mb_index(&self) -> usize {
        (1 + (self.smcs_slot % self.ohs_len()) / self.mb_len()) as usize
    }

    /// 1-based index of the current sub-block within the master block.
    pub fn sb_index(&self) -> usize {
        (1 + (self.smcs_slot % self.mb_len()) / 2) as usize
    }

    pub fn is_ct_slot(&self) -> bool {
        self.smcs_slot % 2 == 0
    }

    pub fn at_mb_start(&self) -> bool {
        self.smcs_slot % self.mb_len() == 0
    }

    pub fn align(&mut self, position_in_ohs: u64) {
        self.smcs_slot = position_in_ohs % self.ohs_len();
    }

    pub fn tick(&mut self) {
        self.smcs_slot += 1;
    }
}

/// Duration of the random-hopping phase:
/// ceil(ln(delta/K) / ln(1 - 1/(4K))).
pub fn rh_duration(delta: f64, num_channels: usize) -> Result<u64, ProtocolError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ProtocolError::InvalidDelta(delta));
    }
    let k = num_channels as f64;
    let t = ((delta / k).ln() / (1.0 - 1.0 / (4.0 * k)).ln()).ceil();
    Ok(t as u64)
}

/// True when the offered channel is strictly better than the current one
/// under the agent's indices. Ties reject, so equally-indexed channels do
/// not oscillate.
pub fn decide_accept(stats: &ChannelStats, current: usize, offered: usize) -> bool {
    stats.ucb_index(offered) > stats.ucb_index(current)
}

#[derive(Debug, Clone, Copy, Serialize)]
struct BackoffEntry {
    reject_count: u32,
    skip_until_ohs: u64,
}

impl BackoffEntry {
    fn reset() -> Self {
        Self {
            reject_count: 0,
            skip_until_ohs: 0,
        }
    }
}

/// Synchronization progress for a late joiner. Everything here is derived
/// from passive sensing of a single occupied channel.
#[derive(Debug, Clone, Serialize)]
pub struct SyncState {
    pub piggyback_channel: Option<usize>,
    pub ssb_seen: bool,
    /// busy/idle record since the piggyback channel was fixed
    #[serde(skip)]
    window: Vec<bool>,
    /// window-index parity of sub-block boundaries, once a lone idle pair
    /// flanked by transmissions has been seen
    parity: Option<usize>,
    /// idle-pair counts per sub-block offset class within a master block
    #[serde(skip)]
    pair_counts: Vec<u32>,
    last_sensed: Option<usize>,
}

impl SyncState {
    fn new() -> Self {
        Self {
            piggyback_channel: None,
            ssb_seen: false,
            window: Vec::new(),
            parity: None,
            pair_counts: Vec::new(),
            last_sensed: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct AcquireState {
    next_candidate: usize,
    sensed: Option<usize>,
    deadline: u64,
}

/// Full per-agent protocol state. Mutated only through [`step`]; the
/// engine owns it and may evaluate agents in any order within a slot.
#[derive(Debug, Clone, Serialize)]
pub struct AgentState {
    pub user_id: usize,
    pub phase: Phase,
    pub mode: Mode,
    pub reserved_channel: Option<usize>,
    pub locked: bool,
    pub clock: BlockClock,
    pub departure_requested: bool,
    pub sync: SyncState,
    /// master's frozen preference list for the current master block
    probe_plan: Vec<usize>,
    probe_pos: usize,
    /// outstanding CT probe awaiting its CS resolution
    pending_probe: Option<usize>,
    /// non-master: accepted a swap; move here at the next slot
    accept_move_to: Option<usize>,
    rh_remaining: u64,
    last_transmit: Option<usize>,
    acquire: Option<AcquireState>,
    /// a claimed channel stays provisional until the first collision-free
    /// transmission confirms no simultaneous claimer
    claim_pending: bool,
    backoff: Vec<BackoffEntry>,
    /// set at each MB boundary; late claimers wait for the next boundary
    eligible_master: bool,
    // counters surfaced to the metrics layer
    pub switch_attempts: u64,
    pub switches: u64,
}

impl AgentState {
    /// A founding user: random-hops for `t_rh` slots, then negotiates.
    pub fn new_initial(user_id: usize, num_channels: usize, variant: Variant, t_rh: u64) -> Self {
        Self {
            user_id,
            phase: Phase::RandomHopping,
            mode: Mode::NonMaster,
            reserved_channel: None,
            locked: false,
            clock: BlockClock::new(num_channels, variant),
            departure_requested: false,
            sync: SyncState::new(),
            probe_plan: Vec::new(),
            probe_pos: 0,
            pending_probe: None,
            accept_move_to: None,
            rh_remaining: t_rh,
            last_transmit: None,
            acquire: None,
            claim_pending: false,
            backoff: vec![BackoffEntry::reset(); num_channels],
            eligible_master: true,
            switch_attempts: 0,
            switches: 0,
        }
    }

    /// A late joiner: senses its way onto the grid before ever transmitting.
    pub fn new_entrant(user_id: usize, num_channels: usize, variant: Variant) -> Self {
        let mut s = Self::new_initial(user_id, num_channels, variant, 0);
        s.phase = Phase::Synchronizing;
        s
    }

    pub fn claim_provisional(&self) -> bool {
        self.claim_pending
    }

    pub fn request_departure(&mut self) -> Result<(), ProtocolError> {
        if self.phase == Phase::Departed {
            return Err(ProtocolError::PhaseViolation(self.phase));
        }
        self.departure_requested = true;
        Ok(())
    }

    fn num_channels(&self) -> usize {
        self.backoff.len()
    }

    fn change_reservation(&mut self, channel: usize) {
        self.reserved_channel = Some(channel);
        self.switches += 1;
        for b in &mut self.backoff {
            *b = BackoffEntry::reset();
        }
    }

    fn register_reject(&mut self, channel: usize) {
        let ohs = self.clock.ohs_index();
        let e = &mut self.backoff[channel];
        e.reject_count += 1;
        let skip = 1u64 << e.reject_count.min(30);
        e.skip_until_ohs = ohs + 1 + skip;
    }

    fn backoff_active(&self, channel: usize) -> bool {
        self.clock.ohs_index() + 1 <= self.backoff[channel].skip_until_ohs
            && self.backoff[channel].reject_count > 0
    }
}

/// Advances one agent by one slot: consumes the previous slot's
/// observation, updates the state, and returns the action for this slot.
pub fn step(
    state: &mut AgentState,
    stats: &ChannelStats,
    last_obs: Observation,
    variant: Variant,
    rng: &mut RngStream,
) -> SlotAction {
    match state.phase {
        Phase::RandomHopping => rh_step(state, last_obs, variant, stats, rng),
        Phase::Synchronizing => sync_step(state, last_obs, rng),
        Phase::AcquiringReserved => acquire_reserved_step(state, last_obs),
        Phase::Smcs => smcs_step(state, stats, last_obs, variant, rng),
        Phase::Departed => SlotAction::Idle,
    }
}

fn rh_step(
    state: &mut AgentState,
    last_obs: Observation,
    variant: Variant,
    stats: &ChannelStats,
    rng: &mut RngStream,
) -> SlotAction {
    if !state.locked {
        if let Observation::Transmit { collided: false, .. } = last_obs {
            state.locked = true;
            state.reserved_channel = state.last_transmit;
        }
    }
    if state.rh_remaining == 0 {
        // first slot after the hopping window
        if state.locked {
            state.phase = Phase::Smcs;
            state.clock.smcs_slot = 0;
            state.eligible_master = true;
            return smcs_step(state, stats, last_obs, variant, rng);
        }
        state.phase = Phase::Departed;
        return SlotAction::Idle;
    }
    state.rh_remaining -= 1;
    let ch = match state.reserved_channel {
        Some(c) if state.locked => c,
        _ => rng.gen_range_usize(state.num_channels()),
    };
    state.last_transmit = Some(ch);
    SlotAction::Transmit(ch)
}

fn smcs_step(
    state: &mut AgentState,
    stats: &ChannelStats,
    last_obs: Observation,
    variant: Variant,
    rng: &mut RngStream,
) -> SlotAction {
    // a provisional claim either confirms or reveals a rival claimer
    if state.claim_pending {
        if let Observation::Transmit { collided, .. } = last_obs {
            state.claim_pending = false;
            if collided {
                // another joiner claimed the same channel in the same
                // slot; both back off and rescan from random positions
                let k = state.num_channels();
                state.reserved_channel = None;
                state.phase = Phase::AcquiringReserved;
                state.acquire = Some(AcquireState {
                    next_candidate: rng.gen_range_usize(k),
                    sensed: None,
                    deadline: (2 * k * k + 2 * k + 1) as u64,
                });
                return acquire_reserved_step(state, Observation::None);
            }
        }
    }
    // resolve last slot first: a pending probe, or a committed move
    if let Some(target) = state.accept_move_to.take() {
        state.change_reservation(target);
    }
    if let Some(probe) = state.pending_probe {
        match last_obs {
            Observation::Transmit { collided, .. } => {
                if state.clock.is_ct_slot() {
                    // last slot was the CS retry of the probe
                    state.pending_probe = None;
                    if collided {
                        // occupant signalled acceptance: the swap commits
                        state.change_reservation(probe);
                        state.mode = Mode::NonMaster;
                    } else if variant == Variant::StaticHeuristic {
                        state.register_reject(probe);
                    }
                } else if !collided {
                    // clean CT probe: the channel was vacant, take it
                    state.pending_probe = None;
                    state.change_reservation(probe);
                    state.mode = Mode::NonMaster;
                }
            }
            _ => state.pending_probe = None,
        }
    }

    if state.clock.at_mb_start() {
        state.eligible_master = true;
        let reserved = state.reserved_channel.expect("SMCS agents hold a reservation");
        let is_own_mb = state.clock.mb_index() == reserved + 1;
        if state.departure_requested && is_own_mb {
            state.phase = Phase::Departed;
            return SlotAction::Idle;
        }
        state.mode = if is_own_mb { Mode::Master } else { Mode::NonMaster };
        if state.mode == Mode::Master {
            let sbs = state.clock.sbs_per_mb;
            let mut plan = stats.preference_list(reserved);
            if variant == Variant::StaticHeuristic {
                plan.retain(|&c| !state.backoff_active(c));
            }
            plan.truncate(sbs - 1);
            state.probe_plan = plan;
            state.probe_pos = 0;
            state.pending_probe = None;
        }
    }

    let reserved = state.reserved_channel.expect("SMCS agents hold a reservation");
    let action = if state.clock.sb_index() == 1 {
        match state.mode {
            Mode::Master => SlotAction::Transmit(reserved),
            Mode::NonMaster if variant.silent_first_sub_block() => SlotAction::Idle,
            Mode::NonMaster => SlotAction::Transmit(reserved),
        }
    } else if state.mode == Mode::Master {
        if state.clock.is_ct_slot() {
            if state.probe_pos < state.probe_plan.len() {
                let probe = state.probe_plan[state.probe_pos];
                state.probe_pos += 1;
                state.pending_probe = Some(probe);
                state.switch_attempts += 1;
                SlotAction::Transmit(probe)
            } else {
                SlotAction::Transmit(reserved)
            }
        } else if let Some(probe) = state.pending_probe {
            // the CT collided; retry in the CS slot to request the swap
            SlotAction::Transmit(probe)
        } else {
            SlotAction::Transmit(reserved)
        }
    } else if state.clock.is_ct_slot() {
        SlotAction::Transmit(reserved)
    } else {
        // CS slot of a non-master: answer the master if it knocked
        match last_obs {
            Observation::Transmit { collided: true, .. } => {
                let offered = state.clock.mb_index() - 1;
                if offered != reserved && decide_accept(stats, reserved, offered) {
                    state.accept_move_to = Some(offered);
                    SlotAction::Transmit(reserved)
                } else {
                    SlotAction::Idle
                }
            }
            _ => SlotAction::Transmit(reserved),
        }
    };
    state.last_transmit = match action {
        SlotAction::Transmit(c) => Some(c),
        _ => state.last_transmit,
    };
    state.clock.tick();
    action
}

fn sync_step(state: &mut AgentState, last_obs: Observation, rng: &mut RngStream) -> SlotAction {
    let k = state.num_channels();
    let mb_len = 2 * k as u64;
    let window_cap = (2 * k * k + 2) as usize;

    if state.sync.piggyback_channel.is_none() {
        if let Observation::Sense { busy: true } = last_obs {
            state.sync.piggyback_channel = state.sync.last_sensed;
            state.sync.window = vec![true];
            state.sync.pair_counts = vec![0; k];
        } else {
            let ch = rng.gen_range_usize(k);
            state.sync.last_sensed = Some(ch);
            return SlotAction::Sense(ch);
        }
    } else if let Observation::Sense { busy } = last_obs {
        state.sync.window.push(busy);
    }

    let pb = state.sync.piggyback_channel.unwrap();

    if let Some(alignment) = analyze_sync_window(state, mb_len, window_cap) {
        match alignment {
            SyncOutcome::Aligned { position_in_ohs } => {
                state.sync.ssb_seen = true;
                state.clock.align(position_in_ohs);
                state.phase = Phase::AcquiringReserved;
                state.acquire = Some(AcquireState {
                    next_candidate: 0,
                    sensed: None,
                    deadline: (2 * k * k + 2 * k + 1) as u64,
                });
                return acquire_reserved_step(state, Observation::None);
            }
            SyncOutcome::Restart => {
                state.sync = SyncState::new();
                let ch = rng.gen_range_usize(k);
                state.sync.last_sensed = Some(ch);
                return SlotAction::Sense(ch);
            }
        }
    }

    SlotAction::Sense(pb)
}

enum SyncOutcome {
    Aligned { position_in_ohs: u64 },
    Restart,
}

/// Inspects the sensing record of the piggyback channel. Returns an
/// alignment once the grid and the piggyback channel's own master block
/// have been identified, a restart if the channel was abandoned, or None
/// while evidence is still accumulating.
///
/// Grid facts used:
///  - only the slot's master transmits in the first sub-block, so a busy
///    first-sub-block slot on the piggyback channel pins its master block
///    to "now";
///  - a lone idle pair flanked by transmissions starts on a sub-block
///    boundary (silent first sub-block, or one rejected probe away);
///  - per master block, the first sub-block is the only sub-block offset
///    that is idle in most blocks, so its offset class dominates the
///    idle-pair counts;
///  - a user leaves only at the start of its own master block, so a long
///    silence starting on the first-sub-block offset marks that boundary.
fn analyze_sync_window(state: &mut AgentState, mb_len: u64, window_cap: usize) -> Option<SyncOutcome> {
    let k = state.num_channels();
    let pb = state.sync.piggyback_channel.unwrap();
    let w = &state.sync.window;
    let len = w.len();

    if state.sync.parity.is_none() && len >= 4 {
        let i = len - 4;
        if w[i] && !w[i + 1] && !w[i + 2] && w[i + 3] {
            state.sync.parity = Some((i + 1) % 2);
            // classify all complete pairs seen so far
            let p = (i + 1) % 2;
            let counts = &mut state.sync.pair_counts;
            let mut q = p;
            while q + 1 < len {
                if !w[q] && !w[q + 1] {
                    counts[((q - p) / 2) % k] += 1;
                }
                q += 2;
            }
        }
    } else if let Some(p) = state.sync.parity {
        // classify the pair that just completed
        if len >= 2 && (len - 2) % 2 == p % 2 && len >= p + 2 {
            let q = len - 2;
            if (q as i64 - p as i64) >= 0 && !w[q] && !w[q + 1] {
                state.sync.pair_counts[((q - p) / 2) % k] += 1;
            }
        }
    }

    let ssb_class = state.sync.parity.and_then(|_| {
        let counts = &state.sync.pair_counts;
        let (best, &best_n) = counts
            .iter()
            .enumerate()
            .max_by_key(|&(i, &n)| (n, std::cmp::Reverse(i)))
            .unwrap();
        let second = counts
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best)
            .map(|(_, &n)| n)
            .max()
            .unwrap_or(0);
        (best_n >= 2 && best_n > second).then_some(best)
    });

    // departure or abandonment: a silence spanning a full master block
    let idle_run = w.iter().rev().take_while(|&&b| !b).count() as u64;
    if idle_run >= mb_len {
        if let (Some(p), Some(class)) = (state.sync.parity, ssb_class) {
            let run_start = len as u64 - idle_run;
            if run_start >= p as u64 && (run_start - p as u64) % 2 == 0 {
                let run_class = (((run_start - p as u64) / 2) as usize) % k;
                if run_class == class {
                    // the occupant left at the start of its own master block
                    let pos = pb as u64 * mb_len + (len as u64 - run_start);
                    return Some(SyncOutcome::Aligned { position_in_ohs: pos });
                }
            }
        }
        return Some(SyncOutcome::Restart);
    }

    if let (Some(p), Some(class)) = (state.sync.parity, ssb_class) {
        // scan for the latest busy first-sub-block: the occupant is (or
        // was, within this window) the master, which names the block
        let mut q = p + 2 * class;
        let mut latest: Option<usize> = None;
        while q + 1 < len {
            if w[q] && w[q + 1] {
                latest = Some(q);
            }
            q += 2 * k;
        }
        if let Some(q) = latest {
            let pos = pb as u64 * mb_len + (len as u64 - q as u64);
            return Some(SyncOutcome::Aligned { position_in_ohs: pos });
        }
    }

    if len >= window_cap {
        return Some(SyncOutcome::Restart);
    }
    None
}

fn acquire_reserved_step(state: &mut AgentState, last_obs: Observation) -> SlotAction {
    let k = state.num_channels();
    let acquire = state.acquire.as_mut().expect("acquire state present");

    if let (Some(c), Observation::Sense { busy: false }) = (acquire.sensed, last_obs) {
        // claimed: idle CT slot outside the first sub-block, not the
        // master's own channel
        state.acquire = None;
        state.reserved_channel = Some(c);
        state.phase = Phase::Smcs;
        state.mode = Mode::NonMaster;
        state.eligible_master = false;
        state.claim_pending = true;
        state.last_transmit = Some(c);
        state.clock.tick();
        return SlotAction::Transmit(c);
    }
    acquire.sensed = None;

    if acquire.deadline == 0 {
        state.phase = Phase::Departed;
        return SlotAction::Idle;
    }
    acquire.deadline -= 1;

    let action = if state.clock.sb_index() >= 2 && state.clock.is_ct_slot() {
        let master_channel = state.clock.mb_index() - 1;
        let mut c = acquire.next_candidate % k;
        if c == master_channel {
            c = (c + 1) % k;
        }
        acquire.next_candidate = (c + 1) % k;
        acquire.sensed = Some(c);
        SlotAction::Sense(c)
    } else {
        SlotAction::Idle
    };
    state.clock.tick();
    action
}
