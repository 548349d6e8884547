//! User registry and wavelength-selective-switch allocation.
//!
//! [`SwitchState`] owns the mapping from conjugate channel pairs to user
//! pairs. Every transition validates before mutating, so a failed operation
//! leaves the state untouched.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{ChannelPlan, GridChannel};

/// Schema version written into persisted switch documents.
pub const SWITCH_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("a user cannot link with themself ({0})")]
    SelfLink(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("user `{0}` is already registered")]
    DuplicateUser(String),
    #[error("user name must not be empty")]
    EmptyName,
    #[error("user `{0}` is busy (linked or waiting)")]
    Busy(String),
    #[error("pair {0} has no active link")]
    InactivePair(usize),
    #[error("unsupported switch schema version {0}")]
    UnsupportedVersion(u32),
    #[error("switch state invariant violated: {0}")]
    Corrupt(String),
    #[error("clock cannot move backwards ({from} s -> {to} s)")]
    ClockBackwards { from: f64, to: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct User {
    pub id: UserId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub pair_id: usize,
    pub user_a: UserId,
    pub user_b: UserId,
    pub established_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRequest {
    pub user_a: UserId,
    pub user_b: UserId,
    pub requested_at: f64,
}

/// Switch routing for one granted link: the signal channel goes to `user_a`'s
/// port and the idler channel to `user_b`'s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkGrant {
    pub pair_id: usize,
    pub signal: GridChannel,
    pub idler: GridChannel,
    pub user_a: UserId,
    pub user_b: UserId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ConnectOutcome {
    Granted(LinkGrant),
    /// Queued; `position` is zero-based.
    Waitlisted { position: usize },
}

/// Chooses which free pair a new link receives.
pub trait PairPolicy {
    fn choose(&self, plan: &ChannelPlan, free: &BTreeSet<usize>) -> Option<usize>;
}

/// Grant the free pair closest to degeneracy. Pair ids are already ordered
/// by detuning, so this is the smallest free id.
#[derive(Debug, Clone, Copy, Default)]
pub struct LowestDetuning;

impl PairPolicy for LowestDetuning {
    fn choose(&self, _plan: &ChannelPlan, free: &BTreeSet<usize>) -> Option<usize> {
        free.iter().next().copied()
    }
}

/// One logged transition; replaying a log reproduces the state exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NetOp {
    Register { name: String },
    Connect { a: UserId, b: UserId },
    Disconnect { pair_id: usize },
    Advance { to_s: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpOutcome {
    Registered(UserId),
    Connect(ConnectOutcome),
    /// Waitlisted requests granted as a consequence of the disconnect.
    Disconnected(Vec<LinkGrant>),
    Advanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub links: Vec<Link>,
    pub free_pairs: Vec<usize>,
    pub waitlist: Vec<LinkRequest>,
    pub waitlist_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchState {
    pub version: u32,
    pub plan: ChannelPlan,
    pub users: Vec<User>,
    /// Sorted by `pair_id`.
    pub links: Vec<Link>,
    pub free_pairs: BTreeSet<usize>,
    pub waitlist: VecDeque<LinkRequest>,
    /// Logical clock stamped on links and requests, in seconds.
    #[serde(default)]
    pub clock_s: f64,
    #[serde(default)]
    next_user_id: u32,
}

impl SwitchState {
    pub fn new(plan: ChannelPlan) -> Self {
        let free_pairs = (0..plan.len()).collect();
        SwitchState {
            version: SWITCH_SCHEMA_VERSION,
            plan,
            users: Vec::new(),
            links: Vec::new(),
            free_pairs,
            waitlist: VecDeque::new(),
            clock_s: 0.0,
            next_user_id: 0,
        }
    }

    pub fn register(&mut self, name: &str) -> Result<UserId, NetError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(NetError::EmptyName);
        }
        if self.user_by_name(name).is_some() {
            return Err(NetError::DuplicateUser(name.to_owned()));
        }
        let id = UserId(self.next_user_id);
        self.next_user_id += 1;
        self.users.push(User {
            id,
            name: name.to_owned(),
        });
        Ok(id)
    }

    pub fn user(&self, id: UserId) -> Option<&User> {
        self.users.iter().find(|u| u.id == id)
    }

    pub fn user_by_name(&self, name: &str) -> Option<UserId> {
        self.users.iter().find(|u| u.name == name).map(|u| u.id)
    }

    fn name_of(&self, id: UserId) -> String {
        self.user(id)
            .map(|u| u.name.clone())
            .unwrap_or_else(|| format!("#{}", id.0))
    }

    pub fn link_of(&self, id: UserId) -> Option<&Link> {
        self.links.iter().find(|l| l.user_a == id || l.user_b == id)
    }

    fn is_waiting(&self, id: UserId) -> bool {
        self.waitlist.iter().any(|r| r.user_a == id || r.user_b == id)
    }

    fn is_linked(&self, id: UserId) -> bool {
        self.link_of(id).is_some()
    }

    pub fn advance_to(&mut self, t: f64) -> Result<(), NetError> {
        if !(t >= self.clock_s) {
            return Err(NetError::ClockBackwards {
                from: self.clock_s,
                to: t,
            });
        }
        self.clock_s = t;
        Ok(())
    }

    pub fn connect(&mut self, a: UserId, b: UserId) -> Result<ConnectOutcome, NetError> {
        self.connect_with(&LowestDetuning, a, b)
    }

    pub fn connect_with(
        &mut self,
        policy: &dyn PairPolicy,
        a: UserId,
        b: UserId,
    ) -> Result<ConnectOutcome, NetError> {
        for id in [a, b] {
            if self.user(id).is_none() {
                return Err(NetError::UnknownUser(format!("#{}", id.0)));
            }
        }
        if a == b {
            return Err(NetError::SelfLink(self.name_of(a)));
        }
        for id in [a, b] {
            if self.is_linked(id) || self.is_waiting(id) {
                return Err(NetError::Busy(self.name_of(id)));
            }
        }
        match policy.choose(&self.plan, &self.free_pairs) {
            Some(pair_id) => Ok(ConnectOutcome::Granted(self.grant(pair_id, a, b))),
            None => {
                self.waitlist.push_back(LinkRequest {
                    user_a: a,
                    user_b: b,
                    requested_at: self.clock_s,
                });
                Ok(ConnectOutcome::Waitlisted {
                    position: self.waitlist.len() - 1,
                })
            }
        }
    }

    fn grant(&mut self, pair_id: usize, a: UserId, b: UserId) -> LinkGrant {
        self.free_pairs.remove(&pair_id);
        let link = Link {
            pair_id,
            user_a: a,
            user_b: b,
            established_at: self.clock_s,
        };
        let at = self.links.partition_point(|l| l.pair_id < pair_id);
        self.links.insert(at, link);
        let pair = &self.plan.pairs[pair_id];
        LinkGrant {
            pair_id,
            signal: pair.signal,
            idler: pair.idler,
            user_a: a,
            user_b: b,
        }
    }

    pub fn disconnect(&mut self, pair_id: usize) -> Result<Vec<LinkGrant>, NetError> {
        self.disconnect_with(&LowestDetuning, pair_id)
    }

    /// Free `pair_id`, then serve the waitlist in FIFO order, skipping
    /// requests whose users are not both idle.
    pub fn disconnect_with(
        &mut self,
        policy: &dyn PairPolicy,
        pair_id: usize,
    ) -> Result<Vec<LinkGrant>, NetError> {
        let at = self
            .links
            .iter()
            .position(|l| l.pair_id == pair_id)
            .ok_or(NetError::InactivePair(pair_id))?;
        self.links.remove(at);
        self.free_pairs.insert(pair_id);

        let mut granted = Vec::new();
        let mut i = 0;
        while i < self.waitlist.len() && !self.free_pairs.is_empty() {
            let req = &self.waitlist[i];
            let (a, b) = (req.user_a, req.user_b);
            if self.is_linked(a) || self.is_linked(b) {
                i += 1;
                continue;
            }
            let Some(pair) = policy.choose(&self.plan, &self.free_pairs) else {
                break;
            };
            self.waitlist.remove(i);
            granted.push(self.grant(pair, a, b));
        }
        Ok(granted)
    }

    pub fn apply(&mut self, op: &NetOp) -> Result<OpOutcome, NetError> {
        match op {
            NetOp::Register { name } => self.register(name).map(OpOutcome::Registered),
            NetOp::Connect { a, b } => self.connect(*a, *b).map(OpOutcome::Connect),
            NetOp::Disconnect { pair_id } => self.disconnect(*pair_id).map(OpOutcome::Disconnected),
            NetOp::Advance { to_s } => self.advance_to(*to_s).map(|_| OpOutcome::Advanced),
        }
    }

    /// Rebuild a state from a plan and an operation log. Failed operations are
    /// skipped exactly as they were when first applied.
    pub fn replay<'a>(plan: ChannelPlan, ops: impl IntoIterator<Item = &'a NetOp>) -> Self {
        let mut state = SwitchState::new(plan);
        for op in ops {
            let _ = state.apply(op);
        }
        state
    }

    pub fn status(&self) -> StatusReport {
        StatusReport {
            links: self.links.clone(),
            free_pairs: self.free_pairs.iter().copied().collect(),
            waitlist: self.waitlist.iter().cloned().collect(),
            waitlist_depth: self.waitlist.len(),
        }
    }

    pub fn check_invariants(&self) -> Result<(), NetError> {
        let bad = |msg: String| Err(NetError::Corrupt(msg));
        let n = self.plan.len();
        let mut seen_pairs = BTreeSet::new();
        let mut seen_users = BTreeSet::new();
        for l in &self.links {
            if l.pair_id >= n {
                return bad(format!("link on unknown pair {}", l.pair_id));
            }
            if !seen_pairs.insert(l.pair_id) {
                return bad(format!("pair {} granted twice", l.pair_id));
            }
            if self.free_pairs.contains(&l.pair_id) {
                return bad(format!("pair {} both linked and free", l.pair_id));
            }
            if l.user_a == l.user_b {
                return bad(format!("self link on pair {}", l.pair_id));
            }
            for u in [l.user_a, l.user_b] {
                if self.user(u).is_none() {
                    return bad(format!("link references unknown user #{}", u.0));
                }
                if !seen_users.insert(u) {
                    return bad(format!("user #{} in two links", u.0));
                }
            }
        }
        if self.links.windows(2).any(|w| w[0].pair_id >= w[1].pair_id) {
            return bad("links not sorted by pair id".into());
        }
        if seen_pairs.len() + self.free_pairs.len() != n
            || self.free_pairs.iter().any(|&p| p >= n)
        {
            return bad("linked and free pairs do not partition the plan".into());
        }
        let mut waiting = BTreeSet::new();
        for r in &self.waitlist {
            for u in [r.user_a, r.user_b] {
                if self.user(u).is_none() || !waiting.insert(u) {
                    return bad(format!("bad waitlist entry for user #{}", u.0));
                }
            }
        }
        let mut names = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for u in &self.users {
            if !names.insert(&u.name) || !ids.insert(u.id) || u.id.0 >= self.next_user_id {
                return bad(format!("duplicate or stale user `{}`", u.name));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("switch state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NetError> {
        let state: SwitchState =
            serde_json::from_str(text).map_err(|e| NetError::Corrupt(e.to_string()))?;
        if state.version > SWITCH_SCHEMA_VERSION || state.version == 0 {
            return Err(NetError::UnsupportedVersion(state.version));
        }
        state.check_invariants()?;
        Ok(state)
    }
}
