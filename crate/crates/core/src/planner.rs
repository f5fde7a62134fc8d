//! Wavelength allocation for fully connected N-user networks.
//!
//! Every unordered user pair gets its own conjugate channel pair. Users share
//! one detector for all their channels, so each channel also gets a fiber
//! delay chosen such that the pair arrival signatures seen by any one user
//! stay distinguishable.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral_grid::Channel;

const DEFAULT_LABELS: [&str; 8] = [
    "Alice", "Bob", "Chloe", "Dave", "Erin", "Frank", "Grace", "Heidi",
];

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct UserId {
    pub index: usize,
    pub label: String,
}

impl UserId {
    pub fn new(index: usize, label: impl Into<String>) -> Self {
        UserId {
            index,
            label: label.into(),
        }
    }
}

pub fn default_users(n: usize) -> Vec<UserId> {
    (0..n)
        .map(|i| match DEFAULT_LABELS.get(i) {
            Some(l) => UserId::new(i, *l),
            None => UserId::new(i, format!("User{}", i + 1)),
        })
        .collect()
}

/// One network edge: the signal channel goes to `user_a`, the idler to `user_b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeAssignment {
    pub user_a: UserId,
    pub user_b: UserId,
    pub signal_channel: Channel,
    pub idler_channel: Channel,
}

impl EdgeAssignment {
    pub fn name(&self) -> String {
        format!("{}-{}", self.user_a.label, self.user_b.label)
    }

    /// Lower-case `alice_bob` style key used in metric names.
    pub fn key(&self) -> String {
        format!(
            "{}_{}",
            self.user_a.label.to_lowercase(),
            self.user_b.label.to_lowercase()
        )
    }

    pub fn channels(&self) -> [Channel; 2] {
        [self.signal_channel, self.idler_channel]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub users: Vec<UserId>,
    pub edges: Vec<EdgeAssignment>,
    pub pump: Channel,
    pub excluded_channels: BTreeSet<Channel>,
}

impl NetworkPlan {
    pub fn edges_of(&self, user: usize) -> impl Iterator<Item = &EdgeAssignment> {
        self.edges
            .iter()
            .filter(move |e| e.user_a.index == user || e.user_b.index == user)
    }

    /// Channels delivered to `user`, in edge order.
    pub fn channels_of(&self, user: usize) -> Vec<Channel> {
        self.edges_of(user)
            .map(|e| {
                if e.user_a.index == user {
                    e.signal_channel
                } else {
                    e.idler_channel
                }
            })
            .collect()
    }

    pub fn edge_between(&self, a: &str, b: &str) -> Option<&EdgeAssignment> {
        self.edges.iter().find(|e| {
            (e.user_a.label == a && e.user_b.label == b) || (e.user_a.label == b && e.user_b.label == a)
        })
    }

    pub fn owner_of(&self, channel: Channel) -> Option<&UserId> {
        self.edges.iter().find_map(|e| {
            if e.signal_channel == channel {
                Some(&e.user_a)
            } else if e.idler_channel == channel {
                Some(&e.user_b)
            } else {
                None
            }
        })
    }
}

/// Fiber delay per channel (ns) plus the separation required between the
/// arrival signatures seen by one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelaySchedule {
    pub delay_by_channel: BTreeMap<Channel, f64>,
    pub identification_window: f64,
}

impl DelaySchedule {
    pub fn delay_ns(&self, channel: Channel) -> f64 {
        self.delay_by_channel.get(&channel).copied().unwrap_or(0.0)
    }

    /// `delay(signal) - delay(idler)` for an edge, in ns.
    pub fn edge_offset(&self, edge: &EdgeAssignment) -> f64 {
        self.delay_ns(edge.signal_channel) - self.delay_ns(edge.idler_channel)
    }
}

/// Largest user count whose full mesh fits in `channel_count` channels.
pub fn max_users(channel_count: usize) -> usize {
    let mut n = 1usize;
    while (n + 1) * n <= channel_count {
        n += 1;
    }
    n.max(2)
}

/// Channels adjacent to the pump (within `radius` grid slots) plus the pump.
pub fn default_exclusions(pump: Channel, radius: i32) -> BTreeSet<Channel> {
    (-radius..=radius)
        .filter_map(|d| Channel::new(pump.index() + d).ok())
        .collect()
}

/// Assign a conjugate channel pair to every user pair.
///
/// Edges are enumerated lexicographically (A-B, A-C, ..., C-D) and take
/// conjugate pairs in order of increasing distance from the pump; the
/// higher-frequency (signal) channel goes to the lower-indexed user.
pub fn plan_network(
    n_users: usize,
    pump: Channel,
    available: &[Channel],
    exclusions: &BTreeSet<Channel>,
) -> Result<NetworkPlan> {
    plan_network_with_users(default_users(n_users), pump, available, exclusions)
}

pub fn plan_network_with_users(
    users: Vec<UserId>,
    pump: Channel,
    available: &[Channel],
    exclusions: &BTreeSet<Channel>,
) -> Result<NetworkPlan> {
    let n = users.len();
    if n < 2 {
        return Err(Error::Configuration(format!(
            "a network needs at least 2 users, got {n}"
        )));
    }
    if users.iter().enumerate().any(|(i, u)| u.index != i) {
        return Err(Error::Configuration(
            "user indices must be 0..n in order".into(),
        ));
    }
    if available.contains(&pump) && !exclusions.contains(&pump) {
        return Err(Error::Configuration(format!(
            "pump channel {pump} is listed as available"
        )));
    }
    let usable: BTreeSet<Channel> = available
        .iter()
        .copied()
        .filter(|c| !exclusions.contains(c) && *c != pump)
        .collect();
    let mut pairs = usable
        .iter()
        .filter(|c| c.index() > pump.index())
        .filter_map(|&signal| {
            let idler = Channel::new(2 * pump.index() - signal.index()).ok()?;
            usable.contains(&idler).then_some((signal, idler))
        })
        .collect::<Vec<_>>();
    pairs.sort_by_key(|(s, _)| s.index() - pump.index());

    let required = n * (n - 1) / 2;
    if pairs.len() < required {
        return Err(Error::Capacity {
            required,
            available: pairs.len(),
        });
    }

    let mut edges = Vec::with_capacity(required);
    let mut pair_iter = pairs.into_iter();
    for a in 0..n {
        for b in a + 1..n {
            let (signal, idler) = pair_iter.next().expect("capacity checked");
            edges.push(EdgeAssignment {
                user_a: users[a].clone(),
                user_b: users[b].clone(),
                signal_channel: signal,
                idler_channel: idler,
            });
        }
    }
    Ok(NetworkPlan {
        users,
        edges,
        pump,
        excluded_channels: exclusions.clone(),
    })
}

fn offsets_for_user(plan: &NetworkPlan, delays: &BTreeMap<Channel, f64>, user: usize) -> Vec<f64> {
    plan.edges_of(user)
        .filter_map(|e| {
            let s = delays.get(&e.signal_channel)?;
            let i = delays.get(&e.idler_channel)?;
            Some(s - i)
        })
        .collect()
}

fn separated(offsets: &[f64], window: f64) -> bool {
    offsets.iter().enumerate().all(|(i, a)| {
        offsets[i + 1..]
            .iter()
            .all(|b| (a - b).abs() >= window - 1e-9)
    })
}

/// Greedy delay assignment. Channels in index order take the smallest
/// multiple of `base_step` that keeps every user's completed edge offsets
/// at least `window` apart.
pub fn assign_delays(plan: &NetworkPlan, base_step: f64, window: f64) -> Result<DelaySchedule> {
    if !(base_step > 0.0 && window >= 0.0) {
        return Err(Error::Configuration(
            "delay step must be positive and window non-negative".into(),
        ));
    }
    if base_step < 2.0 * window {
        return Err(Error::Configuration(format!(
            "delay step {base_step} ns must be at least twice the window {window} ns"
        )));
    }
    let channels: BTreeSet<Channel> = plan.edges.iter().flat_map(|e| e.channels()).collect();
    let mut delays = BTreeMap::new();
    for channel in channels {
        let touched: Vec<usize> = plan
            .edges
            .iter()
            .filter(|e| e.channels().contains(&channel))
            .flat_map(|e| [e.user_a.index, e.user_b.index])
            .collect();
        let mut k = 0u32;
        loop {
            delays.insert(channel, f64::from(k) * base_step);
            if touched
                .iter()
                .all(|&u| separated(&offsets_for_user(plan, &delays, u), window))
            {
                break;
            }
            k += 1;
        }
    }
    Ok(DelaySchedule {
        delay_by_channel: delays,
        identification_window: window,
    })
}

/// Every violated plan or schedule invariant, one message each.
pub fn verify_plan(plan: &NetworkPlan, schedule: &DelaySchedule) -> Vec<String> {
    let mut problems = Vec::new();
    let n = plan.users.len();

    let mut seen_indices = BTreeSet::new();
    for u in &plan.users {
        if !seen_indices.insert(u.index) {
            problems.push(format!("duplicate user index: {}", u.index));
        }
    }

    let expected = n * n.saturating_sub(1) / 2;
    if plan.edges.len() != expected {
        problems.push(format!(
            "edge count {} != n(n-1)/2 = {expected}",
            plan.edges.len()
        ));
    }
    let mut pair_seen = BTreeSet::new();
    for e in &plan.edges {
        if e.user_a.index >= e.user_b.index {
            problems.push(format!("edge {} is not ordered by user index", e.name()));
        }
        let key = (e.user_a.index.min(e.user_b.index), e.user_a.index.max(e.user_b.index));
        if !pair_seen.insert(key) {
            problems.push(format!("duplicate edge: {}", e.name()));
        }
        if e.signal_channel.index() + e.idler_channel.index() != 2 * plan.pump.index() {
            problems.push(format!(
                "non-conjugate edge {}: {}/{} about {}",
                e.name(),
                e.signal_channel,
                e.idler_channel,
                plan.pump
            ));
        }
        if !(e.signal_channel.index() > plan.pump.index() && plan.pump.index() > e.idler_channel.index()) {
            problems.push(format!(
                "edge {}: signal must sit above and idler below the pump",
                e.name()
            ));
        }
    }

    let mut uses: BTreeMap<Channel, usize> = BTreeMap::new();
    for c in plan.edges.iter().flat_map(|e| e.channels()) {
        *uses.entry(c).or_default() += 1;
    }
    for (c, count) in &uses {
        if *count > 1 {
            problems.push(format!("channel reuse: {c}"));
        }
        if plan.excluded_channels.contains(c) {
            problems.push(format!("excluded channel in use: {c}"));
        }
    }

    for u in &plan.users {
        let chans: BTreeSet<Channel> = plan.channels_of(u.index).into_iter().collect();
        if chans.len() != n.saturating_sub(1) {
            problems.push(format!(
                "user {} receives {} distinct channels, expected {}",
                u.label,
                chans.len(),
                n.saturating_sub(1)
            ));
        }
    }

    for c in uses.keys() {
        if !schedule.delay_by_channel.contains_key(c) {
            problems.push(format!("missing delay for {c}"));
        }
    }
    for u in &plan.users {
        let offsets = offsets_for_user(plan, &schedule.delay_by_channel, u.index);
        if !separated(&offsets, schedule.identification_window) {
            problems.push(format!("ambiguous arrival signature for user {}", u.label));
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ch(i: i32) -> Channel {
        Channel::new(i).unwrap()
    }

    fn four_user_inputs() -> (Vec<Channel>, BTreeSet<Channel>) {
        let pump = ch(35);
        let available: Vec<Channel> = (28..=42).map(ch).filter(|c| *c != pump).collect();
        (available, default_exclusions(pump, 1))
    }

    fn four_user_plan() -> NetworkPlan {
        let (available, excl) = four_user_inputs();
        plan_network(4, ch(35), &available, &excl).unwrap()
    }

    #[test]
    fn reproduces_the_four_user_allocation() {
        let plan = four_user_plan();
        let got: Vec<(String, i32, i32)> = plan
            .edges
            .iter()
            .map(|e| (e.name(), e.signal_channel.index(), e.idler_channel.index()))
            .collect();
        let want = [
            ("Alice-Bob", 37, 33),
            ("Alice-Chloe", 38, 32),
            ("Alice-Dave", 39, 31),
            ("Bob-Chloe", 40, 30),
            ("Bob-Dave", 41, 29),
            ("Chloe-Dave", 42, 28),
        ];
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert_eq!((g.0.as_str(), g.1, g.2), w);
        }
        let idx = |u| -> BTreeSet<i32> { plan.channels_of(u).iter().map(|c| c.index()).collect() };
        assert_eq!(idx(0), BTreeSet::from([37, 38, 39]));
        assert_eq!(idx(1), BTreeSet::from([33, 40, 41]));
        assert_eq!(idx(2), BTreeSet::from([32, 30, 42]));
        assert_eq!(idx(3), BTreeSet::from([31, 29, 28]));
    }

    #[test]
    fn two_users_take_the_first_pair() {
        let (available, excl) = four_user_inputs();
        let plan = plan_network(2, ch(35), &available, &excl).unwrap();
        assert_eq!(plan.edges.len(), 1);
        assert_eq!(plan.edges[0].signal_channel, ch(37));
        assert_eq!(plan.edges[0].idler_channel, ch(33));
    }

    #[test]
    fn capacity_and_configuration_errors() {
        let pump = ch(35);
        let excl = default_exclusions(pump, 1);
        let ten: Vec<Channel> = [28, 29, 30, 31, 32, 38, 39, 40, 41, 42].into_iter().map(ch).collect();
        match plan_network(4, pump, &ten, &excl) {
            Err(Error::Capacity { required, available }) => {
                assert_eq!((required, available), (6, 5));
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
        let with_pump: Vec<Channel> = (28..=42).map(ch).collect();
        assert!(matches!(
            plan_network(4, pump, &with_pump, &BTreeSet::new()),
            Err(Error::Configuration(_))
        ));
        assert!(plan_network(1, pump, &ten, &excl).is_err());
    }

    #[test]
    fn max_users_examples() {
        assert_eq!(max_users(44), 7);
        assert_eq!(max_users(12), 4);
        assert_eq!(max_users(2), 2);
        assert_eq!(max_users(56), 8);
    }

    #[test]
    fn channel_count_law() {
        for n in 2..=7 {
            let pump = ch(35);
            let available: Vec<Channel> = (0..=70).map(ch).filter(|c| *c != pump).collect();
            let plan = plan_network(n, pump, &available, &default_exclusions(pump, 1)).unwrap();
            let used: BTreeSet<Channel> = plan.edges.iter().flat_map(|e| e.channels()).collect();
            assert_eq!(used.len(), n * (n - 1));
            let schedule = assign_delays(&plan, 10.0, 2.5).unwrap();
            assert!(verify_plan(&plan, &schedule).is_empty());
        }
    }

    /// Independent exhaustive check of the identifiability invariant.
    fn brute_force_identifiable(plan: &NetworkPlan, schedule: &DelaySchedule) -> bool {
        for u in &plan.users {
            let offs: Vec<f64> = plan
                .edges
                .iter()
                .filter(|e| e.user_a.index == u.index || e.user_b.index == u.index)
                .map(|e| schedule.delay_by_channel[&e.signal_channel] - schedule.delay_by_channel[&e.idler_channel])
                .collect();
            for i in 0..offs.len() {
                for j in 0..offs.len() {
                    if i != j && (offs[i] - offs[j]).abs() < schedule.identification_window {
                        return false;
                    }
                }
            }
        }
        true
    }

    #[test]
    fn greedy_delays_are_identifiable() {
        let plan = four_user_plan();
        for step in [10.0, 5.0] {
            let schedule = assign_delays(&plan, step, 2.5).unwrap();
            assert!(brute_force_identifiable(&plan, &schedule), "step {step}");
            assert!(verify_plan(&plan, &schedule).is_empty());
            for d in schedule.delay_by_channel.values() {
                assert!((d / step - (d / step).round()).abs() < 1e-12);
            }
        }
        let (available, excl) = four_user_inputs();
        let two = plan_network(2, ch(35), &available, &excl).unwrap();
        let s = assign_delays(&two, 10.0, 2.5).unwrap();
        assert!(brute_force_identifiable(&two, &s));
        assert!(assign_delays(&plan, 4.0, 2.5).is_err());
    }

    #[test]
    fn greedy_schedule_for_four_users() {
        let schedule = assign_delays(&four_user_plan(), 10.0, 2.5).unwrap();
        let got: Vec<(i32, f64)> = schedule
            .delay_by_channel
            .iter()
            .map(|(c, d)| (c.index(), *d))
            .collect();
        let want = [
            (28, 0.0), (29, 0.0), (30, 0.0), (31, 0.0), (32, 0.0), (33, 0.0),
            (37, 0.0), (38, 10.0), (39, 20.0), (40, 20.0), (41, 10.0), (42, 0.0),
        ];
        assert_eq!(got, want.to_vec());
    }

    #[test]
    fn verify_reports_violations() {
        let plan = four_user_plan();
        let schedule = assign_delays(&plan, 10.0, 2.5).unwrap();
        assert!(verify_plan(&plan, &schedule).is_empty());

        let mut reused = plan.clone();
        reused.edges[1].signal_channel = ch(37);
        let problems = verify_plan(&reused, &schedule);
        assert!(problems.contains(&"channel reuse: CH37".to_string()), "{problems:?}");

        let flat = DelaySchedule {
            delay_by_channel: schedule.delay_by_channel.keys().map(|c| (*c, 0.0)).collect(),
            identification_window: 2.5,
        };
        let problems = verify_plan(&plan, &flat);
        assert!(
            problems.contains(&"ambiguous arrival signature for user Alice".to_string()),
            "{problems:?}"
        );
    }

    #[test]
    fn plan_serializes_to_json() {
        let plan = four_user_plan();
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains("\"signal_channel\":37"));
        let back: NetworkPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }
}
