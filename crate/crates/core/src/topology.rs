//! Reachability between clients and per-round participant selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type ClientId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    #[default]
    Mesh,
    /// Two internally complete groups joined by a single link.
    Bridged,
}

/// Client graph over ids `0..n`.
///
/// In the bridged layout, 1-based addresses split into odd and even groups;
/// with 0-based ids that is even ids (group A) and odd ids (group B). The
/// lower-median member of each group holds the inter-group link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    kind: TopologyKind,
    n: usize,
    neighbors: Vec<Vec<ClientId>>,
}

impl Topology {
    pub fn new(kind: TopologyKind, n: usize) -> Result<Self> {
        let min = match kind {
            TopologyKind::Mesh => 2,
            TopologyKind::Bridged => 4,
        };
        if n < min {
            return Err(Error::InvalidArgument(format!("{kind:?} topology needs at least {min} clients")));
        }
        let neighbors = match kind {
            TopologyKind::Mesh => (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect(),
            TopologyKind::Bridged => {
                let (a, b) = Self::groups(n);
                let (ba, bb) = (Self::median(&a), Self::median(&b));
                (0..n)
                    .map(|i| {
                        let group = if i % 2 == 0 { &a } else { &b };
                        let mut nb: Vec<_> = group.iter().copied().filter(|&j| j != i).collect();
                        if i == ba {
                            nb.push(bb);
                        } else if i == bb {
                            nb.push(ba);
                        }
                        nb.sort_unstable();
                        nb
                    })
                    .collect()
            }
        };
        Ok(Self { kind, n, neighbors })
    }

    fn groups(n: usize) -> (Vec<ClientId>, Vec<ClientId>) {
        ((0..n).step_by(2).collect(), (1..n).step_by(2).collect())
    }

    fn median(group: &[ClientId]) -> ClientId {
        group[(group.len() - 1) / 2]
    }

    /// The two clients holding the inter-group link, if any.
    pub fn bridge(&self) -> Option<(ClientId, ClientId)> {
        match self.kind {
            TopologyKind::Mesh => None,
            TopologyKind::Bridged => {
                let (a, b) = Self::groups(self.n);
                Some((Self::median(&a), Self::median(&b)))
            }
        }
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn neighbors(&self, client: ClientId) -> &[ClientId] {
        &self.neighbors[client]
    }

    pub fn are_adjacent(&self, a: ClientId, b: ClientId) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    pub fn same_group(&self, a: ClientId, b: ClientId) -> bool {
        match self.kind {
            TopologyKind::Mesh => true,
            TopologyKind::Bridged => a % 2 == b % 2,
        }
    }
}

/// Who picks the next aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregatorMode {
    /// The previous aggregator picks uniformly among its neighbors.
    #[default]
    Rotate,
    /// One client aggregates every round.
    Fixed(ClientId),
    /// A data-less hub owns the global model (centralized reference runs).
    Hub,
}

impl FromStr for AggregatorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "rotate" => Ok(AggregatorMode::Rotate),
            "hub" => Ok(AggregatorMode::Hub),
            other => other
                .strip_prefix("fixed:")
                .and_then(|v| v.parse().ok())
                .map(AggregatorMode::Fixed)
                .ok_or_else(|| {
                    Error::config(
                        "topology.aggregator_mode",
                        format!("expected rotate | fixed:<id> | hub, got `{other}`"),
                    )
                }),
        }
    }
}

impl fmt::Display for AggregatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregatorMode::Rotate => f.write_str("rotate"),
            AggregatorMode::Fixed(id) => write!(f, "fixed:{id}"),
            AggregatorMode::Hub => f.write_str("hub"),
        }
    }
}

impl Serialize for AggregatorMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AggregatorMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Lowest id on the first round, otherwise a uniform pick among the
/// previous aggregator's neighbors.
pub fn next_aggregator(
    topology: &Topology,
    prev: Option<ClientId>,
    mode: AggregatorMode,
    rng: &mut Rng,
) -> Result<ClientId> {
    match (mode, prev) {
        (AggregatorMode::Fixed(id), _) => {
            if id >= topology.len() {
                return Err(Error::IndexOutOfRange {
                    context: "fixed aggregator",
                    index: id,
                    bound: topology.len(),
                });
            }
            Ok(id)
        }
        (AggregatorMode::Hub, _) => Err(Error::InvalidArgument("hub mode has no client aggregator".into())),
        (AggregatorMode::Rotate, None) => Ok(0),
        (AggregatorMode::Rotate, Some(p)) => topology
            .neighbors(p)
            .choose(rng)
            .copied()
            .ok_or(Error::Empty("aggregator neighborhood")),
    }
}

/// Number of senders for a fraction of `n` clients (at least one).
pub fn sender_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).max(1)
}

/// Uniform sample without replacement among the aggregator's neighbors,
/// returned in ascending id order.
pub fn select_senders(
    topology: &Topology,
    aggregator: ClientId,
    fraction: f64,
    rng: &mut Rng,
) -> Result<Vec<ClientId>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("sender fraction {fraction} outside (0, 1]")));
    }
    let pool = topology.neighbors(aggregator);
    if pool.is_empty() {
        return Err(Error::Empty("reachable sender pool"));
    }
    let k = sender_count(fraction, topology.len()).min(pool.len());
    let mut chosen: Vec<ClientId> = pool.choose_multiple(rng, k).copied().collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Uniform sample of `k` senders from all clients (hub mode).
pub fn select_clients(n: usize, fraction: f64, rng: &mut Rng) -> Result<Vec<ClientId>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("sender fraction {fraction} outside (0, 1]")));
    }
    let k = sender_count(fraction, n).min(n);
    let mut chosen = rand::seq::index::sample(rng, n, k).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Disjoint `(sender, aggregator)` pairs of adjacent clients, at most
/// `round(fraction * n)` of them.
pub fn select_pairs(topology: &Topology, fraction: f64, rng: &mut Rng) -> Result<Vec<(ClientId, ClientId)>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("sender fraction {fraction} outside (0, 1]")));
    }
    let n = topology.len();
    let want = sender_count(fraction, n).min(n / 2);
    let mut order: Vec<ClientId> = (0..n).collect();
    order.shuffle(rng);
    let mut used = vec![false; n];
    let mut pairs = Vec::with_capacity(want);
    for (pos, &sender) in order.iter().enumerate() {
        if pairs.len() == want {
            break;
        }
        if used[sender] {
            continue;
        }
        if let Some(&aggregator) = order[pos + 1..]
            .iter()
            .find(|&&c| !used[c] && topology.are_adjacent(sender, c))
        {
            used[sender] = true;
            used[aggregator] = true;
            pairs.push((sender, aggregator));
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty("sender/aggregator pairing"));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};

    #[test]
    fn first_round_is_client_zero() {
        for kind in [TopologyKind::Mesh, TopologyKind::Bridged] {
            let t = Topology::new(kind, 10).unwrap();
            let mut rng = derive(1, Stream::Aggregator, &[]);
            assert_eq!(next_aggregator(&t, None, AggregatorMode::Rotate, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn fixed_mode_is_constant() {
        let t = Topology::new(TopologyKind::Mesh, 5).unwrap();
        let mut rng = derive(1, Stream::Aggregator, &[]);
        for prev in [None, Some(3), Some(0)] {
            assert_eq!(next_aggregator(&t, prev, AggregatorMode::Fixed(0), &mut rng).unwrap(), 0);
        }
        assert!(next_aggregator(&t, None, AggregatorMode::Fixed(9), &mut rng).is_err());
    }

    #[test]
    fn successor_is_uniform_on_mesh() {
        let n = 10;
        let t = Topology::new(TopologyKind::Mesh, n).unwrap();
        let mut rng = derive(2, Stream::Aggregator, &[]);
        let draws = 100_000;
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            counts[next_aggregator(&t, Some(4), AggregatorMode::Rotate, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[4], 0);
        let expected = draws as f64 / (n - 1) as f64;
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != 4)
            .map(|(_, &o)| (o as f64 - expected).powi(2) / expected)
            .sum();
        // 8 degrees of freedom, 99.9% quantile 26.12
        assert!(chi2 < 26.12, "chi2 = {chi2}");
    }

    #[test]
    fn sender_sizes_and_exclusion() {
        let t = Topology::new(TopologyKind::Mesh, 50).unwrap();
        let mut rng = derive(3, Stream::Senders, &[]);
        assert_eq!(select_senders(&t, 0, 0.5, &mut rng).unwrap().len(), 25);
        assert_eq!(select_senders(&t, 0, 0.01, &mut rng).unwrap().len(), 1);
        for i in 0..10_000 {
            let a = i % 50;
            assert!(!select_senders(&t, a, 0.3, &mut rng).unwrap().contains(&a));
        }
        assert!(select_senders(&t, 0, 0.0, &mut rng).is_err());
        assert!(select_senders(&t, 0, 1.5, &mut rng).is_err());
    }

    #[test]
    fn bridged_layout() {
        let t = Topology::new(TopologyKind::Bridged, 10).unwrap();
        // groups {0,2,4,6,8} and {1,3,5,7,9}; medians 4 and 5
        assert_eq!(t.bridge(), Some((4, 5)));
        for i in 0..10 {
            for &j in t.neighbors(i) {
                assert!(t.are_adjacent(j, i), "asymmetric {i}-{j}");
            }
            assert!(!t.neighbors(i).is_empty());
        }
        let mut rng = derive(4, Stream::Senders, &[]);
        for round in 0..2000 {
            let a = round % 10;
            for s in select_senders(&t, a, 0.5, &mut rng).unwrap() {
                if !t.same_group(a, s) {
                    assert!(a == 4 || a == 5, "cross-group sender {s} for aggregator {a}");
                }
            }
        }
    }

    #[test]
    fn mesh_rotation_covers_everyone() {
        let t = Topology::new(TopologyKind::Mesh, 12).unwrap();
        let mut rng = derive(5, Stream::Aggregator, &[]);
        let mut seen = [false; 12];
        let mut prev = None;
        for _ in 0..500 {
            let a = next_aggregator(&t, prev, AggregatorMode::Rotate, &mut rng).unwrap();
            seen[a] = true;
            prev = Some(a);
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn pairs_are_disjoint_and_adjacent() {
        let t = Topology::new(TopologyKind::Mesh, 50).unwrap();
        let mut rng = derive(6, Stream::Pairing, &[]);
        let pairs = select_pairs(&t, 0.5, &mut rng).unwrap();
        assert_eq!(pairs.len(), 25);
        let mut seen = std::collections::HashSet::new();
        for (s, a) in &pairs {
            assert!(seen.insert(*s) && seen.insert(*a));
        }
        let b = Topology::new(TopologyKind::Bridged, 10).unwrap();
        for (s, a) in select_pairs(&b, 0.5, &mut rng).unwrap() {
            assert!(b.are_adjacent(s, a));
        }
    }

    #[test]
    fn aggregator_mode_parsing() {
        assert_eq!("fixed:3".parse::<AggregatorMode>().unwrap(), AggregatorMode::Fixed(3));
        assert_eq!("rotate".parse::<AggregatorMode>().unwrap(), AggregatorMode::Rotate);
        assert!("fixed:x".parse::<AggregatorMode>().is_err());
    }
}
