//! Deployment membership and the trusted configuration service.
//!
//! The service is the append-only registry of configurations, keyed by
//! ballot. It is trusted by construction: the adversary never touches it,
//! and its answers tell a recovering node which prior memberships exist.

use std::collections::BTreeMap;

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("membership must name at least one node")]
    EmptyMembership,
    #[error("node {0} listed twice")]
    DuplicateMember(NodeId),
    #[error("N={n} outside [f+1, 2f+1] for f={f}")]
    BadShape { n: u32, f: u32 },
    #[error("MatchA seen_ballot {seen_ballot} != configuration ballot {conf_ballot}")]
    BallotMismatch { seen_ballot: u64, conf_ballot: u64 },
    #[error("ballot {0} already registered with different membership")]
    MembershipConflict(u64),
}

/// One epoch's membership: `members[0]` is the primary, the rest backups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration {
    pub ballot: u64,
    pub members: Vec<NodeId>,
    pub f: u32,
}

impl Configuration {
    pub fn new(ballot: u64, members: Vec<NodeId>, f: u32) -> Result<Configuration, ConfigError> {
        if members.is_empty() {
            return Err(ConfigError::EmptyMembership);
        }
        let mut seen = std::collections::BTreeSet::new();
        for &m in &members {
            if !seen.insert(m) {
                return Err(ConfigError::DuplicateMember(m));
            }
        }
        let n = members.len() as u32;
        // replication degree bounds: f+1 acks can outlive f failures, more
        // than 2f+1 members would let two ack quorums miss each other
        if n < f + 1 || n > 2 * f + 1 {
            return Err(ConfigError::BadShape { n, f });
        }
        Ok(Configuration { ballot, members, f })
    }

    pub fn n(&self) -> u32 {
        self.members.len() as u32
    }

    pub fn primary(&self) -> NodeId {
        self.members[0]
    }

    pub fn backups(&self) -> &[NodeId] {
        &self.members[1..]
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.members.contains(&node)
    }
}

/// Answer to MatchA: the highest ballot the service has accepted and every
/// configuration ever registered, in ballot order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchB {
    pub ballot_c: u64,
    pub all_conf: Vec<Configuration>,
}

#[derive(Debug, Default)]
pub struct ConfigService {
    all_conf: BTreeMap<u64, Configuration>,
}

impl ConfigService {
    pub fn new() -> ConfigService {
        ConfigService::default()
    }

    /// Register a configuration. Replaying an identical registration is
    /// idempotent; the same ballot with different membership is identity
    /// misuse and is refused without mutating anything.
    pub fn match_a(&mut self, seen_ballot: u64, conf: Configuration) -> Result<MatchB, ConfigError> {
        if conf.ballot != seen_ballot {
            return Err(ConfigError::BallotMismatch {
                seen_ballot,
                conf_ballot: conf.ballot,
            });
        }
        match self.all_conf.get(&conf.ballot) {
            Some(existing) if *existing == conf => {}
            Some(_) => return Err(ConfigError::MembershipConflict(conf.ballot)),
            None => {
                self.all_conf.insert(conf.ballot, conf);
            }
        }
        Ok(MatchB {
            ballot_c: *self.all_conf.keys().next_back().unwrap(),
            all_conf: self.all_conf.values().cloned().collect(),
        })
    }

    pub fn highest_ballot(&self) -> Option<u64> {
        self.all_conf.keys().next_back().copied()
    }

    pub fn all_conf(&self) -> Vec<Configuration> {
        self.all_conf.values().cloned().collect()
    }

    pub fn get(&self, ballot: u64) -> Option<&Configuration> {
        self.all_conf.get(&ballot)
    }

    pub fn len(&self) -> usize {
        self.all_conf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.all_conf.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    #[test]
    fn shape_bounds() {
        assert!(Configuration::new(1, vec![0], 0).is_ok());
        assert!(Configuration::new(1, vec![0, 1], 1).is_ok());
        assert!(Configuration::new(1, vec![0, 1, 2], 1).is_ok());
        assert_eq!(
            Configuration::new(1, vec![0, 1, 2, 3], 1),
            Err(ConfigError::BadShape { n: 4, f: 1 })
        );
        assert_eq!(
            Configuration::new(1, vec![0], 1),
            Err(ConfigError::BadShape { n: 1, f: 1 })
        );
        assert_eq!(
            Configuration::new(1, vec![0, 0], 1),
            Err(ConfigError::DuplicateMember(0))
        );
        assert_eq!(
            Configuration::new(1, vec![], 0),
            Err(ConfigError::EmptyMembership)
        );
    }

    #[test]
    fn first_registration_then_higher_ballot() {
        let mut svc = ConfigService::new();
        let c1 = Configuration::new(1, vec![0, 1, 2], 1).unwrap();
        let b = svc.match_a(1, c1.clone()).unwrap();
        assert_eq!(b.ballot_c, 1);
        assert_eq!(b.all_conf, vec![c1.clone()]);

        let c2 = Configuration::new(5, vec![3, 1, 2], 1).unwrap();
        let b = svc.match_a(5, c2.clone()).unwrap();
        assert_eq!(b.ballot_c, 5);
        assert_eq!(b.all_conf, vec![c1, c2]);
    }

    #[test]
    fn replay_is_idempotent_conflict_is_refused() {
        let mut svc = ConfigService::new();
        let c = Configuration::new(2, vec![0, 1], 1).unwrap();
        svc.match_a(2, c.clone()).unwrap();
        assert!(svc.match_a(2, c.clone()).is_ok());
        assert_eq!(svc.len(), 1);

        let usurper = Configuration::new(2, vec![9, 1], 1).unwrap();
        assert_eq!(
            svc.match_a(2, usurper),
            Err(ConfigError::MembershipConflict(2))
        );
        assert_eq!(svc.all_conf(), vec![c]);
    }

    #[test]
    fn ballot_mismatch_is_refused() {
        let mut svc = ConfigService::new();
        let c = Configuration::new(3, vec![0], 0).unwrap();
        assert_eq!(
            svc.match_a(4, c),
            Err(ConfigError::BallotMismatch {
                seen_ballot: 4,
                conf_ballot: 3
            })
        );
        assert!(svc.is_empty());
    }

    #[test]
    fn racing_registrations_serialize_exactly_one_winner() {
        // same ballot, different membership, many threads: exactly one
        // registration lands and every loser sees MembershipConflict
        let svc = Arc::new(Mutex::new(ConfigService::new()));
        let mut handles = Vec::new();
        for node in 0..8u32 {
            let svc = Arc::clone(&svc);
            handles.push(std::thread::spawn(move || {
                let conf = Configuration::new(7, vec![node], 0).unwrap();
                svc.lock().unwrap().match_a(7, conf).is_ok()
            }));
        }
        let wins: usize = handles
            .into_iter()
            .map(|h| h.join().unwrap() as usize)
            .sum();
        assert_eq!(wins, 1);
        assert_eq!(svc.lock().unwrap().len(), 1);
    }
}
