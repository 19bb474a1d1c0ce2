use std::collections::{BTreeSet, HashMap, HashSet};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use super::{
    apply_action, build_trace, canonical_fingerprint, enumerate_actions, Action, Fingerprint, SearchConfig,
    SearchError, SearchResult, Strategy,
};
use crate::scenario::{build_setup, Scenario, SetupMode};
use crate::terms::{KnowledgeBase, Term};
use crate::token::{KeyId, TokenState};

/// Parents expanded per parallel batch. Results are merged in order after
/// each batch, which is what keeps the outcome independent of scheduling.
const BATCH: usize = 2048;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SearchStats {
    /// Newly discovered canonical states at each depth, starting with the root.
    pub layer_sizes: Vec<u64>,
    pub transitions: u64,
    pub canonical_states: u64,
    pub elapsed: Duration,
}

/// Runs the search from the scenario's scripted setup. Setup steps the policy
/// rejects are skipped, so a policy-on run explores the configuration the
/// device would actually end up in.
pub fn explore(scn: &Scenario, cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    let setup = build_setup(scn, SetupMode::Lenient)?;
    explore_from(&setup.state, &setup.knowledge, cfg).map(|(r, _)| r)
}

pub fn explore_from(
    root: &TokenState,
    kb: &KnowledgeBase,
    cfg: &SearchConfig,
) -> Result<(SearchResult, SearchStats), SearchError> {
    let started = Instant::now();
    let goals = goal_values(root, cfg);
    let mut kb = kb.clone();
    kb.close_in_place();
    let (result, mut stats) = match cfg.strategy {
        Strategy::Bfs => Bfs::new(root, &kb, cfg, &goals, true).run()?,
        Strategy::Iddfs => Iddfs::new(root, &kb, cfg, &goals).run()?,
    };
    stats.elapsed = started.elapsed();
    Ok((result, stats))
}

/// Every canonical state reachable within the configured depth.
pub fn reachable_fingerprints(
    root: &TokenState,
    kb: &KnowledgeBase,
    cfg: &SearchConfig,
) -> Result<BTreeSet<Fingerprint>, SearchError> {
    let mut kb = kb.clone();
    kb.close_in_place();
    let mut bfs = Bfs::new(root, &kb, cfg, &[], false);
    bfs.run()?;
    Ok(bfs.visited.into_iter().collect())
}

fn goal_values(root: &TokenState, cfg: &SearchConfig) -> Vec<(KeyId, Term)> {
    cfg.goal_keys
        .iter()
        .filter_map(|id| root.key(id).map(|k| (id.clone(), k.value.clone())))
        .collect()
}

fn leaked<'a>(kb: &KnowledgeBase, goals: &'a [(KeyId, Term)]) -> Option<&'a KeyId> {
    goals.iter().find(|(_, v)| kb.derives(v)).map(|(id, _)| id)
}

struct Child {
    action: Action,
    fingerprint: Fingerprint,
    leaked: Option<KeyId>,
    /// Kept only when the child may be expanded further.
    state: Option<(TokenState, KnowledgeBase)>,
}

fn expand(
    st: &TokenState,
    kb: &KnowledgeBase,
    cfg: &SearchConfig,
    goals: &[(KeyId, Term)],
    keep: bool,
) -> Result<Vec<Child>, SearchError> {
    enumerate_actions(st, kb, cfg)
        .into_iter()
        .map(|action| {
            let (st2, kb2, _) = apply_action(st, kb, &action)?;
            Ok(Child {
                fingerprint: canonical_fingerprint(&st2, &kb2),
                leaked: leaked(&kb2, goals).cloned(),
                state: keep.then_some((st2, kb2)),
                action,
            })
        })
        .collect()
}

struct Bfs<'a> {
    root: &'a TokenState,
    kb: &'a KnowledgeBase,
    cfg: &'a SearchConfig,
    goals: &'a [(KeyId, Term)],
    stop_on_leak: bool,
    visited: HashSet<Fingerprint>,
    /// Parent index and incoming action of every expanded state; entry 0 is the root.
    arena: Vec<(usize, Option<Action>)>,
}

impl<'a> Bfs<'a> {
    fn new(
        root: &'a TokenState,
        kb: &'a KnowledgeBase,
        cfg: &'a SearchConfig,
        goals: &'a [(KeyId, Term)],
        stop_on_leak: bool,
    ) -> Self {
        Bfs {
            root,
            kb,
            cfg,
            goals,
            stop_on_leak,
            visited: HashSet::new(),
            arena: vec![(usize::MAX, None)],
        }
    }

    fn path_to(&self, mut node: usize) -> Vec<Action> {
        let mut path = Vec::new();
        while let (parent, Some(action)) = &self.arena[node] {
            path.push(action.clone());
            node = *parent;
        }
        path.reverse();
        path
    }

    fn attack(&self, actions: &[Action], key: KeyId) -> Result<SearchResult, SearchError> {
        Ok(SearchResult::Attack {
            trace: build_trace(self.root, self.kb, actions)?,
            leaked_key: key,
        })
    }

    fn run(&mut self) -> Result<(SearchResult, SearchStats), SearchError> {
        let mut stats = SearchStats::default();
        self.visited.insert(canonical_fingerprint(self.root, self.kb));
        stats.layer_sizes.push(1);
        if self.stop_on_leak {
            if let Some(key) = leaked(self.kb, self.goals) {
                return Ok((self.attack(&[], key.clone())?, stats));
            }
        }
        let pool = (self.cfg.workers > 1)
            .then(|| rayon::ThreadPoolBuilder::new().num_threads(self.cfg.workers).build())
            .transpose()
            .expect("worker pool");

        let mut frontier: Vec<(usize, TokenState, KnowledgeBase)> = vec![(0, self.root.clone(), self.kb.clone())];
        for depth in 1..=self.cfg.max_depth {
            let keep = depth < self.cfg.max_depth;
            let mut next = Vec::new();
            let mut fresh = 0u64;
            for batch in frontier.chunks(BATCH) {
                let (cfg, goals) = (self.cfg, self.goals);
                let work = |(_, st, kb): &(usize, TokenState, KnowledgeBase)| expand(st, kb, cfg, goals, keep);
                let expanded: Vec<Result<Vec<Child>, SearchError>> = match &pool {
                    Some(pool) => pool.install(|| batch.par_iter().map(work).collect()),
                    None => batch.iter().map(work).collect(),
                };
                for ((parent, _, _), children) in batch.iter().zip(expanded) {
                    for child in children? {
                        stats.transitions += 1;
                        if self.stop_on_leak {
                            if let Some(key) = child.leaked {
                                let mut actions = self.path_to(*parent);
                                actions.push(child.action);
                                stats.canonical_states = self.visited.len() as u64;
                                return Ok((self.attack(&actions, key)?, stats));
                            }
                        }
                        if !self.visited.insert(child.fingerprint) {
                            continue;
                        }
                        fresh += 1;
                        if self.visited.len() > self.cfg.state_cap {
                            return Err(SearchError::BudgetExceeded {
                                cap: self.cfg.state_cap,
                                depth,
                            });
                        }
                        if let Some((st, kb)) = child.state {
                            self.arena.push((*parent, Some(child.action)));
                            next.push((self.arena.len() - 1, st, kb));
                        }
                    }
                }
            }
            stats.layer_sizes.push(fresh);
            frontier = next;
        }
        stats.canonical_states = self.visited.len() as u64;
        let result = SearchResult::Exhausted {
            depth: self.cfg.max_depth,
            states_explored: stats.transitions + 1,
            canonical_states: stats.canonical_states,
        };
        Ok((result, stats))
    }
}

/// Iterative deepening with a table of minimal depths. Iteration `L` only
/// follows each state along the first path reaching it at its minimal depth,
/// the same representative breadth-first search keeps, so both strategies
/// return the same trace.
struct Iddfs<'a> {
    root: &'a TokenState,
    kb: &'a KnowledgeBase,
    cfg: &'a SearchConfig,
    goals: &'a [(KeyId, Term)],
    min_depth: HashMap<Fingerprint, usize>,
    seen: HashSet<Fingerprint>,
    path: Vec<Action>,
    transitions: u64,
    layer_sizes: Vec<u64>,
}

enum Dfs {
    Leak(KeyId),
    Done,
}

impl<'a> Iddfs<'a> {
    fn new(root: &'a TokenState, kb: &'a KnowledgeBase, cfg: &'a SearchConfig, goals: &'a [(KeyId, Term)]) -> Self {
        Iddfs {
            root,
            kb,
            cfg,
            goals,
            min_depth: HashMap::new(),
            seen: HashSet::new(),
            path: Vec::new(),
            transitions: 0,
            layer_sizes: vec![1],
        }
    }

    fn run(&mut self) -> Result<(SearchResult, SearchStats), SearchError> {
        self.min_depth.insert(canonical_fingerprint(self.root, self.kb), 0);
        let stats = |s: &Self| SearchStats {
            layer_sizes: s.layer_sizes.clone(),
            transitions: s.transitions,
            canonical_states: s.min_depth.len() as u64,
            elapsed: Duration::ZERO,
        };
        if let Some(key) = leaked(self.kb, self.goals) {
            let trace = build_trace(self.root, self.kb, &[])?;
            let result = SearchResult::Attack {
                trace,
                leaked_key: key.clone(),
            };
            return Ok((result, stats(self)));
        }
        for limit in 1..=self.cfg.max_depth {
            self.seen.clear();
            self.transitions = 0;
            let before = self.min_depth.len();
            let (root, kb) = (self.root, self.kb);
            if let Dfs::Leak(key) = self.dfs(root, kb, 0, limit)? {
                let trace = build_trace(self.root, self.kb, &self.path)?;
                return Ok((SearchResult::Attack { trace, leaked_key: key }, stats(self)));
            }
            self.layer_sizes.push((self.min_depth.len() - before) as u64);
        }
        let result = SearchResult::Exhausted {
            depth: self.cfg.max_depth,
            states_explored: self.transitions + 1,
            canonical_states: self.min_depth.len() as u64,
        };
        Ok((result, stats(self)))
    }

    fn dfs(&mut self, st: &TokenState, kb: &KnowledgeBase, depth: usize, limit: usize) -> Result<Dfs, SearchError> {
        for action in enumerate_actions(st, kb, self.cfg) {
            let (st2, kb2, _) = apply_action(st, kb, &action)?;
            self.transitions += 1;
            if let Some(key) = leaked(&kb2, self.goals) {
                self.path.push(action);
                return Ok(Dfs::Leak(key.clone()));
            }
            let fp = canonical_fingerprint(&st2, &kb2);
            let child_depth = depth + 1;
            if child_depth == limit {
                self.min_depth.entry(fp).or_insert(child_depth);
                if self.min_depth.len() > self.cfg.state_cap {
                    return Err(SearchError::BudgetExceeded {
                        cap: self.cfg.state_cap,
                        depth: child_depth,
                    });
                }
            } else if self.min_depth.get(&fp) == Some(&child_depth) && self.seen.insert(fp) {
                self.path.push(action);
                if let Dfs::Leak(key) = self.dfs(&st2, &kb2, child_depth, limit)? {
                    return Ok(Dfs::Leak(key));
                }
                self.path.pop();
            }
        }
        Ok(Dfs::Done)
    }
}
