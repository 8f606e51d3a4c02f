// SPDX-License-Identifier: Apache-2.0

//! Bounded exhaustive exploration.
//!
//! Breadth-first over every interleaving of untrusted actions up to a
//! depth. One monitor invocation is atomic: the monitor holds its lock for
//! the whole handler, so interleaving happens between handler runs, never
//! inside one. States are deduplicated by model fingerprint. Layers expand
//! in parallel and are merged in a fixed order, so results do not depend on
//! the worker count.

use std::collections::{BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::harness::faults::{undeclared_call_id, MMIO_GUEST_PAGE, VICTIM_SECRET};
use crate::harness::{Action, Checker, Role, Script, Snapshot, Step, StepError, Verdict, World, WorldConfig, WorldError};
use crate::hw::IrqId;
use crate::sm::{CallKind, Mutation};
use crate::PAGE_SIZE;

pub const MAX_EXPLORE_HARTS: usize = 2;
pub const MAX_EXPLORE_CVMS: usize = 2;
pub const MAX_EXPLORE_PAGES: u64 = 8;

/// Reply value the hypervisor hands back on every resume.
const REPLY: u64 = 0x600d;
/// Guest page CVMs ask to share.
const SHARE_PAGE: u64 = 8;
const FRONTIER_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExploreConfig {
    pub harts: usize,
    /// VMs available for promotion.
    pub cvms: usize,
    /// Pool pages.
    pub pages: u64,
    pub depth: usize,
    /// Worker threads; `None` uses every core.
    pub workers: Option<usize>,
    /// Distinct states after which exploration gives up.
    pub max_states: usize,
    pub mutations: BTreeSet<Mutation>,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self { harts: 2, cvms: 2, pages: 8, depth: 8, workers: None, max_states: 2_000_000, mutations: BTreeSet::new() }
    }
}

impl ExploreConfig {
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig { harts: self.harts, vms: self.cvms, vm_pages: 1, pool_pages: Some(self.pages), mem_pages: 32, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ExploreError {
    #[error("bounds out of range: {0}")]
    Bounds(String),
    #[error("state space budget exceeded after {visited} states")]
    StateSpaceBudgetExceeded { visited: usize },
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Clone, Debug)]
pub struct ExploreReport {
    pub states: usize,
    pub transitions: usize,
    /// Deepest layer reached: the counterexample length on a violation,
    /// otherwise the depth at which the frontier emptied or the bound.
    pub depth: usize,
    pub verdicts: Vec<Verdict>,
    /// Shortest failing path, replayable as a script.
    pub counterexample: Option<Script>,
}

impl ExploreReport {
    pub fn all_hold(&self) -> bool {
        self.verdicts.iter().all(|v| v.holds)
    }

    pub fn failed_ids(&self) -> Vec<&'static str> {
        self.verdicts.iter().filter(|v| !v.holds).map(|v| v.id).collect()
    }
}

/// Actions untrusted software can take in `world`.
pub fn enabled_actions(world: &World) -> Vec<Action> {
    let calls = world.sm().calls();
    let id_of = |kind: CallKind| calls.entries().find(|e| e.kind == kind).map(|e| e.id);
    let undeclared = undeclared_call_id(world);
    let mut out = Vec::new();
    for hart in 0..world.platform().hart_count() {
        match world.role(hart) {
            Role::Hypervisor => {
                for d in world.sm().domains().values().filter(|d| d.is_runnable()) {
                    if d.id.is_vm() {
                        out.push(Action::Promote { hart, vm: d.id });
                    } else if d.is_cvm() {
                        out.push(Action::Resume { hart, cvm: d.id, reply: REPLY });
                        out.push(Action::Terminate { hart, cvm: d.id });
                        out.push(Action::Attest { hart, cvm: d.id, nonce: 1 });
                    }
                }
                out.push(Action::SmCall { hart, id: undeclared, args: [0; 3] });
                out.push(Action::ProbeAll { hart });
            }
            Role::Cvm(_) => {
                out.push(Action::CvmRegs { hart, value: VICTIM_SECRET });
                out.push(Action::CvmStore { hart, addr: 0, value: VICTIM_SECRET });
                out.push(Action::CvmStore { hart, addr: MMIO_GUEST_PAGE * PAGE_SIZE, value: 1 });
                if let Some(id) = id_of(CallKind::Hypercall) {
                    out.push(Action::CvmCall { hart, id, args: [0x41, 0, 0] });
                }
                if let Some(id) = id_of(CallKind::Share) {
                    out.push(Action::CvmCall { hart, id, args: [SHARE_PAGE, 0, 0] });
                }
                if let Some(id) = id_of(CallKind::Attest) {
                    out.push(Action::CvmCall { hart, id, args: [1, 0, 0] });
                }
                if let Some(id) = id_of(CallKind::Terminate) {
                    out.push(Action::CvmCall { hart, id, args: [0; 3] });
                }
                out.push(Action::CvmCall { hart, id: undeclared, args: [0; 3] });
                out.push(Action::Interrupt { hart, irq: IrqId::TIMER });
            }
            Role::Stuck => {}
        }
    }
    out
}

#[derive(Clone)]
struct Node {
    world: World,
    checker: Checker,
    path: Vec<Action>,
}

/// Applies `action`, feeding the new events and the resulting state to the
/// node's checker. `None` when the action turns out not to be enabled.
fn advance(world: &mut World, checker: &mut Checker, action: &Action) -> Option<()> {
    let result = world.step(action);
    let events = world.drain_trace();
    checker.observe_all(&events);
    match result {
        Ok(_) => {}
        Err(StepError::Monitor(e)) => checker.monitor_failed(&format!("{action}: {e}")),
        Err(StepError::NotEnabled { .. } | StepError::Hw(_)) => return None,
    }
    checker.check_snapshot(&Snapshot::capture(world));
    Some(())
}

fn root(config: &ExploreConfig) -> Result<Node, ExploreError> {
    if !(1..=MAX_EXPLORE_HARTS).contains(&config.harts) {
        return Err(ExploreError::Bounds(format!("harts must be 1..={MAX_EXPLORE_HARTS}")));
    }
    if config.cvms > MAX_EXPLORE_CVMS {
        return Err(ExploreError::Bounds(format!("cvms must be at most {MAX_EXPLORE_CVMS}")));
    }
    if !(1..=MAX_EXPLORE_PAGES).contains(&config.pages) {
        return Err(ExploreError::Bounds(format!("pages must be 1..={MAX_EXPLORE_PAGES}")));
    }
    let mut world = World::new(config.world_config(), &config.mutations)?;
    let mut checker = Checker::new(&world);
    checker.observe_all(&world.drain_trace());
    checker.check_snapshot(&Snapshot::capture(&world));
    Ok(Node { world, checker, path: Vec::new() })
}

fn report_for(config: &ExploreConfig, node: &Node, states: usize, transitions: usize, depth: usize) -> ExploreReport {
    let verdicts = node.checker.verdicts();
    let counterexample = node.checker.any_failed().then(|| Script {
        config: config.world_config(),
        victims: false,
        steps: node.path.iter().cloned().map(Step::Action).collect(),
        mutations: config.mutations.clone(),
        expect: node.checker.failed_ids().into_iter().map(String::from).collect(),
    });
    ExploreReport { states, transitions, depth, verdicts, counterexample }
}

/// Explores every interleaving of [`enabled_actions`] up to `config.depth`
/// steps, deduplicating on [`World::abstract_fingerprint`]. Stops at the
/// first layer containing a violation and reports the first violating path
/// of that layer, which is therefore of minimal length.
pub fn bounded_explore(config: &ExploreConfig) -> Result<ExploreReport, ExploreError> {
    let start = root(config)?;
    if start.checker.any_failed() {
        return Ok(report_for(config, &start, 1, 0, 0));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.unwrap_or(0))
        .build()
        .map_err(|e| ExploreError::Bounds(e.to_string()))?;

    let mut seen: HashSet<u64> = HashSet::new();
    seen.insert(start.world.abstract_fingerprint());
    let mut frontier = vec![start];
    let mut transitions = 0;
    for depth in 1..=config.depth {
        let mut next = Vec::new();
        // Chunks bound the number of undeduplicated successors held at once.
        for chunk in frontier.chunks(FRONTIER_CHUNK) {
            let successors: Vec<(u64, Node)> = pool.install(|| {
                chunk
                    .par_iter()
                    .flat_map_iter(|node| {
                        enabled_actions(&node.world).into_iter().filter_map(move |action| {
                            let mut next = node.clone();
                            advance(&mut next.world, &mut next.checker, &action)?;
                            next.path.push(action);
                            Some((next.world.abstract_fingerprint(), next))
                        })
                    })
                    .collect()
            });
            transitions += successors.len();
            if let Some((_, bad)) = successors.iter().find(|(_, n)| n.checker.any_failed()) {
                return Ok(report_for(config, bad, seen.len(), transitions, depth));
            }
            for (fp, node) in successors {
                if seen.insert(fp) {
                    next.push(node);
                }
            }
            if seen.len() > config.max_states {
                return Err(ExploreError::StateSpaceBudgetExceeded { visited: seen.len() });
            }
        }
        frontier = next;
        if frontier.is_empty() {
            return Ok(clean_report(seen.len(), transitions, depth));
        }
    }
    Ok(clean_report(seen.len(), transitions, config.depth))
}

fn clean_report(states: usize, transitions: usize, depth: usize) -> ExploreReport {
    let verdicts = crate::harness::VERDICT_IDS.iter().map(|id| Verdict::pass(id)).collect();
    ExploreReport { states, transitions, depth, verdicts, counterexample: None }
}

/// One random schedule over the same action alphabet. Returns the verdicts
/// and the path taken, stopping early at the first violation.
pub fn random_schedule(config: &ExploreConfig, steps: usize, seed: u64) -> Result<(Vec<Verdict>, Vec<Action>), ExploreError> {
    let mut node = root(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..steps {
        if node.checker.any_failed() {
            break;
        }
        let actions = enabled_actions(&node.world);
        if actions.is_empty() {
            break;
        }
        let action = actions[rng.gen_range(0..actions.len())].clone();
        if advance(&mut node.world, &mut node.checker, &action).is_some() {
            node.path.push(action);
        }
    }
    Ok((node.checker.verdicts(), node.path))
}
