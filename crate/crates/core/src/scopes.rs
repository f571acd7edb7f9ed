//! Hierarchical scopes.
//!
//! Edges point from a broad scope to the narrower scopes it implies
//! (`orders:admin -> write:orders -> read:orders`). Tokens carry the minimized
//! grant; checks expand it back to its downward closure.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::persist::{Backend, StoreError, StoreRecord};

pub type ScopeSet = BTreeSet<String>;

/// Splits a space-separated scope string.
pub fn parse_scopes(s: &str) -> ScopeSet {
    s.split_whitespace().map(str::to_string).collect()
}

/// Space-joined, in sorted order.
pub fn join_scopes(scopes: &ScopeSet) -> String {
    scopes
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, thiserror::Error)]
pub enum ScopeError {
    #[error("scope {0:?} already defined")]
    DuplicateScope(String),
    #[error("implied scope {0:?} is not defined")]
    UnknownImplied(String),
    #[error("adding {0:?} would create a cycle")]
    CycleDetected(String),
    #[error("unknown scope {0:?}")]
    UnknownScope(String),
    #[error("invalid scope name {0:?}")]
    InvalidName(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
}

/// Declarative form used by config files, the admin API and the journal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeEntry {
    pub name: String,
    #[serde(default)]
    pub implies: Vec<String>,
    #[serde(default)]
    pub deprecated: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScopeNode {
    pub name: String,
    pub deprecated: bool,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinimizedGrant {
    pub scopes: ScopeSet,
    /// Requested scopes dropped because they are deprecated.
    pub excluded_deprecated: ScopeSet,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScopeGraph {
    nodes: BTreeMap<String, ScopeNode>,
    implies: BTreeMap<String, BTreeSet<String>>,
}

impl ScopeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph from entries in any order.
    pub fn from_entries(entries: &[ScopeEntry]) -> Result<Self, ScopeError> {
        let mut graph = ScopeGraph::new();
        for e in entries {
            graph.insert_node(&e.name, &e.description)?;
        }
        for e in entries {
            for target in &e.implies {
                graph.add_implication(&e.name, target)?;
            }
            if e.deprecated {
                graph.deprecate_scope(&e.name)?;
            }
        }
        Ok(graph)
    }

    pub fn to_entries(&self) -> Vec<ScopeEntry> {
        self.nodes.values().map(|n| self.entry(&n.name)).collect()
    }

    fn entry(&self, name: &str) -> ScopeEntry {
        let node = &self.nodes[name];
        ScopeEntry {
            name: node.name.clone(),
            implies: self.implies[name].iter().cloned().collect(),
            deprecated: node.deprecated,
            description: node.description.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }

    pub fn node(&self, name: &str) -> Option<&ScopeNode> {
        self.nodes.get(name)
    }

    /// Every defined scope that is not deprecated.
    pub fn permitted(&self) -> ScopeSet {
        self.nodes
            .values()
            .filter(|n| !n.deprecated)
            .map(|n| n.name.clone())
            .collect()
    }

    fn insert_node(&mut self, name: &str, description: &str) -> Result<(), ScopeError> {
        if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(ScopeError::InvalidName(name.to_string()));
        }
        if self.nodes.contains_key(name) {
            return Err(ScopeError::DuplicateScope(name.to_string()));
        }
        self.nodes.insert(
            name.to_string(),
            ScopeNode {
                name: name.to_string(),
                deprecated: false,
                description: description.to_string(),
            },
        );
        self.implies.insert(name.to_string(), BTreeSet::new());
        Ok(())
    }

    /// Adds `name` implying each scope in `implies`.
    pub fn define_scope<'a>(
        &mut self,
        name: &str,
        implies: impl IntoIterator<Item = &'a str>,
    ) -> Result<(), ScopeError> {
        let implies: Vec<&str> = implies.into_iter().collect();
        if implies.contains(&name) {
            return Err(ScopeError::CycleDetected(name.to_string()));
        }
        if let Some(missing) = implies.iter().find(|s| !self.nodes.contains_key(**s)) {
            return Err(ScopeError::UnknownImplied(missing.to_string()));
        }
        self.insert_node(name, "")?;
        for target in implies {
            self.implies
                .get_mut(name)
                .unwrap()
                .insert(target.to_string());
        }
        Ok(())
    }

    /// Adds the edge `from -> to`, refusing anything that closes a cycle.
    pub fn add_implication(&mut self, from: &str, to: &str) -> Result<(), ScopeError> {
        if !self.nodes.contains_key(from) {
            return Err(ScopeError::UnknownScope(from.to_string()));
        }
        if !self.nodes.contains_key(to) {
            return Err(ScopeError::UnknownImplied(to.to_string()));
        }
        if from == to || self.reachable(to).contains(from) {
            return Err(ScopeError::CycleDetected(format!("{from} -> {to}")));
        }
        self.implies.get_mut(from).unwrap().insert(to.to_string());
        Ok(())
    }

    fn reachable(&self, start: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(s) = stack.pop() {
            if seen.insert(s.to_string()) {
                stack.extend(self.implies[s].iter().map(String::as_str));
            }
        }
        seen
    }

    fn check_known(&self, scopes: &ScopeSet) -> Result<(), ScopeError> {
        match scopes.iter().find(|s| !self.nodes.contains_key(*s)) {
            Some(s) => Err(ScopeError::UnknownScope(s.clone())),
            None => Ok(()),
        }
    }

    /// Downward closure of `granted`, including `granted` itself.
    pub fn expand_scopes(&self, granted: &ScopeSet) -> Result<ScopeSet, ScopeError> {
        self.check_known(granted)?;
        let mut out = BTreeSet::new();
        let mut stack: Vec<&str> = granted.iter().map(String::as_str).collect();
        while let Some(s) = stack.pop() {
            if out.insert(s.to_string()) {
                stack.extend(self.implies[s].iter().map(String::as_str));
            }
        }
        Ok(out)
    }

    pub fn is_satisfied(
        &self,
        required: &ScopeSet,
        granted: &ScopeSet,
    ) -> Result<bool, ScopeError> {
        self.check_known(required)?;
        let effective = self.expand_scopes(granted)?;
        Ok(required.is_subset(&effective))
    }

    /// Least-privilege grant: the requested scopes the allowed set covers,
    /// without deprecated scopes and without members implied by another member.
    pub fn minimize_grant(
        &self,
        requested: &ScopeSet,
        allowed: &ScopeSet,
    ) -> Result<MinimizedGrant, ScopeError> {
        self.check_known(requested)?;
        let effective = self.expand_scopes(allowed)?;
        let mut excluded_deprecated = BTreeSet::new();
        let candidates: ScopeSet = requested
            .intersection(&effective)
            .filter(|s| {
                let deprecated = self.nodes[*s].deprecated;
                if deprecated {
                    excluded_deprecated.insert((*s).clone());
                }
                !deprecated
            })
            .cloned()
            .collect();
        let scopes = candidates
            .iter()
            .filter(|x| {
                !candidates
                    .iter()
                    .any(|y| y != *x && self.reachable(y).contains(*x))
            })
            .cloned()
            .collect();
        Ok(MinimizedGrant {
            scopes,
            excluded_deprecated,
        })
    }

    /// Marks a scope deprecated. Tokens already carrying it keep verifying.
    pub fn deprecate_scope(&mut self, name: &str) -> Result<(), ScopeError> {
        let node = self
            .nodes
            .get_mut(name)
            .ok_or_else(|| ScopeError::UnknownScope(name.to_string()))?;
        node.deprecated = true;
        Ok(())
    }

    /// Inserts or updates from a journaled entry.
    fn upsert(&mut self, entry: &ScopeEntry) -> Result<(), ScopeError> {
        if !self.nodes.contains_key(&entry.name) {
            self.insert_node(&entry.name, &entry.description)?;
        }
        for target in &entry.implies {
            if !self.implies[&entry.name].contains(target) {
                self.add_implication(&entry.name, target)?;
            }
        }
        if entry.deprecated {
            self.deprecate_scope(&entry.name)?;
        }
        Ok(())
    }
}

/// Shared, journaled scope graph. Readers get immutable snapshots.
pub struct ScopeRegistry {
    graph: RwLock<Arc<ScopeGraph>>,
    journal: Arc<dyn Backend>,
}

impl ScopeRegistry {
    pub fn new(journal: Arc<dyn Backend>) -> Self {
        Self {
            graph: RwLock::new(Arc::new(ScopeGraph::new())),
            journal,
        }
    }

    pub fn snapshot(&self) -> Arc<ScopeGraph> {
        self.graph.read().unwrap().clone()
    }

    fn mutate<F>(&self, names: &[&str], f: F) -> Result<(), ScopeError>
    where
        F: FnOnce(&mut ScopeGraph) -> Result<(), ScopeError>,
    {
        let mut guard = self.graph.write().unwrap();
        let mut next = (**guard).clone();
        f(&mut next)?;
        for name in names {
            self.journal.append(&StoreRecord::Scope(next.entry(name)))?;
        }
        *guard = Arc::new(next);
        Ok(())
    }

    pub fn define_scope(&self, name: &str, implies: &[&str]) -> Result<(), ScopeError> {
        self.mutate(&[name], |g| g.define_scope(name, implies.iter().copied()))
    }

    pub fn add_implication(&self, from: &str, to: &str) -> Result<(), ScopeError> {
        self.mutate(&[from], |g| g.add_implication(from, to))
    }

    pub fn deprecate_scope(&self, name: &str) -> Result<(), ScopeError> {
        self.mutate(&[name], |g| g.deprecate_scope(name))
    }

    /// Merges declarative entries into the graph. Entries naming existing
    /// scopes add edges and deprecation flags.
    pub fn load(&self, entries: &[ScopeEntry]) -> Result<(), ScopeError> {
        let mut guard = self.graph.write().unwrap();
        let mut next = (**guard).clone();
        for e in entries {
            if !next.contains(&e.name) {
                next.insert_node(&e.name, &e.description)?;
            }
        }
        for e in entries {
            next.upsert(e)?;
        }
        // Journal in dependency order so replay never references a later node.
        for name in topological_order(&next) {
            if entries.iter().any(|e| e.name == name) {
                self.journal
                    .append(&StoreRecord::Scope(next.entry(&name)))?;
            }
        }
        *guard = Arc::new(next);
        Ok(())
    }

    pub(crate) fn restore(&self, entry: &ScopeEntry) -> Result<(), ScopeError> {
        let mut guard = self.graph.write().unwrap();
        let mut next = (**guard).clone();
        next.upsert(entry)?;
        *guard = Arc::new(next);
        Ok(())
    }

    pub(crate) fn snapshot_records(&self) -> Vec<StoreRecord> {
        let graph = self.snapshot();
        topological_order(&graph)
            .into_iter()
            .map(|n| StoreRecord::Scope(graph.entry(&n)))
            .collect()
    }
}

/// Specific scopes before the broad scopes that imply them.
fn topological_order(graph: &ScopeGraph) -> Vec<String> {
    fn visit(g: &ScopeGraph, n: &str, done: &mut BTreeSet<String>, out: &mut Vec<String>) {
        if done.contains(n) {
            return;
        }
        done.insert(n.to_string());
        for m in &g.implies[n] {
            visit(g, m, done, out);
        }
        out.push(n.to_string());
    }
    let mut done = BTreeSet::new();
    let mut out = Vec::new();
    for n in graph.nodes.keys() {
        visit(graph, n, &mut done, &mut out);
    }
    out
}
