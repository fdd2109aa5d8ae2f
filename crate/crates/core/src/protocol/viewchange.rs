//! View-change validation and the deterministic new-view plan.
//!
//! Every replica recomputes the plan from the view-change messages carried in
//! a NewView, so the new leader cannot choose what to re-propose.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::messages::*;
use super::{Mode, ProtocolConfig, ReplicaTally};
use crate::crypto::Digest;
use crate::ids::{ReplicaId, Seq, View};
use crate::tc::{
    usig_verify_ui, KeyRegistry, Phase, TcError, TrustedComponent, UniqueIdentifier, VerifyContext,
};

/// What the leader of `view` must re-propose.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NewViewPlan {
    pub view: View,
    pub stable: Option<CheckpointCert>,
    /// Contiguous from the stable seq + 1; holes are filled with null batches.
    pub reproposals: Vec<(Seq, Batch)>,
}

impl NewViewPlan {
    pub fn stable_seq(&self) -> Seq {
        self.stable.as_ref().map_or(0, |c| c.seq)
    }

    pub fn last_seq(&self) -> Seq {
        self.reproposals
            .last()
            .map_or(self.stable_seq(), |(s, _)| *s)
    }

    pub fn digest_at(&self, seq: Seq) -> Option<Digest> {
        let first = self.stable_seq() + 1;
        if seq < first {
            return None;
        }
        self.reproposals
            .get((seq - first) as usize)
            .map(|(_, b)| b.digest)
    }
}

/// Builds the plan from (already validated) view-change messages.
///
/// Highest stable checkpoint wins. For every seq above it the candidate is
/// the prepare of the highest view; within one view the prepare with the
/// lowest leader timeline value wins, because a correct replica never admits
/// a later conflicting statement.
pub fn plan_new_view(view: View, vcs: &[ViewChange]) -> NewViewPlan {
    let stable = vcs
        .iter()
        .filter_map(|vc| vc.stable.clone())
        .max_by(|a, b| a.seq.cmp(&b.seq).then_with(|| b.state.cmp(&a.state)));
    let low = stable.as_ref().map_or(0, |c| c.seq);
    let mut best: BTreeMap<Seq, &Prepare> = BTreeMap::new();
    for vc in vcs {
        for p in &vc.prepares {
            if p.seq <= low {
                continue;
            }
            let better = match best.get(&p.seq) {
                None => true,
                Some(cur) => {
                    (
                        p.view,
                        std::cmp::Reverse(p.ui.value),
                        std::cmp::Reverse(p.batch.digest),
                    ) > (
                        cur.view,
                        std::cmp::Reverse(cur.ui.value),
                        std::cmp::Reverse(cur.batch.digest),
                    )
                }
            };
            if better {
                best.insert(p.seq, p);
            }
        }
    }
    let last = best.keys().next_back().copied().unwrap_or(low);
    let reproposals = (low + 1..=last)
        .map(|s| {
            (
                s,
                best.get(&s).map_or_else(Batch::null, |p| p.batch.clone()),
            )
        })
        .collect();
    NewViewPlan {
        view,
        stable,
        reproposals,
    }
}

/// Validates certified protocol structures on behalf of one replica.
pub(crate) struct Checker<'a> {
    pub cfg: &'a ProtocolConfig,
    pub registry: &'a KeyRegistry,
    pub tc: &'a mut TrustedComponent,
    pub tally: &'a mut ReplicaTally,
    pub known_new_views: HashSet<Digest>,
}

impl Checker<'_> {
    pub fn ui(&mut self, ui: &UniqueIdentifier, hash: &Digest, sender: ReplicaId) -> bool {
        if ui.tc.replica != sender {
            return false;
        }
        self.tally.ui_verified += 1;
        let mut ctx = VerifyContext::new(self.registry, Some(&mut *self.tc));
        match usig_verify_ui(ui, hash, &mut ctx) {
            Ok(ok) => ok,
            Err(TcError::StaleEpoch) => {
                self.tally.stale_epoch_rejections += 1;
                false
            }
            Err(_) => false,
        }
    }

    pub fn checkpoint_cert(&mut self, cert: &CheckpointCert) -> bool {
        let mut voters = BTreeSet::new();
        for v in &cert.votes {
            if v.seq != cert.seq || v.state != cert.state || !self.ui(&v.ui, &v.hash(), v.replica) {
                return false;
            }
            voters.insert(v.replica);
        }
        voters.len() >= self.cfg.quorum()
    }

    /// A prepare is usable in a view change if its leader certified it and,
    /// for views above 0, it is consistent with a valid new-view message of
    /// that leader.
    fn prepare(&mut self, p: &Prepare, bound: View, new_views: &[NewView]) -> bool {
        if p.view >= bound || !p.batch.well_formed() {
            return false;
        }
        let leader = self.cfg.leader(p.view);
        if !self.ui(&p.ui, &p.hash(), leader) {
            return false;
        }
        if p.view == 0 {
            return true;
        }
        let Some(nv) = new_views
            .iter()
            .find(|nv| nv.view == p.view && nv.sender == leader)
        else {
            return false;
        };
        if self.cfg.mode == Mode::Detection
            && (nv.ui.counter != p.ui.counter || nv.ui.value >= p.ui.value)
        {
            return false;
        }
        let Some(plan) = self.new_view(nv) else {
            return false;
        };
        if p.seq <= plan.stable_seq() {
            return false;
        }
        plan.digest_at(p.seq).is_none_or(|d| d == p.batch.digest)
    }

    pub fn view_change(&mut self, vc: &ViewChange) -> bool {
        if !self.ui(&vc.ui, &vc.hash(), vc.sender) {
            return false;
        }
        let stable = vc.stable_seq();
        if let Some(cert) = &vc.stable {
            if !self.checkpoint_cert(cert) {
                return false;
            }
        }
        let mut base_value = 0;
        if let Some(b) = &vc.base {
            if b.replica != vc.sender || b.seq > stable || !self.ui(&b.ui, &b.hash(), vc.sender) {
                return false;
            }
            base_value = b.ui.value;
        }
        let mut values = BTreeSet::new();
        let mut slots = BTreeSet::new();
        for entry in &vc.log {
            if !self.ui(entry.ui(), &entry.expected_hash(vc.sender), vc.sender) {
                return false;
            }
            if let Some((view, seq, digest)) = entry.slot() {
                if view >= vc.new_view {
                    return false;
                }
                if seq > stable {
                    slots.insert((view, seq, digest));
                }
            }
            if self.cfg.mode == Mode::Detection && entry.ui().counter == vc.ui.counter {
                values.insert(entry.ui().value);
            }
        }
        match self.cfg.mode {
            Mode::Detection => {
                if vc
                    .base
                    .as_ref()
                    .is_some_and(|b| b.ui.counter != vc.ui.counter)
                {
                    return false;
                }
                // the log must account for every value the sender used since its base
                if (base_value + 1..vc.ui.value).any(|v| !values.contains(&v)) {
                    return false;
                }
            }
            Mode::Prevention => {
                // the latest certified prepare/commit contexts must be in the log
                for m in &vc.ui.marks {
                    if (m.phase == Phase::Commit || m.phase == Phase::Prepare)
                        && m.seq > stable
                        && !slots.iter().any(|&(v, s, _)| v == m.view && s == m.seq)
                    {
                        return false;
                    }
                }
            }
        }
        let mut backed = BTreeSet::new();
        for p in &vc.prepares {
            if p.seq <= stable || !self.prepare(p, vc.new_view, &vc.new_views) {
                return false;
            }
            backed.insert((p.view, p.seq, p.batch.digest));
        }
        slots.is_subset(&backed)
    }

    /// Validates a new-view message and returns its plan.
    pub fn new_view(&mut self, nv: &NewView) -> Option<NewViewPlan> {
        if nv.sender != self.cfg.leader(nv.view) {
            return None;
        }
        let h = nv.hash();
        if !self.known_new_views.contains(&h) {
            if !self.ui(&nv.ui, &h, nv.sender) {
                return None;
            }
            let senders: BTreeSet<_> = nv.vcs.iter().map(|vc| vc.sender).collect();
            if senders.len() != nv.vcs.len() || senders.len() < self.cfg.quorum() {
                return None;
            }
            for vc in &nv.vcs {
                if vc.new_view != nv.view || !self.view_change(vc) {
                    return None;
                }
            }
            self.known_new_views.insert(h);
        }
        Some(plan_new_view(nv.view, &nv.vcs))
    }
}
