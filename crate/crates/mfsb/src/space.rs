//! The compositional label space: states crossed with objects, a seen/unseen
//! partition over the pairs, and sample id lists for train/val/test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index into the flattened pair grid, row-major: `state * n_objects + object`.
pub type PairId = usize;

/// Which candidate pairs an evaluation may predict over.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum World {
    /// Every pair in the space.
    Open,
    /// Only pairs that occur as val/test labels.
    Closed,
}

impl World {
    pub fn label(self) -> &'static str {
        match self {
            World::Open => "open",
            World::Closed => "closed",
        }
    }
}

// ── Space ───────────────────────────────────────────────────────────────────

/// All states, all objects, and the full pair grid they span.
#[derive(Clone, Debug)]
pub struct CompositionSpace {
    pub states: Vec<String>,
    pub objects: Vec<String>,
}

/// Deterministically named space: states `s00..`, objects `o00..`.
/// Both axes need at least two entries for composition to mean anything.
pub fn generate_space(n_states: usize, n_objects: usize) -> Result<CompositionSpace> {
    if n_states < 2 || n_objects < 2 {
        return Err(Error::Config(format!(
            "composition space needs at least 2 states and 2 objects, got {n_states} x {n_objects}"
        )));
    }
    let width = |count: usize| ((count - 1).to_string().len()).max(2);
    let (ws, wo) = (width(n_states), width(n_objects));
    Ok(CompositionSpace {
        states: (0..n_states).map(|i| format!("s{i:0ws$}")).collect(),
        objects: (0..n_objects).map(|i| format!("o{i:0wo$}")).collect(),
    })
}

impl CompositionSpace {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.states.len() * self.objects.len()
    }

    pub fn pair(&self, state: usize, object: usize) -> PairId {
        debug_assert!(state < self.n_states() && object < self.n_objects());
        state * self.n_objects() + object
    }

    pub fn state_of(&self, pair: PairId) -> usize {
        pair / self.n_objects()
    }

    pub fn object_of(&self, pair: PairId) -> usize {
        pair % self.n_objects()
    }

    pub fn all_pairs(&self) -> Vec<PairId> {
        (0..self.n_pairs()).collect()
    }
}

// ── Split ───────────────────────────────────────────────────────────────────

/// One labeled sample slot: a stable id plus its pair label.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct SampleRef {
    pub id: usize,
    pub pair: PairId,
}

/// Seen/unseen pair partition plus sample id lists per split.
#[derive(Clone, Debug)]
pub struct Split {
    pub seen: Vec<PairId>,
    pub unseen: Vec<PairId>,
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
}

/// Partition pairs into seen and unseen and lay out sample ids.
///
/// Training samples cover only seen pairs (`train_per_pair` each); val and
/// test cover every pair (`eval_per_pair` each) so both seen and unseen
/// accuracy are measurable. The unseen set is drawn uniformly, rejecting
/// draws that leave any state or object without a seen pair; after 1000
/// failed draws the offending primitive is reported.
pub fn make_split(
    space: &CompositionSpace,
    unseen_fraction: f64,
    train_per_pair: usize,
    eval_per_pair: usize,
    seed: u64,
) -> Result<Split> {
    if !(unseen_fraction > 0.0 && unseen_fraction < 1.0) {
        return Err(Error::Config(format!(
            "unseen_fraction must lie strictly between 0 and 1, got {unseen_fraction}"
        )));
    }
    if train_per_pair == 0 || eval_per_pair == 0 {
        return Err(Error::Config("samples per pair must be at least 1".into()));
    }
    let n_pairs = space.n_pairs();
    let n_unseen = ((unseen_fraction * n_pairs as f64).round() as usize).max(1);
    if n_unseen >= n_pairs {
        return Err(Error::Config(format!(
            "unseen_fraction {unseen_fraction} leaves no seen pairs in a {n_pairs}-pair space"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<PairId> = space.all_pairs();
    let mut last_uncovered = String::new();
    for _ in 0..1000 {
        pairs.shuffle(&mut rng);
        let mut unseen: Vec<PairId> = pairs[..n_unseen].to_vec();
        let mut seen: Vec<PairId> = pairs[n_unseen..].to_vec();
        unseen.sort_unstable();
        seen.sort_unstable();
        match uncovered_primitive(space, &seen) {
            Some(name) => last_uncovered = name,
            None => {
                let mut next_id = 0usize;
                let mut take = |pairs: &[PairId], per: usize| -> Vec<SampleRef> {
                    let mut out = Vec::with_capacity(pairs.len() * per);
                    for &pair in pairs {
                        for _ in 0..per {
                            out.push(SampleRef { id: next_id, pair });
                            next_id += 1;
                        }
                    }
                    out
                };
                let train = take(&seen, train_per_pair);
                let all = space.all_pairs();
                let val = take(&all, eval_per_pair);
                let test = take(&all, eval_per_pair);
                return Ok(Split { seen, unseen, train, val, test });
            }
        }
    }
    Err(Error::Split(format!(
        "no unseen draw of {n_unseen}/{n_pairs} pairs kept every primitive seen after 1000 tries \
         (last uncovered: {last_uncovered})"
    )))
}

fn uncovered_primitive(space: &CompositionSpace, seen: &[PairId]) -> Option<String> {
    let mut state_hit = vec![false; space.n_states()];
    let mut object_hit = vec![false; space.n_objects()];
    for &p in seen {
        state_hit[space.state_of(p)] = true;
        object_hit[space.object_of(p)] = true;
    }
    if let Some(i) = state_hit.iter().position(|h| !h) {
        return Some(space.states[i].clone());
    }
    if let Some(i) = object_hit.iter().position(|h| !h) {
        return Some(space.objects[i].clone());
    }
    None
}

impl Split {
    pub fn is_seen(&self, pair: PairId) -> bool {
        self.seen.binary_search(&pair).is_ok()
    }

    /// Tab-separated manifest: one line per pair per split it occurs in,
    /// `pair_id  state  object  seen|unseen  split`, ordered by split then
    /// pair id. External scorers can reconstruct the whole layout from it.
    pub fn manifest(&self, space: &CompositionSpace) -> String {
        let mut out = String::new();
        for (name, samples) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let mut pairs: Vec<PairId> = samples.iter().map(|s| s.pair).collect();
            pairs.sort_unstable();
            pairs.dedup();
            for pair in pairs {
                let kind = if self.is_seen(pair) { "seen" } else { "unseen" };
                out.push_str(&format!(
                    "{pair}\t{}\t{}\t{kind}\t{name}\n",
                    space.states[space.state_of(pair)],
                    space.objects[space.object_of(pair)],
                ));
            }
        }
        out
    }
}

/// The candidate pairs predictions range over in a given world.
pub fn candidate_set(space: &CompositionSpace, split: &Split, world: World) -> Vec<PairId> {
    match world {
        World::Open => space.all_pairs(),
        World::Closed => {
            let mut pairs: Vec<PairId> =
                split.val.iter().chain(split.test.iter()).map(|s| s.pair).collect();
            pairs.sort_unstable();
            pairs.dedup();
            pairs
        }
    }
}
