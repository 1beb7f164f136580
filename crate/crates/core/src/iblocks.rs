//! i-block decomposition and the block permutation group.
//!
//! For an anchor state `i` equal to the last element of a sequence, the
//! sequence splits as `head? ‖ I_1 ‖ ... ‖ I_D ‖ tail`, where each `I_d`
//! starts with `i` and contains no other `i`, the head holds everything
//! before the first `i`, and the tail starts at the final `i`. Reordering
//! the `I_d` keeps the first state, the last state and every pairwise
//! transition count, so all reorderings have the same probability under
//! any Markov chain.

use rustc_hash::FxHashSet;

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};
use crate::markov::{State, StateSequence};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IBlockDecomposition {
    anchor: State,
    seq: Vec<State>,
    head_len: usize,
    /// (start, len) of each permutable block, in original order.
    blocks: Vec<(usize, usize)>,
    tail_start: usize,
}

impl IBlockDecomposition {
    pub fn anchor(&self) -> State {
        self.anchor
    }

    /// Number of permutable blocks `D`.
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn head(&self) -> Option<&[State]> {
        (self.head_len > 0).then(|| &self.seq[..self.head_len])
    }

    pub fn block(&self, d: usize) -> &[State] {
        let (start, len) = self.blocks[d];
        &self.seq[start..start + len]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[State]> + '_ {
        (0..self.blocks.len()).map(move |d| self.block(d))
    }

    pub fn tail(&self) -> &[State] {
        &self.seq[self.tail_start..]
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    pub fn original(&self) -> &[State] {
        &self.seq
    }

    /// Writes the last `out.len()` states of the sequence reordered by
    /// `order` into `out`, without building the whole sequence.
    pub fn suffix_into(&self, order: &[u32], out: &mut [State]) {
        debug_assert_eq!(order.len(), self.blocks.len());
        let mut remaining = out.len();
        let mut put = |piece: &[State], remaining: &mut usize| {
            let take = piece.len().min(*remaining);
            out[*remaining - take..*remaining].copy_from_slice(&piece[piece.len() - take..]);
            *remaining -= take;
        };
        put(self.tail(), &mut remaining);
        for &d in order.iter().rev() {
            if remaining == 0 {
                return;
            }
            put(self.block(d as usize), &mut remaining);
        }
        if remaining > 0 {
            put(&self.seq[..self.head_len], &mut remaining);
        }
        debug_assert_eq!(remaining, 0, "suffix longer than sequence");
    }

    /// Like [`for_each_permutation`], but visits only the last `out.len()`
    /// states of each permuted sequence. Above `SCREEN_REPEATS_UP_TO` blocks
    /// only the trailing positions of each shuffle are drawn.
    pub fn for_each_permuted_suffix<R: Rng + ?Sized>(
        &self,
        max_n: usize,
        rng: &mut R,
        out: &mut [State],
        mut visit: impl FnMut(&[State]),
    ) -> usize {
        let d = self.blocks.len();
        let small = d <= SCREEN_REPEATS_UP_TO
            || factorial(d).is_some_and(|total| total <= max_n.max(1) as u128);
        if small {
            return for_each_permutation(d, max_n, rng, |order| {
                self.suffix_into(order, out);
                visit(out);
            });
        }
        let need = out.len().saturating_sub(self.tail().len());
        let mut work: Vec<u32> = (0..d as u32).collect();
        let mut draws = IndexDraws::new(d);
        let max_n = max_n.max(1);
        for _ in 0..max_n {
            let (mut covered, mut k) = (0, d);
            while covered < need && k > 0 {
                k -= 1;
                if k > 0 {
                    work.swap(k, draws.index(k, rng));
                }
                covered += self.blocks[work[k] as usize].1;
            }
            self.suffix_into(&work, out);
            visit(out);
        }
        max_n
    }
}

/// A reordering of the `D` permutable blocks (zero-based block indices).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockPermutation {
    order: Vec<u32>,
}

impl BlockPermutation {
    pub fn new(order: Vec<u32>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &k in &order {
            let k = k as usize;
            if k >= order.len() || seen[k] {
                return Err(Error::invalid(format!(
                    "{order:?} is not a permutation of 0..{}",
                    order.len()
                )));
            }
            seen[k] = true;
        }
        Ok(Self { order })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            order: (0..d as u32).collect(),
        }
    }

    pub fn order(&self) -> &[u32] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(k, &v)| k as u32 == v)
    }
}

/// Splits `seq` into i-blocks anchored at `anchor`, which must be the last
/// state of `seq`.
pub fn decompose(seq: &StateSequence, anchor: State) -> Result<IBlockDecomposition> {
    decompose_states(seq.states(), anchor)
}

pub(crate) fn decompose_states(seq: &[State], anchor: State) -> Result<IBlockDecomposition> {
    match seq.last() {
        None => return Err(Error::invalid("cannot decompose an empty sequence")),
        Some(&last) if last != anchor => {
            return Err(Error::invalid(format!(
                "sequence ends in state {}, not the anchor state {}",
                last as usize + 1,
                anchor as usize + 1
            )))
        }
        _ => {}
    }
    let hits: Vec<usize> = seq
        .iter()
        .enumerate()
        .filter_map(|(t, &s)| (s == anchor).then_some(t))
        .collect();
    let blocks = hits.windows(2).map(|w| (w[0], w[1] - w[0])).collect();
    Ok(IBlockDecomposition {
        anchor,
        seq: seq.to_vec(),
        head_len: hits[0],
        blocks,
        tail_start: *hits.last().expect("anchor occurs at the end"),
    })
}

/// `head ‖ I_order[0] ‖ ... ‖ I_order[D-1] ‖ tail`.
pub fn apply_permutation(
    dec: &IBlockDecomposition,
    perm: &BlockPermutation,
) -> Result<StateSequence> {
    if perm.len() != dec.num_blocks() {
        return Err(Error::invalid(format!(
            "permutation has dimension {}, decomposition has {} blocks",
            perm.len(),
            dec.num_blocks()
        )));
    }
    let mut out = Vec::with_capacity(dec.len());
    out.extend_from_slice(&dec.seq[..dec.head_len]);
    for &d in perm.order() {
        out.extend_from_slice(dec.block(d as usize));
    }
    out.extend_from_slice(dec.tail());
    Ok(StateSequence::from_vec_unchecked(out))
}

/// `d!`, or `None` past `u128`.
pub fn factorial(d: usize) -> Option<u128> {
    (1..=d as u128).try_fold(1u128, |acc, k| acc.checked_mul(k))
}

/// Advances `v` to the next lexicographic permutation; false after the last.
fn next_permutation(v: &mut [u32]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Uniform draws from `0..=k` for Fisher-Yates, one sampler per `k`,
/// built on first use.
struct IndexDraws {
    dists: Vec<Option<Uniform<u32>>>,
}

impl IndexDraws {
    fn new(d: usize) -> Self {
        Self {
            dists: vec![None; d],
        }
    }

    fn index<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> usize {
        self.dists[k]
            .get_or_insert_with(|| Uniform::new_inclusive(0, k as u32))
            .sample(rng) as usize
    }
}

/// Five bits per index; injective for `d <= SCREEN_REPEATS_UP_TO`.
fn pack_order(order: &[u32]) -> u128 {
    order.iter().fold(0u128, |acc, &i| (acc << 5) | i as u128)
}

/// Largest block count for which sampled orders are screened for repeats.
/// Beyond it, `max_n` independent uniform draws repeat with probability
/// below `max_n² / (2 · 21!)`.
pub const SCREEN_REPEATS_UP_TO: usize = 20;

/// Calls `visit` on each permutation of the set `Π`: every one of the `d!`
/// orders when `d! <= max_n` (lexicographic), otherwise `max_n` orders drawn
/// uniformly, distinct when `d <= SCREEN_REPEATS_UP_TO`. Returns `|Π|`.
pub fn for_each_permutation<R: Rng + ?Sized>(
    d: usize,
    max_n: usize,
    rng: &mut R,
    mut visit: impl FnMut(&[u32]),
) -> usize {
    let max_n = max_n.max(1);
    let mut work: Vec<u32> = (0..d as u32).collect();
    let mut draws = IndexDraws::new(d);
    match factorial(d) {
        Some(total) if total <= max_n as u128 => {
            let mut n = 0;
            loop {
                visit(&work);
                n += 1;
                if !next_permutation(&mut work) {
                    return n;
                }
            }
        }
        _ if d > SCREEN_REPEATS_UP_TO => {
            for _ in 0..max_n {
                for k in (1..d).rev() {
                    work.swap(k, draws.index(k, rng));
                }
                visit(&work);
            }
            max_n
        }
        _ => {
            let mut seen: FxHashSet<u128> = FxHashSet::default();
            seen.reserve(max_n);
            while seen.len() < max_n {
                for k in (1..d).rev() {
                    work.swap(k, draws.index(k, rng));
                }
                if seen.insert(pack_order(&work)) {
                    visit(&work);
                }
            }
            max_n
        }
    }
}

/// Materializes the permutation set `Π` for a decomposition.
pub fn sample_permutations<R: Rng + ?Sized>(
    dec: &IBlockDecomposition,
    max_n: usize,
    rng: &mut R,
) -> Vec<BlockPermutation> {
    let mut out = Vec::new();
    for_each_permutation(dec.num_blocks(), max_n, rng, |order| {
        out.push(BlockPermutation {
            order: order.to_vec(),
        })
    });
    out
}
