//! Byte-pair encoding over base REMI ids.
//!
//! Merged ids are numbered after the base table in merge order, so the rank
//! of a merge is `id - base_len`. Training counts overlapping occurrences and
//! applies each merge left to right; ties go to the smallest `(left, right)`.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BaseToken, BaseVocab, TokenConfig, TokenizerError};

const FORMAT_VERSION: u32 = 1;
const NIL: usize = usize::MAX;

/// A base vocabulary plus an ordered merge list.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    base: BaseVocab,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    expansions: Vec<Vec<u32>>,
    mergeable: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    config: TokenConfig,
    base_tokens: Vec<String>,
    merges: Vec<(u32, u32)>,
}

impl Vocabulary {
    /// Vocabulary with no merges.
    pub fn new(base: BaseVocab) -> Self {
        let expansions = (0..base.len() as u32).map(|i| vec![i]).collect();
        let mergeable = base.tokens().iter().map(|t| t.is_mergeable()).collect();
        Self {
            base,
            merges: Vec::new(),
            ranks: HashMap::new(),
            expansions,
            mergeable,
        }
    }

    pub fn with_merges(base: BaseVocab, merges: &[(u32, u32)]) -> Result<Self, TokenizerError> {
        let mut v = Self::new(base);
        for &(a, b) in merges {
            v.push_merge(a, b)?;
        }
        Ok(v)
    }

    fn push_merge(&mut self, a: u32, b: u32) -> Result<u32, TokenizerError> {
        let n = self.len() as u32;
        if a >= n || b >= n {
            return Err(TokenizerError::Format(format!("merge ({a}, {b}) references unknown id")));
        }
        if !self.mergeable[a as usize] || !self.mergeable[b as usize] {
            return Err(TokenizerError::Format(format!("merge ({a}, {b}) touches a structural or control id")));
        }
        if self.ranks.contains_key(&(a, b)) {
            return Err(TokenizerError::Format(format!("duplicate merge ({a}, {b})")));
        }
        let mut exp = self.expansions[a as usize].clone();
        exp.extend_from_slice(&self.expansions[b as usize]);
        self.ranks.insert((a, b), self.merges.len() as u32);
        self.merges.push((a, b));
        self.expansions.push(exp);
        self.mergeable.push(true);
        Ok(n)
    }

    pub fn base(&self) -> &BaseVocab {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Base ids an id stands for.
    pub fn expand(&self, id: u32) -> Result<&[u32], TokenizerError> {
        self.expansions
            .get(id as usize)
            .map(|v| v.as_slice())
            .ok_or(TokenizerError::IdOutOfRange { id, size: self.len() })
    }

    /// The base token behind a base id, or `None` for merged ids.
    pub fn base_token(&self, id: u32) -> Option<BaseToken> {
        if (id as usize) < self.base.len() {
            self.base.token(id)
        } else {
            None
        }
    }

    /// Id of a structural or control token; these are identical in base and
    /// BPE space.
    pub fn must(&self, token: BaseToken) -> u32 {
        self.base.must(token)
    }

    pub fn is_mergeable(&self, id: u32) -> bool {
        self.mergeable.get(id as usize).copied().unwrap_or(false)
    }

    fn check(&self, ids: &[u32]) -> Result<(), TokenizerError> {
        let size = self.len();
        match ids.iter().find(|&&id| id as usize >= size) {
            Some(&id) => Err(TokenizerError::IdOutOfRange { id, size }),
            None => Ok(()),
        }
    }

    /// Applies all merges to a sequence of base ids (or partially merged ids).
    pub fn apply(&self, ids: &[u32]) -> Result<Vec<u32>, TokenizerError> {
        self.check(ids)?;
        if self.merges.is_empty() || ids.len() < 2 {
            return Ok(ids.to_vec());
        }
        let n = ids.len();
        let mut sym = ids.to_vec();
        let mut prev: Vec<usize> = (0..n).map(|i| if i == 0 { NIL } else { i - 1 }).collect();
        let mut next: Vec<usize> = (0..n).map(|i| if i + 1 == n { NIL } else { i + 1 }).collect();
        let mut alive = vec![true; n];
        let mut heap: BinaryHeap<Reverse<(u32, usize)>> = BinaryHeap::new();
        for i in 0..n - 1 {
            if let Some(&r) = self.ranks.get(&(sym[i], sym[i + 1])) {
                heap.push(Reverse((r, i)));
            }
        }
        while let Some(Reverse((rank, i))) = heap.pop() {
            if !alive[i] || next[i] == NIL {
                continue;
            }
            let j = next[i];
            let (a, b) = self.merges[rank as usize];
            if sym[i] != a || sym[j] != b {
                continue;
            }
            let m = self.base.len() as u32 + rank;
            sym[i] = m;
            alive[j] = false;
            next[i] = next[j];
            if next[j] != NIL {
                prev[next[j]] = i;
            }
            if prev[i] != NIL {
                if let Some(&r) = self.ranks.get(&(sym[prev[i]], m)) {
                    heap.push(Reverse((r, prev[i])));
                }
            }
            if next[i] != NIL {
                if let Some(&r) = self.ranks.get(&(m, sym[next[i]])) {
                    heap.push(Reverse((r, i)));
                }
            }
        }
        let mut out = Vec::with_capacity(n);
        let mut i = 0;
        while i != NIL {
            out.push(sym[i]);
            i = next[i];
        }
        Ok(out)
    }

    /// Expands every id back to base ids.
    pub fn invert(&self, ids: &[u32]) -> Result<Vec<u32>, TokenizerError> {
        self.check(ids)?;
        let mut out = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            out.extend_from_slice(&self.expansions[id as usize]);
        }
        Ok(out)
    }

    /// Human-readable name, merged ids joined with `+`.
    pub fn token_name(&self, id: u32) -> Result<String, TokenizerError> {
        let parts: Vec<String> = self
            .expand(id)?
            .iter()
            .map(|&b| self.base.token(b).map(|t| t.to_string()).unwrap_or_default())
            .collect();
        Ok(parts.join("+"))
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: FORMAT_VERSION,
            config: self.base.config().clone(),
            base_tokens: self.base.tokens().iter().map(|t| t.to_string()).collect(),
            merges: self.merges.clone(),
        };
        serde_json::to_string(&file).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(text).map_err(|e| TokenizerError::Format(e.to_string()))?;
        if file.version != FORMAT_VERSION {
            return Err(TokenizerError::Format(format!("unsupported version {}", file.version)));
        }
        let base = BaseVocab::new(file.config);
        let names: Vec<String> = base.tokens().iter().map(|t| t.to_string()).collect();
        if names != file.base_tokens {
            return Err(TokenizerError::Format("base token table does not match its config".into()));
        }
        Self::with_merges(base, &file.merges)
    }

    /// First 8 bytes (little endian) of the SHA-256 of the JSON form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_json().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeReport {
    pub target_size: usize,
    pub size: usize,
    /// Training ran out of pairs occurring at least twice before reaching
    /// the target.
    pub exhausted: bool,
}

/// Greedy BPE training. Pairs that occur fewer than twice are never merged.
pub fn train_bpe(
    corpus: &[Vec<u32>],
    base: BaseVocab,
    target_size: usize,
) -> Result<(Vocabulary, BpeReport), TokenizerError> {
    let mut vocab = Vocabulary::new(base);
    if target_size <= vocab.len() {
        return Err(TokenizerError::Unsupported(format!(
            "target size {target_size} must exceed the base size {}",
            vocab.len()
        )));
    }
    for seq in corpus {
        vocab.check(seq)?;
    }

    // Flat linked lists over all sequences; sequence ends are NIL links.
    let total: usize = corpus.iter().map(|s| s.len()).sum();
    let mut sym = Vec::with_capacity(total);
    let mut prev = Vec::with_capacity(total);
    let mut next = Vec::with_capacity(total);
    for seq in corpus {
        let start = sym.len();
        for (k, &id) in seq.iter().enumerate() {
            sym.push(id);
            prev.push(if k == 0 { NIL } else { start + k - 1 });
            next.push(if k + 1 == seq.len() { NIL } else { start + k + 1 });
        }
    }
    let mut alive = vec![true; total];

    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for i in 0..total {
        let j = next[i];
        if j != NIL && vocab.is_mergeable(sym[i]) && vocab.is_mergeable(sym[j]) {
            let p = (sym[i], sym[j]);
            *counts.entry(p).or_insert(0) += 1;
            where_.entry(p).or_default().push(i);
        }
    }
    let mut heap: BinaryHeap<(i64, Reverse<(u32, u32)>)> =
        counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();

    let mut exhausted = false;
    while vocab.len() < target_size {
        let Some((c, Reverse(pair))) = heap.pop() else {
            exhausted = true;
            break;
        };
        if counts.get(&pair).copied().unwrap_or(0) != c {
            continue;
        }
        if c < 2 {
            exhausted = true;
            break;
        }
        let m = vocab.push_merge(pair.0, pair.1)?;
        let mut positions = where_.remove(&pair).unwrap_or_default();
        positions.sort_unstable();
        positions.dedup();
        let mut touched: Vec<(u32, u32)> = Vec::new();
        let bump = |counts: &mut HashMap<(u32, u32), i64>, p: (u32, u32), d: i64, touched: &mut Vec<(u32, u32)>| {
            *counts.entry(p).or_insert(0) += d;
            touched.push(p);
        };
        for i in positions {
            if !alive[i] || sym[i] != pair.0 {
                continue;
            }
            let j = next[i];
            if j == NIL || sym[j] != pair.1 {
                continue;
            }
            let x = prev[i];
            let y = next[j];
            if x != NIL && vocab.is_mergeable(sym[x]) {
                bump(&mut counts, (sym[x], sym[i]), -1, &mut touched);
            }
            bump(&mut counts, pair, -1, &mut touched);
            if y != NIL && vocab.is_mergeable(sym[y]) {
                bump(&mut counts, (sym[j], sym[y]), -1, &mut touched);
            }
            sym[i] = m;
            alive[j] = false;
            next[i] = y;
            if y != NIL {
                prev[y] = i;
            }
            if x != NIL && vocab.is_mergeable(sym[x]) {
                bump(&mut counts, (sym[x], m), 1, &mut touched);
                where_.entry((sym[x], m)).or_default().push(x);
            }
            if y != NIL && vocab.is_mergeable(sym[y]) {
                bump(&mut counts, (m, sym[y]), 1, &mut touched);
                where_.entry((m, sym[y])).or_default().push(i);
            }
        }
        touched.sort_unstable();
        touched.dedup();
        for p in touched {
            let c = counts[&p];
            if c <= 0 {
                counts.remove(&p);
                where_.remove(&p);
            } else {
                heap.push((c, Reverse(p)));
            }
        }
    }
    let report = BpeReport {
        target_size,
        size: vocab.len(),
        exhausted,
    };
    Ok((vocab, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> BaseVocab {
        BaseVocab::new(TokenConfig::default())
    }

    fn pitch(v: &BaseVocab, p: u8) -> u32 {
        v.must(BaseToken::Pitch(p))
    }

    #[test]
    fn repeated_pair_gives_single_merge() {
        let b = base();
        let (x, y) = (pitch(&b, 60), pitch(&b, 62));
        let corpus = vec![[x, y].repeat(100)];
        let target = b.len() + 1;
        let (v, report) = train_bpe(&corpus, b, target).unwrap();
        assert_eq!(v.merges(), &[(x, y)]);
        assert!(!report.exhausted);
    }

    #[test]
    fn ties_pick_smallest_pair() {
        let b = base();
        let (p, q, r, s) = (pitch(&b, 70), pitch(&b, 71), pitch(&b, 40), pitch(&b, 41));
        let corpus = vec![vec![p, q, p, q], vec![r, s, r, s]];
        let target = b.len() + 1;
        let (v, _) = train_bpe(&corpus, b, target).unwrap();
        assert_eq!(v.merges(), &[(r, s)]);
    }

    #[test]
    fn apply_and_invert() {
        let b = base();
        let (x, y) = (pitch(&b, 60), pitch(&b, 62));
        let v = Vocabulary::with_merges(b.clone(), &[(x, y)]).unwrap();
        let m = b.len() as u32;
        assert_eq!(v.apply(&[x, y, x, y]).unwrap(), vec![m, m]);
        assert_eq!(v.invert(&[m, m]).unwrap(), vec![x, y, x, y]);
        let plain = vec![x, x, y];
        assert_eq!(v.apply(&[y, y]).unwrap(), vec![y, y]);
        assert_eq!(v.invert(&v.apply(&plain).unwrap()).unwrap(), plain);
    }

    #[test]
    fn structural_ids_never_merge() {
        let b = base();
        let bar = b.must(BaseToken::BarNone);
        let x = pitch(&b, 60);
        let corpus = vec![[bar, x].repeat(50)];
        let target = b.len() + 10;
        let (v, report) = train_bpe(&corpus, b, target).unwrap();
        assert!(v.merges().is_empty());
        assert!(report.exhausted);
        assert!(Vocabulary::with_merges(v.base().clone(), &[(bar, x)]).is_err());
    }

    #[test]
    fn json_round_trip_and_hash() {
        let b = base();
        let (x, y) = (pitch(&b, 60), pitch(&b, 62));
        let v = Vocabulary::with_merges(b, &[(x, y), (x, 601)]).unwrap();
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back.merges(), v.merges());
        assert_eq!(back.hash(), v.hash());
        assert_ne!(Vocabulary::new(base()).hash(), v.hash());
        assert!(Vocabulary::from_json("{}").is_err());
    }

    #[test]
    fn out_of_range_ids_are_errors() {
        let v = Vocabulary::new(base());
        assert!(matches!(v.apply(&[9999]), Err(TokenizerError::IdOutOfRange { .. })));
        assert!(v.invert(&[601]).is_err());
    }
}
