//! Byte-level BPE tokenizer with the special tokens both model families use.
//!
//! Every byte value has a base token, so encoding is total over arbitrary
//! unicode. Token strings are serialized with the byte-to-unicode mapping
//! familiar from byte-level BPE vocabularies, keeping the vocab file valid
//! UTF-8 with no whitespace inside tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Literal strings the special tokens decode to.
pub const SPECIAL_TOKENS: [&str; 7] = ["<mask>", "<pad>", "<s>", "</s>", "<img>", "<img_nl>", "</img>"];

const N_BYTES: u32 = 256;
pub const N_SPECIALS: u32 = SPECIAL_TOKENS.len() as u32;

/// Token id type.
pub type TokenId = u32;

/// A trained vocabulary: 256 byte tokens, the special tokens, then merge
/// products, in that id order. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    /// Byte content of each non-special token; specials map to their literal
    /// strings at decode time instead.
    token_bytes: Vec<Vec<u8>>,
    /// Merge rules in training order, as (left id, right id) -> new id.
    merges: Vec<(TokenId, TokenId)>,
    merge_lookup: HashMap<(TokenId, TokenId), TokenId>,
}

impl Vocab {
    pub fn mask_id(&self) -> TokenId {
        N_BYTES
    }
    pub fn pad_id(&self) -> TokenId {
        N_BYTES + 1
    }
    pub fn bos_id(&self) -> TokenId {
        N_BYTES + 2
    }
    pub fn eos_id(&self) -> TokenId {
        N_BYTES + 3
    }
    pub fn img_begin_id(&self) -> TokenId {
        N_BYTES + 4
    }
    pub fn img_nl_id(&self) -> TokenId {
        N_BYTES + 5
    }
    pub fn img_end_id(&self) -> TokenId {
        N_BYTES + 6
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (N_BYTES..N_BYTES + N_SPECIALS).contains(&id)
    }

    pub fn size(&self) -> usize {
        self.token_bytes.len() + N_SPECIALS as usize
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    /// The token's serialized string form.
    pub fn token_string(&self, id: TokenId) -> Result<String> {
        if self.is_special(id) {
            return Ok(SPECIAL_TOKENS[(id - N_BYTES) as usize].to_string());
        }
        let bytes = self.bytes_of(id)?;
        Ok(bytes_to_unicode(bytes))
    }

    fn bytes_of(&self, id: TokenId) -> Result<&[u8]> {
        let idx = self.storage_index(id)?;
        Ok(&self.token_bytes[idx])
    }

    /// Index into `token_bytes` for a non-special id.
    fn storage_index(&self, id: TokenId) -> Result<usize> {
        if self.is_special(id) {
            return Err(Error::Codec(format!("id {id} is a special token")));
        }
        let idx = if id < N_BYTES {
            id as usize
        } else {
            (id - N_SPECIALS) as usize
        };
        if idx >= self.token_bytes.len() {
            return Err(Error::Codec(format!("token id {id} out of range")));
        }
        Ok(idx)
    }

    fn id_of_storage_index(idx: usize) -> TokenId {
        if idx < N_BYTES as usize {
            idx as TokenId
        } else {
            idx as TokenId + N_SPECIALS
        }
    }
}

/// Train a byte-level BPE vocabulary of `vocab_size` total tokens (bytes +
/// specials + merges) on `corpus`. Greedy most-frequent-pair merging; ties go
/// to the lexicographically smaller (left, right) byte pair. Deterministic
/// given the corpus order.
pub fn train_bpe(corpus: &[String], vocab_size: usize) -> Result<Vocab> {
    let min = (N_BYTES + N_SPECIALS) as usize;
    if vocab_size < min {
        return Err(Error::Codec(format!(
            "vocab_size {vocab_size} below minimum {min} (256 bytes + {N_SPECIALS} specials)"
        )));
    }
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::Codec("empty corpus".into()));
    }

    let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut taken_strings: HashMap<String, ()> = token_bytes
        .iter()
        .map(|b| (bytes_to_unicode(b), ()))
        .chain(SPECIAL_TOKENS.iter().map(|s| (s.to_string(), ())))
        .collect();

    // Working sequences over storage indices (== ids for byte tokens).
    let mut seqs: Vec<Vec<u32>> = corpus
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| s.bytes().map(|b| b as u32).collect())
        .collect();

    let n_merges = vocab_size - min;
    let mut merges = Vec::with_capacity(n_merges);

    for _ in 0..n_merges {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for seq in &seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        // Pick the most frequent pair; break ties by the smaller
        // (left bytes, right bytes) pair. Skip candidates whose merged string
        // form would collide with an existing token (e.g. a special literal).
        let mut best: Option<((u32, u32), usize)> = None;
        for (&pair, &count) in &counts {
            let replace = match best {
                None => true,
                Some((bp, bc)) => {
                    count > bc
                        || (count == bc
                            && pair_key(&token_bytes, pair) < pair_key(&token_bytes, bp))
                }
            };
            if replace {
                let mut joined = token_bytes[pair.0 as usize].clone();
                joined.extend_from_slice(&token_bytes[pair.1 as usize]);
                if taken_strings.contains_key(&bytes_to_unicode(&joined)) {
                    continue;
                }
                best = Some((pair, count));
            }
        }
        // Stop early only when nothing is left to merge; otherwise fill the
        // requested size even with count-1 merges so `size()` is predictable.
        let Some((pair, _count)) = best else { break };
        let new_idx = token_bytes.len() as u32;
        let mut joined = token_bytes[pair.0 as usize].clone();
        joined.extend_from_slice(&token_bytes[pair.1 as usize]);
        taken_strings.insert(bytes_to_unicode(&joined), ());
        token_bytes.push(joined);
        merges.push(pair);
        for seq in &mut seqs {
            apply_merge(seq, pair, new_idx);
        }
    }

    // Convert storage-space merges to id space.
    let merges_ids: Vec<(TokenId, TokenId)> = merges
        .iter()
        .map(|&(a, b)| (Vocab::id_of_storage_index(a as usize), Vocab::id_of_storage_index(b as usize)))
        .collect();
    let merge_lookup = merges_ids
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, Vocab::id_of_storage_index(N_BYTES as usize + i)))
        .collect();
    Ok(Vocab { token_bytes, merges: merges_ids, merge_lookup })
}

fn pair_key(token_bytes: &[Vec<u8>], pair: (u32, u32)) -> (&[u8], &[u8]) {
    (&token_bytes[pair.0 as usize], &token_bytes[pair.1 as usize])
}

/// Replace every non-overlapping occurrence of `pair`, left to right.
fn apply_merge(seq: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

/// Encode text into token ids by replaying merges in training order. Never
/// produces special ids.
pub fn encode(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    let mut seq: Vec<TokenId> = text.bytes().map(|b| b as TokenId).collect();
    // Iteratively apply the lowest-ranked applicable merge, which reproduces
    // the training-order replay exactly.
    loop {
        let mut best: Option<(usize, TokenId)> = None; // (rank, merged id)
        for w in seq.windows(2) {
            if let Some(&merged) = vocab.merge_lookup.get(&(w[0], w[1])) {
                let rank = (merged - N_BYTES - N_SPECIALS) as usize;
                if best.is_none_or(|(r, _)| rank < r) {
                    best = Some((rank, merged));
                }
            }
        }
        let Some((rank, merged)) = best else { break };
        let pair = vocab.merges[rank];
        let mut out = Vec::with_capacity(seq.len());
        let mut i = 0;
        while i < seq.len() {
            if i + 1 < seq.len() && seq[i] == pair.0 && seq[i + 1] == pair.1 {
                out.push(merged);
                i += 2;
            } else {
                out.push(seq[i]);
                i += 1;
            }
        }
        seq = out;
    }
    seq
}

/// Decode ids back to text. Special ids render as their literal strings.
pub fn decode(ids: &[TokenId], vocab: &Vocab) -> Result<String> {
    let mut bytes = Vec::new();
    for &id in ids {
        if vocab.is_special(id) {
            bytes.extend_from_slice(SPECIAL_TOKENS[(id - N_BYTES) as usize].as_bytes());
        } else {
            bytes.extend_from_slice(vocab.bytes_of(id)?);
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

// --- byte <-> printable unicode mapping for serialization ---

/// Map raw token bytes to a printable, whitespace-free unicode string.
fn bytes_to_unicode(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        s.push(byte_to_char(b));
    }
    s
}

fn byte_to_char(b: u8) -> char {
    let keep = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
    if keep {
        char::from_u32(b as u32).unwrap()
    } else {
        // Shift the remaining 68 byte values into a private printable block.
        let shifted: u32 = 0x100
            + (0..b).filter(|&x| {
                !((b'!'..=b'~').contains(&x) || (0xA1..=0xAC).contains(&x) || (0xAE..=0xFF).contains(&x))
            }).count() as u32;
        char::from_u32(shifted).unwrap()
    }
}

fn char_to_byte(c: char) -> Option<u8> {
    let v = c as u32;
    if v < 0x100 {
        let b = v as u8;
        let keep = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
        keep.then_some(b)
    } else if (0x100..0x100 + 68).contains(&v) {
        let rank = (v - 0x100) as usize;
        (0u8..=255)
            .filter(|&x| {
                !((b'!'..=b'~').contains(&x) || (0xA1..=0xAC).contains(&x) || (0xAE..=0xFF).contains(&x))
            })
            .nth(rank)
    } else {
        None
    }
}

fn unicode_to_bytes(s: &str) -> Result<Vec<u8>> {
    s.chars()
        .map(|c| char_to_byte(c).ok_or_else(|| Error::Codec(format!("invalid token char {c:?}"))))
        .collect()
}

// --- vocab file I/O ---

/// Serialize to the text vocab format: a `ptpvocab 1 <size>` header, one
/// `token<TAB>id` line per entry, then `#merges` and `left<TAB>right` lines in
/// merge order.
pub fn vocab_to_string(vocab: &Vocab) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "ptpvocab 1 {}", vocab.size());
    for id in 0..vocab.size() as TokenId {
        let _ = writeln!(out, "{}\t{}", vocab.token_string(id).unwrap(), id);
    }
    out.push_str("#merges\n");
    for &(a, b) in &vocab.merges {
        let _ = writeln!(
            out,
            "{}\t{}",
            vocab.token_string(a).unwrap(),
            vocab.token_string(b).unwrap()
        );
    }
    out
}

pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    std::fs::write(path, vocab_to_string(vocab))?;
    Ok(())
}

pub fn vocab_from_string(text: &str) -> Result<Vocab> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::VocabParse { line: 1, message: "empty file".into() })?;
    let mut parts = header.split(' ');
    if parts.next() != Some("ptpvocab") || parts.next() != Some("1") {
        return Err(Error::VocabParse { line: 1, message: "bad header, expected `ptpvocab 1 <size>`".into() });
    }
    let size: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::VocabParse { line: 1, message: "bad size in header".into() })?;

    let mut token_strings: Vec<Option<String>> = vec![None; size];
    let mut in_merges = false;
    let mut merge_strings: Vec<(String, String)> = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        if line == "#merges" {
            in_merges = true;
            continue;
        }
        let (left, right) = line.split_once('\t').ok_or_else(|| Error::VocabParse {
            line: lineno + 1,
            message: "expected tab-separated fields".into(),
        })?;
        if in_merges {
            merge_strings.push((left.to_string(), right.to_string()));
        } else {
            let id: usize = right.parse().map_err(|_| Error::VocabParse {
                line: lineno + 1,
                message: format!("bad id {right:?}"),
            })?;
            if id >= size {
                return Err(Error::VocabParse { line: lineno + 1, message: format!("id {id} >= size {size}") });
            }
            if token_strings[id].replace(left.to_string()).is_some() {
                return Err(Error::VocabParse { line: lineno + 1, message: format!("duplicate id {id}") });
            }
        }
    }

    // Validate the fixed layout and rebuild byte contents.
    let mut token_bytes: Vec<Vec<u8>> = Vec::with_capacity(size - N_SPECIALS as usize);
    let mut string_to_id: HashMap<String, TokenId> = HashMap::new();
    for (id, slot) in token_strings.iter().enumerate() {
        let s = slot
            .as_ref()
            .ok_or_else(|| Error::VocabParse { line: 0, message: format!("missing entry for id {id}") })?;
        if string_to_id.insert(s.clone(), id as TokenId).is_some() {
            return Err(Error::VocabParse { line: 0, message: format!("duplicate token string {s:?}") });
        }
        let id = id as TokenId;
        if (N_BYTES..N_BYTES + N_SPECIALS).contains(&id) {
            let expect = SPECIAL_TOKENS[(id - N_BYTES) as usize];
            if s != expect {
                return Err(Error::VocabParse {
                    line: 0,
                    message: format!("id {id} must be special {expect:?}, found {s:?}"),
                });
            }
        } else {
            token_bytes.push(unicode_to_bytes(s)?);
        }
    }

    let mut merges: Vec<(TokenId, TokenId)> = Vec::with_capacity(merge_strings.len());
    for (l, r) in &merge_strings {
        let a = *string_to_id
            .get(l)
            .ok_or_else(|| Error::VocabParse { line: 0, message: format!("merge references unknown token {l:?}") })?;
        let b = *string_to_id
            .get(r)
            .ok_or_else(|| Error::VocabParse { line: 0, message: format!("merge references unknown token {r:?}") })?;
        merges.push((a, b));
    }
    let merge_lookup = merges
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, Vocab::id_of_storage_index(N_BYTES as usize + i)))
        .collect();
    Ok(Vocab { token_bytes, merges, merge_lookup })
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = std::fs::read_to_string(path)?;
    vocab_from_string(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn min_vocab_has_no_merges() {
        let v = train_bpe(&["abcabc".into()], (N_BYTES + N_SPECIALS) as usize).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.size(), 263);
    }

    #[test]
    fn repeated_byte_corpus_learns_the_obvious_merge() {
        // Three merge slots above the minimum; "aaaa" must merge ("a","a") first.
        let v = train_bpe(&["aaaa".into()], (N_BYTES + N_SPECIALS) as usize + 3).unwrap();
        let a = b'a' as TokenId;
        assert_eq!(v.merges()[0], (a, a));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus: Vec<String> = vec!["the cat sat on the mat".into(), "the dog sat".into()];
        let a = train_bpe(&corpus, 300).unwrap();
        let b = train_bpe(&corpus, 300).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(train_bpe(&[], 300).is_err());
        assert!(train_bpe(&[String::new()], 300).is_err());
    }

    #[test]
    fn encode_empty_is_empty() {
        let v = train_bpe(&["abc".into()], 263).unwrap();
        assert!(encode("", &v).is_empty());
    }

    #[test]
    fn encode_never_emits_special_ids() {
        let corpus = vec!["<mask> and <img> literals in text".into()];
        let v = train_bpe(&corpus, 290).unwrap();
        let ids = encode("<mask><img></img><s>", &v);
        assert!(ids.iter().all(|&id| !v.is_special(id)));
    }

    #[test]
    fn decode_specials_as_literals() {
        let v = train_bpe(&["x".into()], 263).unwrap();
        assert_eq!(decode(&[v.mask_id()], &v).unwrap(), "<mask>");
        assert_eq!(decode(&[v.img_begin_id()], &v).unwrap(), "<img>");
        assert_eq!(decode(&[], &v).unwrap(), "");
    }

    #[test]
    fn decode_invalid_id_errors() {
        let v = train_bpe(&["x".into()], 263).unwrap();
        assert!(decode(&[9999], &v).is_err());
    }

    #[test]
    fn roundtrip_random_unicode() {
        let corpus = vec![
            "hello world, the quick brown fox".into(),
            "многоязычный текст with mixed scripts 混合".into(),
        ];
        let v = train_bpe(&corpus, 320).unwrap();
        let mut rng = Rng::seed(8);
        for _ in 0..200 {
            let len = rng.below(30);
            let s: String = (0..len)
                .map(|_| {
                    let r = rng.below(4);
                    match r {
                        0 => char::from_u32(0x20 + rng.below(95) as u32).unwrap(),
                        1 => char::from_u32(0x400 + rng.below(0x100) as u32).unwrap(),
                        2 => char::from_u32(0x4E00 + rng.below(0x100) as u32).unwrap(),
                        _ => ['é', 'ß', '→', '🙂'][rng.below(4)],
                    }
                })
                .collect();
            let back = decode(&encode(&s, &v), &v).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn byte_char_mapping_is_a_bijection() {
        for b in 0u8..=255 {
            let c = byte_to_char(b);
            assert!(!c.is_whitespace() && !c.is_control(), "byte {b} maps to {c:?}");
            assert_eq!(char_to_byte(c), Some(b));
        }
    }

    #[test]
    fn vocab_file_roundtrips_bit_exactly() {
        let corpus = vec!["round trip the vocab file".into(), "more text for merges".into()];
        let v = train_bpe(&corpus, 310).unwrap();
        let s = vocab_to_string(&v);
        let reloaded = vocab_from_string(&s).unwrap();
        assert_eq!(vocab_to_string(&reloaded), s);
        assert_eq!(reloaded, v);
    }

    #[test]
    fn retrain_same_corpus_same_vocab() {
        let corpus = vec!["abab abab".into()];
        assert_eq!(train_bpe(&corpus, 280).unwrap(), train_bpe(&corpus, 280).unwrap());
    }
}
