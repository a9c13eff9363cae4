// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE in the GPT-2 convention.
//!
//! Text is split by the GPT-2 pre-tokenization pattern, each piece is mapped
//! byte-by-byte through the reversible byte-to-unicode table, and adjacent
//! symbols are merged greedily by lowest merge rank.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{KnError, Result};

/// Name of the end-of-sequence token in GPT-2 vocabularies.
pub const EOS_TOKEN: &str = "<|endoftext|>";

/// GPT-2 pattern without the `\s+(?!\S)` lookahead, which the `regex` crate
/// cannot express; [`pre_tokenize`] reinstates it by hand.
const PRE_TOKENIZE_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+";

fn pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(PRE_TOKENIZE_PATTERN).expect("static pattern"))
}

/// The reversible GPT-2 byte-to-unicode table.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut printable: Vec<u32> = (u32::from(b'!')..=u32::from(b'~')).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        let c = if printable.contains(&b) {
            b
        } else {
            extra += 1;
            255 + extra
        };
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

/// Splits text into pre-tokens exactly as GPT-2's pattern does.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let re = pattern();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < text.len() {
        let m = re.find_at(text, pos).expect("pattern matches every character");
        debug_assert_eq!(m.start(), pos);
        let mut end = m.end();
        let piece = m.as_str();
        // `\s+(?!\S)`: a whitespace run followed by a non-space leaves its last
        // character to prefix the next piece.
        if piece.chars().all(char::is_whitespace) && end < text.len() {
            let mut chars = piece.char_indices();
            if chars.clone().count() > 1 {
                let (last_start, _) = chars.next_back().expect("non-empty");
                end = pos + last_start;
            }
        }
        out.push(&text[pos..end]);
        pos = end;
    }
    out
}

/// Vocabulary, merge ranks and byte table of a byte-level BPE tokenizer.
#[derive(Debug, Clone)]
pub struct BpeTables {
    vocab: HashMap<String, u32>,
    id_to_token: Vec<String>,
    merge_ranks: HashMap<(String, String), usize>,
    merges: Vec<(String, String)>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    special_tokens: BTreeMap<String, u32>,
    eos_id: u32,
}

impl BpeTables {
    /// Builds tables from a vocabulary and an ordered merge list.
    pub fn new(vocab: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let n = vocab.len();
        let mut id_to_token = vec![None; n];
        for (tok, &id) in &vocab {
            let slot = id_to_token.get_mut(id as usize).ok_or_else(|| {
                KnError::OutOfRange(format!("token {tok:?} has id {id} outside dense range 0..{n}"))
            })?;
            if slot.is_some() {
                return Err(KnError::InvalidInput(format!("token id {id} assigned twice")));
            }
            *slot = Some(tok.clone());
        }
        let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();

        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (a, b)) in merges.iter().enumerate() {
            let joined = format!("{a}{b}");
            for part in [a, b, &joined] {
                if !vocab.contains_key(part.as_str()) {
                    return Err(KnError::InvalidInput(format!(
                        "merge #{rank} ({a} {b}) references unknown token {part:?}"
                    )));
                }
            }
            merge_ranks.entry((a.clone(), b.clone())).or_insert(rank);
        }

        let special_tokens: BTreeMap<String, u32> = vocab
            .iter()
            .filter(|(t, _)| t.starts_with("<|") && t.ends_with("|>"))
            .map(|(t, &id)| (t.clone(), id))
            .collect();
        let eos_id = *special_tokens
            .get(EOS_TOKEN)
            .ok_or_else(|| KnError::InvalidInput(format!("vocabulary lacks {EOS_TOKEN}")))?;

        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, u8::try_from(b).expect("256 entries")))
            .collect();
        Ok(Self {
            vocab,
            id_to_token,
            merge_ranks,
            merges,
            byte_encoder,
            byte_decoder,
            special_tokens,
            eos_id,
        })
    }

    /// Reads `vocab.json` and `merges.txt` in GPT-2 tokenizer file format.
    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab_text = read(vocab_path)?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&vocab_text)
            .map_err(|e| KnError::parse(vocab_path.display().to_string(), e))?;
        let merges_text = read(merges_path)?;
        let mut merges = Vec::new();
        for (i, line) in merges_text.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => merges.push((a.to_string(), b.to_string())),
                _ => {
                    return Err(KnError::parse(
                        format!("{}:{}", merges_path.display(), i + 1),
                        "expected two space-separated symbols",
                    ))
                }
            }
        }
        Self::new(vocab, merges)
    }

    /// Serializes to `vocab.json` / `merges.txt` contents.
    pub fn to_files_contents(&self) -> (String, String) {
        let ordered: BTreeMap<u32, &String> = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (u32::try_from(i).expect("vocab fits u32"), t))
            .collect();
        // Emit in id order for stable, diffable files.
        let mut vocab = String::from("{");
        for (n, (id, tok)) in ordered.iter().enumerate() {
            if n > 0 {
                vocab.push_str(", ");
            }
            vocab.push_str(&serde_json::to_string(tok).expect("string serializes"));
            vocab.push_str(&format!(": {id}"));
        }
        vocab.push('}');
        let mut merges = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            merges.push_str(&format!("{a} {b}\n"));
        }
        (vocab, merges)
    }

    pub fn vocab_len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    pub fn special_tokens(&self) -> &BTreeMap<String, u32> {
        &self.special_tokens
    }

    pub fn byte_encoder(&self) -> &[char; 256] {
        &self.byte_encoder
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Encodes UTF-8 text to token ids.
    ///
    /// Fails only when a symbol produced by the merges is absent from the
    /// vocabulary, which cannot happen for a vocabulary covering all 256 bytes.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for piece in pre_tokenize(text) {
            for sym in self.bpe(piece) {
                let id = self.vocab.get(&sym).ok_or_else(|| {
                    KnError::InvalidInput(format!("symbol {sym:?} is not representable"))
                })?;
                ids.push(*id);
            }
        }
        Ok(ids)
    }

    /// Decodes token ids back to text; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let tok = self
                .token_str(id)
                .ok_or_else(|| KnError::OutOfRange(format!("token id {id}")))?;
            if self.special_tokens.contains_key(tok) {
                bytes.extend_from_slice(tok.as_bytes());
                continue;
            }
            for c in tok.chars() {
                let b = self.byte_decoder.get(&c).ok_or_else(|| {
                    KnError::InvalidInput(format!("token {tok:?} holds non-byte symbol {c:?}"))
                })?;
                bytes.push(*b);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    fn bpe(&self, piece: &str) -> Vec<String> {
        let mut symbols: Vec<String> = piece
            .bytes()
            .map(|b| self.byte_encoder[b as usize].to_string())
            .collect();
        while symbols.len() > 1 {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && &symbols[i] == a && &symbols[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(KnError::MissingFile(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| KnError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_byte_tables(merges: &[(&str, &str)]) -> BpeTables {
        let enc = bytes_to_unicode();
        let mut vocab: HashMap<String, u32> = HashMap::new();
        for c in enc {
            let id = vocab.len() as u32;
            vocab.insert(c.to_string(), id);
        }
        let mut merge_list = Vec::new();
        for (a, b) in merges {
            let id = vocab.len() as u32;
            vocab.entry(format!("{a}{b}")).or_insert(id);
            merge_list.push((a.to_string(), b.to_string()));
        }
        let id = vocab.len() as u32;
        vocab.insert(EOS_TOKEN.into(), id);
        BpeTables::new(vocab, merge_list).unwrap()
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'A' as usize], 'A');
        assert_eq!(t[b'\n' as usize], 'Ċ');
    }

    #[test]
    fn pre_tokenize_matches_gpt2_splits() {
        assert_eq!(
            pre_tokenize("Hello world, it's 2024!"),
            vec!["Hello", " world", ",", " it", "'s", " 2024", "!"]
        );
        // Whitespace run followed by a word leaves one space for the word.
        assert_eq!(pre_tokenize("a   b"), vec!["a", "  ", " b"]);
        assert_eq!(pre_tokenize("a\n\nb"), vec!["a", "\n", "\n", "b"]);
        assert_eq!(pre_tokenize("end  "), vec!["end", "  "]);
        assert!(pre_tokenize("").is_empty());
    }

    #[test]
    fn lowest_rank_merge_wins() {
        // "a b" ranks before "b c": "abc" -> ["ab", "c"].
        let t = full_byte_tables(&[("a", "b"), ("b", "c")]);
        let ids = t.encode("abc").unwrap();
        let toks: Vec<&str> = ids.iter().map(|&i| t.token_str(i).unwrap()).collect();
        assert_eq!(toks, vec!["ab", "c"]);
        let t = full_byte_tables(&[("b", "c"), ("a", "b")]);
        let ids = t.encode("abc").unwrap();
        let toks: Vec<&str> = ids.iter().map(|&i| t.token_str(i).unwrap()).collect();
        assert_eq!(toks, vec!["a", "bc"]);
    }

    #[test]
    fn empty_text_encodes_to_nothing() {
        let t = full_byte_tables(&[]);
        assert!(t.encode("").unwrap().is_empty());
    }

    #[test]
    fn unknown_merge_token_is_rejected() {
        let mut vocab = HashMap::new();
        vocab.insert("a".to_string(), 0);
        vocab.insert(EOS_TOKEN.to_string(), 1);
        let err = BpeTables::new(vocab, vec![("a".into(), "q".into())]).unwrap_err();
        assert!(matches!(err, KnError::InvalidInput(_)));
    }

    #[test]
    fn file_contents_round_trip() {
        let t = full_byte_tables(&[("Ġ", "t"), ("h", "e")]);
        let (v, m) = t.to_files_contents();
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("vocab.json"), v).unwrap();
        std::fs::write(dir.path().join("merges.txt"), m).unwrap();
        let back =
            BpeTables::from_files(&dir.path().join("vocab.json"), &dir.path().join("merges.txt"))
                .unwrap();
        assert_eq!(back.encode(" the").unwrap(), t.encode(" the").unwrap());
        assert_eq!(back.eos_id(), t.eos_id());
    }

    proptest::proptest! {
        #[test]
        fn decode_inverts_encode(text in "\\PC*") {
            let t = full_byte_tables(&[("Ġ", "t"), ("h", "e"), ("Ġt", "he"), ("i", "n")]);
            let ids = t.encode(&text).unwrap();
            proptest::prop_assert_eq!(t.decode(&ids).unwrap(), text);
        }
    }
}
