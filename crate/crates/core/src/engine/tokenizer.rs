//! Byte-level BPE in the GPT2 style.
//!
//! Text is split by the GPT2 pre-tokenization pattern, each piece's UTF-8
//! bytes are mapped to printable characters with the standard byte table,
//! and merges are applied lowest rank first. Vocabularies load from a
//! `vocab.json` + `merges.txt` pair or from a `tokenizer.json` whose model
//! is BPE.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde_json::Value;

use crate::error::{Error, Result};

const PATTERN: &str = r"^(?:'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+)";

#[derive(Debug)]
pub struct Tokenizer {
    encoder: HashMap<String, u32>,
    decoder: HashMap<u32, String>,
    ranks: HashMap<(String, String), usize>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
    /// Added tokens matched verbatim before pre-tokenization, longest first.
    specials: Vec<(String, u32)>,
    pattern: Regex,
    cache: Mutex<HashMap<String, Vec<u32>>>,
}

/// The GPT2 reversible byte-to-character table.
fn byte_table() -> [char; 256] {
    let mut printable: Vec<u32> = (b'!' as u32..=b'~' as u32).collect();
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
        table[b as usize] = char::from_u32(c).expect("valid scalar");
    }
    table
}

impl Tokenizer {
    pub fn new(vocab: HashMap<String, u32>, merges: Vec<(String, String)>, specials: Vec<(String, u32)>) -> Self {
        let byte_to_char = byte_table();
        let char_to_byte = byte_to_char.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let decoder = vocab.iter().map(|(k, &v)| (v, k.clone())).chain(specials.iter().map(|(s, i)| (*i, s.clone()))).collect();
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let mut specials = specials;
        specials.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        Self {
            encoder: vocab,
            decoder,
            ranks,
            byte_to_char,
            char_to_byte,
            specials,
            pattern: Regex::new(PATTERN).expect("pattern compiles"),
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn from_files(vocab_json: impl AsRef<Path>, merges_txt: impl AsRef<Path>) -> Result<Self> {
        let (vp, mp) = (vocab_json.as_ref(), merges_txt.as_ref());
        let vocab: HashMap<String, u32> =
            serde_json::from_str(&std::fs::read_to_string(vp).map_err(|e| Error::io(vp, e))?)?;
        let text = std::fs::read_to_string(mp).map_err(|e| Error::io(mp, e))?;
        let merges = text
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .map(|l| {
                let mut it = l.split(' ');
                match (it.next(), it.next()) {
                    (Some(a), Some(b)) => Ok((a.to_string(), b.to_string())),
                    _ => Err(Error::Input(format!("bad merge line `{l}`"))),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self::new(vocab, merges, Vec::new()))
    }

    pub fn from_tokenizer_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let root: Value = serde_json::from_str(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?;
        let model = root.get("model").ok_or_else(|| Error::Input("tokenizer.json has no model".into()))?;
        if model.get("type").and_then(Value::as_str).is_some_and(|t| t != "BPE") {
            return Err(Error::Input("only BPE tokenizer.json models are supported".into()));
        }
        let vocab: HashMap<String, u32> = serde_json::from_value(model.get("vocab").cloned().unwrap_or(Value::Null))?;
        let merges = model
            .get("merges")
            .and_then(Value::as_array)
            .map(|arr| {
                arr.iter()
                    .map(|m| match m {
                        Value::String(s) => s
                            .split_once(' ')
                            .map(|(a, b)| (a.to_string(), b.to_string()))
                            .ok_or_else(|| Error::Input(format!("bad merge `{s}`"))),
                        Value::Array(p) if p.len() == 2 => Ok((
                            p[0].as_str().unwrap_or_default().to_string(),
                            p[1].as_str().unwrap_or_default().to_string(),
                        )),
                        _ => Err(Error::Input("bad merge entry".into())),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?
            .unwrap_or_default();
        let specials = root
            .get("added_tokens")
            .and_then(Value::as_array)
            .map(|arr| {
                arr.iter()
                    .filter_map(|t| Some((t.get("content")?.as_str()?.to_string(), t.get("id")?.as_u64()? as u32)))
                    .collect()
            })
            .unwrap_or_default();
        Ok(Self::new(vocab, merges, specials))
    }

    /// `tokenizer.json` inside `dir`, else `vocab.json` + `merges.txt`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let tj = dir.join("tokenizer.json");
        if tj.exists() {
            return Self::from_tokenizer_json(tj);
        }
        Self::from_files(dir.join("vocab.json"), dir.join("merges.txt"))
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.keys().max().map_or(0, |&m| m as usize + 1)
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.encoder.get(token).copied().or_else(|| self.specials.iter().find(|(s, _)| s == token).map(|&(_, i)| i))
    }

    fn pretokenize<'t>(&self, text: &'t str) -> Vec<&'t str> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < text.len() {
            let rest = &text[i..];
            let Some(m) = self.pattern.find(rest) else {
                // Unreachable for valid UTF-8: `\s+` or the symbol class always matches.
                let c = rest.chars().next().expect("non-empty");
                out.push(&rest[..c.len_utf8()]);
                i += c.len_utf8();
                continue;
            };
            let mut piece = m.as_str();
            // Emulate `\s+(?!\S)`: a whitespace run followed by text leaves
            // its last character to start the next piece.
            if piece.chars().all(char::is_whitespace) && piece.len() < rest.len() && piece.chars().count() > 1 {
                let last = piece.chars().last().expect("non-empty");
                piece = &piece[..piece.len() - last.len_utf8()];
            }
            out.push(piece);
            i += piece.len();
        }
        out
    }

    fn bpe(&self, piece: &str) -> Vec<u32> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(piece) {
            return hit.clone();
        }
        let mut parts: Vec<String> = piece.bytes().map(|b| self.byte_to_char[b as usize].to_string()).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", parts[i], parts[i + 1]);
            parts.splice(i..i + 2, [merged]);
        }
        let ids: Vec<u32> = parts
            .iter()
            .flat_map(|p| match self.encoder.get(p) {
                Some(&id) => vec![id],
                // Unknown symbol: fall back to single byte-characters.
                None => p.chars().filter_map(|c| self.encoder.get(&c.to_string()).copied()).collect(),
            })
            .collect();
        self.cache.lock().expect("cache lock").insert(piece.to_string(), ids.clone());
        ids
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        let mut rest = text;
        'outer: while !rest.is_empty() {
            if !self.specials.is_empty() {
                // Find the earliest special token occurrence.
                let mut first: Option<(usize, &str, u32)> = None;
                for (s, id) in &self.specials {
                    if let Some(pos) = rest.find(s.as_str()) {
                        if first.is_none_or(|(p, _, _)| pos < p) {
                            first = Some((pos, s, *id));
                        }
                    }
                }
                if let Some((pos, s, id)) = first {
                    for piece in self.pretokenize(&rest[..pos]) {
                        out.extend(self.bpe(piece));
                    }
                    out.push(id);
                    rest = &rest[pos + s.len()..];
                    continue 'outer;
                }
            }
            for piece in self.pretokenize(rest) {
                out.extend(self.bpe(piece));
            }
            break;
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for id in ids {
            let Some(tok) = self.decoder.get(id) else { continue };
            if self.specials.iter().any(|(s, i)| i == id && s == tok) {
                bytes.extend_from_slice(tok.as_bytes());
                continue;
            }
            for c in tok.chars() {
                match self.char_to_byte.get(&c) {
                    Some(&b) => bytes.push(b),
                    None => bytes.extend_from_slice(c.to_string().as_bytes()),
                }
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Display form of a single token.
    pub fn token_string(&self, id: u32) -> String {
        self.decode(&[id])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        let table = byte_table();
        let mut vocab: HashMap<String, u32> = (0..256).map(|b| (table[b].to_string(), b as u32)).collect();
        let merges = vec![("h".to_string(), "e".to_string()), ("Ġ".to_string(), "w".to_string()), ("he".to_string(), "l".to_string())];
        for (i, m) in ["he", "Ġw", "hel"].iter().enumerate() {
            vocab.insert(m.to_string(), 256 + i as u32);
        }
        Tokenizer::new(vocab, merges, vec![("<|endoftext|>".to_string(), 300)])
    }

    #[test]
    fn byte_table_is_bijective() {
        let t = byte_table();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
        assert_eq!(t[b'\n' as usize], 'Ċ');
    }

    #[test]
    fn merges_apply_by_rank() {
        let tok = toy();
        assert_eq!(tok.encode("help"), vec![258, b'p' as u32]);
        assert_eq!(tok.encode(" w"), vec![257]);
    }

    #[test]
    fn pretokenizer_whitespace() {
        let tok = toy();
        assert_eq!(tok.pretokenize("a  b\n\nc "), vec!["a", " ", " b", "\n", "\n", "c", " "]);
        assert_eq!(tok.pretokenize("it's 42!"), vec!["it", "'s", " 42", "!"]);
    }

    #[test]
    fn round_trip_ascii() {
        let tok = toy();
        for s in ["The quick brown fox.", "  spaced   out  ", "tabs\tand\nnewlines\n", "x<|endoftext|>y", ""] {
            assert_eq!(tok.decode(&tok.encode(s)), s);
        }
        assert!(tok.encode("x<|endoftext|>y").contains(&300));
    }
}
