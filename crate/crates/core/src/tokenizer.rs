//! Byte-level vocabulary shared by the embedder and the backbone, `<tor>`
//! planting with the four position strategies, and segment bookkeeping for
//! loss masking.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const TOR: TokenId = 256;
pub const IMG: TokenId = 257;
pub const BOS: TokenId = 258;
pub const EOS: TokenId = 259;
pub const EOR: TokenId = 260;
pub const PAD: TokenId = 261;

/// 256 byte tokens + 6 special tokens.
pub const VOCAB_SIZE: usize = 262;

const SPECIAL_NAMES: [(&str, TokenId); 6] =
    [("<tor>", TOR), ("<img>", IMG), ("<bos>", BOS), ("<eos>", EOS), ("<eor>", EOR), ("<pad>", PAD)];

/// Encode plain text to byte-token ids; never emits a special id.
pub fn encode(text: &str) -> Vec<TokenId> {
    text.as_bytes().iter().map(|&b| b as TokenId).collect()
}

/// Decode ids back to text. Byte tokens round-trip exactly; special tokens
/// render as their angle-bracket names; ids past the vocabulary are errors.
pub fn decode(ids: &[TokenId]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < 256 {
            bytes.push(id as u8);
        } else if let Some((name, _)) = SPECIAL_NAMES.iter().find(|(_, sid)| *sid == id) {
            bytes.extend_from_slice(name.as_bytes());
        } else {
            return Err(Error::UnknownToken(id));
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Printable form of the whole table, for debugging dumps.
pub fn vocab_json() -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for id in 0u32..256 {
        let printable = match id as u8 {
            b if (0x20..0x7f).contains(&b) => (b as char).to_string(),
            b => format!("<0x{b:02x}>"),
        };
        map.insert(id.to_string(), json!(printable));
    }
    for (name, id) in SPECIAL_NAMES {
        map.insert(id.to_string(), json!(name));
    }
    serde_json::Value::Object(map)
}

/// Stable FNV-1a over the vocabulary dump; checkpoints pin this so a model
/// is never reloaded against a different token table.
pub fn vocab_hash() -> u64 {
    let s = vocab_json().to_string();
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Where the `<tor>` tokens go relative to the rationale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TorStrategy {
    Even,
    Start,
    End,
    Random,
}

impl std::str::FromStr for TorStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "even" => Ok(TorStrategy::Even),
            "start" => Ok(TorStrategy::Start),
            "end" => Ok(TorStrategy::End),
            "random" => Ok(TorStrategy::Random),
            other => Err(Error::Config(format!("unknown tor strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for TorStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TorStrategy::Even => "even",
            TorStrategy::Start => "start",
            TorStrategy::End => "end",
            TorStrategy::Random => "random",
        };
        f.write_str(s)
    }
}

/// A rationale with `<tor>` tokens planted into it.
///
/// `segments` are the maximal runs of rationale tokens in planted order;
/// for the even strategy this is exactly one run per `<tor>`, for
/// start/end/random the run count can differ from k.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedRationale {
    pub tokens: Vec<TokenId>,
    pub tor_positions: Vec<usize>,
    pub segments: Vec<(usize, usize)>,
    pub strategy: TorStrategy,
}

impl PlantedRationale {
    /// The original rationale with every `<tor>` stripped out.
    pub fn stripped(&self) -> Vec<TokenId> {
        self.tokens.iter().copied().filter(|&t| t != TOR).collect()
    }
}

fn assemble(rationale: &[TokenId], tor_gaps: &[usize], strategy: TorStrategy) -> PlantedRationale {
    // tor_gaps[i] = index into `rationale` before which the i-th <tor> goes;
    // a gap of rationale.len() appends after the last token. Gaps are sorted
    // and may repeat (consecutive <tor>).
    let mut tokens = Vec::with_capacity(rationale.len() + tor_gaps.len());
    let mut tor_positions = Vec::with_capacity(tor_gaps.len());
    let mut gap_iter = tor_gaps.iter().peekable();
    for (i, &tok) in rationale.iter().enumerate() {
        while gap_iter.peek().is_some_and(|&&g| g == i) {
            tor_positions.push(tokens.len());
            tokens.push(TOR);
            gap_iter.next();
        }
        tokens.push(tok);
    }
    while gap_iter.next().is_some() {
        tor_positions.push(tokens.len());
        tokens.push(TOR);
    }

    let mut segments = Vec::new();
    let mut run_start = None;
    for (i, &tok) in tokens.iter().enumerate() {
        if tok == TOR {
            if let Some(s) = run_start.take() {
                segments.push((s, i));
            }
        } else if run_start.is_none() {
            run_start = Some(i);
        }
    }
    if let Some(s) = run_start {
        segments.push((s, tokens.len()));
    }

    PlantedRationale { tokens, tor_positions, segments, strategy }
}

/// Plant `k` `<tor>` tokens into a rationale.
///
/// even: the rationale splits into k contiguous segments, the first
/// (L mod k) of size ceil(L/k) and the rest of size floor(L/k), each
/// preceded by one `<tor>`. start: k `<tor>` then all tokens. end: all
/// tokens then k `<tor>`. random: k insertion points drawn uniformly
/// without replacement from the seeded generator.
pub fn plant_tor(
    rationale: &[TokenId],
    k: usize,
    strategy: TorStrategy,
    rng: &mut ChaCha8Rng,
) -> Result<PlantedRationale> {
    if k < 1 {
        return Err(Error::contract("plant_tor", format!("k must be >= 1, got {k}")));
    }
    if rationale.iter().any(|&t| t >= 256) {
        return Err(Error::Planting("rationale must contain only plain byte tokens".into()));
    }
    let l = rationale.len();
    let gaps: Vec<usize> = match strategy {
        TorStrategy::Even | TorStrategy::Random if l < k => {
            return Err(Error::Planting(format!(
                "cannot place {k} <tor> tokens in a rationale of {l} tokens under the {strategy} strategy"
            )));
        }
        TorStrategy::Even => {
            let big = l / k + 1;
            let small = l / k;
            let n_big = l % k;
            let mut gaps = Vec::with_capacity(k);
            let mut cursor = 0;
            for i in 0..k {
                gaps.push(cursor);
                cursor += if i < n_big { big } else { small };
            }
            gaps
        }
        TorStrategy::Start => vec![0; k],
        TorStrategy::End => vec![l; k],
        TorStrategy::Random => {
            let mut picks: Vec<usize> = sample(rng, l + 1, k).into_iter().collect();
            picks.sort_unstable();
            picks
        }
    };
    Ok(assemble(rationale, &gaps, strategy))
}

/// Per-position prediction-target mask over `p.tokens`: true exactly on
/// rationale segment tokens, false on every `<tor>`. The trailing `<eor>`
/// appended downstream is also a target; that position is not part of
/// `p.tokens` and is handled by sequence assembly.
pub fn segment_targets(p: &PlantedRationale) -> Vec<bool> {
    p.tokens.iter().map(|&t| t != TOR).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn encode_empty_is_empty() {
        assert_eq!(encode(""), Vec::<TokenId>::new());
    }

    #[test]
    fn round_trip_plain_text() {
        let s = "3+4=7";
        assert_eq!(decode(&encode(s)).unwrap(), s);
    }

    #[test]
    fn encode_never_emits_special_ids() {
        for s in ["<tor>", "plain", "\u{1F600} bytes"] {
            assert!(encode(s).iter().all(|&id| id < 256));
        }
    }

    #[test]
    fn decode_rejects_out_of_vocab() {
        assert!(matches!(decode(&[262]).unwrap_err(), Error::UnknownToken(262)));
        assert!(decode(&[PAD]).is_ok());
    }

    #[test]
    fn vocab_dump_covers_all_ids() {
        let v = vocab_json();
        assert_eq!(v.as_object().unwrap().len(), VOCAB_SIZE);
        assert_eq!(v["256"], "<tor>");
        assert_eq!(v["261"], "<pad>");
    }

    #[test]
    fn even_planting_l20_k10() {
        let r: Vec<TokenId> = (0..20).map(|i| (b'a' + i) as TokenId).collect();
        let p = plant_tor(&r, 10, TorStrategy::Even, &mut rng(0)).unwrap();
        assert_eq!(p.tokens.len(), 30);
        let expected: Vec<usize> = (0..10).map(|i| i * 3).collect();
        assert_eq!(p.tor_positions, expected);
        assert!(p.segments.iter().all(|(s, e)| e - s == 2));
    }

    #[test]
    fn even_planting_l7_k3() {
        let r: Vec<TokenId> = (0..7).map(|i| i as TokenId).collect();
        let p = plant_tor(&r, 3, TorStrategy::Even, &mut rng(0)).unwrap();
        let sizes: Vec<usize> = p.segments.iter().map(|(s, e)| e - s).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        assert_eq!(p.tor_positions, vec![0, 4, 7]);
    }

    #[test]
    fn even_planting_degenerate_k1() {
        let r: Vec<TokenId> = (0..5).map(|i| i as TokenId).collect();
        let p = plant_tor(&r, 1, TorStrategy::Even, &mut rng(0)).unwrap();
        assert_eq!(p.tokens[0], TOR);
        assert_eq!(&p.tokens[1..], &r[..]);
    }

    #[test]
    fn start_and_end_layouts() {
        let r: Vec<TokenId> = (0..4).map(|i| i as TokenId).collect();
        let s = plant_tor(&r, 3, TorStrategy::Start, &mut rng(0)).unwrap();
        assert_eq!(s.tor_positions, vec![0, 1, 2]);
        assert_eq!(&s.tokens[3..], &r[..]);
        let e = plant_tor(&r, 3, TorStrategy::End, &mut rng(0)).unwrap();
        assert_eq!(e.tor_positions, vec![4, 5, 6]);
        assert_eq!(&e.tokens[..4], &r[..]);
    }

    #[test]
    fn planting_errors() {
        let r: Vec<TokenId> = vec![1, 2, 3];
        assert!(plant_tor(&r, 4, TorStrategy::Even, &mut rng(0)).is_err());
        assert!(plant_tor(&r, 4, TorStrategy::Random, &mut rng(0)).is_err());
        assert!(plant_tor(&r, 0, TorStrategy::Even, &mut rng(0)).is_err());
        // start/end accept k > L
        assert!(plant_tor(&r, 4, TorStrategy::Start, &mut rng(0)).is_ok());
    }

    #[test]
    fn segment_targets_even_l4_k2() {
        let r: Vec<TokenId> = (10..14).collect();
        let p = plant_tor(&r, 2, TorStrategy::Even, &mut rng(0)).unwrap();
        assert_eq!(segment_targets(&p), vec![false, true, true, false, true, true]);
    }

    #[test]
    fn segment_targets_k_equals_l() {
        let r: Vec<TokenId> = (0..5).collect();
        let p = plant_tor(&r, 5, TorStrategy::Even, &mut rng(0)).unwrap();
        assert_eq!(segment_targets(&p).iter().filter(|&&b| b).count(), 5);
    }

    #[test]
    fn segment_targets_random_seed7() {
        // independent enumeration of the seeded placement: whatever the
        // positions, exactly L rationale tokens stay target-true
        let r: Vec<TokenId> = (0..6).collect();
        let p = plant_tor(&r, 2, TorStrategy::Random, &mut rng(7)).unwrap();
        let mask = segment_targets(&p);
        assert_eq!(mask.iter().filter(|&&b| b).count(), 6);
        for &pos in &p.tor_positions {
            assert!(!mask[pos]);
        }
        // reproducibility of the seeded draw
        let p2 = plant_tor(&r, 2, TorStrategy::Random, &mut rng(7)).unwrap();
        assert_eq!(p, p2);
    }

    proptest! {
        #[test]
        fn strip_round_trip_all_strategies(
            len in 0usize..80,
            k in 1usize..12,
            strat in prop_oneof![
                Just(TorStrategy::Even),
                Just(TorStrategy::Start),
                Just(TorStrategy::End),
                Just(TorStrategy::Random)
            ],
            seed in 0u64..1000,
        ) {
            let r: Vec<TokenId> = (0..len as u32).map(|i| i % 256).collect();
            match plant_tor(&r, k, strat, &mut rng(seed)) {
                Ok(p) => {
                    prop_assert_eq!(p.stripped(), r);
                    prop_assert_eq!(p.tor_positions.len(), k);
                    for &pos in &p.tor_positions {
                        prop_assert_eq!(p.tokens[pos], TOR);
                    }
                    // segments cover every non-tor position exactly once
                    let mut covered = vec![false; p.tokens.len()];
                    for &(s, e) in &p.segments {
                        for c in covered.iter_mut().take(e).skip(s) {
                            prop_assert!(!*c);
                            *c = true;
                        }
                    }
                    for (i, &tok) in p.tokens.iter().enumerate() {
                        prop_assert_eq!(covered[i], tok != TOR);
                    }
                    if strat == TorStrategy::Even {
                        let sizes: Vec<usize> = p.segments.iter().map(|(s, e)| e - s).collect();
                        let mx = sizes.iter().max().unwrap();
                        let mn = sizes.iter().min().unwrap();
                        prop_assert!(mx - mn <= 1);
                    }
                }
                Err(_) => {
                    prop_assert!(matches!(strat, TorStrategy::Even | TorStrategy::Random) && len < k);
                }
            }
        }

        #[test]
        fn text_round_trip(s in any::<String>()) {
            prop_assert_eq!(decode(&encode(&s)).unwrap(), s);
        }
    }
}
