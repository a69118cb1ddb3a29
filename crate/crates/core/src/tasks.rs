//! Verifiable synthetic math tasks: multi-digit addition with worked carry
//! traces, a fixed character-level vocabulary, and a binary-reward verifier.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed symbol set: digits, '+', '=', '#', space, and the four specials.
/// MASK and PAD never appear in source text.
pub struct Vocab;

impl Vocab {
    pub const PLUS: u32 = 10;
    pub const EQUALS: u32 = 11;
    pub const HASH: u32 = 12;
    pub const SPACE: u32 = 13;
    pub const BOS: u32 = 14;
    pub const EOS: u32 = 15;
    pub const PAD: u32 = 16;
    pub const MASK: u32 = 17;
    pub const SIZE: usize = 18;

    pub fn encode_char(c: char) -> Result<u32> {
        Ok(match c {
            '0'..='9' => c as u32 - '0' as u32,
            '+' => Self::PLUS,
            '=' => Self::EQUALS,
            '#' => Self::HASH,
            ' ' => Self::SPACE,
            other => return Err(Error::Config(format!("unencodable character {other:?}"))),
        })
    }

    pub fn encode(text: &str) -> Result<Vec<u32>> {
        text.chars().map(Self::encode_char).collect()
    }

    /// Renders token ids back to text; specials become markers so decoded
    /// model output stays inspectable.
    pub fn decode(tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| match t {
                0..=9 => char::from(b'0' + t as u8).to_string(),
                Self::PLUS => "+".into(),
                Self::EQUALS => "=".into(),
                Self::HASH => "#".into(),
                Self::SPACE => " ".into(),
                Self::BOS => "<bos>".into(),
                Self::EOS => "<eos>".into(),
                Self::PAD => "<pad>".into(),
                Self::MASK => "<mask>".into(),
                other => format!("<{other}>"),
            })
            .collect()
    }
}

/// One addition problem with its worked digit-by-digit solution.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskSample {
    pub prompt: String,
    pub answer: u64,
    pub worked: String,
}

/// Deterministic carry trace: one "d1+d2+carry=partial" group per digit
/// position, least significant first, then "#answer". Partials are
/// zero-padded to two digits so every group has the same width.
pub fn worked_solution(a: u64, b: u64) -> String {
    let mut parts = Vec::new();
    let (mut x, mut y) = (a, b);
    let mut carry = 0;
    loop {
        let (d1, d2) = (x % 10, y % 10);
        let s = d1 + d2 + carry;
        parts.push(format!("{d1}+{d2}+{carry}={s:02}"));
        carry = s / 10;
        x /= 10;
        y /= 10;
        if x == 0 && y == 0 {
            break;
        }
    }
    if carry > 0 {
        parts.push(format!("0+0+{carry}={carry:02}"));
    }
    format!("{} #{}", parts.join(" "), a + b)
}

impl TaskSample {
    pub fn new(a: u64, b: u64) -> Self {
        TaskSample {
            prompt: format!("{a}+{b}="),
            answer: a + b,
            worked: worked_solution(a, b),
        }
    }

    /// BOS-prefixed prompt tokens.
    pub fn prompt_tokens(&self) -> Vec<u32> {
        let mut t = vec![Vocab::BOS];
        t.extend(Vocab::encode(&self.prompt).expect("prompt uses task alphabet"));
        t
    }

    /// Worked-solution tokens terminated by EOS.
    pub fn target_tokens(&self) -> Vec<u32> {
        let mut t = Vocab::encode(&self.worked).expect("worked trace uses task alphabet");
        t.push(Vocab::EOS);
        t
    }
}

/// `n` unique uniformly sampled `digits`-digit addition problems.
pub fn gen_dataset(seed: u64, n: usize, digits: u32) -> Result<Vec<TaskSample>> {
    if digits == 0 {
        return Err(Error::Config("digits must be >= 1".into()));
    }
    let limit = 10u64.pow(digits);
    // Operands are exactly `digits` wide so prompt token positions are stable.
    let lo = if digits == 1 { 0 } else { 10u64.pow(digits - 1) };
    let span = limit - lo;
    let distinct = (span as u128) * (span as u128);
    if n as u128 > distinct {
        return Err(Error::Config(format!(
            "{n} samples requested but only {distinct} distinct problems exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a = rng.gen_range(lo..limit);
        let b = rng.gen_range(lo..limit);
        if seen.insert((a, b)) {
            out.push(TaskSample::new(a, b));
        }
    }
    Ok(out)
}

/// Binary outcome reward: 1 iff the integer after the LAST '#' before the
/// first EOS equals the gold answer. Malformed output is reward 0, never an
/// error.
pub fn verify(output: &[u32], sample: &TaskSample) -> f32 {
    let upto_eos: Vec<u32> = output
        .iter()
        .take_while(|&&t| t != Vocab::EOS)
        .copied()
        .collect();
    let Some(hash_pos) = upto_eos.iter().rposition(|&t| t == Vocab::HASH) else {
        return 0.0;
    };
    let mut value: u64 = 0;
    let mut any = false;
    for &t in &upto_eos[hash_pos + 1..] {
        if t <= 9 {
            match value.checked_mul(10).and_then(|v| v.checked_add(t as u64)) {
                Some(v) => value = v,
                None => return 0.0,
            }
            any = true;
        } else {
            break;
        }
    }
    if any && value == sample.answer {
        1.0
    } else {
        0.0
    }
}

/// JSON-lines serialization, one sample per line.
pub fn write_jsonl(samples: &[TaskSample], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        writeln!(f)?;
    }
    Ok(())
}

pub fn read_jsonl(path: &std::path::Path) -> Result<Vec<TaskSample>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_plus_two_ends_with_hash_four() {
        let s = TaskSample::new(2, 2);
        assert!(s.worked.ends_with("#4"));
        assert_eq!(s.worked, "2+2+0=04 #4");
    }

    #[test]
    fn carry_trace_for_overflow() {
        let s = TaskSample::new(999, 1);
        assert!(s.worked.ends_with("#1000"));
        assert_eq!(verify(&s.target_tokens(), &s), 1.0);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let text = "34+85=119 #119";
        let ids = Vocab::encode(text).unwrap();
        assert_eq!(Vocab::decode(&ids), text);
    }

    #[test]
    fn dataset_is_seed_deterministic_and_unique() {
        let a = gen_dataset(9, 200, 3).unwrap();
        let b = gen_dataset(9, 200, 3).unwrap();
        assert_eq!(a, b);
        let keys: HashSet<&str> = a.iter().map(|s| s.prompt.as_str()).collect();
        assert_eq!(keys.len(), a.len());
        let c = gen_dataset(10, 200, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dataset_rejects_oversized_request() {
        assert!(gen_dataset(0, 101, 1).is_err());
    }

    #[test]
    fn all_gold_traces_verify() {
        for s in gen_dataset(3, 500, 3).unwrap() {
            assert_eq!(verify(&s.target_tokens(), &s), 1.0, "{}", s.prompt);
        }
    }

    #[test]
    fn verify_edge_cases() {
        let s = TaskSample::new(12, 30);
        assert_eq!(verify(&[], &s), 0.0);
        // wrong intermediate carries but right final answer still passes
        let fake = Vocab::encode("9+9+9=1 #42").unwrap();
        assert_eq!(verify(&fake, &s), 1.0);
        // answer after EOS does not count
        let mut late = vec![Vocab::EOS];
        late.extend(Vocab::encode("#42").unwrap());
        assert_eq!(verify(&late, &s), 0.0);
        // last '#' wins
        let double = Vocab::encode("#7 #42").unwrap();
        assert_eq!(verify(&double, &s), 1.0);
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let samples = gen_dataset(1, 20, 2).unwrap();
        write_jsonl(&samples, &path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), samples);
    }
}
