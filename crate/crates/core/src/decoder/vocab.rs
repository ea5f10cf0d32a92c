use serde::{Deserialize, Serialize};

use super::DecoderError;

/// Special tokens occupy ids `0..SPECIAL_COUNT`; integer tokens follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(usize)]
pub enum Special {
    Bos = 0,
    Eos,
    From,
    To,
    Dot,
    Not,
    Present,
    Yes,
    No,
    In,
    Video,
    QSlot,
    When,
    Ask,
    Which,
}

pub const SPECIAL_COUNT: usize = 15;

const SPECIAL_NAMES: [&str; SPECIAL_COUNT] =
    ["BOS", "EOS", "FROM", "TO", "DOT", "NOT", "PRESENT", "YES", "NO", "IN", "VIDEO", "QSLOT", "WHEN", "ASK", "WHICH"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub int_tokens: usize,
}

impl Vocab {
    pub fn new(int_tokens: usize) -> Self {
        Self { int_tokens }
    }

    pub fn size(&self) -> usize {
        SPECIAL_COUNT + self.int_tokens
    }

    pub fn special(s: Special) -> usize {
        s as usize
    }

    pub fn int(&self, k: usize) -> Result<usize, DecoderError> {
        if k < self.int_tokens {
            Ok(SPECIAL_COUNT + k)
        } else {
            Err(DecoderError::TokenOutOfRange { value: k, bound: self.int_tokens })
        }
    }

    pub fn as_int(&self, token: usize) -> Option<usize> {
        (SPECIAL_COUNT..self.size()).contains(&token).then(|| token - SPECIAL_COUNT)
    }

    pub fn name(&self, token: usize) -> String {
        match self.as_int(token) {
            Some(k) => k.to_string(),
            None => SPECIAL_NAMES.get(token).map_or_else(|| format!("<{token}>"), |s| s.to_string()),
        }
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.name(t)).collect::<Vec<_>>().join(" ")
    }
}

/// Prompt templates. The text is documentation only; each template is a
/// learned marker token placed around the query rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Template {
    /// "When can we see the …?"
    Ground,
    /// "Is … present? Answer yes or no."
    Present,
    /// "In which video can we see the …?"
    Which,
}

impl Template {
    pub fn marker(self) -> usize {
        match self {
            Template::Ground => Special::When as usize,
            Template::Present => Special::Ask as usize,
            Template::Which => Special::Which as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Answer {
    Boundary(usize, usize),
    NotPresent,
    Yes,
    No,
    VideoIndex(usize),
}

impl Answer {
    /// Token sequence including the closing `DOT EOS`.
    pub fn tokens(&self, vocab: &Vocab) -> Result<Vec<usize>, DecoderError> {
        use Special::*;
        let sp = |s: Special| s as usize;
        let mut t = match *self {
            Answer::Boundary(s, e) => vec![sp(From), vocab.int(s)?, sp(To), vocab.int(e)?],
            Answer::NotPresent => vec![sp(Not), sp(Present)],
            Answer::Yes => vec![sp(Yes)],
            Answer::No => vec![sp(No)],
            Answer::VideoIndex(v) => vec![sp(In), sp(Video), vocab.int(v)?],
        };
        t.extend([sp(Dot), sp(Eos)]);
        Ok(t)
    }

    pub fn is_affirmative(&self) -> bool {
        matches!(self, Answer::Boundary(..) | Answer::Yes | Answer::VideoIndex(_))
    }
}

/// Exact-grammar parse. A trailing `EOS` is optional; anything after it is
/// malformed.
pub fn parse_answer(tokens: &[usize], vocab: &Vocab) -> Result<Answer, DecoderError> {
    use Special::*;
    let bad = || DecoderError::MalformedAnswer(vocab.render(tokens));
    let body = match tokens.iter().position(|&t| t == Eos as usize) {
        Some(p) if p + 1 == tokens.len() => &tokens[..p],
        Some(_) => return Err(bad()),
        None => tokens,
    };
    let is = |t: usize, s: Special| t == s as usize;
    let int = |t: usize| vocab.as_int(t);
    match body {
        [f, s, t, e, d] if is(*f, From) && is(*t, To) && is(*d, Dot) => match (int(*s), int(*e)) {
            (Some(s), Some(e)) if s <= e => Ok(Answer::Boundary(s, e)),
            _ => Err(bad()),
        },
        [n, p, d] if is(*n, Not) && is(*p, Present) && is(*d, Dot) => Ok(Answer::NotPresent),
        [y, d] if is(*y, Yes) && is(*d, Dot) => Ok(Answer::Yes),
        [n, d] if is(*n, No) && is(*d, Dot) => Ok(Answer::No),
        [i, v, k, d] if is(*i, In) && is(*v, Video) && is(*d, Dot) => int(*k).map(Answer::VideoIndex).ok_or_else(bad),
        _ => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar() {
        let v = Vocab::new(256);
        let i = |k| v.int(k).unwrap();
        let sp = |s: Special| s as usize;
        let toks = [sp(Special::From), i(12), sp(Special::To), i(40), sp(Special::Dot)];
        assert_eq!(parse_answer(&toks, &v).unwrap(), Answer::Boundary(12, 40));
        let toks = [sp(Special::Not), sp(Special::Present), sp(Special::Dot)];
        assert_eq!(parse_answer(&toks, &v).unwrap(), Answer::NotPresent);
        let toks = [sp(Special::From), i(40), sp(Special::To), i(12), sp(Special::Dot)];
        assert!(matches!(parse_answer(&toks, &v), Err(DecoderError::MalformedAnswer(_))));
        assert!(parse_answer(&[], &v).is_err());
        assert!(parse_answer(&[sp(Special::Yes), sp(Special::Eos), sp(Special::Dot)], &v).is_err());
    }

    #[test]
    fn tokens_round_trip() {
        let v = Vocab::new(64);
        for a in [Answer::Boundary(3, 7), Answer::NotPresent, Answer::Yes, Answer::No, Answer::VideoIndex(19)] {
            assert_eq!(parse_answer(&a.tokens(&v).unwrap(), &v).unwrap(), a);
        }
        assert!(Answer::Boundary(0, 64).tokens(&v).is_err());
    }
}
