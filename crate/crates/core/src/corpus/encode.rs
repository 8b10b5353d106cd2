//! Token framing of examples.
//!
//! `<bos> [<ctx> context] <abbr> abbreviation <sep> expansion <eos>` — only the
//! expansion and the closing `<eos>` carry loss.

use serde::{Deserialize, Serialize};

use super::AbbrevExample;
use crate::error::{CoreError, Result};
use crate::text::{Vocab, ABBR, BOS, CTX, EOS, SEP};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub token_ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    /// Characters of (context, abbreviation, expansion).
    pub lengths: (usize, usize, usize),
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// The frame rendered as text, control tokens spelled out.
pub fn framed_text(example: &AbbrevExample, include_context: bool) -> String {
    let mut s = String::from("<bos>");
    if let (true, Some(c)) = (include_context, &example.context) {
        s.push_str("<ctx>");
        s.push_str(c);
    }
    s.push_str("<abbr>");
    s.push_str(&example.abbreviation);
    s.push_str("<sep>");
    s.push_str(&example.expansion);
    s.push_str("<eos>");
    s
}

/// Prefix up to and including `<sep>`, the decoder's starting point.
pub fn encode_query(abbreviation: &str, context: Option<&str>) -> Result<Vec<usize>> {
    let vocab = Vocab::default();
    let mut ids = vec![BOS];
    if let Some(c) = context.filter(|c| !c.is_empty()) {
        ids.push(CTX);
        ids.extend(vocab.encode_str(c)?);
    }
    ids.push(ABBR);
    ids.extend(vocab.encode_str(abbreviation)?);
    ids.push(SEP);
    Ok(ids)
}

pub fn encode_example(
    example: &AbbrevExample,
    include_context: bool,
    max_context: usize,
) -> Result<EncodedSequence> {
    let vocab = Vocab::default();
    let context = if include_context {
        example.context.as_deref()
    } else {
        None
    };
    let mut token_ids = encode_query(&example.abbreviation, context)?;
    let prefix = token_ids.len();
    let expansion = vocab.encode_str(&example.expansion)?;
    let exp_len = expansion.len();
    token_ids.extend(expansion);
    token_ids.push(EOS);
    if token_ids.len() > max_context {
        return Err(CoreError::ContextOverflow {
            len: token_ids.len(),
            limit: max_context,
        });
    }
    let loss_mask = (0..token_ids.len()).map(|i| i >= prefix).collect();
    Ok(EncodedSequence {
        token_ids,
        loss_mask,
        lengths: (
            context.map_or(0, |c| c.chars().count()),
            example.abbreviation.chars().count(),
            exp_len,
        ),
    })
}
