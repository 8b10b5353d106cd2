use crate::corpus::{encode_query, AbbrevExample};
use crate::error::{CoreError, Result};
use crate::text::{Vocab, ABBR, BOS, EOS, SEP};

/// Token prefix ending at the query's `<sep>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FewShotPrompt {
    pub token_ids: Vec<usize>,
    /// Demonstrations that survived the budget, nearest first.
    pub shots: usize,
}

fn demo_block(vocab: &Vocab, ex: &AbbrevExample) -> Result<Vec<usize>> {
    let mut ids = vec![ABBR];
    ids.extend(vocab.encode_str(&ex.abbreviation)?);
    ids.push(SEP);
    ids.extend(vocab.encode_str(&ex.expansion)?);
    ids.push(EOS);
    Ok(ids)
}

/// `<bos>` + demonstrations + `<abbr> query <sep>`.
///
/// `neighbors` are given nearest first; they are laid out farthest first so
/// the nearest sits right before the query. Farthest demonstrations are
/// dropped until the prefix fits `max_context_chars` tokens.
pub fn build_fewshot_prompt(
    neighbors: &[&AbbrevExample],
    query_abbrev: &str,
    max_context_chars: usize,
) -> Result<FewShotPrompt> {
    if neighbors.is_empty() {
        return Err(CoreError::InvalidArgument("few-shot prompt needs a neighbor".into()));
    }
    let vocab = Vocab::default();
    let query = encode_query(query_abbrev, None)?;
    let blocks: Vec<Vec<usize>> = neighbors
        .iter()
        .map(|e| demo_block(&vocab, e))
        .collect::<Result<_>>()?;
    // `query` already starts with <bos>.
    let mut used = query.len();
    let mut shots = 0;
    for b in &blocks {
        if used + b.len() > max_context_chars {
            break;
        }
        used += b.len();
        shots += 1;
    }
    if shots == 0 {
        return Err(CoreError::ContextOverflow {
            len: query.len() + blocks[0].len(),
            limit: max_context_chars,
        });
    }
    let mut token_ids = Vec::with_capacity(used);
    token_ids.push(BOS);
    for b in blocks[..shots].iter().rev() {
        token_ids.extend_from_slice(b);
    }
    token_ids.extend_from_slice(&query[1..]);
    Ok(FewShotPrompt { token_ids, shots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Source;

    fn ex(text: &str) -> AbbrevExample {
        AbbrevExample::from_text(text, None, 0, "u", Source::SyntheticUser).unwrap()
    }

    fn decode(ids: &[usize]) -> String {
        Vocab::default().decode(ids).unwrap()
    }

    #[test]
    fn one_neighbor() {
        let n = ex("i love that robin");
        let p = build_fewshot_prompt(&[&n], "i l t r", 512).unwrap();
        assert_eq!(
            decode(&p.token_ids),
            "<bos><abbr>i l t r<sep>i love that robin<eos><abbr>i l t r<sep>"
        );
        assert_eq!(*p.token_ids.last().unwrap(), SEP);
    }

    #[test]
    fn nearest_is_last_and_budget_drops_farthest() {
        let shots = [ex("aa bb"), ex("cc dd"), ex("ee ff"), ex("gg hh")];
        let refs: Vec<&AbbrevExample> = shots.iter().collect();
        // each block: <abbr> "a b" <sep> "aa bb" <eos> = 1+3+1+5+1 = 11; query 1+1+3+1 = 6
        let p = build_fewshot_prompt(&refs, "x y", 6 + 2 * 11).unwrap();
        assert_eq!(p.shots, 2);
        assert_eq!(
            decode(&p.token_ids),
            "<bos><abbr>c d<sep>cc dd<eos><abbr>a b<sep>aa bb<eos><abbr>x y<sep>"
        );
        assert!(build_fewshot_prompt(&refs, "x y", 16).is_err());
    }
}
