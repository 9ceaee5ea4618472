use std::collections::BTreeSet;

use rand::Rng;

use super::{CharId, Corpus, GlyphImage, StyleId};
use crate::error::{ensure, Result};

/// One training sample: canonical source, styled target and same-style
/// references that never include the target character.
#[derive(Debug, Clone)]
pub struct Episode {
    pub source: GlyphImage,
    pub target: GlyphImage,
    pub references: Vec<GlyphImage>,
}

impl Episode {
    pub fn reference_ids(&self) -> Vec<CharId> {
        self.references.iter().map(|r| r.char_id).collect()
    }
}

/// Samples an episode drawing references from every character of the corpus.
pub fn sample_episode(
    corpus: &Corpus,
    style_id: StyleId,
    target_char_id: CharId,
    n_refs: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    sample_episode_from(
        corpus,
        &corpus.manifest.chars,
        style_id,
        target_char_id,
        n_refs,
        rng,
    )
}

/// Samples an episode with references restricted to `pool`.
pub fn sample_episode_from(
    corpus: &Corpus,
    pool: &[CharId],
    style_id: StyleId,
    target_char_id: CharId,
    n_refs: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    ensure!(
        style_id != corpus.manifest.canonical_style_id,
        Validation,
        "style {style_id} is the canonical style and cannot be a target"
    );
    ensure!(n_refs >= 1, Validation, "need at least one reference");
    let candidates: Vec<CharId> = pool
        .iter()
        .copied()
        .filter(|&c| c != target_char_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ensure!(
        n_refs <= candidates.len(),
        Validation,
        "requested {n_refs} references but only {} non-target characters exist",
        candidates.len()
    );
    let picks = rand::seq::index::sample(rng, candidates.len(), n_refs);
    let references = picks
        .iter()
        .map(|i| corpus.image(style_id, candidates[i]).cloned())
        .collect::<Result<Vec<_>>>()?;
    Ok(Episode {
        source: corpus.canonical(target_char_id)?.clone(),
        target: corpus.image(style_id, target_char_id)?.clone(),
        references,
    })
}

/// A fine-tuning sample carved out of the few-shot reference set.
#[derive(Debug, Clone)]
pub struct FinetunePair<'a> {
    pub target: &'a GlyphImage,
    pub references: Vec<&'a GlyphImage>,
}

pub fn finetune_pair_count(n: usize) -> usize {
    if n == 0 {
        0
    } else {
        n * ((1usize << (n - 1)) - 1)
    }
}

/// Every (target, non-empty subset of the others) combination.
///
/// Order: targets in input order, then subsets by ascending bitmask over
/// the remaining references (in input order).
pub fn enumerate_finetune_pairs(refs: &[GlyphImage]) -> Result<Vec<FinetunePair<'_>>> {
    ensure!(!refs.is_empty(), Validation, "need at least one reference");
    ensure!(
        refs.len() < usize::BITS as usize,
        Validation,
        "{} references is too many to enumerate",
        refs.len()
    );
    let style = refs[0].style_id;
    ensure!(
        refs.iter().all(|r| r.style_id == style),
        Validation,
        "references must share one style"
    );
    let ids: BTreeSet<CharId> = refs.iter().map(|r| r.char_id).collect();
    ensure!(
        ids.len() == refs.len(),
        Validation,
        "duplicate char ids among references"
    );
    let n = refs.len();
    let mut pairs = Vec::with_capacity(finetune_pair_count(n));
    for t in 0..n {
        let others: Vec<&GlyphImage> = (0..n).filter(|&i| i != t).map(|i| &refs[i]).collect();
        for mask in 1u64..(1u64 << others.len()) {
            let subset = others
                .iter()
                .enumerate()
                .filter(|(j, _)| mask & (1 << j) != 0)
                .map(|(_, r)| *r)
                .collect();
            pairs.push(FinetunePair {
                target: &refs[t],
                references: subset,
            });
        }
    }
    Ok(pairs)
}
