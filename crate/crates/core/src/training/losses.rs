use crate::error::{Error, Result};
use crate::model::SutraPipeline;
use crate::numerics::{Graph, Var};

/// Both terms of the alignment objective. `contrast` is `None` when the
/// batch is too small to have negatives.
#[derive(Clone, Copy, Debug)]
pub struct AlignmentTerms {
    pub total: Var,
    pub cosine: Var,
    pub contrast: Option<Var>,
}

/// Cosine pull between parallel rows of `a` and `b`, plus a margin hinge
/// against the hardest in-batch negative of each row of `a`.
///
/// The hardest negative is chosen on the forward values and treated as a
/// constant selection, like expert routing.
pub fn alignment_loss(g: &mut Graph, a: Var, b: Var, margin: f64, lambda_contrast: f64) -> Result<AlignmentTerms> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sa != sb || sa[0] == 0 {
        return Err(Error::Shape(format!("alignment batches {sa:?} and {sb:?}")));
    }
    let n = sa[0];
    let an = g.row_normalize(a);
    let bn = g.row_normalize(b);
    let sims = g.matmul_nt(an, bn)?;
    let diag_idx: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let diag = g.pick(sims, &diag_idx)?;
    let mean_diag = g.mean(diag);
    let neg = g.scale(mean_diag, -1.0);
    let cosine = g.add_scalar(neg, 1.0);
    if n < 2 {
        return Ok(AlignmentTerms {
            total: cosine,
            cosine,
            contrast: None,
        });
    }
    let s = g.value(sims).data();
    let hardest: Vec<usize> = (0..n)
        .map(|i| {
            let row = &s[i * n..(i + 1) * n];
            let mut best = if i == 0 { 1 } else { 0 };
            for j in 0..n {
                if j != i && row[j] > row[best] {
                    best = j;
                }
            }
            i * n + best
        })
        .collect();
    let negs = g.pick(sims, &hardest)?;
    let gap = g.sub(negs, diag)?;
    let shifted = g.add_scalar(gap, margin);
    let hinge = g.relu(shifted);
    let contrast = g.mean(hinge);
    let weighted = g.scale(contrast, lambda_contrast);
    let total = g.add(cosine, weighted)?;
    Ok(AlignmentTerms {
        total,
        cosine,
        contrast: Some(contrast),
    })
}

/// One teacher-forced sequence-to-sequence example.
#[derive(Clone, Debug, PartialEq)]
pub struct TranslationExample {
    pub source: Vec<u32>,
    pub source_lang: usize,
    /// `[BOS] + target`.
    pub target_input: Vec<u32>,
    /// `target + [EOS]`.
    pub target_labels: Vec<u32>,
    pub target_lang: usize,
}

impl TranslationExample {
    pub fn new(p: &SutraPipeline, source: &str, source_lang: usize, target: &str, target_lang: usize) -> Self {
        let (target_input, target_labels) = p.target_ids(target);
        Self {
            source: p.source_ids(source),
            source_lang,
            target_input,
            target_labels,
            target_lang,
        }
    }
}

/// Token-averaged cross-entropy of the targets through encoder, concept
/// stack and decoder.
pub fn translation_loss(g: &mut Graph, p: &SutraPipeline, batch: &[TranslationExample]) -> Result<Var> {
    let src: Vec<(&[u32], usize)> = batch.iter().map(|e| (e.source.as_slice(), e.source_lang)).collect();
    let (enc, mem) = p.encode(g, &src)?;
    translation_loss_from_encoding(g, p, batch, enc, &mem)
}

pub(crate) fn translation_loss_from_encoding(
    g: &mut Graph,
    p: &SutraPipeline,
    batch: &[TranslationExample],
    enc: Var,
    mem: &crate::model::Packed,
) -> Result<Var> {
    let concepts = p.concept_transform(g, enc, mem)?;
    let tgt: Vec<(&[u32], usize)> = batch
        .iter()
        .map(|e| (e.target_input.as_slice(), e.target_lang))
        .collect();
    let (logits, _) = p.decode(g, concepts.hidden, mem, &tgt)?;
    let labels: Vec<usize> = batch
        .iter()
        .flat_map(|e| e.target_labels.iter().map(|&t| t as usize))
        .collect();
    g.cross_entropy(logits, &labels)
}
