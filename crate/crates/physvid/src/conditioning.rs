//! Text conditioning carried alongside a video: one global caption plus one
//! caption per time chunk, and optionally a counterfactual set of chunk
//! captions used as the guidance negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Vocab;

/// Tokenized prompts for one video. Lengths are fixed: the global prompt is
/// `global_len` tokens, each of the `chunks` local prompts is `local_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningBundle {
    pub global_ids: Vec<usize>,
    pub global_mask: Vec<bool>,
    pub local_ids: Vec<Vec<usize>>,
    pub local_masks: Vec<Vec<bool>>,
    /// Counterfactual chunk captions (contradicting the true dynamics), used
    /// by guidance as the thing to steer away from.
    #[serde(default)]
    pub negative_local_ids: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub negative_local_masks: Option<Vec<Vec<bool>>>,
}

impl ConditioningBundle {
    /// Tokenize caption strings. `negative_locals`, when given, must have one
    /// entry per chunk.
    pub fn from_captions(
        vocab: &Vocab,
        global: &str,
        locals: &[String],
        negative_locals: Option<&[String]>,
        global_len: usize,
        local_len: usize,
    ) -> Result<Self> {
        let (global_ids, global_mask) = vocab.encode(global, global_len);
        let mut local_ids = Vec::with_capacity(locals.len());
        let mut local_masks = Vec::with_capacity(locals.len());
        for text in locals {
            let (ids, mask) = vocab.encode(text, local_len);
            local_ids.push(ids);
            local_masks.push(mask);
        }
        let (negative_local_ids, negative_local_masks) = match negative_locals {
            Some(negs) => {
                if negs.len() != locals.len() {
                    return Err(Error::Input(format!(
                        "got {} counterfactual captions for {} chunks",
                        negs.len(),
                        locals.len()
                    )));
                }
                let mut nids = Vec::with_capacity(negs.len());
                let mut nmasks = Vec::with_capacity(negs.len());
                for text in negs {
                    let (ids, mask) = vocab.encode(text, local_len);
                    nids.push(ids);
                    nmasks.push(mask);
                }
                (Some(nids), Some(nmasks))
            }
            None => (None, None),
        };
        Ok(ConditioningBundle {
            global_ids,
            global_mask,
            local_ids,
            local_masks,
            negative_local_ids,
            negative_local_masks,
        })
    }

    /// Bundle with a blank global prompt and blank locals for every chunk.
    pub fn blank(vocab: &Vocab, chunks: usize, global_len: usize, local_len: usize) -> Self {
        let (global_ids, global_mask) = vocab.blank_prompt(global_len);
        let (bl_ids, bl_mask) = vocab.blank_prompt(local_len);
        ConditioningBundle {
            global_ids,
            global_mask,
            local_ids: vec![bl_ids; chunks],
            local_masks: vec![bl_mask; chunks],
            negative_local_ids: None,
            negative_local_masks: None,
        }
    }

    pub fn chunks(&self) -> usize {
        self.local_ids.len()
    }

    pub fn has_negatives(&self) -> bool {
        self.negative_local_ids.is_some()
    }

    /// Check the bundle against expected geometry and internal consistency.
    pub fn validate(&self, chunks: usize, global_len: usize, local_len: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Input(msg));
        if self.global_ids.len() != global_len || self.global_mask.len() != global_len {
            return fail(format!(
                "global prompt has {} ids / {} mask bits, expected {global_len}",
                self.global_ids.len(),
                self.global_mask.len()
            ));
        }
        if self.local_ids.len() != chunks || self.local_masks.len() != chunks {
            return fail(format!(
                "bundle has {} local prompts, expected {chunks}",
                self.local_ids.len()
            ));
        }
        for (c, (ids, mask)) in self.local_ids.iter().zip(&self.local_masks).enumerate() {
            if ids.len() != local_len || mask.len() != local_len {
                return fail(format!("chunk {c} prompt length != {local_len}"));
            }
            if !mask.iter().any(|&m| m) {
                return fail(format!("chunk {c} prompt has no live tokens"));
            }
        }
        if !self.global_mask.iter().any(|&m| m) {
            return fail("global prompt has no live tokens".into());
        }
        match (&self.negative_local_ids, &self.negative_local_masks) {
            (None, None) => {}
            (Some(nids), Some(nmasks)) => {
                if nids.len() != chunks || nmasks.len() != chunks {
                    return fail(format!(
                        "bundle has {} counterfactual prompts, expected {chunks}",
                        nids.len()
                    ));
                }
                for (c, (ids, mask)) in nids.iter().zip(nmasks).enumerate() {
                    if ids.len() != local_len || mask.len() != local_len {
                        return fail(format!("counterfactual chunk {c} length != {local_len}"));
                    }
                    if !mask.iter().any(|&m| m) {
                        return fail(format!("counterfactual chunk {c} has no live tokens"));
                    }
                }
            }
            _ => {
                return fail("counterfactual ids and masks must be present together".into());
            }
        }
        Ok(())
    }

    /// The positive conditioning: global + true locals, negatives dropped.
    pub fn positive_half(&self) -> ConditioningBundle {
        ConditioningBundle {
            negative_local_ids: None,
            negative_local_masks: None,
            ..self.clone()
        }
    }

    /// The guidance negative built from counterfactual locals. Errors if the
    /// bundle carries none.
    pub fn negative_half(&self) -> Result<ConditioningBundle> {
        let (ids, masks) = match (&self.negative_local_ids, &self.negative_local_masks) {
            (Some(i), Some(m)) => (i.clone(), m.clone()),
            _ => {
                return Err(Error::Contract(
                    "guidance requested counterfactual negatives but the bundle has none".into(),
                ))
            }
        };
        Ok(ConditioningBundle {
            global_ids: self.global_ids.clone(),
            global_mask: self.global_mask.clone(),
            local_ids: ids,
            local_masks: masks,
            negative_local_ids: None,
            negative_local_masks: None,
        })
    }

    /// The guidance negative with every local prompt blanked (global kept).
    pub fn blank_local_half(&self, vocab: &Vocab) -> ConditioningBundle {
        let local_len = self.local_ids.first().map_or(0, Vec::len);
        let (bl_ids, bl_mask) = vocab.blank_prompt(local_len);
        ConditioningBundle {
            global_ids: self.global_ids.clone(),
            global_mask: self.global_mask.clone(),
            local_ids: vec![bl_ids; self.chunks()],
            local_masks: vec![bl_mask; self.chunks()],
            negative_local_ids: None,
            negative_local_masks: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(vocab: &Vocab) -> ConditioningBundle {
        let locals: Vec<String> = (0..3).map(|i| format!("the ball falls {i}")).collect();
        let negs: Vec<String> = (0..3).map(|_| "the ball rises".to_string()).collect();
        ConditioningBundle::from_captions(vocab, "a red ball in a box", &locals, Some(&negs), 8, 6)
            .unwrap()
    }

    #[test]
    fn round_trips_through_json() {
        let vocab = Vocab::standard();
        let b = sample(&vocab);
        b.validate(3, 8, 6).unwrap();
        let text = serde_json::to_string(&b).unwrap();
        let back: ConditioningBundle = serde_json::from_str(&text).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn validate_rejects_wrong_geometry() {
        let vocab = Vocab::standard();
        let b = sample(&vocab);
        assert!(b.validate(4, 8, 6).is_err());
        assert!(b.validate(3, 9, 6).is_err());
        assert!(b.validate(3, 8, 5).is_err());
    }

    #[test]
    fn halves_select_the_right_locals() {
        let vocab = Vocab::standard();
        let b = sample(&vocab);
        let pos = b.positive_half();
        assert_eq!(pos.local_ids, b.local_ids);
        assert!(!pos.has_negatives());
        let neg = b.negative_half().unwrap();
        assert_eq!(neg.local_ids, b.negative_local_ids.clone().unwrap());
        assert_eq!(neg.global_ids, b.global_ids);

        let no_neg = pos.negative_half();
        assert!(no_neg.is_err());
    }

    #[test]
    fn blank_local_half_keeps_global() {
        let vocab = Vocab::standard();
        let b = sample(&vocab);
        let blanked = b.blank_local_half(&vocab);
        assert_eq!(blanked.global_ids, b.global_ids);
        for (ids, mask) in blanked.local_ids.iter().zip(&blanked.local_masks) {
            assert_eq!(ids[0], crate::text::BLANK_ID);
            assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
        }
    }

    #[test]
    fn blank_bundle_validates() {
        let vocab = Vocab::standard();
        let b = ConditioningBundle::blank(&vocab, 7, 16, 16);
        b.validate(7, 16, 16).unwrap();
    }
}
