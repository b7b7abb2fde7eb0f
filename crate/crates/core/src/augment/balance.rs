use serde::{Deserialize, Serialize};

use super::{AugmentError, AugmentOp, AugmentParamGrid};
use crate::dataset::AudioClip;
use crate::rng::{domain, stream};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBalance {
    pub class: String,
    pub original_count: usize,
    pub copies_per_original: usize,
    pub final_count: usize,
}

impl ClassBalance {
    /// Copies actually kept after truncation.
    pub fn needed_copies(&self) -> usize {
        self.final_count - self.original_count
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub max_c: usize,
    pub per_class: Vec<ClassBalance>,
}

impl BalancePlan {
    pub fn total(&self) -> usize {
        self.per_class.iter().map(|c| c.final_count).sum()
    }
}

/// `m_c = ⌈(max_c − n_c)/n_c⌉` copies per original; classes at or above
/// `max_c` keep their originals only.
pub fn build_balance_plan(classes: &[String], counts: &[usize], max_c: usize) -> Result<BalancePlan, AugmentError> {
    let per_class = classes
        .iter()
        .zip(counts)
        .map(|(class, &n)| {
            if n == 0 {
                return Err(AugmentError::EmptyClass(class.clone()));
            }
            let (m, fin) = if n < max_c { ((max_c - n).div_ceil(n), max_c) } else { (0, n) };
            Ok(ClassBalance {
                class: class.clone(),
                original_count: n,
                copies_per_original: m,
                final_count: fin,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(BalancePlan { max_c, per_class })
}

/// One clip of the balanced set: an original (`copy` and `op` empty) or an
/// augmented copy of `source_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceItem {
    pub source_id: usize,
    pub label: usize,
    pub copy: Option<usize>,
    pub op: Option<AugmentOp>,
}

impl BalanceItem {
    pub fn render(&self, clip: &AudioClip, seed: u64) -> Result<AudioClip, AugmentError> {
        match (self.op, self.copy) {
            (Some(op), Some(copy)) => op.apply(clip, &mut stream(seed, &[domain::BALANCE, self.source_id as u64, copy as u64, 1])),
            _ => Ok(clip.clone()),
        }
    }
}

/// Originals in input order, then each class's copies in (original, copy)
/// order, truncated to the plan's final count. Only kept copies are drawn.
pub fn plan_balance(
    clips: &[&AudioClip],
    labels: &[usize],
    ids: &[usize],
    plan: &BalancePlan,
    grid: &AugmentParamGrid,
    seed: u64,
) -> Result<Vec<BalanceItem>, AugmentError> {
    grid.validate()?;
    let mut items: Vec<BalanceItem> = ids
        .iter()
        .zip(labels)
        .map(|(&id, &label)| BalanceItem {
            source_id: id,
            label,
            copy: None,
            op: None,
        })
        .collect();
    for (c, cb) in plan.per_class.iter().enumerate() {
        let mut needed = cb.needed_copies();
        'sources: for (i, &l) in labels.iter().enumerate() {
            if l != c {
                continue;
            }
            for copy in 0..cb.copies_per_original {
                if needed == 0 {
                    break 'sources;
                }
                let mut rng = stream(seed, &[domain::BALANCE, ids[i] as u64, copy as u64]);
                items.push(BalanceItem {
                    source_id: ids[i],
                    label: c,
                    copy: Some(copy),
                    op: Some(grid.draw(&mut rng, clips[i].power() > 0.0)),
                });
                needed -= 1;
            }
        }
    }
    Ok(items)
}

/// Materialized balanced training set with its audit trail.
pub fn apply_balance(
    clips: &[&AudioClip],
    labels: &[usize],
    ids: &[usize],
    plan: &BalancePlan,
    grid: &AugmentParamGrid,
    seed: u64,
) -> Result<(Vec<AudioClip>, Vec<BalanceItem>), AugmentError> {
    let items = plan_balance(clips, labels, ids, plan, grid, seed)?;
    let pos = |id: usize| ids.iter().position(|&x| x == id).expect("item source comes from ids");
    let out = items
        .iter()
        .map(|it| it.render(clips[pos(it.source_id)], seed))
        .collect::<Result<_, _>>()?;
    Ok((out, items))
}
