//! Central finite-difference validation of analytic gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{GradStore, ParamSet};

/// Worst relative error observed within one parameter block.
#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

/// Compares an analytic gradient against central finite differences
/// `(L(p+h) - L(p-h)) / 2h`, entry by entry, over at most
/// `max_entries_per_block` randomly chosen entries of each block (all
/// entries when the block is small enough). Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-6)`: the floor absorbs the
/// differencing noise of roughly `ulp(loss) / 2h` that dominates entries
/// whose true gradient is near zero, while leaving any training-relevant
/// discrepancy visible.
///
/// `loss` must be a pure function of the parameter values; it is invoked
/// twice per checked entry and the entry is restored bit-exactly afterwards.
pub fn finite_diff_check<F>(
    params: &mut ParamSet,
    analytic: &GradStore,
    mut loss: F,
    h: f64,
    max_entries_per_block: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<BlockCheck>
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut report = Vec::new();
    for id in params.ids().collect::<Vec<_>>() {
        let len = params.value(id).len();
        let picks: Vec<usize> = if len <= max_entries_per_block {
            (0..len).collect()
        } else {
            let mut seen = std::collections::BTreeSet::new();
            while seen.len() < max_entries_per_block {
                seen.insert(rng.random_range(0..len));
            }
            seen.into_iter().collect()
        };

        let mut max_rel = 0.0f64;
        for &i in &picks {
            let original = params.value(id).as_slice()[i];
            params.get_mut(id).value.as_mut_slice()[i] = original + h;
            let up = loss(params);
            params.get_mut(id).value.as_mut_slice()[i] = original - h;
            let down = loss(params);
            params.get_mut(id).value.as_mut_slice()[i] = original;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).as_slice()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        report.push(BlockCheck {
            name: params.name(id).to_string(),
            max_rel_err: max_rel,
            entries_checked: picks.len(),
        });
    }
    report
}

/// The block with the largest relative error in a check report.
pub fn worst_block(report: &[BlockCheck]) -> &BlockCheck {
    report
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("empty gradient check report")
}
