//! Greedy subset searches over candidate indices `0..n`.
//!
//! Candidates are expected in lexicographic feature-id order, so scanning in
//! ascending index with a strict `<` gives the lexicographic tie-break.

use log::warn;
use serde::{Deserialize, Serialize};

/// A loss over subsets of candidate indices.
///
/// The incremental methods exist so implementations can reuse work for the
/// base subset; the defaults just evaluate the full subset.
pub trait SubsetLoss {
    fn loss(&mut self, subset: &[usize]) -> f64;

    fn loss_with_added(&mut self, base: &[usize], extra: usize) -> f64 {
        let mut s = base.to_vec();
        s.push(extra);
        self.loss(&s)
    }

    fn loss_with_removed(&mut self, base: &[usize], removed: usize) -> f64 {
        let s: Vec<usize> = base.iter().copied().filter(|&i| i != removed).collect();
        self.loss(&s)
    }
}

impl<F: FnMut(&[usize]) -> f64> SubsetLoss for F {
    fn loss(&mut self, subset: &[usize]) -> f64 {
        self(subset)
    }
}

/// One outer iteration of the forward-backward search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FobaIteration {
    pub added: usize,
    pub forward_gain: f64,
    pub loss_after_forward: f64,
    pub removed: Vec<usize>,
    pub loss_after_purge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Selected candidates in the order they were (last) added.
    pub selected: Vec<usize>,
    pub loss: f64,
    pub initial_loss: f64,
    /// Forward steps attempted (forward and FoBa) or removals attempted
    /// (backward).
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<FobaIteration>,
}

fn best_addition<L: SubsetLoss + ?Sized>(
    n: usize,
    selected: &[usize],
    loss: &mut L,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for beta in 0..n {
        if selected.contains(&beta) {
            continue;
        }
        let l = loss.loss_with_added(selected, beta);
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((beta, l));
        }
    }
    best
}

fn best_removal<L: SubsetLoss + ?Sized>(selected: &[usize], loss: &mut L) -> Option<(usize, f64)> {
    let mut order: Vec<usize> = selected.to_vec();
    order.sort_unstable();
    let mut best: Option<(usize, f64)> = None;
    for beta in order {
        let l = loss.loss_with_removed(selected, beta);
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((beta, l));
        }
    }
    best
}

/// Forward greedy search. Adds the best candidate while the loss drops by
/// more than `epsilon`; the addition that fails the test is discarded. Stops
/// once `k_max` features are held.
pub fn forward_search<L: SubsetLoss + ?Sized>(
    n: usize,
    loss: &mut L,
    epsilon: f64,
    k_max: usize,
) -> SearchOutcome {
    let mut selected = Vec::new();
    let initial_loss = loss.loss(&selected);
    let mut current = initial_loss;
    let mut iterations = 0;
    while selected.len() < k_max {
        let Some((beta, l)) = best_addition(n, &selected, loss) else {
            break;
        };
        iterations += 1;
        if current - l <= epsilon {
            break;
        }
        selected.push(beta);
        current = l;
    }
    SearchOutcome {
        selected,
        loss: current,
        initial_loss,
        iterations,
        trace: Vec::new(),
    }
}

/// Backward greedy search from the full candidate set. Removes the candidate
/// whose removal hurts least; a removal that raises the loss by `phi` or more
/// is undone and ends the search. Also stops once `k_min` features remain.
pub fn backward_search<L: SubsetLoss + ?Sized>(
    n: usize,
    loss: &mut L,
    phi: f64,
    k_min: usize,
) -> SearchOutcome {
    let mut selected: Vec<usize> = (0..n).collect();
    let initial_loss = loss.loss(&[]);
    let mut current = loss.loss(&selected);
    let mut iterations = 0;
    while selected.len() > k_min.max(1) {
        let Some((beta, l)) = best_removal(&selected, loss) else {
            break;
        };
        iterations += 1;
        if l - current >= phi {
            break;
        }
        selected.retain(|&i| i != beta);
        current = l;
    }
    SearchOutcome {
        selected,
        loss: current,
        initial_loss,
        iterations,
        trace: Vec::new(),
    }
}

/// Upper bound on FoBa forward steps: `ceil(1 + L(∅) / (nu * epsilon))`.
pub fn foba_step_bound(initial_loss: f64, nu: f64, epsilon: f64) -> usize {
    (1.0 + initial_loss / (nu * epsilon)).ceil() as usize
}

/// Adaptive forward-backward greedy search.
///
/// Each forward step must reduce the loss by more than `epsilon`. After it,
/// features are purged one at a time while a removal raises the loss by at
/// most `nu` times the forward gain, and the purge as a whole gives back at
/// most that much. Every completed iteration therefore lowers the loss by at
/// least `(1 - nu) * epsilon`.
pub fn foba_search<L: SubsetLoss + ?Sized>(
    n: usize,
    loss: &mut L,
    epsilon: f64,
    nu: f64,
) -> SearchOutcome {
    let mut selected: Vec<usize> = Vec::new();
    let initial_loss = loss.loss(&selected);
    let mut current = initial_loss;
    let cap = foba_step_bound(initial_loss, nu, epsilon);
    let mut iterations = 0;
    let mut trace = Vec::new();
    loop {
        if iterations >= cap {
            warn!("forward-backward search hit its step bound ({cap})");
            break;
        }
        let Some((beta, l)) = best_addition(n, &selected, loss) else {
            break;
        };
        iterations += 1;
        let gain = current - l;
        if gain <= epsilon {
            break;
        }
        selected.push(beta);
        current = l;
        let after_forward = current;
        let budget = nu * gain;
        let mut removed = Vec::new();
        while selected.len() > 1 {
            let Some((r, lr)) = best_removal(&selected, loss) else {
                break;
            };
            if lr - current > budget || lr - after_forward > budget {
                break;
            }
            selected.retain(|&i| i != r);
            current = lr;
            removed.push(r);
        }
        trace.push(FobaIteration {
            added: beta,
            forward_gain: gain,
            loss_after_forward: after_forward,
            removed,
            loss_after_purge: current,
        });
    }
    SearchOutcome {
        selected,
        loss: current,
        initial_loss,
        iterations,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    /// Loss looked up from a table keyed by the sorted subset.
    fn table(entries: &[(&[usize], f64)], default: f64) -> impl FnMut(&[usize]) -> f64 {
        let t: BTreeMap<Vec<usize>, f64> = entries
            .iter()
            .map(|(k, v)| {
                let mut k = k.to_vec();
                k.sort_unstable();
                (k, *v)
            })
            .collect();
        move |s: &[usize]| {
            let mut k = s.to_vec();
            k.sort_unstable();
            *t.get(&k).unwrap_or(&default)
        }
    }

    #[test]
    fn forward_hand_trace() {
        // A = 0, B = 1: L(∅)=5, L(A)=1, L(B)=4, L(AB)=0.9
        let mut l = table(&[(&[], 5.0), (&[0], 1.0), (&[1], 4.0), (&[0, 1], 0.9)], 9.0);
        let out = forward_search(2, &mut l, 0.05, 10);
        assert_eq!(out.selected, [0, 1]);
        assert_eq!(out.loss, 0.9);
        // with epsilon above 0.1 the second addition is discarded
        let out = forward_search(2, &mut l, 0.2, 10);
        assert_eq!(out.selected, [0]);
        assert_eq!(out.loss, 1.0);
    }

    #[test]
    fn forward_large_epsilon_selects_nothing() {
        let mut l = table(&[(&[], 5.0), (&[0], 1.0), (&[1], 4.0)], 9.0);
        let out = forward_search(2, &mut l, 10.0, 10);
        assert!(out.selected.is_empty());
        assert_eq!(out.loss, 5.0);
    }

    #[test]
    fn forward_respects_k_max_and_ties() {
        let mut l = |s: &[usize]| 10.0 - s.len() as f64;
        let out = forward_search(5, &mut l, 0.1, 3);
        // equal gains: lowest index wins each step
        assert_eq!(out.selected, [0, 1, 2]);
    }

    #[test]
    fn backward_unconstrained_reaches_singleton() {
        let mut l = |s: &[usize]| s.iter().map(|&i| i as f64).sum::<f64>();
        let out = backward_search(5, &mut l, f64::INFINITY, 1);
        assert_eq!(out.selected.len(), 1);
        // removing the largest index lowers loss most; 0 survives
        assert_eq!(out.selected, [0]);
    }

    #[test]
    fn backward_tiny_phi_keeps_everything() {
        let mut l = |s: &[usize]| 10.0 - s.len() as f64;
        let out = backward_search(4, &mut l, 1e-12, 1);
        assert_eq!(out.selected, [0, 1, 2, 3]);
    }

    #[test]
    fn foba_removes_displaced_feature() {
        // C = 2 is the best singleton, but A + B beats every set holding C.
        let mut l = table(
            &[
                (&[], 10.0),
                (&[0], 6.0),
                (&[1], 6.0),
                (&[2], 4.0),
                (&[0, 2], 3.0),
                (&[1, 2], 3.0),
                (&[0, 1], 1.0),
                (&[0, 1, 2], 1.5),
            ],
            10.0,
        );
        let fwd = forward_search(3, &mut l, 0.1, 10);
        assert_eq!(fwd.selected, [2, 0, 1]);
        assert_eq!(fwd.loss, 1.5);
        let fb = foba_search(3, &mut l, 0.1, 0.5);
        let mut s = fb.selected.clone();
        s.sort_unstable();
        assert_eq!(s, [0, 1]);
        assert_eq!(fb.loss, 1.0);
        assert!(fb.iterations <= foba_step_bound(10.0, 0.5, 0.1));
        for it in &fb.trace {
            assert!(it.loss_after_purge <= it.loss_after_forward + 0.5 * it.forward_gain);
        }
    }

    #[test]
    fn foba_equals_forward_without_interactions() {
        // additive, independent gains: the purge never fires
        let gains = [3.0, 2.0, 1.0, 0.05];
        let mut l = |s: &[usize]| 10.0 - s.iter().map(|&i| gains[i]).sum::<f64>();
        let fwd = forward_search(4, &mut l, 0.1, 10);
        let fb = foba_search(4, &mut l, 0.1, 0.5);
        assert_eq!(fwd.selected, fb.selected);
        assert_eq!(fwd.selected, [0, 1, 2]);
    }

    #[test]
    fn foba_zero_initial_loss_stops_at_once() {
        let mut l = |_: &[usize]| 0.0;
        let out = foba_search(3, &mut l, 0.1, 0.5);
        assert!(out.selected.is_empty());
        assert_eq!(out.iterations, 1);
    }
}
