//! Human-aware mixture of experts.
//!
//! The FFN slot of every block is `shared(x) + expert_k(x)`, where `shared`
//! is the block's original FFN and `k` is one of three light experts
//! (Head, Hand, Base). A two-layer router sees the hidden state through a
//! stop-gradient and is trained only by the routing cross-entropy.

use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{gelu, gelu_grad, softmax_row};
use crate::params::{Linear, ParamTable};
use crate::real::Real;
use crate::tokenization::{gather_rows, RegionLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// How generated tokens are dispatched during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DispatchTrain {
    Labels,
    Argmax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoeConfig {
    pub enabled: bool,
    pub expert_hidden: usize,
    pub router_hidden: usize,
    pub dispatch_train: DispatchTrain,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self { enabled: true, expert_hidden: 256, router_hidden: 64, dispatch_train: DispatchTrain::Labels }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug, Default)]
pub struct FfnTape<T> {
    pub pre: Vec<T>,
    pub act: Vec<T>,
}

impl Ffn {
    pub fn forward<T: Real>(&self, table: &ParamTable, params: &[T], x: &[T], rows: usize) -> (Vec<T>, FfnTape<T>) {
        let pre = self.fc1.forward(table, params, x, rows);
        let act: Vec<T> = pre.iter().map(|u| gelu(*u)).collect();
        let y = self.fc2.forward(table, params, &act, rows);
        (y, FfnTape { pre, act })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        table: &ParamTable,
        params: &[T],
        grads: &mut [T],
        x: &[T],
        tape: &FfnTape<T>,
        dy: &[T],
        rows: usize,
    ) -> Vec<T> {
        let mut da = self.fc2.backward(table, params, grads, &tape.act, dy, rows, true).unwrap_or_default();
        for (g, u) in da.iter_mut().zip(&tape.pre) {
            *g *= gelu_grad(*u);
        }
        self.fc1.backward(table, params, grads, x, &da, rows, true).unwrap_or_default()
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Router {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug, Default)]
pub struct RouteTape<T> {
    pub pre: Vec<T>,
    pub act: Vec<T>,
    /// `[rows, 3]` routing probabilities, columns in [`RegionLabel`] order.
    pub probs: Vec<T>,
}

impl Router {
    /// `G = softmax(W_g sg[h])`.
    pub fn route<T: Real>(&self, table: &ParamTable, params: &[T], h: &[T], rows: usize) -> RouteTape<T> {
        let pre = self.fc1.forward(table, params, h, rows);
        let act: Vec<T> = pre.iter().map(|u| gelu(*u)).collect();
        let logits = self.fc2.forward(table, params, &act, rows);
        let mut probs = vec![T::ZERO; rows * 3];
        for (lr, pr) in logits.chunks_exact(3).zip(probs.chunks_exact_mut(3)) {
            softmax_row(lr, pr);
        }
        RouteTape { pre, act, probs }
    }

    /// Accumulates router gradients from `dlogits`. The returned input
    /// gradient is identically zero: the router reads `sg[h]`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        table: &ParamTable,
        params: &[T],
        grads: &mut [T],
        h: &[T],
        tape: &RouteTape<T>,
        dlogits: &[T],
        rows: usize,
    ) -> Vec<T> {
        let mut da = self.fc2.backward(table, params, grads, &tape.act, dlogits, rows, true).unwrap_or_default();
        for (g, u) in da.iter_mut().zip(&tape.pre) {
            *g *= gelu_grad(*u);
        }
        self.fc1.backward(table, params, grads, h, &da, rows, false);
        vec![T::ZERO; h.len()]
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

/// Standalone routing on a raw `[n, 3]` logit buffer: `softmax` per row.
pub fn route<T: Real>(logits: &[T]) -> Vec<T> {
    let mut probs = vec![T::ZERO; logits.len()];
    for (lr, pr) in logits.chunks_exact(3).zip(probs.chunks_exact_mut(3)) {
        softmax_row(lr, pr);
    }
    probs
}

/// Argmax over `[Head, Hand, Base]` with ties resolved in that order.
pub fn argmax_region<T: Real>(p: &[T]) -> RegionLabel {
    let mut best = 0;
    for k in 1..3 {
        if p[k] > p[best] {
            best = k;
        }
    }
    RegionLabel::from_index(best)
}

/// Expert choice per token. Labeled tokens follow their label in the training
/// phase (unless argmax dispatch is configured); everything else follows the
/// router's argmax.
pub fn dispatch<T: Real>(
    probs: &[T],
    labels: &[Option<RegionLabel>],
    phase: Phase,
    mode: DispatchTrain,
) -> Vec<RegionLabel> {
    labels
        .iter()
        .zip(probs.chunks_exact(3))
        .map(|(l, p)| match (phase, mode, l) {
            (Phase::Train, DispatchTrain::Labels, Some(y)) => *y,
            _ => argmax_region(p),
        })
        .collect()
}

/// Mean over labeled tokens of `-log G_y`. Returns `(loss, count)`.
pub fn routing_loss<T: Real>(probs: &[T], labels: &[Option<RegionLabel>]) -> (T, usize) {
    let mut total = T::ZERO;
    let mut count = 0;
    for (p, l) in probs.chunks_exact(3).zip(labels) {
        if let Some(y) = l {
            total -= p[y.index()].ln();
            count += 1;
        }
    }
    if count == 0 {
        (T::ZERO, 0)
    } else {
        (total / T::from_f64(count as f64), count)
    }
}

/// Gradient of `scale * routing_loss` with respect to the router logits.
pub fn routing_loss_grad<T: Real>(probs: &[T], labels: &[Option<RegionLabel>], scale: T) -> Vec<T> {
    let count = labels.iter().filter(|l| l.is_some()).count();
    let mut d = vec![T::ZERO; probs.len()];
    if count == 0 {
        return d;
    }
    let s = scale / T::from_f64(count as f64);
    for ((dr, p), l) in d.chunks_exact_mut(3).zip(probs.chunks_exact(3)).zip(labels) {
        if let Some(y) = l {
            for k in 0..3 {
                let onehot = if k == y.index() { T::ONE } else { T::ZERO };
                dr[k] = (p[k] - onehot) * s;
            }
        }
    }
    d
}

/// The FFN slot: shared expert plus optional light experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertSet {
    pub shared: Ffn,
    /// Indexed by [`RegionLabel::index`].
    pub light: Option<[Ffn; 3]>,
}

#[derive(Clone, Debug, Default)]
pub struct MoeTape<T> {
    pub shared: FfnTape<T>,
    pub groups: Vec<(Vec<usize>, Vec<T>, FfnTape<T>)>,
}

impl ExpertSet {
    pub fn forward<T: Real>(
        &self,
        table: &ParamTable,
        params: &[T],
        x: &[T],
        rows: usize,
        assignment: &[RegionLabel],
    ) -> (Vec<T>, MoeTape<T>) {
        let d = self.shared.fc1.fan_in;
        let (mut y, shared) = self.shared.forward(table, params, x, rows);
        let mut groups = Vec::new();
        if let Some(light) = &self.light {
            for label in RegionLabel::ALL {
                let idx: Vec<usize> = (0..rows).filter(|&i| assignment[i] == label).collect();
                if idx.is_empty() {
                    continue;
                }
                let xg = gather_rows(x, d, &idx);
                let (yg, tape) = light[label.index()].forward(table, params, &xg, idx.len());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in y[i * d..(i + 1) * d].iter_mut().zip(&yg[k * d..(k + 1) * d]) {
                        *o += *v;
                    }
                }
                groups.push((idx, xg, tape));
            }
        }
        (y, MoeTape { shared, groups })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        table: &ParamTable,
        params: &[T],
        grads: &mut [T],
        x: &[T],
        tape: &MoeTape<T>,
        dy: &[T],
        rows: usize,
        assignment: &[RegionLabel],
    ) -> Vec<T> {
        let d = self.shared.fc1.fan_in;
        let mut dx = self.shared.backward(table, params, grads, x, &tape.shared, dy, rows);
        if let Some(light) = &self.light {
            for (idx, xg, gt) in &tape.groups {
                let label = assignment[idx[0]];
                let dyg = gather_rows(dy, d, idx);
                let dxg = light[label.index()].backward(table, params, grads, xg, gt, &dyg, idx.len());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in dx[i * d..(i + 1) * d].iter_mut().zip(&dxg[k * d..(k + 1) * d]) {
                        *o += *v;
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum MoeError {
    #[error("token {0} has no region label in the training phase")]
    MissingLabel(usize),
    #[error("inference dispatch needs router probabilities")]
    MissingProbs,
    #[error("expected {expected} routing rows, found {found}")]
    Rows { expected: usize, found: usize },
}

/// What decides the expert of each token.
#[derive(Clone, Copy, Debug)]
pub enum Routing<'a, T> {
    Labels(&'a [Option<RegionLabel>]),
    Probs(&'a [T]),
}

/// `shared(x_i) + expert_k(i)(x_i)` with `k(i)` the label (training) or the
/// router argmax (inference).
pub fn moe_forward<T: Real>(
    experts: &ExpertSet,
    table: &ParamTable,
    params: &[T],
    x: &[T],
    rows: usize,
    routing: Routing<'_, T>,
    phase: Phase,
) -> Result<Vec<T>, MoeError> {
    let assignment = match (phase, routing) {
        (Phase::Train, Routing::Labels(labels)) => {
            if labels.len() != rows {
                return Err(MoeError::Rows { expected: rows, found: labels.len() });
            }
            labels
                .iter()
                .enumerate()
                .map(|(i, l)| l.ok_or(MoeError::MissingLabel(i)))
                .collect::<Result<Vec<_>, _>>()?
        }
        (Phase::Train, Routing::Probs(_)) => return Err(MoeError::MissingLabel(0)),
        (Phase::Infer, Routing::Probs(p)) => {
            if p.len() != rows * 3 {
                return Err(MoeError::Rows { expected: rows, found: p.len() / 3 });
            }
            p.chunks_exact(3).map(argmax_region).collect()
        }
        (Phase::Infer, Routing::Labels(_)) => return Err(MoeError::MissingProbs),
    };
    Ok(experts.forward(table, params, x, rows, &assignment).0)
}

/// Parameter overhead of the expert layer.
#[derive(Clone, Debug, PartialEq)]
pub struct OverheadReport {
    pub params_with: usize,
    pub params_without: usize,
    pub ratio: f64,
    /// Added parameters per block.
    pub per_block: Vec<usize>,
}

pub fn param_overhead(with: &ParamTable, without: &ParamTable, depth: usize) -> OverheadReport {
    let per_block = (0..depth)
        .map(|b| {
            let prefix = alloc::format!("blocks.{b}.");
            let count = |t: &ParamTable| -> usize {
                t.specs.iter().filter(|s| s.name.starts_with(&prefix)).map(|s| s.len()).sum()
            };
            count(with) - count(without)
        })
        .collect();
    let ratio = (with.total as f64 - without.total as f64) / without.total as f64;
    OverheadReport { params_with: with.total, params_without: without.total, ratio, per_block }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_route_uniformly() {
        let p = route(&[0.0f64; 6]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn routing_loss_reference_values() {
        let onehot = [1.0f64, 0.0, 0.0];
        assert_eq!(routing_loss(&onehot, &[Some(RegionLabel::Head)]).0, 0.0);
        let uniform = [1.0 / 3.0f64; 3];
        let (l, n) = routing_loss(&uniform, &[Some(RegionLabel::Base)]);
        assert!((l - 3f64.ln()).abs() < 1e-12 && n == 1);
    }

    #[test]
    fn argmax_ties_follow_head_hand_base() {
        assert_eq!(argmax_region(&[0.4f64, 0.4, 0.2]), RegionLabel::Head);
        assert_eq!(argmax_region(&[0.2f64, 0.4, 0.4]), RegionLabel::Hand);
        assert_eq!(argmax_region(&[1.0f64 / 3.0; 3]), RegionLabel::Head);
        assert_eq!(argmax_region(&[0.1f64, 0.2, 0.7]), RegionLabel::Base);
    }

    #[test]
    fn dispatch_uses_labels_only_when_training() {
        let probs = [0.1f64, 0.2, 0.7, 0.5, 0.3, 0.2];
        let labels = [Some(RegionLabel::Hand), None];
        assert_eq!(
            dispatch(&probs, &labels, Phase::Train, DispatchTrain::Labels),
            vec![RegionLabel::Hand, RegionLabel::Head]
        );
        assert_eq!(
            dispatch(&probs, &labels, Phase::Infer, DispatchTrain::Labels),
            vec![RegionLabel::Base, RegionLabel::Head]
        );
        assert_eq!(
            dispatch(&probs, &labels, Phase::Train, DispatchTrain::Argmax),
            vec![RegionLabel::Base, RegionLabel::Head]
        );
    }

    #[test]
    fn routing_grad_matches_finite_differences() {
        let logits = [0.3f64, -0.2, 1.1, 0.0, 0.5, -0.7, 2.0, 0.1, 0.1];
        let labels = [Some(RegionLabel::Base), Some(RegionLabel::Head), None];
        let p = route(&logits);
        let g = routing_loss_grad(&p, &labels, 1.0);
        for i in 0..logits.len() {
            let mut lp = logits;
            lp[i] += 1e-6;
            let mut lm = logits;
            lm[i] -= 1e-6;
            let fd = (routing_loss(&route(&lp), &labels).0 - routing_loss(&route(&lm), &labels).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8, "{i}");
        }
    }
}
