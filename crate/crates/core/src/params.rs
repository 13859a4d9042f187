//! Flat parameter storage with a named registry.
//!
//! Every learnable array lives in one contiguous buffer; gradients and
//! optimizer moments reuse the same offsets.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::nn::matmul;
use crate::real::Real;

/// Ownership class of a parameter array, used by the gradient-separation
/// checks and the overhead accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Shared trunk parameters other than attention (FFN, timestep and
    /// conditioning maps, null condition).
    Shared,
    /// Shared attention projections.
    Attention,
    /// RGB-only parameters: patch embedding, modulation maps, output head.
    RgbStream,
    /// Structure-only parameters: patch embedding, modulation maps, output
    /// head and the fixed prompt vector.
    HoiStream,
    Router,
    Expert,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Shared,
        ParamGroup::Attention,
        ParamGroup::RgbStream,
        ParamGroup::HoiStream,
        ParamGroup::Router,
        ParamGroup::Expert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Shared => "shared",
            ParamGroup::Attention => "attention",
            ParamGroup::RgbStream => "rgb_stream",
            ParamGroup::HoiStream => "hoi_stream",
            ParamGroup::Router => "router",
            ParamGroup::Expert => "expert",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with the given standard deviation.
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub group: ParamGroup,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTable {
    pub specs: Vec<ParamSpec>,
    pub total: usize,
}

impl ParamTable {
    pub fn add(&mut self, name: String, shape: Vec<usize>, group: ParamGroup, init: Init) -> usize {
        let spec = ParamSpec { name, shape, offset: self.total, group, init };
        self.total += spec.len();
        self.specs.push(spec);
        self.specs.len() - 1
    }

    pub fn range(&self, id: usize) -> Range<usize> {
        self.specs[id].range()
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, group: ParamGroup, w_init: Init) -> Linear {
        let w = self.add(alloc::format!("{name}.w"), vec![fan_in, fan_out], group, w_init);
        let b = self.add(alloc::format!("{name}.b"), vec![fan_out], group, Init::Zeros);
        Linear { w, b, fan_in, fan_out }
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.specs.iter().filter(|s| s.group == group).map(|s| s.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }
}

/// Handle to a `y = x W + b` layer inside a [`ParamTable`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn weight<'a, T>(&self, table: &ParamTable, params: &'a [T]) -> &'a [T] {
        &params[table.range(self.w)]
    }

    pub fn bias<'a, T>(&self, table: &ParamTable, params: &'a [T]) -> &'a [T] {
        &params[table.range(self.b)]
    }

    pub fn forward<T: Real>(&self, table: &ParamTable, params: &[T], x: &[T], rows: usize) -> Vec<T> {
        let b = self.bias(table, params);
        let mut y = vec![T::ZERO; rows * self.fan_out];
        for r in y.chunks_exact_mut(self.fan_out) {
            r.copy_from_slice(b);
        }
        matmul(x, false, self.weight(table, params), false, &mut y, rows, self.fan_in, self.fan_out, T::ONE);
        y
    }

    /// Accumulates weight and bias gradients into `grads` and optionally
    /// returns the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        table: &ParamTable,
        params: &[T],
        grads: &mut [T],
        x: &[T],
        dy: &[T],
        rows: usize,
        want_dx: bool,
    ) -> Option<Vec<T>> {
        if rows > 0 {
            matmul(x, true, dy, false, &mut grads[table.range(self.w)], self.fan_in, rows, self.fan_out, T::ONE);
            let db = &mut grads[table.range(self.b)];
            for r in dy.chunks_exact(self.fan_out) {
                for (g, v) in db.iter_mut().zip(r) {
                    *g += *v;
                }
            }
        }
        want_dx.then(|| {
            let mut dx = vec![T::ZERO; rows * self.fan_in];
            matmul(dy, false, self.weight(table, params), true, &mut dx, rows, self.fan_out, self.fan_in, T::ZERO);
            dx
        })
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}
