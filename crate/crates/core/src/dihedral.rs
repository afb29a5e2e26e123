//! The dihedral group of the square and its action on spatial tensors,
//! kernel stacks and model parameters.
//!
//! An element is stored as `m^flip ∘ r^rot`, where `r` is a counter-clockwise
//! quarter turn and `m` mirrors the width axis. The element is applied by
//! rotating first and reflecting second.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, shape_err, Error, Result};
use crate::model::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DihedralElement {
    rot: u8,
    flip: bool,
}

impl DihedralElement {
    pub const IDENTITY: Self = Self { rot: 0, flip: false };
    /// Counter-clockwise quarter turn.
    pub const R: Self = Self { rot: 1, flip: false };
    /// Horizontal reflection (mirrors the width axis).
    pub const M: Self = Self { rot: 0, flip: true };

    pub const fn new(rot: u8, flip: bool) -> Self {
        Self { rot: rot % 4, flip }
    }

    pub const fn rotation(k: u8) -> Self {
        Self::new(k, false)
    }

    pub fn rot(self) -> u8 {
        self.rot
    }

    pub fn flip(self) -> bool {
        self.flip
    }

    pub fn is_identity(self) -> bool {
        self == Self::IDENTITY
    }

    /// All eight elements: rotations first, then reflections.
    pub fn all() -> [Self; 8] {
        let mut out = [Self::IDENTITY; 8];
        for (i, e) in out.iter_mut().enumerate() {
            *e = Self::new((i % 4) as u8, i >= 4);
        }
        out
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(self, other: Self) -> Self {
        if other.flip {
            // r^a m = m r^-a
            Self::new((4 + other.rot - self.rot) % 4, !self.flip)
        } else {
            Self::new(self.rot + other.rot, self.flip)
        }
    }

    pub fn inverse(self) -> Self {
        if self.flip {
            self
        } else {
            Self::new(4 - self.rot, false)
        }
    }

    pub fn name(self) -> &'static str {
        const NAMES: [&str; 8] = ["r0", "r1", "r2", "r3", "mr0", "mr1", "mr2", "mr3"];
        NAMES[self.rot as usize + 4 * self.flip as usize]
    }

    /// Source coordinate in an `n×n` map for output coordinate `(i, j)`.
    #[inline]
    fn source(self, n: usize, i: usize, j: usize) -> (usize, usize) {
        let j = if self.flip { n - 1 - j } else { j };
        let (mut si, mut sj) = (i, j);
        for _ in 0..self.rot {
            // CCW quarter turn: out[i][j] = in[j][n-1-i]
            (si, sj) = (sj, n - 1 - si);
        }
        (si, sj)
    }

    /// Permutation of the `n×n` plane: `out[p] = in[perm[p]]`.
    pub fn permutation(self, n: usize) -> Vec<usize> {
        let mut perm = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let (si, sj) = self.source(n, i, j);
                perm.push(si * n + sj);
            }
        }
        perm
    }

    /// Transforms the last two axes of `x`; leading axes are untouched.
    pub fn apply_spatial(self, x: &Tensor) -> Result<Tensor> {
        let nd = x.ndim();
        if nd < 2 || x.shape()[nd - 1] != x.shape()[nd - 2] {
            return Err(shape_err!(
                "dihedral transforms need square trailing axes, got {:?}",
                x.shape()
            ));
        }
        if self.is_identity() {
            return Ok(x.clone());
        }
        let n = x.shape()[nd - 1];
        let perm = self.permutation(n);
        let mut data = Vec::with_capacity(x.len());
        for plane in x.data().chunks(n * n) {
            data.extend(perm.iter().map(|&p| plane[p]));
        }
        Tensor::new(x.shape().to_vec(), data)
    }

    /// Transforms every convolution kernel in `params`; biases and fully
    /// connected heads are left as they are.
    pub fn apply_to_params(self, params: &ModelParams) -> ModelParams {
        let mut out = params.clone();
        for layer in out.conv_layers_mut() {
            layer.kernels = self
                .apply_spatial(&layer.kernels)
                .expect("kernels are square by construction");
        }
        out
    }
}

impl fmt::Display for DihedralElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DihedralElement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (flip, rest) = match s.strip_prefix("mr") {
            Some(rest) => (true, rest),
            None => (false, s.strip_prefix('r').unwrap_or("")),
        };
        match rest {
            "0" | "1" | "2" | "3" => Ok(Self::new(rest.parse().unwrap(), flip)),
            _ => Err(input_err!("unknown dihedral element {:?}", s)),
        }
    }
}

impl TryFrom<String> for DihedralElement {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DihedralElement> for String {
    fn from(e: DihedralElement) -> String {
        e.name().to_string()
    }
}

/// An ordered list of transformations, one per head. Repeats are allowed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformationSet {
    elements: Vec<DihedralElement>,
}

impl TransformationSet {
    pub fn new(elements: Vec<DihedralElement>) -> Result<Self> {
        if elements.is_empty() {
            return Err(input_err!("transformation set must not be empty"));
        }
        Ok(Self { elements })
    }

    pub fn identity() -> Self {
        Self {
            elements: vec![DihedralElement::IDENTITY],
        }
    }

    /// The rotation subgroup `{r0, r1, r2, r3}`.
    pub fn c4() -> Self {
        Self::rotations(4)
    }

    pub fn d4() -> Self {
        Self {
            elements: DihedralElement::all().to_vec(),
        }
    }

    /// The first `m` rotations `r0 .. r(m-1)`; `m` in `1..=4`.
    pub fn rotations(m: usize) -> Self {
        assert!((1..=4).contains(&m), "rotation prefix must have 1..=4 elements");
        Self {
            elements: (0..m as u8).map(DihedralElement::rotation).collect(),
        }
    }

    /// `m` copies of the identity.
    pub fn repeated_identity(m: usize) -> Self {
        assert!(m >= 1);
        Self {
            elements: vec![DihedralElement::IDENTITY; m],
        }
    }

    /// Parses a comma separated list such as `r0,r1,mr2`.
    pub fn parse_list(s: &str) -> Result<Self> {
        let elements = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(elements)
    }

    /// `c4` or `d4`.
    pub fn named_group(name: &str) -> Result<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "c4" => Ok(Self::c4()),
            "d4" => Ok(Self::d4()),
            other => Err(input_err!("unknown group {:?} (expected c4 or d4)", other)),
        }
    }

    pub fn elements(&self) -> &[DihedralElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<DihedralElement> {
        self.elements.get(i).copied()
    }

    /// True when the elements are distinct and closed under composition
    /// (inverses then follow from finiteness).
    pub fn is_group(&self) -> bool {
        let distinct = self
            .elements
            .iter()
            .enumerate()
            .all(|(i, a)| !self.elements[..i].contains(a));
        distinct
            && self.elements.iter().all(|&a| {
                self.elements
                    .iter()
                    .all(|&b| self.elements.contains(&a.compose(b)))
            })
    }

    pub fn group_name(&self) -> String {
        if *self == Self::c4() {
            "c4".into()
        } else if *self == Self::d4() {
            "d4".into()
        } else {
            self.to_string()
        }
    }

    /// Mean of `{t(w) : t ∈ T}`. Requires `T` to be a group.
    pub fn orbit_mean(&self, w: &Tensor) -> Result<Tensor> {
        if !self.is_group() {
            return Err(input_err!("orbit mean needs a group, got {}", self));
        }
        let nd = w.ndim();
        if nd < 2 || w.shape()[nd - 1] != w.shape()[nd - 2] {
            return Err(shape_err!("orbit mean needs square trailing axes, got {:?}", w.shape()));
        }
        let n = w.shape()[nd - 1];
        let perms: Vec<Vec<usize>> = self.elements.iter().map(|t| t.permutation(n)).collect();
        // (1/|T|) Σ_t t(w), with the terms of each entry summed in source-index
        // order so every entry of an orbit sees the same rounding.
        let mut sources: Vec<Vec<usize>> = (0..n * n)
            .map(|p| perms.iter().map(|perm| perm[p]).collect())
            .collect();
        sources.iter_mut().for_each(|s| s.sort_unstable());
        let scale = 1.0 / self.len() as f64;
        let mut data = Vec::with_capacity(w.len());
        for plane in w.data().chunks(n * n) {
            data.extend(
                sources
                    .iter()
                    .map(|src| src.iter().map(|&q| plane[q]).sum::<f64>() * scale),
            );
        }
        Tensor::new(w.shape().to_vec(), data)
    }
}

impl fmt::Display for TransformationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.elements.iter().map(|e| e.name()).collect();
        f.write_str(&names.join(","))
    }
}
