//! Named parameter storage, binding onto a tape, and the small layer helpers
//! the networks are assembled from.

use indexmap::IndexMap;
use latentswap_autograd::{Conv2dSpec, Gradients, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Ordered map from dotted parameter names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Puts every parameter on the tape, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Binds every tensor as a constant except the named ones, which take the
    /// given variables. Lets a gradient check perturb a few parameters.
    pub fn bind_replacing<'t>(&self, tape: &'t Tape, replace: &[(&str, Var<'t>)]) -> Bound<'t> {
        let mut bound = self.bind(tape, false);
        for (name, var) in replace {
            assert!(bound.vars.contains_key(*name), "no parameter '{name}' to replace");
            bound.vars.insert(name.to_string(), *var);
        }
        bound
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Fails on the first non-finite parameter, naming it.
    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if !t.is_finite() {
                return Err(Error::Validation {
                    field: name.clone(),
                    reason: "contains a non-finite weight".into(),
                });
            }
        }
        Ok(())
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_layout(&self, other: &ParamSet) -> std::result::Result<(), String> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => return Err(format!("missing parameter '{name}'")),
                Some(o) if o.shape() != t.shape() => {
                    return Err(format!(
                        "parameter '{name}' has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.names().find(|n| self.get(n).is_none()) {
            return Err(format!("unexpected parameter '{extra}'"));
        }
        Ok(())
    }

    /// Global ℓ2 norm over all values.
    pub fn norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameters placed on a tape.
pub struct Bound<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_, 't> {
        Scope {
            bound: self,
            prefix: prefix.to_string(),
        }
    }

    /// Gradients of every bound parameter, zeros where unreachable.
    pub fn gradients(&self, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, var) in &self.vars {
            out.insert(name.clone(), grads.get_or_zeros(*var));
        }
        out
    }
}

/// A name prefix into a [`Bound`] set.
pub struct Scope<'b, 't> {
    bound: &'b Bound<'t>,
    prefix: String,
}

impl<'b, 't> Scope<'b, 't> {
    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn get(&self, leaf: &str) -> Var<'t> {
        self.bound.get(&self.name(leaf))
    }

    pub fn sub(&self, child: &str) -> Scope<'b, 't> {
        Scope {
            bound: self.bound,
            prefix: self.name(child),
        }
    }

    /// Convolution with `weight` and, if `biased`, `bias`.
    pub fn conv(&self, x: Var<'t>, spec: Conv2dSpec, biased: bool) -> Var<'t> {
        let y = x.conv2d(&self.get("weight"), spec);
        if biased {
            y.add_channels(&self.get("bias"))
        } else {
            y
        }
    }

    /// Per-channel `scale`/`shift`: normalization with fixed statistics.
    pub fn channel_affine(&self, x: Var<'t>) -> Var<'t> {
        x.mul_channels(&self.get("scale"))
            .add_channels(&self.get("shift"))
    }

    pub fn linear(&self, x: Var<'t>) -> Var<'t> {
        x.linear(&self.get("weight"), &self.get("bias"))
    }
}

/// Seeded initializer writing into a [`ParamSet`] under a prefix.
pub struct Initializer<'a> {
    set: &'a mut ParamSet,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a> Initializer<'a> {
    pub fn new(set: &'a mut ParamSet, seed: u64) -> Self {
        Self {
            set,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    pub fn set_prefix(&mut self, prefix: impl Into<String>) {
        self.prefix = prefix.into();
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn normal(&mut self, leaf: &str, shape: &[usize], std: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        let name = self.name(leaf);
        self.set.insert(name, Tensor::new(shape.to_vec(), data));
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) {
        let name = self.name(leaf);
        self.set.insert(name, Tensor::full(shape.to_vec(), value));
    }

    /// He-normal convolution weight, optional zero bias.
    pub fn conv(&mut self, prefix: &str, out_ch: usize, in_ch: usize, k: usize, biased: bool) {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        self.normal(&format!("{prefix}.weight"), &[out_ch, in_ch, k, k], std);
        if biased {
            self.constant(&format!("{prefix}.bias"), &[out_ch], 0.0);
        }
    }

    /// Identity-initialized per-channel affine.
    pub fn channel_affine(&mut self, prefix: &str, ch: usize) {
        self.constant(&format!("{prefix}.scale"), &[ch], 1.0);
        self.constant(&format!("{prefix}.shift"), &[ch], 0.0);
    }

    /// Linear layer with weight std `std` and constant bias.
    pub fn linear(&mut self, prefix: &str, out: usize, inp: usize, std: f64, bias: f64) {
        self.normal(&format!("{prefix}.weight"), &[out, inp], std);
        self.constant(&format!("{prefix}.bias"), &[out], bias);
    }

    pub fn zero_linear(&mut self, prefix: &str, out: usize, inp: usize) {
        self.constant(&format!("{prefix}.weight"), &[out, inp], 0.0);
        self.constant(&format!("{prefix}.bias"), &[out], 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_detects_single_bit_change() {
        let mut p = ParamSet::new();
        Initializer::new(&mut p, 3).normal("w", &[4, 4], 1.0);
        let before = p.checksum();
        assert_eq!(before, p.clone().checksum());
        let v = &mut p.get_mut("w").unwrap().data_mut()[5];
        *v = f64::from_bits(v.to_bits() ^ 1);
        assert_ne!(before, p.checksum());
    }

    #[test]
    fn initializer_is_seeded() {
        let mut a = ParamSet::new();
        let mut b = ParamSet::new();
        Initializer::new(&mut a, 9).conv("c", 2, 3, 3, true);
        Initializer::new(&mut b, 9).conv("c", 2, 3, 3, true);
        assert_eq!(a, b);
        assert_eq!(a.names().collect::<Vec<_>>(), ["c.weight", "c.bias"]);
    }

    #[test]
    fn layout_check_names_the_problem() {
        let mut a = ParamSet::new();
        a.insert("x", Tensor::zeros([2]));
        let mut b = ParamSet::new();
        b.insert("x", Tensor::zeros([3]));
        assert!(a.check_layout(&b).unwrap_err().contains("'x'"));
    }
}
