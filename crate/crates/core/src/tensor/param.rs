use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

/// One gradient array per parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.grads.iter()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += *y * scale;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Seeded parameter initializer. Draws come from one ChaCha stream, so the
/// same seed and call order always give the same values.
pub struct Init {
    seed: u64,
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Fresh initializer keyed by `name` and this initializer's seed,
    /// independent of any draws made so far.
    pub fn fork(&self, name: &str) -> Init {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
        let mut z = self.seed ^ h.rotate_left(17);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        Init::new(z ^ (z >> 31))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn uniform<T: Real>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::cast(self.rng.gen_range(lo..hi))).collect();
        Tensor::new(shape.to_vec(), data).expect("sized from shape")
    }

    /// Glorot/Xavier uniform. Fans are read from the shape: `[in, out]` for
    /// linear weights, `[out, in, kh, kw]` for convolution kernels.
    pub fn xavier<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let (fan_in, fan_out) = match shape {
            [i, o] => (*i, *o),
            [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
            _ => {
                let n: usize = shape.iter().product();
                (n, n)
            }
        };
        self.xavier_with_fans(shape, fan_in, fan_out)
    }

    pub fn xavier_with_fans<T: Real>(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        self.uniform(shape, -bound, bound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forks_depend_only_on_seed_and_name() {
        let mut a = Init::new(5);
        let _: Tensor<f64> = a.uniform(&[7], 0.0, 1.0);
        let x: Tensor<f64> = a.fork("w").uniform(&[3], 0.0, 1.0);
        let y: Tensor<f64> = Init::new(5).fork("w").uniform(&[3], 0.0, 1.0);
        let z: Tensor<f64> = Init::new(5).fork("v").uniform(&[3], 0.0, 1.0);
        assert_eq!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros([1])).unwrap();
        assert!(s.add("a", Tensor::zeros([1])).is_err());
    }

    #[test]
    fn xavier_is_seeded_and_bounded() {
        let a: Tensor<f32> = Init::new(7).xavier(&[16, 32]);
        let b: Tensor<f32> = Init::new(7).xavier(&[16, 32]);
        assert_eq!(a, b);
        let bound = (6.0f32 / 48.0).sqrt();
        assert!(a.data().iter().all(|x| x.abs() <= bound));
        let c: Tensor<f32> = Init::new(8).xavier(&[16, 32]);
        assert_ne!(a, c);
    }
}
