//! Training data: standard normal vectors drawn on the fly, or a set of
//! 8-bit images that is shuffled per epoch and dequantized per draw.

use crate::degradations::dequantize;
use crate::error::{Error, Result};
use crate::numerics::rng::purpose;
use crate::numerics::{RngStream, Tensor};

/// 8-bit images sharing one `[C, H, W]` shape, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    shape: Vec<usize>,
    items: Vec<Vec<u8>>,
    names: Vec<String>,
}

impl ImageSet {
    pub fn new(shape: &[usize], items: Vec<Vec<u8>>) -> Result<Self> {
        let names = (0..items.len()).map(|i| format!("{i:06}")).collect();
        Self::with_names(shape, items, names)
    }

    pub fn with_names(shape: &[usize], items: Vec<Vec<u8>>, names: Vec<String>) -> Result<Self> {
        if shape.len() != 3 {
            return Err(Error::Contract(format!(
                "image shape must be [C, H, W], got {shape:?}"
            )));
        }
        if items.is_empty() {
            return Err(Error::Contract("image set is empty".into()));
        }
        if names.len() != items.len() {
            return Err(Error::shape("image names", &[items.len()], &[names.len()]));
        }
        let len: usize = shape.iter().product();
        if let Some((i, it)) = items.iter().enumerate().find(|(_, it)| it.len() != len) {
            return Err(Error::Contract(format!(
                "image {} has {} values, expected {len} for shape {shape:?}",
                names[i],
                it.len()
            )));
        }
        Ok(ImageSet {
            shape: shape.to_vec(),
            items,
            names,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn item(&self, i: usize) -> &[u8] {
        &self.items[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn items(&self) -> &[Vec<u8>] {
        &self.items
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    /// `x ~ N(0, I_dim)`, the prior of the linear-Gaussian toy.
    Gaussian {
        dim: usize,
    },
    Images(ImageSet),
}

impl Dataset {
    pub fn item_shape(&self) -> Vec<usize> {
        match self {
            Dataset::Gaussian { dim } => vec![*dim],
            Dataset::Images(set) => set.shape().to_vec(),
        }
    }

    pub fn check_nonempty(&self) -> Result<()> {
        match self {
            Dataset::Gaussian { dim: 0 } => Err(Error::Contract("dataset has dimension 0".into())),
            Dataset::Images(set) if set.is_empty() => {
                Err(Error::Contract("dataset is empty".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn sampler(&self, seed: u64) -> BatchSampler<'_> {
        BatchSampler {
            data: self,
            gen: RngStream::new(seed, purpose::DATA_GEN),
            order: RngStream::new(seed, purpose::DATA_ORDER),
            dequant: RngStream::new(seed, purpose::DEQUANT),
            perm: Vec::new(),
            pos: 0,
        }
    }
}

/// Deterministic minibatch stream over a [`Dataset`].
///
/// Images are visited in a fresh random permutation each epoch; every draw
/// is dequantized with new sub-level noise.
pub struct BatchSampler<'a> {
    data: &'a Dataset,
    gen: RngStream,
    order: RngStream,
    dequant: RngStream,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchSampler<'_> {
    pub fn next_batch(&mut self, n: usize) -> Result<Tensor> {
        match self.data {
            Dataset::Gaussian { dim } => Ok(self.gen.normal_tensor(&[n, *dim])),
            Dataset::Images(set) => {
                let len: usize = set.shape().iter().product();
                let mut out = Vec::with_capacity(n * len);
                for _ in 0..n {
                    if self.pos == self.perm.len() {
                        self.perm = (0..set.len()).collect();
                        self.order.shuffle(&mut self.perm);
                        self.pos = 0;
                    }
                    let idx = self.perm[self.pos];
                    self.pos += 1;
                    let img = dequantize(set.item(idx), set.shape(), &mut self.dequant)?;
                    out.extend_from_slice(img.data());
                }
                let mut shape = vec![n];
                shape.extend_from_slice(set.shape());
                Tensor::new(shape, out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epochs_visit_every_image_once() {
        let items: Vec<Vec<u8>> = (0..5u8).map(|k| vec![k * 50; 4]).collect();
        let data = Dataset::Images(ImageSet::new(&[1, 2, 2], items).unwrap());
        let mut s = data.sampler(3);
        let b = s.next_batch(5).unwrap();
        assert_eq!(b.shape(), &[5, 1, 2, 2]);
        let mut levels: Vec<u8> = (0..5).map(|i| (b.data()[i * 4] * 256.0) as u8).collect();
        levels.sort();
        assert_eq!(levels, vec![0, 50, 100, 150, 200]);
    }

    #[test]
    fn empty_sets_are_rejected() {
        assert!(ImageSet::new(&[1, 2, 2], vec![]).is_err());
        assert!(ImageSet::new(&[1, 2, 2], vec![vec![0; 3]]).is_err());
        assert!(Dataset::Gaussian { dim: 0 }.check_nonempty().is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let data = Dataset::Gaussian { dim: 2 };
        let a = data.sampler(1).next_batch(4).unwrap();
        assert_eq!(a, data.sampler(1).next_batch(4).unwrap());
        assert_ne!(a, data.sampler(2).next_batch(4).unwrap());
    }
}
