//! Classification datasets: synthetic Gaussian blobs or CBNT files holding
//! `images` (`[N, C, H, W]`) and `labels` (`[N]`, integral values).

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Dataset> {
        if images.rank() != 4 || images.dims()[0] != labels.len() {
            return Err(Error::Input(format!(
                "images {} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Input("empty dataset".into()));
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset { images, labels, classes })
    }

    /// `n` samples spread evenly over `classes` blobs. Each class has a
    /// random mean image; samples add unit-scale noise times `spread`.
    pub fn blobs(seed: u64, n: usize, classes: usize, hw: usize, spread: f64, dtype: DType) -> Result<Dataset> {
        let mut rng = Rng::derive(seed, 0xb10b);
        let per = 3 * hw * hw;
        let means: Vec<Tensor> = (0..classes).map(|_| rng.normal_tensor(DType::F64, [per], 1.0)).collect();
        let mut data = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % classes;
            labels.push(label);
            data.extend(means[label].data().iter().map(|m| m + spread * rng.normal()));
        }
        let images = Tensor::new(dtype, [n, 3, hw, hw], data)?;
        let mut ds = Dataset::new(images, labels)?;
        ds.classes = classes;
        Ok(ds)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let mut map = io::read(path)?;
        let missing: Vec<String> = ["images", "labels"]
            .iter()
            .filter(|k| !map.contains_key(**k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Ingestion { missing });
        }
        let images = map.remove("images").expect("checked");
        let raw = map.remove("labels").expect("checked");
        let mut labels = Vec::with_capacity(raw.numel());
        for &v in raw.data() {
            if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
                return Err(Error::Input(format!("label {v} is not a class index")));
            }
            labels.push(v as usize);
        }
        Dataset::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let dims = self.images.dims();
        let per: usize = dims[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..][..per]);
        }
        let images = Tensor::new(self.images.dtype(), [indices.len(), dims[1], dims[2], dims[3]], data)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Endless shuffled minibatch indices; reshuffles at each epoch boundary
/// and drops the ragged tail.
pub struct Batches {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batches {
    pub fn new(len: usize, size: usize, seed: u64) -> Batches {
        let size = size.clamp(1, len.max(1));
        Batches { rng: Rng::derive(seed, 0x5_41ff), order: (0..len).collect(), pos: len, size }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            for i in (1..self.order.len()).rev() {
                let j = self.rng.below(i + 1);
                self.order.swap(i, j);
            }
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = Dataset::blobs(3, 12, 3, 4, 0.5, DType::F64).unwrap();
        let b = Dataset::blobs(3, 12, 3, 4, 0.5, DType::F64).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels.iter().filter(|&&l| l == 2).count(), 4);
        let (x, y) = a.batch(&[5, 0]).unwrap();
        assert_eq!(x.dims(), &[2, 3, 4, 4]);
        assert_eq!(y, vec![2, 0]);
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut b = Batches::new(10, 5, 1);
        let mut seen: Vec<usize> = b.next_batch().into_iter().chain(b.next_batch()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn missing_tensors_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.cbnt");
        let mut m = io::TensorMap::new();
        m.insert("images".into(), Tensor::zeros(DType::F32, [1, 1, 1, 1]));
        io::write(&p, &m).unwrap();
        match Dataset::load(&p) {
            Err(Error::Ingestion { missing }) => assert_eq!(missing, vec!["labels".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
