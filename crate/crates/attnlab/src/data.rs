//! Synthetic image classification data: one random prototype per class,
//! samples are the prototype plus clipped uniform noise. Regenerable from
//! (spec, seed); nothing is stored on disk.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    /// Samples generated per class.
    pub per_class: usize,
    /// Uniform noise half-width added to the prototype.
    pub noise: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub spec: DatasetSpec,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Split off the first `count` samples (train) from the rest (held
    /// out). Labels interleave class-by-class, so any prefix whose length
    /// is a multiple of the class count stays balanced.
    pub fn split(self, count: usize) -> Result<(SyntheticDataset, SyntheticDataset)> {
        if count == 0 || count >= self.len() {
            return Err(Error::Config(format!(
                "split point {count} must fall inside the {}-sample dataset",
                self.len()
            )));
        }
        let mut images = self.images;
        let mut labels = self.labels;
        let rest_images = images.split_off(count);
        let rest_labels = labels.split_off(count);
        let first = SyntheticDataset {
            images,
            labels,
            spec: self.spec.clone(),
            seed: self.seed,
        };
        let rest = SyntheticDataset { images: rest_images, labels: rest_labels, spec: self.spec, seed: self.seed };
        Ok((first, rest))
    }
}

pub fn generate_synthetic_dataset(spec: &DatasetSpec, seed: u64) -> Result<SyntheticDataset> {
    if spec.noise < 0.0 {
        return Err(Error::Config(format!("noise level {} must be >= 0", spec.noise)));
    }
    if spec.num_classes == 0 || spec.per_class == 0 {
        return Err(Error::Config("dataset needs at least one class and one sample".into()));
    }
    let shape = vec![spec.channels, spec.image_size, spec.image_size];
    let prototypes: Vec<Tensor> = (0..spec.num_classes)
        .map(|class| {
            let mut stream = rng::stream(seed, "dataset-proto", class as u64);
            Tensor::rand_uniform(shape.clone(), &mut stream)
        })
        .collect();

    let total = spec.num_classes * spec.per_class;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for index in 0..total {
        let class = index % spec.num_classes;
        let mut stream = rng::stream(seed, "dataset-sample", index as u64);
        let mut image = prototypes[class].clone();
        for v in image.values_mut() {
            let delta = stream.gen_range(-spec.noise..=spec.noise);
            *v = (*v + delta).clamp(0.0, 1.0);
        }
        images.push(image);
        labels.push(class);
    }
    Ok(SyntheticDataset { images, labels, spec: spec.clone(), seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> DatasetSpec {
        DatasetSpec { num_classes: 3, channels: 2, image_size: 4, per_class: 4, noise: 0.1 }
    }

    #[test]
    fn zero_noise_reproduces_prototypes() {
        let mut s = spec();
        s.noise = 0.0;
        let ds = generate_synthetic_dataset(&s, 5).unwrap();
        for (i, image) in ds.images.iter().enumerate() {
            let same_class = ds.images[ds.labels[i]].clone();
            assert_eq!(image.values(), same_class.values());
        }
    }

    #[test]
    fn pixels_stay_in_unit_interval() {
        let mut s = spec();
        s.noise = 5.0;
        let ds = generate_synthetic_dataset(&s, 5).unwrap();
        for image in &ds.images {
            assert!(image.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic_dataset(&spec(), 9).unwrap();
        let b = generate_synthetic_dataset(&spec(), 9).unwrap();
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.values(), y.values());
        }
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn split_keeps_balance_and_disjoint_samples() {
        let ds = generate_synthetic_dataset(&spec(), 9).unwrap();
        let (train, test) = ds.split(6).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(test.len(), 6);
        // 3 classes interleaved: prefix of 6 has two of each
        for class in 0..3 {
            assert_eq!(train.labels.iter().filter(|&&l| l == class).count(), 2);
        }
        for a in &train.images {
            for b in &test.images {
                assert_ne!(a.values(), b.values());
            }
        }
    }

    #[test]
    fn negative_noise_is_rejected() {
        let mut s = spec();
        s.noise = -0.5;
        assert!(generate_synthetic_dataset(&s, 1).is_err());
    }
}
