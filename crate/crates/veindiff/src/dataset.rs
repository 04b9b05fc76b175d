//! In-memory dataset: loads the manifest's images and fused masks once,
//! then serves deterministic augmented tensor batches per epoch.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;

use crate::augment::{augment, AugmentParams};
use crate::classical::{fuse_masks, FusionParams};
use crate::error::{Result, VeinError};
use crate::rng::{substream, Stream};
use crate::synth::{entry_paths, BinaryMask, DatasetManifest, VeinImage};

/// One loaded sample (raw resolution; augmentation happens at batch time).
pub struct Sample {
    pub image: VeinImage,
    pub mask: BinaryMask,
    pub class_id: usize,
    pub session: u8,
}

/// A whole split held in RAM.
pub struct InMemoryDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
}

impl InMemoryDataset {
    /// Load every entry of `manifest` from `root` (full manifests and
    /// single-session splits alike). The first missing or unreadable file
    /// aborts the load with its path.
    pub fn load(root: &Path, manifest: &DatasetManifest) -> Result<Self> {
        manifest.validate_entries()?;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let (img_path, mask_path) = entry_paths(root, entry);
            for p in [&img_path, &mask_path] {
                if !p.exists() {
                    return Err(VeinError::Dataset {
                        path: p.clone(),
                        msg: "file missing (run `synth` and `masks` first)".into(),
                    });
                }
            }
            let image = VeinImage::load_png(&img_path)?;
            let mask = BinaryMask::load_png(&mask_path)?;
            if image.h != mask.h || image.w != mask.w {
                return Err(VeinError::Dataset {
                    path: mask_path,
                    msg: format!(
                        "mask {}x{} does not match image {}x{}",
                        mask.h, mask.w, image.h, image.w
                    ),
                });
            }
            samples.push(Sample {
                image,
                mask,
                class_id: entry.class_id,
                session: entry.session,
            });
        }
        Ok(Self { samples, num_classes: manifest.num_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One training/eval batch as tensors.
pub struct Batch {
    /// `(B, 1, 224, 224)` images in `[0, 1]`.
    pub images: Tensor,
    /// `(B, 1, 224, 224)` binary masks as floats.
    pub masks: Tensor,
    /// Class ids, length `B`.
    pub labels: Vec<usize>,
    /// `(B, N)` one-hot labels.
    pub onehot: Tensor,
    /// Dataset indices the batch was built from.
    pub indices: Vec<usize>,
}

/// One-hot encode `labels` into a `(B, N)` tensor.
pub fn one_hot(labels: &[usize], num_classes: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f32; labels.len() * num_classes];
    for (i, &c) in labels.iter().enumerate() {
        if c >= num_classes {
            return Err(VeinError::invariant(format!(
                "label {c} out of range for {num_classes} classes"
            )));
        }
        v[i * num_classes + c] = 1.0;
    }
    Ok(Tensor::from_vec(v, (labels.len(), num_classes), device)?.to_dtype(dtype)?)
}

fn batch_from_indices(
    ds: &InMemoryDataset,
    indices: &[usize],
    params: &AugmentParams,
    seed: u64,
    epoch: usize,
    dtype: DType,
    device: &Device,
) -> Result<Batch> {
    let side = params.out_size;
    let mut img_buf = Vec::with_capacity(indices.len() * side * side);
    let mut mask_buf = Vec::with_capacity(indices.len() * side * side);
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in indices {
        let s = &ds.samples[idx];
        let mut rng = substream(seed, Stream::Augment, &[epoch as u64, idx as u64]);
        let (img, mask) = augment(&s.image, &s.mask, params, &mut rng)?;
        img_buf.extend_from_slice(&img.pixels);
        mask_buf.extend(mask.pixels.iter().map(|&b| b as f32));
        labels.push(s.class_id);
    }
    let b = indices.len();
    let images = Tensor::from_vec(img_buf, (b, 1, side, side), device)?.to_dtype(dtype)?;
    let masks = Tensor::from_vec(mask_buf, (b, 1, side, side), device)?.to_dtype(dtype)?;
    let onehot = one_hot(&labels, ds.num_classes, dtype, device)?;
    Ok(Batch { images, masks, labels, onehot, indices: indices.to_vec() })
}

/// Build the shuffled, augmented batches of one training epoch.
/// Deterministic in (seed, epoch).
pub fn train_batches(
    ds: &InMemoryDataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    dtype: DType,
    device: &Device,
) -> Result<Vec<Batch>> {
    if ds.is_empty() {
        return Err(VeinError::invariant("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(VeinError::config("batch_size must be positive"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = substream(seed, Stream::Shuffle, &[epoch as u64]);
    order.shuffle(&mut rng);
    let params = AugmentParams::train();
    order
        .chunks(batch_size)
        .map(|chunk| batch_from_indices(ds, chunk, &params, seed, epoch, dtype, device))
        .collect()
}

/// Deterministic evaluation batches: manifest order, centered crop, no
/// photometric jitter.
pub fn eval_batches(
    ds: &InMemoryDataset,
    batch_size: usize,
    dtype: DType,
    device: &Device,
) -> Result<Vec<Batch>> {
    if ds.is_empty() {
        return Err(VeinError::invariant("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(VeinError::config("batch_size must be positive"));
    }
    let order: Vec<usize> = (0..ds.len()).collect();
    let params = AugmentParams::identity();
    order
        .chunks(batch_size)
        .map(|chunk| batch_from_indices(ds, chunk, &params, 0, 0, dtype, device))
        .collect()
}

/// Run the classical fusion pipeline over every manifest entry and write
/// the fused mask at the entry's `maskpath` (replacing the generator's
/// centerline seed masks). Returns the number of masks written. With
/// `debug_voters`, each voter's mask is also dumped under
/// `<root>/debug_masks/<voter>/`.
pub fn write_fused_masks(
    root: &Path,
    manifest: &DatasetManifest,
    params: &FusionParams,
    debug_voters: bool,
) -> Result<usize> {
    manifest.validate()?;
    let voter_names = ["gabor", "lmc", "emc", "adaptive"];
    let mut written = 0usize;
    for entry in &manifest.entries {
        let (img_path, mask_path) = entry_paths(root, entry);
        if !img_path.exists() {
            return Err(VeinError::Dataset {
                path: img_path,
                msg: "image missing (run `synth` first)".into(),
            });
        }
        let image = VeinImage::load_png(&img_path)?;
        let (fused, voters) = fuse_masks(&image, params)?;
        fused.save_png(&mask_path)?;
        if debug_voters {
            for (name, mask) in voter_names.iter().zip(&voters) {
                let p = root.join("debug_masks").join(name).join(&entry.relpath);
                mask.save_png(&p)?;
            }
        }
        written += 1;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("veindiff_ds_{tag}_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn load_batches_and_fused_masks_roundtrip() {
        let root = tmpdir("load");
        let manifest = generate_dataset(&root, 2, 2, 96, 128, 5).unwrap();
        let n = write_fused_masks(&root, &manifest, &FusionParams::default(), false).unwrap();
        assert_eq!(n, 8);

        let ds = InMemoryDataset::load(&root, &manifest).unwrap();
        assert_eq!(ds.len(), 8);
        assert_eq!(ds.num_classes, 2);

        let mut small = AugmentParams::train();
        small.out_size = 224;
        assert_eq!(small.out_size, 224);

        let batches = train_batches(&ds, 3, 9, 0, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(batches.len(), 3); // 3 + 3 + 2
        assert_eq!(batches[0].images.dims(), &[3, 1, 224, 224]);
        assert_eq!(batches[0].masks.dims(), &[3, 1, 224, 224]);
        assert_eq!(batches[0].onehot.dims(), &[3, 2]);
        assert_eq!(batches[2].images.dims(), &[2, 1, 224, 224]);

        // masks strictly binary after augmentation
        let mv: Vec<f32> = batches[0].masks.flatten_all().unwrap().to_vec1().unwrap();
        assert!(mv.iter().all(|&v| v == 0.0 || v == 1.0));

        // epoch shuffles are deterministic and differ across epochs
        let again = train_batches(&ds, 3, 9, 0, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(batches[0].indices, again[0].indices);
        let e1 = train_batches(&ds, 3, 9, 1, DType::F32, &Device::Cpu).unwrap();
        let flat = |bs: &[Batch]| bs.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>();
        assert_ne!(flat(&batches), flat(&e1), "epoch 0 and 1 shuffles identical");

        // eval batches keep manifest order and are reproducible bit-for-bit
        let ev = eval_batches(&ds, 4, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(flat(&ev), (0..8).collect::<Vec<_>>());
        let ev2 = eval_batches(&ds, 4, DType::F32, &Device::Cpu).unwrap();
        let a: Vec<f32> = ev[0].images.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = ev2[0].images.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);

        std::fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn missing_file_error_names_path() {
        let root = tmpdir("missing");
        let manifest = generate_dataset(&root, 2, 1, 96, 96, 6).unwrap();
        let victim = root.join(&manifest.entries[1].maskpath);
        std::fs::remove_file(&victim).unwrap();
        match InMemoryDataset::load(&root, &manifest) {
            Err(VeinError::Dataset { path, .. }) => assert_eq!(path, victim),
            Err(other) => panic!("expected dataset error, got {other}"),
            Ok(_) => panic!("load should fail on the missing mask"),
        }
        std::fs::remove_dir_all(&root).unwrap();
    }

    #[test]
    fn one_hot_and_validation() {
        let t = one_hot(&[2, 0], 3, DType::F32, &Device::Cpu).unwrap();
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(one_hot(&[3], 3, DType::F32, &Device::Cpu).is_err());

        let root = tmpdir("val");
        let manifest = generate_dataset(&root, 2, 1, 96, 96, 8).unwrap();
        let ds = InMemoryDataset::load(&root, &manifest).unwrap();
        assert!(train_batches(&ds, 0, 1, 0, DType::F32, &Device::Cpu).is_err());
        std::fs::remove_dir_all(&root).unwrap();
    }
}
