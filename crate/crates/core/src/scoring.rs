//! Full-image reconstruction, multi-scale difference maps and anomaly maps.

use rayon::prelude::*;

use crate::error::{IntraError, Result};
use crate::image::{box_kernel, gaussian_kernel, Image, Plane};
use crate::metrics::gms_map;
use crate::model::WindowBatch;
use crate::patching::{select_window, split_into_patches, window_from_grid, PatchGrid};
use crate::training::Inpainter;

/// `(downscale factor, kernel size at 512 px)` for each diff scale.
pub const DIFF_SCALES: [(usize, usize); 2] = [(2, 21), (4, 11)];
pub const DIFF_SIGMA: f64 = 2.0;
pub const KERNEL_REFERENCE_SIZE: usize = 512;

/// Mean training difference map at model resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDiff {
    pub map: Plane,
    pub count: usize,
}

/// Per-pixel anomaly scores and their maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub map: Plane,
    pub score: f64,
}

impl AnomalyMap {
    pub fn from_plane(map: Plane) -> Self {
        let score = map.max() as f64;
        AnomalyMap { map, score }
    }

    /// Bilinear resize to `height x width`; the score is unchanged.
    pub fn resized(&self, height: usize, width: usize) -> Plane {
        self.map.resize_bilinear(height, width)
    }
}

fn check_resolution<M: Inpainter + ?Sized>(model: &M, image: &Image) -> Result<()> {
    let c = model.model_config();
    if image.height() != c.image_size || image.width() != c.image_size || image.channels() != c.channels {
        return Err(IntraError::invalid(format!(
            "image is {}x{}x{}, model works at {}x{}x{}",
            image.height(),
            image.width(),
            image.channels(),
            c.image_size,
            c.image_size,
            c.channels
        )));
    }
    Ok(())
}

/// Inpaints every patch from its most centered window and reassembles the
/// image; windows are evaluated `batch_size` at a time.
pub fn reconstruct_image<M: Inpainter + ?Sized>(model: &M, image: &Image, batch_size: usize) -> Result<Image> {
    check_resolution(model, image)?;
    let c = *model.model_config();
    let grid = split_into_patches(image, c.patch_size)?;
    let n = grid.rows();
    let mut out = PatchGrid::zeros(n, n, c.patch_size, c.channels);
    let mut written = vec![false; n * n];
    let cells: Vec<(usize, usize)> = (1..=n).flat_map(|t| (1..=n).map(move |u| (t, u))).collect();
    for chunk in cells.chunks(batch_size.max(1)) {
        let windows = chunk
            .iter()
            .map(|&(t, u)| window_from_grid(&grid, &select_window(t, u, n, n, c.window_side)?))
            .collect::<Result<Vec<_>>>()?;
        let recon = model.inpaint(&WindowBatch::new(&windows, &c)?)?;
        for (&(t, u), patch) in chunk.iter().zip(recon.data().chunks_exact(c.patch_dim())) {
            let idx = (t - 1) * n + (u - 1);
            assert!(!written[idx], "patch ({t}, {u}) reconstructed twice");
            written[idx] = true;
            out.patch_mut(t, u).copy_from_slice(patch);
        }
    }
    assert!(written.iter().all(|&w| w), "reconstruction left patches unwritten");
    Ok(out.assemble())
}

/// `round(base * size / 512)`, forced odd, at least 3.
pub fn scaled_kernel_size(base: usize, image_size: usize) -> usize {
    let k = (base as f64 * image_size as f64 / KERNEL_REFERENCE_SIZE as f64).round() as usize;
    let k = if k.is_multiple_of(2) { k + 1 } else { k };
    k.max(3)
}

/// Mean over scales of the blurred `1 - GMS` map between downscaled copies,
/// resized back to full resolution.
pub fn multiscale_diff(x: &Image, x_hat: &Image) -> Result<Plane> {
    if !x.same_shape(x_hat) {
        return Err(IntraError::invalid("multiscale_diff: image shapes differ"));
    }
    let (h, w) = (x.height(), x.width());
    let mut acc = vec![0.0f64; h * w];
    for (factor, base) in DIFF_SCALES {
        let (sh, sw) = ((h / factor).max(1), (w / factor).max(1));
        let gms = gms_map(&x.resize_bilinear(sh, sw), &x_hat.resize_bilinear(sh, sw))?;
        let k = scaled_kernel_size(base, h);
        let boxed = gms.map(|v| 1.0 - v).filter_separable(&box_kernel(k), &box_kernel(k));
        let g = gaussian_kernel(k, DIFF_SIGMA);
        let blurred = boxed.filter_separable(&g, &g).resize_bilinear(h, w);
        for (a, &v) in acc.iter_mut().zip(blurred.data()) {
            *a += v as f64;
        }
    }
    let n = DIFF_SCALES.len() as f64;
    Plane::new(h, w, acc.into_iter().map(|v| (v / n) as f32).collect())
}

/// Difference map between `image` and its reconstruction.
pub fn diff_map<M: Inpainter + ?Sized>(model: &M, image: &Image, batch_size: usize) -> Result<Plane> {
    multiscale_diff(image, &reconstruct_image(model, image, batch_size)?)
}

/// Runs `f` on a pool of `workers` threads; results keep input order.
pub fn parallel_map<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| IntraError::invalid(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

/// Pixel-wise mean of the training images' difference maps.
pub fn build_reference<M: Inpainter + Sync + ?Sized>(model: &M, images: &[Image], batch_size: usize, workers: usize) -> Result<ReferenceDiff> {
    if images.is_empty() {
        return Err(IntraError::Dataset("reference needs at least one training image".into()));
    }
    let maps = parallel_map(images, workers, |img| diff_map(model, img, batch_size))?;
    Ok(reference_from_maps(&maps))
}

/// Mean of equally sized maps, summed in the given order.
pub fn reference_from_maps(maps: &[Plane]) -> ReferenceDiff {
    let (h, w) = (maps[0].height(), maps[0].width());
    let mut acc = vec![0.0f64; h * w];
    for m in maps {
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v as f64;
        }
    }
    let n = maps.len() as f64;
    ReferenceDiff {
        map: Plane::new(h, w, acc.into_iter().map(|v| (v / n) as f32).collect()).expect("reference shape"),
        count: maps.len(),
    }
}

/// `(diff - reference)^2` per pixel.
pub fn anomaly_from_diff(diff: &Plane, reference: &ReferenceDiff) -> Result<AnomalyMap> {
    if !diff.same_shape(&reference.map) {
        return Err(IntraError::invalid(format!(
            "reference map is {}x{}, difference map is {}x{}",
            reference.map.height(),
            reference.map.width(),
            diff.height(),
            diff.width()
        )));
    }
    let data = diff
        .data()
        .iter()
        .zip(reference.map.data())
        .map(|(&d, &r)| {
            let e = d as f64 - r as f64;
            (e * e) as f32
        })
        .collect();
    Ok(AnomalyMap::from_plane(Plane::new(diff.height(), diff.width(), data)?))
}

/// Anomaly map of `image` at model resolution.
pub fn anomaly_map<M: Inpainter + ?Sized>(model: &M, image: &Image, reference: Option<&ReferenceDiff>, batch_size: usize) -> Result<AnomalyMap> {
    let reference = reference.ok_or(IntraError::MissingSection("reference"))?;
    anomaly_from_diff(&diff_map(model, image, batch_size)?, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IntraModel, ModelConfig};
    use intra_tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> ModelConfig {
        ModelConfig {
            patch_size: 4,
            window_side: 3,
            latent_dim: 16,
            num_blocks: 2,
            num_heads: 2,
            image_size: 16,
            channels: 3,
            use_mfsa: true,
            use_long_residuals: true,
        }
    }

    fn random_image(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, 3, |_, _, _| rng.gen())
    }

    struct Oracle(ModelConfig);

    impl Inpainter for Oracle {
        fn model_config(&self) -> &ModelConfig {
            &self.0
        }

        fn inpaint(&self, batch: &WindowBatch) -> Result<Tensor<f32>> {
            Ok(batch.targets())
        }
    }

    #[test]
    fn kernel_scaling() {
        assert_eq!(scaled_kernel_size(21, 512), 21);
        assert_eq!(scaled_kernel_size(11, 512), 11);
        assert_eq!(scaled_kernel_size(21, 256), 11);
        assert_eq!(scaled_kernel_size(11, 256), 7);
        assert_eq!(scaled_kernel_size(21, 64), 3);
        assert_eq!(scaled_kernel_size(11, 64), 3);
        assert_eq!(scaled_kernel_size(21, 1024), 43);
    }

    #[test]
    fn oracle_reconstruction_is_exact() {
        let img = random_image(1, 16);
        let rec = reconstruct_image(&Oracle(toy()), &img, 5).unwrap();
        assert_eq!(rec, img);
    }

    #[test]
    fn reconstruction_ignores_target_content_and_batching() {
        let m = IntraModel::<f32>::new(toy(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let img = random_image(3, 16);
        let a = reconstruct_image(&m, &img, 16).unwrap();
        assert_eq!(a.height(), 16);
        assert_eq!(a, reconstruct_image(&m, &img, 3).unwrap());
        // perturb only patch (2,3); its own reconstruction must not move
        let mut b_img = img.clone();
        for y in 4..8 {
            for x in 8..12 {
                for c in 0..3 {
                    b_img.set(y, x, c, 1.0 - img.get(y, x, c));
                }
            }
        }
        let b = reconstruct_image(&m, &b_img, 16).unwrap();
        for y in 4..8 {
            for x in 8..12 {
                for c in 0..3 {
                    assert_eq!(a.get(y, x, c), b.get(y, x, c));
                }
            }
        }
        assert_ne!(a, b);
        assert!(reconstruct_image(&m, &random_image(4, 32), 8).is_err());
    }

    #[test]
    fn diff_zero_on_identity_and_bounded() {
        let x = random_image(5, 32);
        let d = multiscale_diff(&x, &x).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        let d = multiscale_diff(&x, &random_image(6, 32)).unwrap();
        assert!(d.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(d.max() > 0.0);
    }

    #[test]
    fn defect_peak_lies_near_defect() {
        let n = 64;
        let base = Image::from_fn(n, n, 3, |y, x, c| 0.5 + 0.3 * ((x as f32 * 0.9 + y as f32 * 0.4 + c as f32) * 1.0).sin());
        let mut defect = base.clone();
        let mut mask = vec![false; n * n];
        for y in 40..48 {
            for x in 12..20 {
                mask[y * n + x] = true;
                for c in 0..3 {
                    defect.set(y, x, c, 1.0 - base.get(y, x, c));
                }
            }
        }
        let d = multiscale_diff(&base, &defect).unwrap();
        let (peak, _) = d.data().iter().enumerate().fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let (py, px) = (peak / n, peak % n);
        // dilate the mask by the blur support at half scale
        let r = 6;
        assert!((40 - r..48 + r).contains(&py) && (12 - r..20 + r).contains(&px), "peak at {py},{px}");
    }

    #[test]
    fn reference_single_and_order_invariant() {
        let m = IntraModel::<f32>::new(toy(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let imgs: Vec<Image> = (0..3).map(|s| random_image(10 + s, 16)).collect();
        let single = build_reference(&m, &imgs[..1], 16, 1).unwrap();
        assert_eq!(single.map, diff_map(&m, &imgs[0], 16).unwrap());
        assert_eq!(single.count, 1);
        let fwd = build_reference(&m, &imgs, 16, 1).unwrap();
        let rev: Vec<Image> = imgs.iter().rev().cloned().collect();
        let bwd = build_reference(&m, &rev, 16, 2).unwrap();
        assert!(fwd.map.data().iter().zip(bwd.map.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(fwd.map.data().iter().all(|&v| v >= 0.0));
        assert!(build_reference(&m, &[], 16, 1).is_err());
    }

    #[test]
    fn anomaly_identities() {
        let m = IntraModel::<f32>::new(toy(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let img = random_image(20, 16);
        let reference = ReferenceDiff {
            map: diff_map(&m, &img, 16).unwrap(),
            count: 1,
        };
        let a = anomaly_map(&m, &img, Some(&reference), 16).unwrap();
        assert!(a.map.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.score, 0.0);
        let b = anomaly_map(&m, &random_image(21, 16), Some(&reference), 16).unwrap();
        assert!(b.map.data().iter().all(|&v| v >= 0.0));
        assert_eq!(b.score, b.map.max() as f64);
        assert!(b.score > 0.0);
        assert!(matches!(anomaly_map(&m, &img, None, 16), Err(IntraError::MissingSection(_))));
        assert_eq!(b.resized(40, 40).height(), 40);
    }
}
